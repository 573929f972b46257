"""Moment estimators over transported base points and the replicated RMSE sweep.

Methods
-------
fm_mc, fm_qmc
    Plain averages of f over transported i.i.d. or scrambled-Sobol' points.
fm_ismc, fm_isqmc
    Self-normalized importance sampling, sum w f / sum w with
    log w = log pi(x) + log|det J_tau(u)|.
fm_isqmc_unbiased
    (1/n) sum h(u_i) with h = f(tau) pi(tau) |det J_tau|; unbiased for
    normalized targets under scrambled-net inputs.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .base_map import BOUNDARY_MARGIN
from .neural_field import VelocityParams
from .qmc import RandomizationSpec, randomize, scrambled_sobol, sobol_points
from .targets import Target
from .transport import FlowSpec, TransportSample, push_forward

METHODS = ("fm_mc", "fm_qmc", "fm_ismc", "fm_isqmc", "fm_isqmc_unbiased")
PAPER_METHODS = ("fm_mc", "fm_qmc", "fm_ismc", "fm_isqmc")
BASE_KIND = {"fm_mc": "mc", "fm_ismc": "mc", "fm_qmc": "qmc", "fm_isqmc": "qmc", "fm_isqmc_unbiased": "qmc"}
IS_METHODS = ("fm_ismc", "fm_isqmc", "fm_isqmc_unbiased")
INTEGRAND_KINDS = ("first_moment", "second_moment", "constant")
SATURATION_CHANGE = 0.05
MIN_SLOPE_POINTS = 4


class DegenerateWeightsError(ArithmeticError):
    """Every importance weight underflowed or is non-finite."""


@dataclass(frozen=True)
class Integrand:
    """f(x) = x_j, x_j^2 or 1, with a 1-based coordinate index ``j``."""

    kind: str
    j: int = 1

    def __post_init__(self):
        if self.kind not in INTEGRAND_KINDS:
            raise ValueError(f"unknown integrand kind {self.kind!r}")
        if self.j < 1:
            raise ValueError("coordinate index j is 1-based")

    @property
    def name(self) -> str:
        return "constant" if self.kind == "constant" else f"{self.kind}_{self.j}"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        if self.kind == "constant":
            return np.ones(x.shape[:-1])
        if self.j > x.shape[-1]:
            raise ValueError(f"integrand index {self.j} exceeds dimension {x.shape[-1]}")
        xj = x[..., self.j - 1]
        return xj if self.kind == "first_moment" else xj * xj

    def truth(self, target: Target) -> float:
        if self.kind == "constant":
            return 1.0
        if self.j > target.d:
            raise ValueError(f"integrand index {self.j} exceeds dimension {target.d}")
        m = target.first_moment if self.kind == "first_moment" else target.second_moment
        return float(m[self.j - 1])


def moment_integrands(d: int) -> list[Integrand]:
    """First moments of every coordinate, then second moments."""
    return [Integrand(k, j) for k in ("first_moment", "second_moment") for j in range(1, d + 1)]


def parse_integrand(name: str) -> Integrand:
    if name == "constant":
        return Integrand("constant")
    kind, _, j = name.rpartition("_")
    return Integrand(kind, int(j))


@dataclass(frozen=True)
class EstimateRecord:
    method: str
    n: int
    rep: int
    seed: int
    integrands: tuple[str, ...]
    estimates: np.ndarray
    ess: float | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")


def replicate_seed(seed: int, rep: int, kind: str) -> int:
    """Independent per-replicate seed for a base-point kind."""
    ss = np.random.SeedSequence([int(seed), int(rep), 0 if kind == "mc" else 1])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def base_points(kind: str, n: int, d: int, seed: int, *, skip_origin: bool = False):
    """Unit-cube points and their logit images, ``(u, x0)``.

    ``mc`` uses a Philox stream keyed by ``seed``; ``qmc`` uses Owen-scrambled
    Sobol' points, starting at sequence index 1 with ``skip_origin``.  Both
    are prefix-consistent: the first ``n`` rows do not depend on how many
    more are drawn.  Coordinates within ``2**-32`` of the boundary are
    clamped to that margin.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind == "mc":
        u = np.random.Generator(np.random.Philox(key=int(seed))).random((n, d))
    elif kind == "qmc" and skip_origin:
        ps = sobol_points(d, max(int(n - 1).bit_length(), 0), skip_origin=True)
        u = randomize(ps, RandomizationSpec("owen_scramble", int(seed))).points[:n]
    elif kind == "qmc":
        u = scrambled_sobol(d, n, int(seed))
    else:
        raise ValueError(f"unknown base kind {kind!r}; expected 'mc' or 'qmc'")
    u = np.clip(u, BOUNDARY_MARGIN, 1.0 - BOUNDARY_MARGIN)
    return u, np.log(u) - np.log1p(-u)


def log_weights(target: Target, ts: TransportSample) -> np.ndarray:
    """log pi(x) - log q_tau(x) at transported points."""
    return target.log_pdf(ts.x) + ts.log_abs_det


def is_integrand(p: VelocityParams, target: Target, f: Integrand, u, spec: FlowSpec = FlowSpec()):
    """h(u) = f(tau(u)) pi(tau(u)) |det J_tau(u)|, for one point or a batch."""
    ts = push_forward(p, u, spec)
    single = np.ndim(ts.x) == 1
    x = np.atleast_2d(ts.x)
    lw = target.log_pdf(x) + np.atleast_1d(ts.log_abs_det)
    h = f(x) * np.exp(lw)
    return h[0] if single else h


def effective_sample_size(logw: np.ndarray) -> float:
    w = np.exp(logw - np.max(logw))
    return float(w.sum() ** 2 / np.sum(w * w))


def combine(method: str, fx: np.ndarray, logw: np.ndarray | None = None):
    """Reduce per-point integrand values ``fx`` (n, k) to estimates for ``method``.

    Returns ``(estimates, ess)``; ``ess`` is ``None`` for unweighted methods.
    """
    if method in ("fm_mc", "fm_qmc"):
        return fx.mean(axis=0), None
    if logw is None:
        raise ValueError(f"{method} needs log-weights")
    if method == "fm_isqmc_unbiased":
        ess = effective_sample_size(logw) if np.isfinite(logw).any() else 0.0
        return (fx * np.exp(logw)[:, None]).mean(axis=0), ess
    finite = np.isfinite(logw)
    if not finite.any():
        raise DegenerateWeightsError("all importance weights are zero or non-finite")
    mx = np.max(logw[finite])
    w = np.exp(logw - mx)
    s = w.sum()
    if not (s > 0 and np.isfinite(s)):
        raise DegenerateWeightsError("importance weights do not sum to a positive finite value")
    return (w @ fx) / s, float(s * s / np.sum(w * w))


def _evaluate(target, integrands, ts, weighted):
    fx = np.column_stack([f(ts.x) for f in integrands])
    logw = log_weights(target, ts) if weighted else None
    return fx, logw


def estimate(method: str, p: VelocityParams, target: Target, integrands, n: int, seed: int,
             spec: FlowSpec = FlowSpec(), rep: int = 0) -> EstimateRecord:
    """One estimate of every integrand from ``n`` points drawn with ``seed``."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    integrands = [integrands] if isinstance(integrands, Integrand) else list(integrands)
    weighted = method in IS_METHODS
    u, _ = base_points(BASE_KIND[method], n, target.d, seed)
    ts = push_forward(p, u, spec, track_logdet=weighted)
    fx, logw = _evaluate(target, integrands, ts, weighted)
    est, ess = combine(method, fx, logw)
    return EstimateRecord(method, n, rep, int(seed), tuple(f.name for f in integrands), est, ess)


def ols_slope(n, rmse) -> float:
    """Least-squares slope of log2 rmse against log2 n."""
    x = np.log2(np.asarray(n, dtype=np.float64))
    y = np.log2(np.asarray(rmse, dtype=np.float64))
    if len(x) < 2:
        raise ValueError("need at least two points for a slope")
    return float(np.polyfit(x, y, 1)[0])


def saturated(rmse) -> bool:
    """True when some doubling of n changes the RMSE by less than 5%."""
    r = np.asarray(rmse, dtype=np.float64)
    return bool(np.any(np.abs(np.diff(r)) < SATURATION_CHANGE * r[:-1]))


@dataclass
class SlopeFit:
    raw: float
    truncated: float | None
    saturated: bool
    n_points: int

    @property
    def reported(self) -> float:
        return self.truncated if self.truncated is not None else self.raw


@dataclass
class SweepReport:
    """RMSE grid ``rmse[m, k, i]`` for method m, sample size n_grid[k], integrand i."""

    methods: tuple[str, ...]
    n_grid: tuple[int, ...]
    integrands: tuple[str, ...]
    truths: np.ndarray
    R: int
    seed: int
    rmse: np.ndarray
    records: list[EstimateRecord] = field(default_factory=list)
    n_nonfinite: int = 0

    def index(self, method: str, n: int | None = None):
        m = self.methods.index(method)
        return m if n is None else (m, self.n_grid.index(n))

    def rmse_of(self, method: str, n: int, integrand: str) -> float:
        m, k = self.index(method, n)
        return float(self.rmse[m, k, self.integrands.index(integrand)])

    def groups(self) -> dict[str, list[int]]:
        out: dict[str, list[int]] = {}
        for i, name in enumerate(self.integrands):
            out.setdefault(parse_integrand(name).kind, []).append(i)
        return out

    def pooled(self, method: str, group: str) -> np.ndarray:
        """sqrt of the coordinate-averaged MSE for one integrand kind, per n."""
        idx = self.groups()[group]
        return np.sqrt(np.mean(self.rmse[self.index(method)][:, idx] ** 2, axis=1))

    def curves(self):
        """(method, label, rmse-per-n) for every integrand and every pooled kind."""
        for m in self.methods:
            for i, name in enumerate(self.integrands):
                yield m, name, self.rmse[self.index(m)][:, i]
            for g in self.groups():
                yield m, f"{g}_pooled", self.pooled(m, g)

    def slope(self, method: str, label: str) -> SlopeFit:
        for m, name, r in self.curves():
            if m == method and name == label:
                return fit_slope(method, self.n_grid, r)
        raise KeyError((method, label))

    def slopes(self) -> list[tuple[str, str, SlopeFit]]:
        """Every curve's slope; empty when the grid is too short to fit."""
        if len(self.n_grid) < MIN_SLOPE_POINTS:
            return []
        return [(m, name, fit_slope(m, self.n_grid, r)) for m, name, r in self.curves()]


def fit_slope(method: str, n_grid, rmse) -> SlopeFit:
    """OLS slope; for saturated fm_qmc curves also the slope without the two largest n."""
    if len(n_grid) < MIN_SLOPE_POINTS:
        raise ValueError(f"slope fits need at least {MIN_SLOPE_POINTS} grid points")
    raw = ols_slope(n_grid, rmse)
    sat = method == "fm_qmc" and saturated(rmse)
    trunc = ols_slope(n_grid[:-2], rmse[:-2]) if sat and len(n_grid) - 2 >= MIN_SLOPE_POINTS else None
    return SlopeFit(raw, trunc, sat, len(n_grid))


def replicate_rmse(estimates, truths) -> np.ndarray:
    """sqrt(mean_r (estimate_r - truth)^2) per integrand, from an (R, k) array."""
    e = np.asarray(estimates, dtype=np.float64)
    return np.sqrt(np.mean((e - np.asarray(truths)) ** 2, axis=0))


def rmse_sweep(methods, p: VelocityParams, target: Target, integrands, n_grid, R: int, seed: int,
               spec: FlowSpec = FlowSpec(), progress=None) -> SweepReport:
    """Replicated RMSE of every method over ``n_grid``.

    For each replicate the largest point set is transported once per base
    kind and every smaller n uses its leading rows, which is exactly the
    point set :func:`estimate` would draw for that n and seed.  Methods
    sharing a base kind share the replicate's points.
    """
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    n_grid = tuple(int(n) for n in n_grid)
    if R < 2:
        raise ValueError("R must be >= 2")
    if len(n_grid) < 1 or any(b <= a for a, b in zip(n_grid, n_grid[1:])) or n_grid[0] < 1:
        raise ValueError("n_grid must be ascending positive integers")
    integrands = list(integrands)
    truths = np.array([f.truth(target) for f in integrands])
    n_max = n_grid[-1]
    by_kind: dict[str, list[str]] = {}
    for m in methods:
        by_kind.setdefault(BASE_KIND[m], []).append(m)

    est = {}
    records = []
    for rep in range(R):
        for kind, ms in by_kind.items():
            weighted = any(m in IS_METHODS for m in ms)
            s = replicate_seed(seed, rep, kind)
            u, _ = base_points(kind, n_max, target.d, s)
            ts = push_forward(p, u, spec, track_logdet=weighted)
            fx, logw = _evaluate(target, integrands, ts, weighted)
            for m in ms:
                for n in n_grid:
                    try:
                        e, ess = combine(m, fx[:n], None if logw is None else logw[:n])
                    except DegenerateWeightsError:
                        e, ess = np.full(len(integrands), np.nan), 0.0
                    est[m, n, rep] = e
                    records.append(EstimateRecord(m, n, rep, s, tuple(f.name for f in integrands), e, ess))
            if progress is not None:
                progress(rep, kind)

    rmse = np.empty((len(methods), len(n_grid), len(integrands)))
    n_bad = 0
    for a, m in enumerate(methods):
        for b, n in enumerate(n_grid):
            e = np.array([est[m, n, r] for r in range(R)])
            ok = np.all(np.isfinite(e), axis=1)
            n_bad += int(np.sum(~ok))
            if not ok.any():
                rmse[a, b] = np.nan
                continue
            rmse[a, b] = replicate_rmse(e[ok], truths)
    if n_bad:
        warnings.warn(f"{n_bad} replicate estimates were non-finite and excluded", RuntimeWarning)
    return SweepReport(methods, n_grid, tuple(f.name for f in integrands), truths, R, int(seed), rmse, records, n_bad)


def _g(v) -> str:
    return "" if v is None else f"{v:.17g}"


def write_sweep_csvs(report: SweepReport, out_dir: str | Path) -> None:
    """Write rmse.csv, slopes.csv and records.csv into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "rmse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "n", "integrand", "rmse"])
        for m, label, r in report.curves():
            for n, v in zip(report.n_grid, r):
                w.writerow([m, n, label, _g(float(v))])
    with open(out / "slopes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "integrand", "slope_raw", "slope_truncated", "saturated", "n_points"])
        for m, label, fit in report.slopes():
            w.writerow([m, label, _g(fit.raw), _g(fit.truncated), int(fit.saturated), fit.n_points])
    with open(out / "records.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "n", "rep", "seed", "integrand", "estimate", "ess"])
        for rec in report.records:
            for name, v in zip(rec.integrands, rec.estimates):
                w.writerow([rec.method, rec.n, rec.rep, rec.seed, name, _g(float(v)), _g(rec.ess)])
