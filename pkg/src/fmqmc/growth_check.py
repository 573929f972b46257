"""Boundary-growth certification of a trained transport by probe ladders.

Probes sit at ``u_S = eps`` (or ``1 - eps``) on a coordinate subset ``S`` and
at 0.5 elsewhere, for ``eps = 2**-k``.  Along the ladder we check

* value growth: ``min(F(tau_j), 1 - F(tau_j)) >= exp(-M) min(u_j, 1 - u_j)``
  and ``|tau_j| >= |log min(u_j, 1 - u_j)| - (M + log 2)`` where ``M`` is the
  measured sup displacement ``|x_N - x_0|_inf`` over the probes;
* derivative growth: log-log slopes of finite-difference derivatives of
  tau against ``eps`` stay above ``-(order + B_tol)``;
* integrand growth: the same for ``h = f(tau) pi(tau) |det J_tau|`` and its
  first partials, with bounds ``-B_tol`` and ``-(1 + B_tol)``.

Exponents describe the asymptotic rate, so they are fitted on the deepest
``fit_levels`` rungs.  Finite differences use ``delta = eps / 64`` and
``delta / 2``, ``delta / 4``; the reported value is the Richardson
extrapolation of the first two, and a probe whose successive differences grow
instead of shrink is flagged and dropped.  Values below the rounding
resolution of the stencil count as exact zeros.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .base_map import logistic_cdf
from .estimators import Integrand
from .neural_field import VelocityParams, eval_velocity_jacobian
from .qmc import scrambled_sobol
from .targets import Target
from .transport import FlowSpec, push_forward, transport_map

B_TOL = 0.1
DELTA_RATIO = 64
R2_MIN = 0.9
MIN_FIT_LEVELS = 8
VALUE_RTOL = 1e-12
_EPS_MACH = np.finfo(np.float64).eps
_NOISE_FACTOR = 64.0


@dataclass(frozen=True)
class ProbeLadder:
    """Boundary-approaching probe levels ``eps_k = 2**-k`` and coordinate subsets."""

    d: int
    k_min: int = 4
    k_max: int = 30
    n_pairs: int = 20
    seed: int = 0
    fit_levels: int = 14

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not 1 <= self.k_min < self.k_max <= 30:
            raise ValueError("need 1 <= k_min < k_max <= 30 so probes stay interior")
        if not MIN_FIT_LEVELS <= self.fit_levels <= self.k_max - self.k_min + 1:
            raise ValueError(f"fit_levels must be between {MIN_FIT_LEVELS} and the ladder length")

    @property
    def levels(self) -> np.ndarray:
        return np.arange(self.k_min, self.k_max + 1)

    @property
    def eps(self) -> np.ndarray:
        return 2.0 ** -self.levels.astype(np.float64)

    @property
    def singletons(self) -> list[tuple[int]]:
        return [(j,) for j in range(self.d)]

    @property
    def pairs(self) -> list[tuple[int, int]]:
        allp = list(itertools.combinations(range(self.d), 2))
        if len(allp) <= self.n_pairs:
            return allp
        pick = np.random.default_rng(self.seed).choice(len(allp), size=self.n_pairs, replace=False)
        return [allp[i] for i in sorted(pick)]

    def probe(self, subset, side: str, eps: float) -> np.ndarray:
        u = np.full(self.d, 0.5)
        u[list(subset)] = eps if side == "low" else 1.0 - eps
        return u


SIDES = ("low", "high")


@dataclass
class ExponentFit:
    quantity: str
    subset: list[int]
    side: str
    output: int | None
    bound: float
    exponent: float | None
    r2: float | None
    n_levels: int
    n_flagged: int
    status: str
    reliable: bool
    passed: bool


@dataclass
class InequalityCheck:
    name: str
    constants: dict
    n_probes: int
    n_failed: int
    worst_margin: float
    passed: bool


@dataclass
class FieldBounds:
    M_sup: float
    J_sup: float
    M_sup_inner: float
    J_sup_inner: float
    n_points: int

    @property
    def value_ratio(self) -> float:
        return self.M_sup / self.M_sup_inner if self.M_sup_inner > 0 else (1.0 if self.M_sup == 0 else math.inf)

    @property
    def jacobian_ratio(self) -> float:
        return self.J_sup / self.J_sup_inner if self.J_sup_inner > 0 else (1.0 if self.J_sup == 0 else math.inf)

    @property
    def value_divergence_flag(self) -> bool:
        return self.value_ratio >= 1.5

    @property
    def jacobian_divergence_flag(self) -> bool:
        return self.jacobian_ratio >= 1.5

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(value_ratio=self.value_ratio, jacobian_ratio=self.jacobian_ratio,
                   value_divergence_flag=self.value_divergence_flag,
                   jacobian_divergence_flag=self.jacobian_divergence_flag)
        return out


@dataclass
class GrowthReport:
    field_bounds: FieldBounds | None = None
    value_checks: list[InequalityCheck] = field(default_factory=list)
    derivative_fits: list[ExponentFit] = field(default_factory=list)
    integrand_fits: list[ExponentFit] = field(default_factory=list)
    constants: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return (all(c.passed for c in self.value_checks)
                and all(f.passed for f in self.derivative_fits)
                and all(f.passed for f in self.integrand_fits))

    def summary(self) -> dict:
        def count(items):
            return {"total": len(items), "failed": sum(not i.passed for i in items)}
        return {"passed": self.passed, "value": count(self.value_checks),
                "derivative": count(self.derivative_fits), "integrand": count(self.integrand_fits)}

    def to_dict(self) -> dict:
        return {
            "summary": self.summary(),
            "constants": self.constants,
            "field_bounds": None if self.field_bounds is None else self.field_bounds.to_dict(),
            "value_checks": [asdict(c) for c in self.value_checks],
            "derivative_fits": [asdict(f) for f in self.derivative_fits],
            "integrand_fits": [asdict(f) for f in self.integrand_fits],
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def estimate_field_bounds(p: VelocityParams, n_x: int = 1024, radius: float = 20.0,
                          t_values=None, seed: int = 0) -> FieldBounds:
    """Sup of ``|v|_inf`` and of the Jacobian max-row-sum over a probe grid.

    The grid is ``n_x`` scrambled Sobol' points in ``[-radius, radius]^d``
    times ``t_values`` (default 0, 0.1, ..., 1).  The same points scaled by
    1/2 give the inner sups, so ``value_ratio`` is 2 for a linear field and
    1 for a bounded one in the far field.
    """
    t_values = np.linspace(0.0, 1.0, 11) if t_values is None else np.asarray(t_values, dtype=np.float64)
    x = (2.0 * scrambled_sobol(p.d, n_x, seed) - 1.0) * radius
    sups = []
    for scale in (1.0, 0.5):
        m = j = 0.0
        for t in t_values:
            v, jac = eval_velocity_jacobian(p, scale * x, float(t))
            m = max(m, float(np.max(np.abs(v))))
            j = max(j, float(np.max(np.sum(np.abs(jac), axis=2))))
        sups.append((m, j))
    (M, J), (Mi, Ji) = sups
    return FieldBounds(M, J, Mi, Ji, n_x * len(t_values))


def _fit_exponent(eps, vals, flagged, floor, bound, fit_levels, meta) -> ExponentFit:
    """Slope of log|vals| against log eps over the deepest usable ladder rungs."""
    eps, vals = eps[-fit_levels:], np.abs(vals[-fit_levels:])
    flagged, floor = flagged[-fit_levels:], floor[-fit_levels:]
    n_flag = int(flagged.sum())
    usable = ~flagged
    zero = usable & (vals <= floor)
    nonzero = usable & ~zero
    base = dict(meta, bound=bound, n_flagged=n_flag)
    if usable.sum() == 0:
        return ExponentFit(**base, exponent=None, r2=None, n_levels=0, status="all_flagged",
                           reliable=False, passed=False)
    if nonzero.sum() == 0:
        return ExponentFit(**base, exponent=0.0, r2=None, n_levels=int(usable.sum()), status="zero",
                           reliable=True, passed=True)
    if nonzero.sum() < MIN_FIT_LEVELS:
        # mostly below resolution: growth is not detectable, which satisfies any lower bound
        return ExponentFit(**base, exponent=None, r2=None, n_levels=int(nonzero.sum()), status="vanishing",
                           reliable=False, passed=True)
    x = np.log(eps[nonzero])
    y = np.log(vals[nonzero])
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 if ss == 0 else float(1.0 - np.sum(resid**2) / ss)
    return ExponentFit(**base, exponent=float(slope), r2=r2, n_levels=int(nonzero.sum()), status="fit",
                       reliable=r2 >= R2_MIN, passed=bool(slope >= bound))


class _Stencils:
    """Collects probe points, evaluates them in one batch, and assembles differences."""

    def __init__(self, d):
        self.d = d
        self.points: list[np.ndarray] = []

    def add(self, u) -> int:
        self.points.append(np.asarray(u, dtype=np.float64))
        return len(self.points) - 1

    def first(self, u, m, delta):
        """Indices for central differences in coordinate m at steps delta, delta/2, delta/4."""
        out = []
        for s in (delta, delta / 2, delta / 4):
            e = np.zeros(self.d)
            e[m] = s
            out.append((self.add(u + e), self.add(u - e), s))
        return out

    def second(self, u, c, m, delta):
        out = []
        for s in (delta, delta / 2, delta / 4):
            e = np.zeros(self.d)
            e[m] = s
            out.append((self.add(u + e), c, self.add(u - e), s))
        return out

    def mixed(self, u, k, m, delta):
        out = []
        for s in (delta, delta / 2, delta / 4):
            ek = np.zeros(self.d)
            em = np.zeros(self.d)
            ek[k] = s
            em[m] = s
            out.append((self.add(u + ek + em), self.add(u + ek - em), self.add(u - ek + em),
                        self.add(u - ek - em), s))
        return out

    def array(self):
        return np.array(self.points)


def _richardson(D):
    """Extrapolated value and non-monotone flag from differences at three step sizes."""
    d1, d2, d3 = D
    e1 = np.abs(d1 - d2)
    e2 = np.abs(d2 - d3)
    flag = (e2 > e1) & (e2 > 1e-8 * np.abs(d2))
    return (4.0 * d2 - d1) / 3.0, flag


def _derivative(vals, idx, order):
    """Differences for a stencil list; ``vals`` rows are per-point outputs."""
    D, floors = [], []
    for item in idx:
        if order == 1:
            a, b, s = item
            D.append((vals[a] - vals[b]) / (2.0 * s))
            mag = np.maximum(np.abs(vals[a]), np.abs(vals[b]))
            floors.append(_NOISE_FACTOR * _EPS_MACH * mag / s)
        elif order == 2:
            a, c, b, s = item
            D.append((vals[a] - 2.0 * vals[c] + vals[b]) / (s * s))
            mag = np.maximum.reduce([np.abs(vals[a]), np.abs(vals[b]), np.abs(vals[c])])
            floors.append(_NOISE_FACTOR * _EPS_MACH * mag / (s * s))
        else:
            a, b, c, e, s = item
            D.append((vals[a] - vals[b] - vals[c] + vals[e]) / (4.0 * s * s))
            mag = np.maximum.reduce([np.abs(vals[i]) for i in (a, b, c, e)])
            floors.append(_NOISE_FACTOR * _EPS_MACH * mag / (s * s))
    value, flag = _richardson(D)
    return value, flag, floors[-1]


def check_value_growth(p: VelocityParams, spec: FlowSpec, ladder: ProbeLadder,
                       bounds: FieldBounds | None = None) -> list[InequalityCheck]:
    """Both value-growth inequalities at every singleton probe on both sides."""
    probes, coord = [], []
    for (j,) in ladder.singletons:
        for side in SIDES:
            for e in ladder.eps:
                probes.append(ladder.probe((j,), side, e))
                coord.append(j)
    u = np.array(probes)
    coord = np.array(coord)
    ts = push_forward(p, u, spec, track_logdet=False)
    M = float(np.max(np.abs(ts.displacement))) if len(u) else 0.0
    rows = np.arange(len(u))
    uj = u[rows, coord]
    tj = ts.x[rows, coord]
    mu = np.minimum(uj, 1.0 - uj)
    Fj = logistic_cdf(tj)
    lhs1 = np.minimum(Fj, logistic_cdf(-tj))
    C4 = math.exp(M)
    rhs1 = mu / C4
    Cp = M + math.log(2.0)
    lhs2 = np.abs(tj)
    rhs2 = np.abs(np.log(mu)) - Cp
    consts = {"M": M, "C4": C4, "C_prime": Cp, "rtol": VALUE_RTOL}
    if bounds is not None:
        consts.update(M_sup=bounds.M_sup, J_sup=bounds.J_sup, h=spec.h,
                      C4_apriori=math.exp(bounds.M_sup * (1.0 + spec.h * bounds.J_sup)))
    # log-space margins: log lhs - log rhs for (i), lhs - rhs for (ii)
    m1 = np.log(lhs1) - np.log(rhs1)
    m2 = lhs2 - rhs2
    ok1 = lhs1 >= rhs1 * (1.0 - VALUE_RTOL)
    ok2 = lhs2 >= rhs2 - VALUE_RTOL * np.maximum(1.0, np.abs(rhs2))
    return [
        InequalityCheck("cdf_lower_bound", consts, len(u), int(np.sum(~ok1)), float(np.min(m1)), bool(ok1.all())),
        InequalityCheck("log_growth_lower_bound", consts, len(u), int(np.sum(~ok2)), float(np.min(m2)), bool(ok2.all())),
    ]


def check_derivative_growth(p: VelocityParams, spec: FlowSpec, ladder: ProbeLadder,
                            b_tol: float = B_TOL) -> list[ExponentFit]:
    """Exponent fits for first, second and mixed second derivatives of every tau_j."""
    st = _Stencils(ladder.d)
    plan = []
    for subset in ladder.singletons + ladder.pairs:
        for side in SIDES:
            rows = []
            for e in ladder.eps:
                u = ladder.probe(subset, side, e)
                delta = e / DELTA_RATIO
                c = st.add(u)
                if len(subset) == 1:
                    m = subset[0]
                    rows.append({"first": st.first(u, m, delta), "second": st.second(u, c, m, delta)})
                else:
                    k, m = subset
                    rows.append({"mixed": st.mixed(u, k, m, delta)})
            plan.append((subset, side, rows))
    vals = transport_map(p, st.array(), spec)

    fits = []
    orders = {"first": (1, 1.0 + b_tol), "second": (2, 2.0 + b_tol), "mixed": (3, 2.0 + 2.0 * b_tol)}
    for subset, side, rows in plan:
        for quantity in rows[0]:
            order, bound = orders[quantity]
            per = [_derivative(vals, r[quantity], order) for r in rows]
            D = np.array([q[0] for q in per])
            F = np.array([q[1] for q in per])
            floor = np.array([q[2] for q in per])
            for j in range(ladder.d):
                meta = {"quantity": f"d{'2' if order > 1 else ''}tau_{quantity}", "subset": list(subset),
                        "side": side, "output": j}
                fits.append(_fit_exponent(ladder.eps, D[:, j], F[:, j], floor[:, j], -bound,
                                          ladder.fit_levels, meta))
    return fits


def check_integrand_growth(p: VelocityParams, target: Target, f: Integrand, spec: FlowSpec,
                           ladder: ProbeLadder, b_tol: float = B_TOL) -> list[ExponentFit]:
    """Exponents of |h| and |d_j h| along singleton ladders."""
    st = _Stencils(ladder.d)
    plan = []
    for (j,) in ladder.singletons:
        for side in SIDES:
            rows = []
            for e in ladder.eps:
                u = ladder.probe((j,), side, e)
                rows.append((st.add(u), st.first(u, j, e / DELTA_RATIO)))
            plan.append((j, side, rows))
    ts = push_forward(p, st.array(), spec)
    h = f(ts.x) * np.exp(target.log_pdf(ts.x) + ts.log_abs_det)
    vals = h[:, None]
    fits = []
    for j, side, rows in plan:
        hv = np.array([vals[c, 0] for c, _ in rows])
        floor_h = np.zeros_like(hv)  # only exact underflow counts as zero
        fits.append(_fit_exponent(ladder.eps, hv, np.zeros(len(hv), bool), floor_h, -b_tol, ladder.fit_levels,
                                  {"quantity": "h", "subset": [j], "side": side, "output": None}))
        per = [_derivative(vals, idx, 1) for _, idx in rows]
        D = np.array([q[0][0] for q in per])
        F = np.array([q[1][0] for q in per])
        floor = np.array([q[2][0] for q in per])
        fits.append(_fit_exponent(ladder.eps, D, F, floor, -(1.0 + b_tol), ladder.fit_levels,
                                  {"quantity": "dh", "subset": [j], "side": side, "output": j}))
    return fits


def growth_report(p: VelocityParams, spec: FlowSpec, ladder: ProbeLadder, target: Target | None = None,
                  integrands=(), b_tol: float = B_TOL, n_field: int = 1024) -> GrowthReport:
    """Field bounds plus all value, derivative and integrand checks in one report."""
    bounds = estimate_field_bounds(p, n_x=n_field)
    rep = GrowthReport(field_bounds=bounds)
    rep.value_checks = check_value_growth(p, spec, ladder, bounds)
    rep.derivative_fits = check_derivative_growth(p, spec, ladder, b_tol)
    if target is not None:
        for f in integrands:
            for fit in check_integrand_growth(p, target, f, spec, ladder, b_tol):
                fit.quantity = f"{fit.quantity}[{f.name}]"
                rep.integrand_fits.append(fit)
    rep.constants = {"B_tol": b_tol, "delta_ratio": DELTA_RATIO, "R2_min": R2_MIN,
                     "ladder": asdict(ladder), "scheme": spec.scheme, "n_ode_steps": spec.n_ode_steps}
    return rep
