"""Command-line entry point: ``fmqmc <subcommand> ...``.

Every run resolves its settings from a profile, an optional JSON config file
and command-line flags (in that order of precedence), rejects unknown keys,
and writes the fully defaulted settings to ``config.resolved`` next to its
outputs.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .base_map import BoundaryInputError
from .cfm_train import (
    CheckpointError,
    CheckpointShapeError,
    PathSpec,
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_trace,
)
from .estimators import (
    METHODS,
    PAPER_METHODS,
    DegenerateWeightsError,
    estimate,
    moment_integrands,
    parse_integrand,
    rmse_sweep,
    write_sweep_csvs,
)
from .growth_check import ProbeLadder, growth_report
from .qmc import RANDOMIZATIONS, RandomizationSpec, UnsupportedDimensionError, randomize, sobol_points
from .targets import UnsupportedTargetError, get_target
from .transport import DegenerateStepError, FlowSpec, push_forward

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_CHECKPOINT = 5
EXIT_NUMERIC = 6

EXPERIMENTS = ("gmm2d", "gmm30d", "banana")
PROFILES = ("fast", "desk", "full")
RANDOMIZE_ALIASES = {"shift": "random_shift", "digital": "digital_shift", "owen": "owen_scramble"}


class ConfigError(ValueError):
    """Malformed config file or invalid settings."""


def _base_defaults() -> dict:
    return {
        "profile": None,
        "version": None,
        "seed": 0,
        "target": {"name": "gmm2d", "gmm2d_sigma1_scale": 1.0 / 1600.0},
        "model": {"width": 128, "n_blocks": 3, "K": 8},
        "train": {"batch_size": 1024, "n_steps": 20000, "learning_rate": 1e-3, "beta1": 0.9,
                  "beta2": 0.999, "adam_eps": 1e-8, "checkpoint_every": 0, "ema_decay": 0.0, "sigma": 0.0},
        "flow": {"scheme": "heun", "n_ode_steps": 100, "logdet_mode": "exact"},
        "sweep": {"methods": list(PAPER_METHODS), "log2n_min": 7, "log2n_max": 16, "n_grid": None, "reps": 10},
        "check": {"scheme": "euler", "n_ode_steps": 100, "k_min": 4, "k_max": 30, "n_pairs": 20,
                  "fit_levels": 14, "b_tol": 0.1, "n_field": 1024, "integrands": ["first_moment_1", "second_moment_1"]},
    }


# Per-profile overrides; "30d" entries apply when the target dimension is 30.
_PROFILE_OVERRIDES = {
    "full": {
        "2d": {},
        "30d": {"model": {"width": 256, "n_blocks": 4}, "train": {"n_steps": 50000}},
    },
    "desk": {
        "2d": {"model": {"width": 64, "n_blocks": 2}, "train": {"n_steps": 20000, "ema_decay": 0.999},
               "flow": {"n_ode_steps": 16}, "check": {"n_ode_steps": 16}},
        "30d": {"model": {"width": 32, "n_blocks": 2}, "train": {"n_steps": 10000, "ema_decay": 0.999},
                "flow": {"n_ode_steps": 4}, "check": {"n_ode_steps": 4, "n_pairs": 5}},
    },
    "fast": {
        "2d": {"model": {"width": 32, "n_blocks": 2, "K": 4}, "train": {"n_steps": 2000, "batch_size": 512,
                                                                       "ema_decay": 0.99},
               "flow": {"n_ode_steps": 8}, "sweep": {"log2n_max": 12, "reps": 5},
               "check": {"n_ode_steps": 8, "n_field": 256}},
        "30d": {"model": {"width": 32, "n_blocks": 2, "K": 4}, "train": {"n_steps": 2000, "batch_size": 512,
                                                                        "ema_decay": 0.99},
                "flow": {"n_ode_steps": 4}, "sweep": {"log2n_max": 12, "reps": 5},
                "check": {"n_ode_steps": 4, "n_field": 256, "n_pairs": 5}},
    },
}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    """Recursive update of ``base`` by ``over``; keys absent from ``base`` are rejected."""
    out = copy.deepcopy(base)
    for key, val in over.items():
        path = f"{where}.{key}" if where else key
        if key not in out:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(out[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            out[key] = _merge(out[key], val, path)
        else:
            out[key] = val
    return out


def _target_dim(name: str) -> int:
    return 30 if name == "gmm30d" else 2


def resolve_config(profile: str = "full", file: str | Path | None = None, target: str | None = None,
                   overrides: dict | None = None) -> dict:
    """Profile defaults, then the config file, then explicit overrides."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    user = {}
    if file is not None:
        try:
            user = json.loads(Path(file).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse config {file}: {exc}") from None
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
    cfg = _base_defaults()
    name = target or user.get("target", {}).get("name") or cfg["target"]["name"]
    cfg = _merge(cfg, _PROFILE_OVERRIDES[profile]["30d" if _target_dim(name) == 30 else "2d"])
    cfg = _merge(cfg, user)
    if target is not None:
        cfg["target"]["name"] = target
    if overrides:
        cfg = _merge(cfg, overrides)
    cfg["profile"] = profile
    cfg["version"] = __version__
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    try:
        _build_target(cfg)
        _train_config(cfg)
        FlowSpec(**cfg["flow"])
        FlowSpec(cfg["check"]["scheme"], cfg["check"]["n_ode_steps"])
        _ladder(cfg, _target_dim(cfg["target"]["name"]))
        for m in cfg["sweep"]["methods"]:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        for name in cfg["check"]["integrands"]:
            parse_integrand(name)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def _build_target(cfg):
    name = cfg["target"]["name"]
    if name == "gmm2d":
        return get_target(name, sigma1_scale=cfg["target"]["gmm2d_sigma1_scale"])
    return get_target(name)


def _train_config(cfg) -> TrainConfig:
    tr = dict(cfg["train"])
    sigma = tr.pop("sigma")
    return TrainConfig(target=cfg["target"]["name"], seed=cfg["seed"], path=PathSpec(sigma), **cfg["model"], **tr)


def _ladder(cfg, d) -> ProbeLadder:
    c = cfg["check"]
    return ProbeLadder(d, c["k_min"], c["k_max"], c["n_pairs"], cfg["seed"], c["fit_levels"])


def write_resolved(cfg: dict, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved"
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path


def parse_n_grid(text: str) -> list[int]:
    """``"2^7..2^16"`` (powers of two) or a comma-separated list of integers."""
    m = re.fullmatch(r"\s*2\^(\d+)\s*\.\.\s*2\^(\d+)\s*", text)
    if m:
        a, b = int(m.group(1)), int(m.group(2))
        if a > b:
            raise ConfigError("empty n range")
        return [2**k for k in range(a, b + 1)]
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise ConfigError(f"cannot parse n grid {text!r}") from None


def _fmt(v) -> str:
    return f"{float(v):.17g}"


def _write_rows(path, header, rows):
    fh = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)
    finally:
        if fh is not sys.stdout:
            fh.close()


def _read_points(path) -> np.ndarray:
    rows = list(csv.reader(open(path)))
    if not rows:
        raise ConfigError(f"no points in {path}")
    body = rows[1:] if any(c.strip().startswith("u") for c in rows[0]) else rows
    return np.array([[float(c) for c in r] for r in body if r], dtype=np.float64)


def _load(cfg, ckpt):
    return load_checkpoint(ckpt, expect_d=_target_dim(cfg["target"]["name"]))


def cmd_gen_points(args) -> int:
    ps = sobol_points(args.dim, args.log2n, skip_origin=args.skip_origin)
    kind = RANDOMIZE_ALIASES.get(args.randomize, args.randomize)
    if kind != "none":
        ps = randomize(ps, RandomizationSpec(kind, args.seed))
    _write_rows(args.out, [f"u{j + 1}" for j in range(ps.d)], ([_fmt(v) for v in row] for row in ps.points))
    return EXIT_OK


def _profile(args) -> str:
    return "fast" if getattr(args, "fast", False) else args.profile


def cmd_train(args) -> int:
    over = {"seed": args.seed} if args.seed is not None else None
    cfg = resolve_config(_profile(args), args.config, args.target, over)
    target = _build_target(cfg)
    p, trace = train(_train_config(cfg), target)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(p, out, metadata={"config": cfg})
    write_loss_trace(args.loss_trace or out.with_name(out.name + ".loss.csv"), trace)
    write_resolved(cfg, out.parent)
    return EXIT_OK


def cmd_transport(args) -> int:
    p = load_checkpoint(args.ckpt)
    u = _read_points(args.points)
    spec = FlowSpec(args.scheme, args.steps, args.logdet)
    ts = push_forward(p, u, spec)
    d = p.d
    header = [f"u{j + 1}" for j in range(d)] + [f"x{j + 1}" for j in range(d)] + ["log_abs_det"]
    rows = ([_fmt(v) for v in np.concatenate([a, b, [c]])] for a, b, c in zip(ts.u, ts.x, ts.log_abs_det))
    _write_rows(args.out, header, rows)
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = resolve_config(args.profile, args.config, args.target)
    target = _build_target(cfg)
    p = _load(cfg, args.ckpt)
    rec = estimate(args.method, p, target, moment_integrands(target.d), args.n, args.seed, FlowSpec(**cfg["flow"]))
    _write_rows(args.out, ["method", "n", "seed", "integrand", "estimate", "ess"],
                ([rec.method, rec.n, rec.seed, name, _fmt(v), "" if rec.ess is None else _fmt(rec.ess)]
                 for name, v in zip(rec.integrands, rec.estimates)))
    return EXIT_OK


def _run_sweep(cfg, p, target, out_dir, methods=None, n_grid=None, reps=None, seed=None):
    sw = cfg["sweep"]
    methods = methods or sw["methods"]
    n_grid = n_grid or sw["n_grid"] or [2**k for k in range(sw["log2n_min"], sw["log2n_max"] + 1)]
    report = rmse_sweep(methods, p, target, moment_integrands(target.d), n_grid, reps or sw["reps"],
                        cfg["seed"] if seed is None else seed, FlowSpec(**cfg["flow"]))
    write_sweep_csvs(report, out_dir)
    return report


def cmd_sweep(args) -> int:
    over = {}
    if args.methods:
        over["methods"] = [m.strip() for m in args.methods.split(",")]
    if args.reps is not None:
        over["reps"] = args.reps
    if args.n:
        over["n_grid"] = parse_n_grid(args.n)
    top = {"sweep": over} if over else {}
    if args.seed is not None:
        top["seed"] = args.seed
    cfg = resolve_config(args.profile, args.config, args.target, top)
    target = _build_target(cfg)
    p = _load(cfg, args.ckpt)
    _run_sweep(cfg, p, target, args.out)
    write_resolved(cfg, args.out)
    return EXIT_OK


def _run_check(cfg, p, target, out_path):
    c = cfg["check"]
    rep = growth_report(p, FlowSpec(c["scheme"], c["n_ode_steps"]), _ladder(cfg, target.d), target,
                        [parse_integrand(n) for n in c["integrands"]], c["b_tol"], c["n_field"])
    rep.write_json(out_path)
    return rep


def cmd_check(args) -> int:
    cfg = resolve_config(args.profile, args.config, args.target)
    target = _build_target(cfg)
    p = _load(cfg, args.ckpt)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _run_check(cfg, p, target, out)
    write_resolved(cfg, out.parent)
    return EXIT_OK


def cmd_reproduce(args) -> int:
    cfg = resolve_config(_profile(args), args.config, args.experiment)
    out = Path(args.out or Path("runs") / f"{args.experiment}-{cfg['profile']}")
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out)
    target = _build_target(cfg)
    ckpt = out / "model.ckpt"
    if ckpt.exists() and not args.retrain:
        p = _load(cfg, ckpt)
    else:
        p, trace = train(_train_config(cfg), target)
        save_checkpoint(p, ckpt, metadata={"config": cfg})
        write_loss_trace(out / "loss.csv", trace)
    _run_sweep(cfg, p, target, out)
    _run_check(cfg, p, target, out / "report.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fmqmc", description="Flow-matching transport with randomized QMC importance sampling.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--threads", type=int, default=None, help="cap on worker threads (results do not depend on it)")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-points", help="write a (randomized) Sobol' point set as CSV")
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--log2n", type=int, required=True)
    g.add_argument("--randomize", choices=RANDOMIZATIONS + tuple(RANDOMIZE_ALIASES), default="none")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--skip-origin", action="store_true")
    g.add_argument("--out", default=None, help="output CSV (default stdout)")
    g.set_defaults(func=cmd_gen_points)

    def common(sp, target_required=True):
        sp.add_argument("--target", choices=EXPERIMENTS, required=target_required)
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--profile", choices=PROFILES, default="full")

    t = sub.add_parser("train", help="fit a velocity field by conditional flow matching")
    common(t)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--loss-trace", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--fast", action="store_true", help="shorthand for --profile fast")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("transport", help="push unit-cube points through a trained transport")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--points", required=True, help="CSV of unit-cube points")
    tr.add_argument("--scheme", choices=("euler", "heun"), default="heun")
    tr.add_argument("--steps", type=int, default=100)
    tr.add_argument("--logdet", choices=("exact", "trace"), default="exact")
    tr.add_argument("--out", default=None)
    tr.set_defaults(func=cmd_transport)

    e = sub.add_parser("estimate", help="one moment estimate")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--method", choices=METHODS, required=True)
    e.add_argument("--n", type=int, required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("sweep", help="replicated RMSE sweep over sample sizes")
    common(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--methods", default=None, help="comma-separated method list")
    s.add_argument("--n", default=None, help='sample sizes, e.g. "2^7..2^16"')
    s.add_argument("--reps", type=int, default=None)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("check", help="boundary-growth certification report")
    common(c)
    c.add_argument("--ckpt", required=True)
    c.add_argument("--out", required=True, help="report JSON path")
    c.set_defaults(func=cmd_check)

    r = sub.add_parser("reproduce", help="train, sweep and check one experiment end to end")
    r.add_argument("--experiment", choices=EXPERIMENTS, required=True)
    r.add_argument("--config", default=None)
    r.add_argument("--profile", choices=PROFILES, default="full")
    r.add_argument("--fast", action="store_true", help="shorthand for --profile fast")
    r.add_argument("--retrain", action="store_true", help="ignore an existing model.ckpt in the output directory")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_reproduce)
    return ap


def _set_threads(n):
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        _set_threads(args.threads)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing file: {exc.filename or exc}", file=sys.stderr)
        return EXIT_MISSING
    except CheckpointError as exc:
        kind = "shape" if isinstance(exc, CheckpointShapeError) else "format"
        print(f"checkpoint {kind} error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (TrainingDivergedError, DegenerateStepError, DegenerateWeightsError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (BoundaryInputError, UnsupportedDimensionError, UnsupportedTargetError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
