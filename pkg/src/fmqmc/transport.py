"""Composite transport u -> x: logit base map followed by fixed-step ODE steps.

The log-determinant of the full map is tracked alongside the state.  In
``exact`` mode each step contributes log|det S_k| of the step map's own
Jacobian, so ``-log_abs_det`` is the exact log density of the discrete
sampler.  ``trace`` mode integrates the divergence instead and is only a
first-order approximation of the same quantity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base_map import check_interior, log_abs_det_logit, logit_forward
from .neural_field import VelocityParams, eval_velocity, eval_velocity_jacobian

SCHEMES = ("euler", "heun")
LOGDET_MODES = ("exact", "trace")
DEFAULT_CHUNK = 4096
# tangent arrays hold chunk * d * width doubles; keep them cache-sized
TANGENT_BUDGET = 2**18


class DegenerateStepError(ArithmeticError):
    """A step map has a singular Jacobian, so the proposal density is undefined."""


@dataclass(frozen=True)
class FlowSpec:
    scheme: str = "heun"
    n_ode_steps: int = 100
    logdet_mode: str = "exact"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.logdet_mode not in LOGDET_MODES:
            raise ValueError(f"unknown logdet mode {self.logdet_mode!r}")
        if int(self.n_ode_steps) < 1:
            raise ValueError("n_ode_steps must be >= 1")

    @property
    def h(self) -> float:
        return 1.0 / self.n_ode_steps


@dataclass(frozen=True)
class TransportSample:
    """Batched transport result; ``log_q_tau`` is the log proposal density at ``x``."""

    u: np.ndarray
    x0: np.ndarray
    x: np.ndarray
    log_abs_det: np.ndarray | None

    @property
    def log_q_tau(self):
        return None if self.log_abs_det is None else -self.log_abs_det

    @property
    def displacement(self) -> np.ndarray:
        return self.x - self.x0


def _step_logdet(S):
    sign, logdet = np.linalg.slogdet(S)
    if np.any(sign == 0) or not np.all(np.isfinite(logdet)):
        raise DegenerateStepError("singular step Jacobian")
    return logdet


def flow_step(p: VelocityParams, x: np.ndarray, k: int, spec: FlowSpec, track_logdet: bool = True):
    """One step of the discretized flow from ``t_k = k h``.

    Returns the new states and the per-point log-determinant increment
    (``None`` when not tracked).
    """
    h = spec.h
    t = k * h
    if not track_logdet:
        k1 = eval_velocity(p, x, t)
        if spec.scheme == "euler":
            return x + h * k1, None
        k2 = eval_velocity(p, x + h * k1, t + h)
        return x + (0.5 * h) * (k1 + k2), None

    d = x.shape[1]
    eye = np.eye(d)
    k1, J1 = eval_velocity_jacobian(p, x, t)
    if spec.scheme == "euler":
        x_next = x + h * k1
        if spec.logdet_mode == "trace":
            return x_next, h * np.trace(J1, axis1=1, axis2=2)
        return x_next, _step_logdet(eye + h * J1)
    if spec.logdet_mode == "trace":
        k2, J2 = eval_velocity_jacobian(p, x + h * k1, t + h)
        x_next = x + (0.5 * h) * (k1 + k2)
        return x_next, (0.5 * h) * (np.trace(J1, axis1=1, axis2=2) + np.trace(J2, axis1=1, axis2=2))
    # seeding the second stage with d(x + h k1)/dx yields J2 (I + h J1) directly
    k2, J2T = eval_velocity_jacobian(p, x + h * k1, t + h, seed=eye + h * J1)
    x_next = x + (0.5 * h) * (k1 + k2)
    return x_next, _step_logdet(eye + (0.5 * h) * (J1 + J2T))


def _push_chunk(p, u, spec, track_logdet):
    x0 = logit_forward(u)
    x = x0
    logdet = log_abs_det_logit(u) if track_logdet else None
    for k in range(spec.n_ode_steps):
        x, inc = flow_step(p, x, k, spec, track_logdet)
        if track_logdet:
            logdet = logdet + inc
    return x0, x, logdet


def push_forward(p: VelocityParams, u, spec: FlowSpec = FlowSpec(), *, track_logdet: bool = True,
                 chunk: int | None = None) -> TransportSample:
    """Transport points ``u`` (shape (d,) or (n, d)) through tau = tau^{N-1} o ... o tau^0 o G.

    Rows are processed in chunks of ``chunk`` points; results do not depend
    on the chunk size because every row is transported independently.  The
    default caps the forward-mode tangent arrays at about 2 MiB, between 256
    and 4096 rows.
    """
    if chunk is None:
        chunk = int(np.clip(TANGENT_BUDGET // (p.d * p.width), 256, DEFAULT_CHUNK))
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    u2 = check_interior(u.reshape(1, -1) if single else u)
    if u2.shape[1] != p.d:
        raise ValueError(f"points have dimension {u2.shape[1]}, field expects {p.d}")
    parts = [_push_chunk(p, u2[i : i + chunk], spec, track_logdet) for i in range(0, u2.shape[0], chunk)]
    if parts:
        x0 = np.concatenate([q[0] for q in parts])
        x = np.concatenate([q[1] for q in parts])
        logdet = np.concatenate([q[2] for q in parts]) if track_logdet else None
    else:
        x0 = x = np.empty((0, p.d))
        logdet = np.empty(0) if track_logdet else None
    if single:
        return TransportSample(u2[0], x0[0], x[0], None if logdet is None else logdet[0])
    return TransportSample(u2, x0, x, logdet)


def transport_map(p: VelocityParams, u, spec: FlowSpec) -> np.ndarray:
    """tau(u) only, without log-determinant bookkeeping."""
    return push_forward(p, u, spec, track_logdet=False).x


def fd_jacobian_logdet(p: VelocityParams, u, spec: FlowSpec, delta: float = 1e-6) -> np.ndarray:
    """log|det J_tau(u)| from a central-difference Jacobian of ``u -> tau(u)``."""
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    u2 = u.reshape(1, -1) if single else u
    n, d = u2.shape
    offsets = np.concatenate([np.eye(d), -np.eye(d)]) * delta
    probes = (u2[:, None, :] + offsets[None, :, :]).reshape(-1, d)
    xs = transport_map(p, probes, spec).reshape(n, 2 * d, d)
    # column j of J is (tau(u + delta e_j) - tau(u - delta e_j)) / (2 delta)
    jac = np.swapaxes((xs[:, :d, :] - xs[:, d:, :]) / (2.0 * delta), 1, 2)
    out = np.linalg.slogdet(jac)[1]
    return out[0] if single else out
