"""Conditional flow matching with the straight-line path, plus checkpoints.

The conditional path from a logistic draw x0 to a target draw z is

    x_t = (1 - (1 - sigma) t) x0 + t z,   dx_t/dt = z - (1 - sigma) x0,

and the velocity field is regressed on that conditional velocity with Adam.
Batches are sampled fresh at every step (independent coupling).
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .neural_field import (
    PARAMS_VERSION,
    TENSOR_NAMES,
    VelocityParams,
    expected_shapes,
    grad_params,
    init_params,
)
from .targets import Target, UnsupportedTargetError

CHECKPOINT_MAGIC = b"FMQMCKPT"
CHECKPOINT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")  # magic, format version, header length


class TrainingDivergedError(ArithmeticError):
    """A non-finite loss or gradient appeared during training."""

    def __init__(self, step: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class CheckpointError(ValueError):
    """Base class for checkpoint read failures."""


class CheckpointVersionError(CheckpointError):
    """Unknown container format or version."""


class CheckpointShapeError(CheckpointError):
    """Tensor shapes disagree with the header or the caller's expectation."""


class CheckpointTruncatedError(CheckpointError):
    """The file ends before the declared payload."""


@dataclass(frozen=True)
class PathSpec:
    sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.sigma < 1.0:
            raise ValueError("sigma must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    target: str = "gmm2d"
    batch_size: int = 1024
    n_steps: int = 20_000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    ema_decay: float = 0.0
    width: int = 128
    n_blocks: int = 3
    K: int = 8
    path: PathSpec = field(default_factory=PathSpec)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.adam_eps > 0):
            raise ValueError("invalid Adam constants")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        if isinstance(self.path, dict):
            object.__setattr__(self, "path", PathSpec(**self.path))

    def to_dict(self) -> dict:
        return asdict(self)


def sample_cfm_batch(target: Target, path: PathSpec, batch_size: int, rng: np.random.Generator):
    """Draw ``(x_t, t, target_velocity)`` for one CFM batch."""
    if not target.samplable:
        raise UnsupportedTargetError(f"target {target.name!r} has no sampler")
    t = rng.random(batch_size)
    x0 = rng.logistic(size=(batch_size, target.d))
    z = target.sampler(batch_size, rng)
    a = 1.0 - (1.0 - path.sigma) * t
    xt = a[:, None] * x0 + t[:, None] * z
    return xt, t, z - (1.0 - path.sigma) * x0


class Adam:
    """Adam on a flat parameter vector."""

    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def train(config: TrainConfig, target: Target, *, init: VelocityParams | None = None,
          checkpoint_path: str | Path | None = None, callback=None):
    """Fit a velocity field by CFM; returns ``(params, loss_trace)``.

    Results depend only on ``config`` (and ``init`` when given).  With
    ``ema_decay > 0`` the returned parameters are the bias-corrected
    exponential moving average of the iterates instead of the last iterate.  With
    ``checkpoint_every > 0`` and a ``checkpoint_path`` the current parameters
    are saved every that many steps. ``callback(step, loss)`` is called after
    each step if provided.
    """
    if not target.samplable:
        raise UnsupportedTargetError(f"target {target.name!r} has no sampler")
    init_seq, data_seq = np.random.SeedSequence(config.seed).spawn(2)
    if init is None:
        init_seed = int(init_seq.generate_state(1)[0])
        p = init_params(target.d, config.width, config.n_blocks, config.K, seed=init_seed)
    else:
        p = init
    rng = np.random.default_rng(data_seq)
    theta = p.flat()
    opt = Adam(theta.size, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    ema = np.zeros_like(theta) if config.ema_decay else None
    trace = np.empty(config.n_steps)
    meta = {"config": config.to_dict()}
    for step in range(config.n_steps):
        xt, t, y = sample_cfm_batch(target, config.path, config.batch_size, rng)
        if not (np.all(np.isfinite(xt)) and np.all(np.isfinite(y))):
            raise TrainingDivergedError(step, "non-finite training batch")
        loss, g = grad_params(p, xt, t, y)
        gflat = g.flat()
        if not np.isfinite(loss):
            raise TrainingDivergedError(step)
        if not np.all(np.isfinite(gflat)):
            raise TrainingDivergedError(step, "non-finite gradient")
        theta = opt.step(theta, gflat)
        p = p.with_flat(theta)
        if ema is not None:
            ema = config.ema_decay * ema + (1.0 - config.ema_decay) * theta
        trace[step] = loss
        if callback is not None:
            callback(step, loss)
        if checkpoint_path is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(_averaged(p, ema, config.ema_decay, step + 1), checkpoint_path,
                            metadata={**meta, "step": step + 1})
    p = _averaged(p, ema, config.ema_decay, config.n_steps)
    if not p.all_finite():
        raise TrainingDivergedError(config.n_steps - 1, "non-finite parameters")
    return p, trace


def _averaged(p, ema, decay, steps):
    if ema is None:
        return p
    return p.with_flat(ema / (1.0 - decay**steps))


def smoothed(trace: np.ndarray, window: int = 100) -> np.ndarray:
    """Means over consecutive non-overlapping windows."""
    n = len(trace) // window
    return np.asarray(trace[: n * window]).reshape(n, window).mean(axis=1)


def write_loss_trace(path: str | Path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, f"{v:.17g}"])


def save_checkpoint(p: VelocityParams, path: str | Path, metadata: dict | None = None) -> None:
    """Write a magic/version prefix, a JSON header, then float64 LE tensors in declaration order."""
    header = {
        "params_version": p.version,
        "hyper": p.hyper,
        "tensors": [[name, list(arr.shape)] for name, arr in p.tensors().items()],
        "metadata": metadata or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for arr in p.tensors().values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)


def read_checkpoint_header(path: str | Path) -> dict:
    return _read(path)[0]


def load_checkpoint(path: str | Path, expect_d: int | None = None) -> VelocityParams:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Raises
    ------
    CheckpointVersionError
        Bad magic bytes, unreadable header, or an unknown version.
    CheckpointShapeError
        Tensor list inconsistent with the hyperparameters, or ``d != expect_d``.
    CheckpointTruncatedError
        Fewer payload bytes than the header declares.
    """
    header, payload = _read(path)
    hyper = header["hyper"]
    if expect_d is not None and hyper["d"] != expect_d:
        raise CheckpointShapeError(f"checkpoint has d={hyper['d']}, pipeline expects d={expect_d}")
    shapes = expected_shapes(**hyper)
    declared = {name: tuple(shape) for name, shape in header["tensors"]}
    if list(declared) != list(TENSOR_NAMES) or declared != shapes:
        raise CheckpointShapeError("tensor list does not match the declared hyperparameters")
    need = 8 * sum(int(np.prod(s)) for s in shapes.values())
    if len(payload) < need:
        raise CheckpointTruncatedError(f"payload has {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise CheckpointShapeError(f"payload has {len(payload) - need} trailing bytes")
    tensors, pos = {}, 0
    for name, shape in shapes.items():
        size = int(np.prod(shape))
        tensors[name] = np.frombuffer(payload, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * size
    return VelocityParams(**hyper, **tensors, version=header["params_version"])


def _read(path):
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointTruncatedError("file shorter than the checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointVersionError("not a checkpoint file (bad magic bytes)")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
    end = _PREFIX.size + hlen
    if len(data) < end:
        raise CheckpointTruncatedError("file ends inside the header")
    try:
        header = json.loads(data[_PREFIX.size:end].decode("utf-8"))
        hyper = {k: int(header["hyper"][k]) for k in ("d", "width", "n_blocks", "K")}
        tensors = header["tensors"]
        pv = int(header["params_version"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointVersionError(f"unreadable checkpoint header: {exc}") from None
    if pv != PARAMS_VERSION:
        raise CheckpointVersionError(f"parameter version {pv}, expected {PARAMS_VERSION}")
    if min(hyper.values()) < 1:
        raise CheckpointShapeError("non-positive hyperparameter in header")
    header["hyper"] = hyper
    header["tensors"] = tensors
    return header, data[end:]
