"""Residual MLP velocity field v(x, t) with hand-written derivatives.

Architecture (row-vector convention, batch on axis 0)::

    phi(t) = (sin(2 pi 2^(k-1) t), cos(2 pi 2^(k-1) t))_{k=1..K}
    h      = x Wx^T + bx + phi(t) Wt^T + bt
    repeat n_blocks times:
        h <- h + A2 mish(LN2(A1 mish(LN1(h)) + c1)) + c2
    v      = h Wo^T + bo

LN is layer normalization over the hidden axis (eps = 1e-5) with a learned
gain and offset.  mish(z) = z tanh(softplus(z)); writing s = e^z and
q = s (s + 2), we use tanh(softplus(z)) = q / (q + 2) and

    mish'(z) = q/(q+2) + z * 4 (q+1)/(q+2)^2 * s/(1+s)

Parameter count::

    2 d W + 2 W + 2 K W + n_blocks (2 W^2 + 6 W) + d

Weights and biases of every affine map are drawn from U(-1/sqrt(fan_in),
1/sqrt(fan_in)); layer-norm gains start at 1 and offsets at 0.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ._kernels import ln_mish_forward, ln_mish_tangent

LN_EPS = 1e-5
PARAMS_VERSION = 1
TENSOR_NAMES = (
    "Wx", "bx", "Wt", "bt",
    "ln1_g", "ln1_b", "A1", "c1",
    "ln2_g", "ln2_b", "A2", "c2",
    "Wo", "bo",
)


class InvalidInputError(ValueError):
    """Non-finite or out-of-range inputs to the velocity field."""


@dataclass(frozen=True)
class VelocityParams:
    d: int
    width: int
    n_blocks: int
    K: int
    Wx: np.ndarray
    bx: np.ndarray
    Wt: np.ndarray
    bt: np.ndarray
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    A1: np.ndarray
    c1: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    A2: np.ndarray
    c2: np.ndarray
    Wo: np.ndarray
    bo: np.ndarray
    version: int = PARAMS_VERSION

    def __post_init__(self):
        for name, shape in expected_shapes(self.d, self.width, self.n_blocks, self.K).items():
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"tensor {name} has shape {arr.shape}, expected {shape}")
            object.__setattr__(self, name, arr)

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    @property
    def hyper(self) -> dict:
        return {"d": self.d, "width": self.width, "n_blocks": self.n_blocks, "K": self.K}

    def n_params(self) -> int:
        return sum(a.size for a in self.tensors().values())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.tensors().values()])

    def with_flat(self, vec: np.ndarray) -> "VelocityParams":
        out, pos = {}, 0
        for name, arr in self.tensors().items():
            out[name] = np.asarray(vec[pos : pos + arr.size], dtype=np.float64).reshape(arr.shape)
            pos += arr.size
        return replace(self, **out)

    def map(self, fn, *others: "VelocityParams") -> "VelocityParams":
        """Apply ``fn`` tensor-wise across this and other same-shaped parameter sets."""
        return replace(self, **{n: fn(getattr(self, n), *(getattr(o, n) for o in others)) for n in TENSOR_NAMES})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.tensors().values())


def expected_shapes(d: int, width: int, n_blocks: int, K: int) -> dict[str, tuple]:
    W, L = width, n_blocks
    return {
        "Wx": (W, d), "bx": (W,), "Wt": (W, 2 * K), "bt": (W,),
        "ln1_g": (L, W), "ln1_b": (L, W), "A1": (L, W, W), "c1": (L, W),
        "ln2_g": (L, W), "ln2_b": (L, W), "A2": (L, W, W), "c2": (L, W),
        "Wo": (d, W), "bo": (d,),
    }


def param_count(d: int, width: int, n_blocks: int, K: int) -> int:
    W = width
    return 2 * d * W + 2 * W + 2 * K * W + n_blocks * (2 * W * W + 6 * W) + d


def init_params(d: int, width: int = 128, n_blocks: int = 3, K: int = 8, seed: int = 0) -> VelocityParams:
    if min(d, width, n_blocks, K) < 1:
        raise ValueError("all sizes must be >= 1")
    rng = np.random.default_rng(seed)
    W, L = width, n_blocks

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return VelocityParams(
        d=d, width=W, n_blocks=L, K=K,
        Wx=uniform((W, d), d), bx=uniform((W,), d),
        Wt=uniform((W, 2 * K), 2 * K), bt=uniform((W,), 2 * K),
        ln1_g=np.ones((L, W)), ln1_b=np.zeros((L, W)),
        A1=uniform((L, W, W), W), c1=uniform((L, W), W),
        ln2_g=np.ones((L, W)), ln2_b=np.zeros((L, W)),
        A2=uniform((L, W, W), W), c2=uniform((L, W), W),
        Wo=uniform((d, W), W), bo=uniform((d,), W),
    )


def zeros_like_params(p: VelocityParams) -> VelocityParams:
    return p.map(np.zeros_like)


def affine_params(A: np.ndarray, b: np.ndarray | None = None, *, width: int | None = None,
                  n_blocks: int = 1, K: int = 1) -> VelocityParams:
    """A network computing exactly v(x, t) = A x + b.

    The residual branches are switched off (zero output maps) and the hidden
    layer is an identity embedding, so the field is linear in x.
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    d = A.shape[0]
    W = width or d
    p = zeros_like_params(init_params(d, W, n_blocks, K, seed=0))
    Wx = np.zeros((W, d))
    Wx[:d, :d] = A
    Wo = np.zeros((d, W))
    Wo[:d, :d] = np.eye(d)
    bo = np.zeros(d) if b is None else np.asarray(b, dtype=np.float64)
    return replace(p, Wx=Wx, Wo=Wo, bo=bo, ln1_g=np.ones((n_blocks, W)), ln2_g=np.ones((n_blocks, W)))


def fourier_features(t: np.ndarray, K: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    ang = 2.0 * np.pi * (2.0 ** np.arange(K)) * t
    out = np.empty((t.shape[0], 2 * K))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def _mish_parts(z):
    s = np.exp(np.minimum(z, 20.0))
    q = s * (s + 2.0)
    tsp = q / (q + 2.0)
    return z * tsp, s, q, tsp


def mish(z):
    return _mish_parts(np.asarray(z, dtype=np.float64))[0]


def mish_grad(z):
    z = np.asarray(z, dtype=np.float64)
    return _mish_deriv(z, *_mish_parts(z)[1:])


def _mish_deriv(z, s, q, tsp):
    q2 = q + 2.0
    return tsp + z * (4.0 * (q + 1.0) / (q2 * q2)) * (s / (1.0 + s))


def _prepare(p: VelocityParams, x, t):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.ndim != 2 or x2.shape[1] != p.d:
        raise InvalidInputError(f"expected states of dimension {p.d}, got shape {x.shape}")
    if not np.all(np.isfinite(x2)):
        raise InvalidInputError("state contains non-finite values")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x2.shape[0],))
    if not np.all(np.isfinite(t)) or np.any(t < -1e-12) or np.any(t > 1.0 + 1e-12):
        raise InvalidInputError("time must be finite and in [0, 1]")
    return x2, t, single


def _lin(a, W):
    # a (..., in) times W^T with W (out, in), flattened into one GEMM
    shp = a.shape
    return (a.reshape(-1, shp[-1]) @ W.T).reshape(shp[:-1] + (W.shape[0],))


def _forward(p: VelocityParams, x2, t, cache: bool = False, tangents: bool = False, seed=None):
    phi = fourier_features(t, p.K)
    h = x2 @ p.Wx.T + p.bx + phi @ p.Wt.T + p.bt
    dh = None
    if tangents and seed is None:
        dh = np.ascontiguousarray(np.broadcast_to(p.Wx.T[None, :, :], (x2.shape[0], p.d, p.width)))
    elif tangents:
        # tangent k is the direction seed[:, :, k]
        dh = _lin(np.swapaxes(seed, 1, 2), p.Wx)
    saved = []
    for l in range(p.n_blocks):
        g1, g2 = p.ln1_g[l], p.ln2_g[l]
        m1, xhat1, rstd1, dm1 = ln_mish_forward(h, g1, p.ln1_b[l], LN_EPS)
        z = m1 @ p.A1[l].T + p.c1[l]
        m2, xhat2, rstd2, dm2 = ln_mish_forward(z, g2, p.ln2_b[l], LN_EPS)
        if cache:
            saved.append((xhat1, rstd1, m1, dm1, xhat2, rstd2, m2, dm2))
        if tangents:
            dz = _lin(ln_mish_tangent(dh, xhat1, rstd1, g1, dm1), p.A1[l])
            dh = dh + _lin(ln_mish_tangent(dz, xhat2, rstd2, g2, dm2), p.A2[l])
        h = h + (m2 @ p.A2[l].T + p.c2[l])
    v = h @ p.Wo.T + p.bo
    jac = None
    if tangents:
        # _lin gives dv[i, k, :] = d v / d x_k; transpose to jac[i, a, b] = d v_a / d x_b
        jac = np.swapaxes(_lin(dh, p.Wo), 1, 2)
    return v, jac, phi, h, saved


def eval_velocity(p: VelocityParams, x, t):
    """v(x, t) for one state (shape (d,)) or a batch (shape (n, d))."""
    x2, tt, single = _prepare(p, x, t)
    v = _forward(p, x2, tt)[0]
    return v[0] if single else v


def eval_velocity_jacobian(p: VelocityParams, x, t, seed=None):
    """Value and exact state Jacobian, ``jac[..., i, j] = d v_i / d x_j``.

    The Jacobian is propagated in forward mode (one tangent per state
    coordinate) through the same computation that produces the value.
    With ``seed`` (shape (n, d, d)) the tangents start from its columns and
    the product ``jac @ seed`` is returned instead.
    """
    x2, tt, single = _prepare(p, x, t)
    if seed is not None:
        seed = np.asarray(seed, dtype=np.float64).reshape(x2.shape[0], p.d, p.d)
    v, jac, *_ = _forward(p, x2, tt, tangents=True, seed=seed)
    if single:
        return v[0], jac[0]
    return v, jac


def grad_params(p: VelocityParams, x, t, target):
    """Mean squared error ``mean_i ||v(x_i, t_i) - target_i||^2`` and its parameter gradient."""
    x2, tt, _ = _prepare(p, x, t)
    y = np.asarray(target, dtype=np.float64).reshape(x2.shape)
    n = x2.shape[0]
    if n == 0:
        raise InvalidInputError("empty batch")
    v, _, phi, hL, saved = _forward(p, x2, tt, cache=True)
    resid = v - y
    loss = float(np.sum(resid * resid) / n)

    dv = resid * (2.0 / n)
    g = {name: None for name in TENSOR_NAMES}
    g["Wo"] = dv.T @ hL
    g["bo"] = dv.sum(axis=0)
    dh = dv @ p.Wo
    L = p.n_blocks
    for name in ("ln1_g", "ln1_b", "A1", "c1", "ln2_g", "ln2_b", "A2", "c2"):
        g[name] = np.empty_like(getattr(p, name))
    for l in reversed(range(L)):
        xhat1, rstd1, m1, dm1, xhat2, rstd2, m2, dm2 = saved[l]
        g["A2"][l] = dh.T @ m2
        g["c2"][l] = dh.sum(axis=0)
        db = (dh @ p.A2[l]) * dm2
        g["ln2_g"][l] = (db * xhat2).sum(axis=0)
        g["ln2_b"][l] = db.sum(axis=0)
        dz = _ln_backward(db * p.ln2_g[l], xhat2, rstd2)
        g["A1"][l] = dz.T @ m1
        g["c1"][l] = dz.sum(axis=0)
        da = (dz @ p.A1[l]) * dm1
        g["ln1_g"][l] = (da * xhat1).sum(axis=0)
        g["ln1_b"][l] = da.sum(axis=0)
        dh = dh + _ln_backward(da * p.ln1_g[l], xhat1, rstd1)
    g["Wx"] = dh.T @ x2
    g["bx"] = dh.sum(axis=0)
    g["Wt"] = dh.T @ phi
    g["bt"] = g["bx"].copy()
    return loss, replace(p, **g)


def _ln_backward(dxhat, xhat, rstd):
    return (dxhat - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)) * rstd[:, None]
