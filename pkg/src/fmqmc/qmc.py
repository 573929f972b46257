"""Sobol' point sets, their randomizations, and discrepancy diagnostics.

Points are carried as 32-bit integers internally (``BITS`` fractional binary
digits) and exposed as float64 in [0, 1).  Generation is in natural index
order, so ``sobol_points(d, m)`` is always a prefix of ``sobol_points(d, m+1)``.

Owen scrambling is realized as a hash-based nested uniform scramble: the bit
at depth ``k`` of coordinate ``j`` is flipped iff a keyed 64-bit hash of the
``k`` leading (unscrambled) bits says so.  Every node of the binary digit tree
therefore gets its own independent random flip, which is exactly nested
uniform scrambling in base 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

BITS = 32
MAX_DIM = 64
MAX_LOG2N = 30
RANDOMIZATIONS = ("none", "random_shift", "digital_shift", "owen_scramble")

_SCALE = 1.0 / float(1 << BITS)
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


class UnsupportedDimensionError(ValueError):
    """Requested dimension is outside what the generator or diagnostic supports."""


@dataclass(frozen=True)
class RandomizationSpec:
    kind: str = "none"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in RANDOMIZATIONS:
            raise ValueError(f"unknown randomization kind {self.kind!r}; expected one of {RANDOMIZATIONS}")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class PointSet:
    """An immutable n x d array of points in [0, 1) with its provenance."""

    points: np.ndarray
    sequence: str = "sobol"
    randomization: str = "none"
    seed: int | None = None
    offset: int = 0
    ints: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2:
            raise ValueError("points must be a 2-d array")
        if pts.size and (pts.min() < 0.0 or pts.max() >= 1.0):
            raise ValueError("points must lie in [0, 1)")
        pts = pts.copy()
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.ints is not None:
            ints = np.array(self.ints, dtype=np.uint64)
            ints.setflags(write=False)
            object.__setattr__(self, "ints", ints)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def provenance(self) -> dict:
        return {
            "sequence": self.sequence,
            "randomization": self.randomization,
            "seed": self.seed,
            "offset": self.offset,
        }


@lru_cache(maxsize=1)
def _direction_table() -> list[tuple[int, int, list[int]]]:
    text = resources.files("fmqmc").joinpath("data/new-joe-kuo-d64.txt").read_text()
    rows = []
    for line in text.splitlines()[1:]:
        parts = line.split()
        if not parts:
            continue
        s, a = int(parts[1]), int(parts[2])
        rows.append((s, a, [int(v) for v in parts[3 : 3 + s]]))
    return rows


@lru_cache(maxsize=MAX_DIM)
def direction_numbers(dim: int) -> np.ndarray:
    """Return the ``BITS`` direction integers ``v_1..v_BITS`` of coordinate ``dim`` (1-based)."""
    if dim == 1:
        m = [1] * BITS
    else:
        table = _direction_table()
        if dim - 1 > len(table):
            raise UnsupportedDimensionError(f"direction-number table covers d <= {len(table) + 1}, got {dim}")
        s, a, m_init = table[dim - 2]
        m = list(m_init)
        for k in range(s, BITS):
            new = m[k - s] ^ (m[k - s] << s)
            for i in range(1, s):
                if (a >> (s - 1 - i)) & 1:
                    new ^= m[k - i] << i
            m.append(new)
    v = [m[k] << (BITS - 1 - k) for k in range(BITS)]
    return np.array(v, dtype=np.uint64)


def _sobol_ints(d: int, n: int, offset: int = 0) -> np.ndarray:
    idx = np.arange(offset, offset + n, dtype=np.uint64)
    out = np.zeros((n, d), dtype=np.uint64)
    nbits = max(int(offset + n - 1).bit_length(), 1)
    for j in range(d):
        v = direction_numbers(j + 1)
        col = out[:, j]
        for k in range(nbits):
            sel = ((idx >> np.uint64(k)) & np.uint64(1)).astype(bool)
            col[sel] ^= v[k]
    return out


def sobol_points(d: int, m: int, *, skip_origin: bool = False) -> PointSet:
    """First ``2**m`` Sobol' points in dimension ``d``.

    With ``skip_origin`` the sequence starts at index 1 (still ``2**m`` points),
    which keeps every point strictly inside the cube.
    """
    if not 1 <= d <= MAX_DIM:
        raise UnsupportedDimensionError(f"dimension must be in [1, {MAX_DIM}], got {d}")
    if not 0 <= m <= MAX_LOG2N:
        raise ValueError(f"log2 point count must be in [0, {MAX_LOG2N}], got {m}")
    offset = 1 if skip_origin else 0
    ints = _sobol_ints(d, 1 << m, offset)
    return PointSet(ints * _SCALE, randomization="none", offset=offset, ints=ints)


def _mix64(z: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps modulo 2**64
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(0xBF58476D1CE4E5B9)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _dimension_key(seed: int, dim: int) -> np.uint64:
    with np.errstate(over="ignore"):
        base = np.uint64(seed) + np.uint64(0x9E3779B97F4A7C15) * np.uint64(dim + 1)
        return _mix64(np.array([base], dtype=np.uint64))[0]


def owen_scramble_ints(ints: np.ndarray, seed: int) -> np.ndarray:
    """Nested uniform scramble of ``BITS``-bit digit strings, one tree per column."""
    ints = np.asarray(ints, dtype=np.uint64)
    out = np.empty_like(ints)
    one = np.uint64(1)
    with np.errstate(over="ignore"):
        for j in range(ints.shape[1]):
            col = ints[:, j]
            key = _dimension_key(seed, j)
            flips = np.zeros_like(col)
            for depth in range(BITS):
                # heap-style node id: a marker bit above the `depth` leading digits
                prefix = col >> np.uint64(BITS - depth)
                node = (one << np.uint64(depth)) | prefix
                bit = _mix64(node ^ key) >> np.uint64(63)
                flips |= bit << np.uint64(BITS - 1 - depth)
            out[:, j] = col ^ flips
    return out


def randomize(ps: PointSet, spec: RandomizationSpec, *, shift: np.ndarray | None = None) -> PointSet:
    """Apply one randomization to a point set.

    Randomizations compose when applied to an already randomized set (the
    provenance records the chain); digital shifts are involutions.  ``shift``
    overrides the random vector drawn for ``random_shift``; it exists so
    degenerate shifts can be exercised directly.
    """
    if spec.kind == "none":
        return ps
    ints = ps.ints if ps.ints is not None else np.floor(ps.points * (1 << BITS)).astype(np.uint64)
    rng = np.random.Generator(np.random.Philox(key=spec.seed))
    if spec.kind == "random_shift":
        delta = rng.random(ps.d) if shift is None else np.asarray(shift, dtype=np.float64)
        pts = np.mod(ps.points + delta, 1.0)
        # (u + delta) may round up to exactly 1.0
        pts[pts >= 1.0] = 0.0
        new_ints = None
    elif spec.kind == "digital_shift":
        mask = rng.integers(0, 1 << BITS, size=ps.d, dtype=np.uint64)
        new_ints = ints ^ mask
        pts = new_ints * _SCALE
    else:
        new_ints = owen_scramble_ints(ints, spec.seed)
        pts = new_ints * _SCALE
    kind = spec.kind if ps.randomization == "none" else f"{ps.randomization}+{spec.kind}"
    return PointSet(pts, ps.sequence, kind, spec.seed, ps.offset, ints=new_ints)


def scrambled_sobol(d: int, n: int, seed: int) -> np.ndarray:
    """``n`` Owen-scrambled Sobol' points (prefix of the infinite sequence) as float64."""
    m = max(int(n - 1).bit_length(), 0)
    ps = sobol_points(d, m)
    return randomize(ps, RandomizationSpec("owen_scramble", seed)).points[:n]


def star_discrepancy(ps: PointSet | np.ndarray) -> float:
    """Exact star discrepancy for d <= 2.

    Anchors range over the grid formed by point coordinates and 1; at each
    anchor both the open box (points strictly below) and the closed box are
    counted, which captures the supremum over all anchored boxes.
    """
    pts = ps.points if isinstance(ps, PointSet) else np.atleast_2d(np.asarray(ps, dtype=np.float64))
    n, d = pts.shape
    if d > 2:
        raise UnsupportedDimensionError("exact star discrepancy is implemented for d <= 2 only")
    if n == 0:
        return 0.0
    if d == 1:
        xs = np.unique(np.append(pts[:, 0], 1.0))
        srt = np.sort(pts[:, 0])
        closed = np.searchsorted(srt, xs, side="right") / n
        opened = np.searchsorted(srt, xs, side="left") / n
        return float(max(np.max(closed - xs), np.max(xs - opened)))
    xs = np.unique(np.append(pts[:, 0], 1.0))
    ys = np.unique(np.append(pts[:, 1], 1.0))
    ix = np.searchsorted(xs, pts[:, 0])
    iy = np.searchsorted(ys, pts[:, 1])
    hist = np.zeros((xs.size, ys.size))
    np.add.at(hist, (ix, iy), 1.0)
    closed = hist.cumsum(0).cumsum(1)
    opened = np.zeros_like(closed)
    opened[1:, 1:] = closed[:-1, :-1]
    vol = np.outer(xs, ys)
    return float(max(np.max(closed / n - vol), np.max(vol - opened / n)))


def elementary_interval_counts(points: np.ndarray, q: tuple[int, ...]) -> np.ndarray:
    """Counts of points in each dyadic box with side lengths ``2**-q_j``."""
    pts = np.asarray(points, dtype=np.float64)
    cells = [np.floor(pts[:, j] * (1 << qj)).astype(np.int64) for j, qj in enumerate(q)]
    shape = tuple(1 << qj for qj in q)
    flat = np.ravel_multi_index(cells, shape)
    return np.bincount(flat, minlength=int(np.prod(shape))).reshape(shape)
