"""Multi-resolution hash-encoded feature planes (2D) and grids (3D)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

PRIME_Y = 2654435761
PRIME_Z = 805459861
INIT_RANGE = 1e-4


def level_resolutions(n_min: int, n_max: int, levels: int) -> list[int]:
    """Geometric progression from ``n_min`` to ``n_max`` over ``levels`` levels."""
    if levels < 2:
        raise ValueError("need at least two levels")
    if n_min < 1:
        raise ValueError("base resolution must be >= 1")
    if n_max < n_min:
        raise ValueError(f"finest resolution {n_max} below base resolution {n_min}")
    growth = (n_max / n_min) ** (1.0 / (levels - 1))
    out = [int(math.floor(n_min * growth ** lvl + 1e-9)) for lvl in range(levels)]
    out[-1] = n_max
    return out


@dataclass(frozen=True)
class LevelLayout:
    """Per-level resolutions, storage modes and offsets into one flat table."""

    res: np.ndarray
    dense: np.ndarray
    offsets: np.ndarray
    hsize: int
    dim: int

    @classmethod
    def build(cls, n_min: int, n_max: int, levels: int, hsize: int, dim: int = 2) -> "LevelLayout":
        res = np.array(level_resolutions(n_min, n_max, levels), dtype=np.int64)
        dense = np.array([(r + 1) ** dim <= hsize for r in res], dtype=np.uint8)
        sizes = np.where(dense, (res + 1) ** dim, hsize)
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
        return cls(res, dense, offsets, int(hsize), dim)

    @property
    def levels(self) -> int:
        return int(self.res.size)

    @property
    def sizes(self) -> np.ndarray:
        return np.where(self.dense, (self.res + 1) ** self.dim, self.hsize)

    @property
    def total(self) -> int:
        return int(self.sizes.sum())

    def index(self, level: int, *vertex: int) -> int:
        """Table slot (relative to the level's offset) of an integer grid vertex."""
        n = int(self.res[level])
        if len(vertex) != self.dim:
            raise ValueError(f"expected {self.dim} vertex coordinates")
        if any(c < 0 or c > n for c in vertex):
            raise ValueError(f"vertex {vertex} outside [0, {n}] at level {level}")
        if self.dense[level]:
            idx = 0
            for c in reversed(vertex):
                idx = idx * (n + 1) + c
            return idx
        primes = (1, PRIME_Y, PRIME_Z)
        h = 0
        for c, p in zip(vertex, primes):
            h ^= (c * p) & 0xFFFFFFFFFFFFFFFF
        return h % self.hsize


def hash_index(layout: LevelLayout, level: int, ix: int, iy: int) -> int:
    return layout.index(level, ix, iy)


def init_table(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)


class CollisionCounter:
    """Tracks grid vertices touched at the finest level and counts slot sharing."""

    def __init__(self, layout: LevelLayout, n_fields: int):
        self.layout = layout
        n = int(layout.res[-1])
        self.occupied = np.zeros((n_fields, (n + 1) ** layout.dim), dtype=bool)

    def mark(self, coords: np.ndarray) -> None:
        """``coords``: (n, n_fields, dim) normalized coordinates."""
        n = int(self.layout.res[-1])
        pts = np.clip(coords, 0.0, 1.0) * n
        cell = np.clip(np.floor(pts).astype(np.int64), 0, n - 1)
        dim = self.layout.dim
        for corner in range(1 << dim):
            offs = np.array([(corner >> a) & 1 for a in range(dim)])
            v = cell + offs
            flat = np.zeros(v.shape[:2], dtype=np.int64)
            for a in reversed(range(dim)):
                flat = flat * (n + 1) + v[..., a]
            for f in range(self.occupied.shape[0]):
                self.occupied[f, flat[:, f]] = True

    def count(self) -> int:
        """Pairs of occupied finest-level vertices sharing one table slot."""
        if self.layout.dense[-1]:
            return 0
        n = int(self.layout.res[-1])
        total = 0
        for occ in self.occupied:
            ids = np.flatnonzero(occ).astype(np.uint64)
            coords = []
            for _ in range(self.layout.dim):
                coords.append(ids % np.uint64(n + 1))
                ids = ids // np.uint64(n + 1)
            h = coords[0]
            for c, p in zip(coords[1:], (PRIME_Y, PRIME_Z)):
                h = h ^ (c * np.uint64(p))
            slots = (h % np.uint64(self.layout.hsize)).astype(np.int64)
            k = np.bincount(slots).astype(np.int64)
            total += int(np.sum(k * (k - 1) // 2))
        return total


class HashPlane2D:
    """A single multi-resolution hashed feature plane.

    ``table`` has shape (T, feat_dim) and may be a view into a larger
    parameter block; gradients go to ``grad`` of the same shape.
    """

    def __init__(self, n_min: int, n_max: int, levels: int, feat_dim: int, table_size: int,
                 table: np.ndarray | None = None, grad: np.ndarray | None = None,
                 rng: np.random.Generator | None = None):
        self.layout = LevelLayout.build(n_min, n_max, levels, table_size, dim=2)
        self.feat_dim = feat_dim
        if table is None:
            rng = np.random.default_rng(0) if rng is None else rng
            table = init_table(rng, (self.layout.total, feat_dim))
        if table.shape != (self.layout.total, feat_dim):
            raise ValueError(f"table shape {table.shape} does not match layout")
        self.table = table
        self.grad = np.zeros_like(table) if grad is None else grad

    @property
    def output_dim(self) -> int:
        return self.layout.levels * self.feat_dim

    def encode(self, uv: np.ndarray) -> np.ndarray:
        uv = np.ascontiguousarray(np.atleast_2d(uv), dtype=np.float64)
        out = np.empty((uv.shape[0], self.output_dim))
        L = self.layout
        kernels.hash2d_forward(uv[:, None, :].copy(), self.table[None], L.offsets, L.res, L.dense, L.hsize, out)
        return out

    def backward(self, uv: np.ndarray, dout: np.ndarray, want_table: bool = True) -> np.ndarray:
        """Accumulate table gradients; return d loss / d(u, v) of shape (n, 2)."""
        uv = np.ascontiguousarray(np.atleast_2d(uv), dtype=np.float64)
        duv = np.zeros((uv.shape[0], 1, 2))
        L = self.layout
        grad = self.grad[None] if want_table else np.zeros((1, 1, self.feat_dim))
        kernels.hash2d_backward(uv[:, None, :].copy(), self.table[None], L.offsets, L.res, L.dense, L.hsize,
                                np.ascontiguousarray(dout, dtype=np.float64), grad, duv, want_table, True)
        return duv[:, 0, :]


def encode2d(plane: HashPlane2D, u: float, v: float) -> np.ndarray:
    return plane.encode(np.array([[u, v]]))[0]
