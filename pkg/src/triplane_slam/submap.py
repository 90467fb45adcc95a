"""Local maps: tri-plane (or 3D grid) hash encoders plus the shared MLP decoders."""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .hash_plane import CollisionCounter, LevelLayout, init_table
from .params import ParamBlock

RES_PER_METER = 50


@dataclass(frozen=True)
class EncoderConfig:
    levels: int = 16
    n_min: int = 16
    feat_dim: int = 2
    grid_hash: bool = False
    table_lr: float = 1e-2


def finest_resolution(volume: float) -> int:
    """``floor(50 * V^(1/3))`` computed without cube-root rounding error."""
    # compare integer cubes against the exact value of the float volume
    target = Fraction(volume) * RES_PER_METER ** 3
    n = int(math.floor(RES_PER_METER * np.cbrt(volume)))
    while (n + 1) ** 3 <= target:
        n += 1
    while n > 0 and n ** 3 > target:
        n -= 1
    return n


def map_sizing(volume: float) -> tuple[int, int]:
    """(N_max, H) for a local map of ``volume`` cubic meters."""
    n_max = finest_resolution(volume)
    return n_max, n_max * n_max


def project_to_planes(p, bmin, bmax) -> np.ndarray:
    """Normalized plane coordinates (xy, xz, yz) for points ``p``; shape (..., 3, 2)."""
    p = np.asarray(p, dtype=np.float64)
    n = np.clip((p - bmin) / (np.asarray(bmax) - bmin), 0.0, 1.0)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([np.stack([x, y], -1), np.stack([x, z], -1), np.stack([y, z], -1)], axis=-2)


@dataclass(eq=False)
class SubMap:
    bmin: np.ndarray
    bmax: np.ndarray
    creation_index: int
    enc: EncoderConfig = field(default_factory=EncoderConfig)
    rng: np.random.Generator | None = None
    n_max: int = field(init=False)
    table_size: int = field(init=False)

    def __post_init__(self):
        self.bmin = np.asarray(self.bmin, dtype=np.float64).copy()
        self.bmax = np.asarray(self.bmax, dtype=np.float64).copy()
        if self.bmin.shape != (3,) or self.bmax.shape != (3,) or np.any(self.bmax - self.bmin <= 0):
            raise ValueError(f"degenerate submap bounds {self.bmin} .. {self.bmax}")
        self.n_max, self.table_size = map_sizing(self.volume)
        if self.n_max < self.enc.n_min:
            raise ValueError(f"submap volume {self.volume:.4f} m^3 too small for base resolution {self.enc.n_min}")
        rng = np.random.default_rng(self.creation_index) if self.rng is None else self.rng
        self.rng = None
        C = self.enc.feat_dim
        if self.enc.grid_hash:
            self.layout = LevelLayout.build(self.enc.n_min, self.n_max, self.enc.levels, 3 * self.table_size, dim=3)
            shape = (self.layout.total, C)
            n_fields = 1
        else:
            self.layout = LevelLayout.build(self.enc.n_min, self.n_max, self.enc.levels, self.table_size, dim=2)
            shape = (3, self.layout.total, C)
            n_fields = 3
        self.table_shape = shape
        self.sdf = ParamBlock(f"submap{self.creation_index}.sdf", init_table(rng, shape), self.enc.table_lr)
        self.color = ParamBlock(f"submap{self.creation_index}.color", init_table(rng, shape), self.enc.table_lr)
        self.sdf_collisions = CollisionCounter(self.layout, n_fields)

    @property
    def volume(self) -> float:
        return float(np.prod(self.bmax - self.bmin))

    @property
    def feature_dim(self) -> int:
        return self.enc.levels * self.enc.feat_dim

    @property
    def blocks(self) -> list[ParamBlock]:
        return [self.sdf, self.color]

    def contains(self, p) -> np.ndarray:
        p = np.asarray(p)
        return np.all((p >= self.bmin) & (p <= self.bmax), axis=-1)

    def coords(self, p) -> np.ndarray:
        if self.enc.grid_hash:
            return np.ascontiguousarray(np.clip((p - self.bmin) / (self.bmax - self.bmin), 0.0, 1.0))
        return np.ascontiguousarray(project_to_planes(p, self.bmin, self.bmax))

    def _encode(self, coords, block: ParamBlock) -> np.ndarray:
        L = self.layout
        out = np.empty((coords.shape[0], self.feature_dim))
        table = block.values.reshape(self.table_shape)
        if self.enc.grid_hash:
            kernels.hash3d_forward(coords, table, L.offsets, L.res, L.dense, L.hsize, out)
        else:
            kernels.hash2d_forward(coords, table, L.offsets, L.res, L.dense, L.hsize, out)
        return out

    def _backward(self, coords, block: ParamBlock, dout, want_table: bool, want_coords: bool) -> np.ndarray:
        L = self.layout
        table = block.values.reshape(self.table_shape)
        grad = block.grads.reshape(self.table_shape)
        dcoords = np.zeros(coords.shape)
        kernels_fn = kernels.hash3d_backward if self.enc.grid_hash else kernels.hash2d_backward
        kernels_fn(coords, table, L.offsets, L.res, L.dense, L.hsize, np.ascontiguousarray(dout),
                   grad, dcoords, want_table, want_coords)
        return dcoords

    def encode_features(self, p) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(F_s, F_c, coords) for world points ``p`` of shape (n, 3)."""
        c = self.coords(np.atleast_2d(p))
        return self._encode(c, self.sdf), self._encode(c, self.color), c

    def backward_features(self, coords, dfs, dfc, want_table: bool = True, want_points: bool = False):
        """Accumulate table gradients; optionally return d loss / d world point (n, 3)."""
        d_s = self._backward(coords, self.sdf, dfs, want_table, want_points)
        d_c = self._backward(coords, self.color, dfc, want_table, want_points)
        if not want_points:
            return None
        d = d_s + d_c
        if self.enc.grid_hash:
            dn = d
        else:
            dn = np.stack([d[:, 0, 0] + d[:, 1, 0], d[:, 0, 1] + d[:, 2, 0], d[:, 1, 1] + d[:, 2, 1]], axis=-1)
        return dn / (self.bmax - self.bmin)

    def mark_observed(self, coords) -> None:
        self.sdf_collisions.mark(coords[:, None, :] if self.enc.grid_hash else coords)

    def collision_count(self) -> int:
        return self.sdf_collisions.count()

    def manifest_line(self) -> str:
        vals = " ".join(repr(float(v)) for v in (*self.bmin, *self.bmax))
        return f"submap {self.creation_index} {vals} {self.n_max} {self.table_size} {int(self.enc.grid_hash)}"


def create_submap(bmin, bmax, creation_index: int = 0, enc: EncoderConfig | None = None,
                  rng: np.random.Generator | None = None) -> SubMap:
    return SubMap(bmin, bmax, creation_index, enc or EncoderConfig(), rng)


# -- decoders -----------------------------------------------------------------

class MLP:
    """Two hidden ReLU layers and a linear output, stored in one flat block."""

    def __init__(self, name: str, n_in: int, n_out: int, hidden: int = 32, lr: float = 1e-3,
                 rng: np.random.Generator | None = None, out_bias: float = 0.0):
        rng = np.random.default_rng(0) if rng is None else rng
        self.dims = [(n_in, hidden), (hidden, hidden), (hidden, n_out)]
        parts = []
        for i, (a, b) in enumerate(self.dims):
            lim = math.sqrt(6.0 / (a + b))
            parts.append(rng.uniform(-lim, lim, size=a * b))
            bias = np.zeros(b)
            if i == len(self.dims) - 1:
                bias[:] = out_bias
            parts.append(bias)
        self.block = ParamBlock(name, np.concatenate(parts), lr)

    def _views(self, arr):
        out, off = [], 0
        for a, b in self.dims:
            out.append(arr[off:off + a * b].reshape(a, b))
            off += a * b
            out.append(arr[off:off + b])
            off += b
        return out

    @property
    def layers(self):
        return self._views(self.block.values)

    def forward(self, x: np.ndarray):
        W1, b1, W2, b2, W3, b3 = self.layers
        a1 = x @ W1
        a1 += b1
        np.maximum(a1, 0.0, out=a1)
        a2 = a1 @ W2
        a2 += b2
        np.maximum(a2, 0.0, out=a2)
        y = a2 @ W3
        y += b3
        return y, (x, a1, a2)

    def backward(self, cache, dy: np.ndarray, want_params: bool = True, want_input: bool = True):
        # relu masks come from the activations: a > 0 exactly where z > 0
        x, a1, a2 = cache
        W1, _, W2, _, W3, _ = self.layers
        dz2 = dy @ W3.T
        dz2[a2 <= 0] = 0.0
        dz1 = dz2 @ W2.T
        dz1[a1 <= 0] = 0.0
        if want_params:
            gW1, gb1, gW2, gb2, gW3, gb3 = self._views(self.block.grads)
            gW3 += a2.T @ dy
            gb3 += dy.sum(axis=0)
            gW2 += a1.T @ dz2
            gb2 += dz2.sum(axis=0)
            gW1 += x.T @ dz1
            gb1 += dz1.sum(axis=0)
        return dz1 @ W1.T if want_input else None


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Decoders:
    """The globally shared TSDF and color decoders."""

    def __init__(self, feature_dim: int, hidden: int = 32, lr: float = 1e-3,
                 rng: np.random.Generator | None = None, sdf_bias: float = 0.0):
        rng = np.random.default_rng(0) if rng is None else rng
        self.f_s = MLP("decoder.sdf", feature_dim, 1, hidden, lr, rng, out_bias=sdf_bias)
        self.f_c = MLP("decoder.color", feature_dim, 3, hidden, lr, rng)

    @property
    def blocks(self) -> list[ParamBlock]:
        return [self.f_s.block, self.f_c.block]

    def forward(self, fs: np.ndarray, fc: np.ndarray):
        s, cache_s = self.f_s.forward(fs)
        logits, cache_c = self.f_c.forward(fc)
        if not np.all(np.isfinite(s)):
            raise FloatingPointError("non-finite output from TSDF decoder f_s")
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("non-finite output from color decoder f_c")
        c = sigmoid(logits)
        return s[:, 0], c, (cache_s, cache_c, c)

    def backward(self, cache, ds, dc, want_params: bool = True, want_input: bool = True):
        cache_s, cache_c, c = cache
        dfs = self.f_s.backward(cache_s, ds[:, None], want_params, want_input)
        dfc = self.f_c.backward(cache_c, dc * c * (1.0 - c), want_params, want_input)
        return dfs, dfc


def decode(decoders: Decoders, fs, fc) -> tuple[np.ndarray, np.ndarray]:
    s, c, _ = decoders.forward(np.atleast_2d(fs), np.atleast_2d(fc))
    return s, c
