"""Photometric, depth, free-space and TSDF objectives with their gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

FS, MID, TAIL = 0, 1, 2
MID_FRACTION = 0.4


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 5.0
    depth: float = 0.1
    fs: float = 10.0
    mid: float = 200.0
    tail: float = 10.0

    def __post_init__(self):
        for name in ("rgb", "depth", "fs", "mid", "tail"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if not self.mid > self.tail:
            raise ValueError("the mid-band weight must exceed the tail weight")


@dataclass
class LossTerms:
    rgb: float
    depth: float
    fs: float
    mid: float
    tail: float
    total: float

    @property
    def tsdf(self) -> float:
        return self.mid + self.tail

    def csv_row(self, it: int) -> str:
        return f"{it},{self.rgb:.9g},{self.depth:.9g},{self.fs:.9g},{self.mid:.9g},{self.tail:.9g},{self.total:.9g}"


CSV_HEADER = "iter,L_rgb,L_depth,L_fs,L_mid,L_tail,total"


def classify_samples(d_p, d_r, delta: float) -> np.ndarray:
    """Label each sample FS, MID or TAIL by its depth offset from the surface.

    ``d_p``: (..., N) sample depths, ``d_r``: (...) ray depths.
    """
    off = np.abs(np.asarray(d_p, dtype=np.float64) - np.asarray(d_r, dtype=np.float64)[..., None])
    labels = np.full(off.shape, TAIL, dtype=np.int8)
    labels[off > delta] = FS
    labels[off <= MID_FRACTION * delta] = MID
    return labels


def photometric_losses(c_hat, d_hat, gt_c, gt_d) -> tuple[float, float]:
    c_hat, gt_c = np.atleast_2d(c_hat), np.atleast_2d(gt_c)
    d_hat, gt_d = np.atleast_1d(d_hat), np.atleast_1d(gt_d)
    if c_hat.shape[0] == 0:
        raise ValueError("empty ray batch")
    return float(np.mean((c_hat - gt_c) ** 2)), float(np.mean((d_hat - gt_d) ** 2))


def tsdf_targets(d_p, d_r, delta: float, paper_literal: bool = False) -> np.ndarray:
    diff = np.asarray(d_r)[..., None] - d_p
    # literal form: residual s + d_r - d_p, target in meters with opposite sign
    return -diff if paper_literal else diff / delta


def _set_mean(values, mask):
    """Per-ray mean of ``values`` over ``mask`` (0 for empty sets) and the 1/|set| factors."""
    count = mask.sum(axis=-1)
    inv = np.where(count > 0, 1.0 / np.maximum(count, 1), 0.0)
    return (values * mask).sum(axis=-1) * inv, inv


def sdf_losses(s, labels, d_p, d_r, delta: float, weights: LossWeights,
               paper_literal: bool = False) -> tuple[float, float, float]:
    """(L_fs, L_mid, L_tail), each averaged over rays."""
    s = np.atleast_2d(s)
    target = tsdf_targets(d_p, d_r, delta, paper_literal)
    fs, _ = _set_mean((s - 1.0) ** 2, labels == FS)
    mid, _ = _set_mean((s - target) ** 2, labels == MID)
    tail, _ = _set_mean((s - target) ** 2, labels == TAIL)
    return float(fs.mean()), weights.mid * float(mid.mean()), weights.tail * float(tail.mean())


def total_loss(l_rgb: float, l_depth: float, l_fs: float, l_tsdf: float, weights: LossWeights) -> float:
    for name, val in (("L_rgb", l_rgb), ("L_depth", l_depth), ("L_fs", l_fs), ("L_tsdf", l_tsdf)):
        if not math.isfinite(val):
            raise FloatingPointError(f"non-finite loss component {name}")
    return weights.rgb * l_rgb + weights.depth * l_depth + weights.fs * l_fs + l_tsdf


def loss_and_grads(c_hat, d_hat, s, d_p, gt_c, gt_d, delta: float, weights: LossWeights,
                   paper_literal: bool = False):
    """All loss terms plus gradients of the total w.r.t. c_hat (R,3), d_hat (R,), s (R,N)."""
    R = c_hat.shape[0]
    if R == 0:
        raise ValueError("empty ray batch")
    l_rgb, l_depth = photometric_losses(c_hat, d_hat, gt_c, gt_d)
    labels = classify_samples(d_p, gt_d, delta)
    target = tsdf_targets(d_p, gt_d, delta, paper_literal)

    fs_val, fs_inv = _set_mean((s - 1.0) ** 2, labels == FS)
    mid_val, mid_inv = _set_mean((s - target) ** 2, labels == MID)
    tail_val, tail_inv = _set_mean((s - target) ** 2, labels == TAIL)
    l_fs = float(fs_val.mean())
    l_mid = weights.mid * float(mid_val.mean())
    l_tail = weights.tail * float(tail_val.mean())
    total = total_loss(l_rgb, l_depth, l_fs, l_mid + l_tail, weights)

    g_c = weights.rgb * 2.0 * (c_hat - gt_c) / (3 * R)
    g_d = weights.depth * 2.0 * (d_hat - gt_d) / R
    g_s = np.zeros_like(s)
    g_s += np.where(labels == FS, (weights.fs * 2.0 / R) * fs_inv[:, None] * (s - 1.0), 0.0)
    g_s += np.where(labels == MID, (weights.mid * 2.0 / R) * mid_inv[:, None] * (s - target), 0.0)
    g_s += np.where(labels == TAIL, (weights.tail * 2.0 / R) * tail_inv[:, None] * (s - target), 0.0)
    terms = LossTerms(l_rgb, l_depth, l_fs, l_mid, l_tail, total)
    return terms, g_c, g_d, g_s
