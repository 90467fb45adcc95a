"""Submap bookkeeping: allocation on novel observations, point lookup, ray filtering."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose, backproject
from .submap import EncoderConfig, SubMap

log = logging.getLogger(__name__)


class InsufficientDepth(ValueError):
    pass


class SubMapManager:
    def __init__(self, threshold: float = 0.2, expansion: float = 1.0, enc: EncoderConfig | None = None,
                 single_map: bool = False, seed: int = 0):
        self.submaps: list[SubMap] = []
        self.threshold = threshold
        self.expansion = expansion
        self.enc = enc or EncoderConfig()
        self.single_map = single_map
        self.seed = seed
        self.allocation_log: list[tuple[int, np.ndarray, np.ndarray]] = []

    def __len__(self) -> int:
        return len(self.submaps)

    def __iter__(self):
        return iter(self.submaps)

    def add(self, submap: SubMap, frame_index: int = -1) -> SubMap:
        if self.submaps and submap.creation_index <= self.submaps[-1].creation_index:
            raise ValueError("creation indices must increase")
        self.submaps.append(submap)
        self.allocation_log.append((frame_index, submap.bmin.copy(), submap.bmax.copy()))
        return submap

    def locate(self, p) -> np.ndarray:
        """Position in ``self.submaps`` of the oldest submap containing each point, or -1."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        owner = np.full(p.shape[0], -1, dtype=np.int64)
        for k, sm in enumerate(self.submaps):
            free = owner < 0
            if not free.any():
                break
            hit = free & sm.contains(p)
            owner[hit] = k
        return owner

    def locate_one(self, p) -> int | None:
        k = int(self.locate(p)[0])
        return None if k < 0 else self.submaps[k].creation_index

    def maybe_allocate(self, world_points, cam_pos, frame_index: int = -1) -> SubMap | None:
        pts = np.atleast_2d(np.asarray(world_points, dtype=np.float64))
        if pts.shape[0] == 0:
            raise ValueError("empty point list")
        if self.single_map and self.submaps:
            return None
        outside = self.locate(pts) < 0
        frac = float(outside.mean())
        if self.submaps and frac <= self.threshold:
            return None
        cloud = np.vstack([pts[outside], np.asarray(cam_pos, dtype=np.float64)[None]])
        bmin = cloud.min(axis=0) - self.expansion
        bmax = cloud.max(axis=0) + self.expansion
        index = self.submaps[-1].creation_index + 1 if self.submaps else 0
        rng = np.random.default_rng([self.seed, index])
        sm = SubMap(bmin, bmax, index, self.enc, rng)
        log.info("allocated submap %d (%.1f m^3, N_max=%d) at frame %d, %.0f%% points outside",
                 index, sm.volume, sm.n_max, frame_index, 100 * frac)
        return self.add(sm, frame_index)

    def filter_rays(self, far_points) -> np.ndarray:
        """Boolean mask of rays whose far-bound point lies in some submap."""
        return self.locate(far_points) >= 0

    def blocks(self):
        for sm in self.submaps:
            yield from sm.blocks

    def write_boundary_log(self, path) -> None:
        lines = []
        for frame, bmin, bmax in self.allocation_log:
            vals = " ".join(f"{v:.6f}" for v in (*bmin, *bmax))
            lines.append(f"{frame} {vals}")
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def remove_outliers(pts: np.ndarray, factor: float = 3.0) -> np.ndarray:
    """Drop points farther from the centroid than ``factor`` x the RMS centroid distance."""
    dist = np.linalg.norm(pts - pts.mean(axis=0), axis=1)
    rms = np.sqrt(np.mean(dist ** 2))
    return pts[dist <= factor * rms]


def sample_allocation_points(depth: np.ndarray, intr: CameraIntrinsics, pose: Pose, n: int,
                             rng: np.random.Generator, depth_max: float = 10.0) -> np.ndarray:
    h, w = depth.shape
    flat = rng.integers(0, h * w, size=n)
    v, u = np.divmod(flat, w)
    d = depth[v, u]
    ok = (d > 0) & (d <= depth_max)
    if ok.sum() < 10:
        raise InsufficientDepth("insufficient depth")
    pts = backproject(intr, pose, u[ok], v[ok], d[ok])
    return remove_outliers(pts)
