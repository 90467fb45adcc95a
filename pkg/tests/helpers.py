"""Shared builders for small scenes and the full render+loss gradient chain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from triplane_slam.geometry import CameraIntrinsics, Pose
from triplane_slam.losses import LossWeights, loss_and_grads
from triplane_slam.manager import SubMapManager
from triplane_slam.params import BetaParam, ParamBlock, finite_diff_check
from triplane_slam.renderer import RayBatch, SceneField, render_backward, render_batch, sample_batch_depths
from triplane_slam.submap import Decoders, EncoderConfig, SubMap

SMALL_INTR = CameraIntrinsics(20.0, 20.0, 7.5, 5.5, 16, 12)


def small_scene(seed: int = 0, grid_hash: bool = False, two_maps: bool = True, table_scale: float = 0.3,
                beta: float = 3.0, levels: int = 4, n_min: int = 4) -> SceneField:
    rng = np.random.default_rng(seed)
    enc = EncoderConfig(levels=levels, n_min=n_min, grid_hash=grid_hash)
    man = SubMapManager(enc=enc)
    man.add(SubMap([-1, -1, 0], [1, 1, 2], 0, enc, rng))
    if two_maps:
        man.add(SubMap([0.5, -1, 0], [2, 1, 2], 1, enc, rng))
    for sm in man:
        for blk in sm.blocks:
            blk.values[:] = rng.normal(0.0, table_scale, blk.values.size)
    dec = Decoders(enc.levels * enc.feat_dim, rng=rng, sdf_bias=0.2)
    return SceneField(man, dec, BetaParam(beta))


@dataclass
class ChainProblem:
    """A fixed ray batch over a small two-submap scene with two camera poses."""

    scene: SceneField
    poses: ParamBlock
    batch: RayBatch
    z: np.ndarray
    delta: float
    weights: LossWeights
    paper_literal: bool = False

    @property
    def vec7s(self) -> np.ndarray:
        return self.poses.values.reshape(-1, 7)

    def loss(self) -> float:
        br = render_batch(self.scene, self.vec7s, self.batch, self.z)
        terms, *_ = loss_and_grads(br.result.c_hat, br.result.d_hat, br.result.s, self.z, self.batch.gt_color,
                                   self.batch.gt_depth, self.delta, self.weights, self.paper_literal)
        return terms.total

    def backward(self) -> float:
        blocks = [*self.scene.scene_blocks(), self.poses]
        for blk in blocks:
            blk.zero_grad()
        br = render_batch(self.scene, self.vec7s, self.batch, self.z)
        terms, gc, gd, gs = loss_and_grads(br.result.c_hat, br.result.d_hat, br.result.s, self.z,
                                           self.batch.gt_color, self.batch.gt_depth, self.delta, self.weights,
                                           self.paper_literal)
        gp = render_backward(self.scene, self.vec7s, self.batch, br, gc, gd, gs, want_scene=True, want_pose=True)
        self.poses.grads[:] = gp.reshape(-1)
        return terms.total


def chain_problem(seed: int, grid_hash: bool = False, paper_literal: bool = False, n_rays: int = 12) -> ChainProblem:
    scene = small_scene(seed, grid_hash)
    rng = np.random.default_rng([seed, 99])
    half = n_rays // 2
    batch = RayBatch(np.array([0] * half + [1] * (n_rays - half)),
                     SMALL_INTR.camera_dirs(rng.uniform(0, 15, n_rays), rng.uniform(0, 11, n_rays)),
                     rng.random((n_rays, 3)), rng.uniform(0.5, 1.5, n_rays))
    delta = 0.1
    z = sample_batch_depths(batch.gt_depth, 0.05, 8, 4, delta, 4 * delta, rng)
    a = Pose.from_axis_angle(rng.normal(size=3), rng.uniform(0.1, 0.4), [rng.uniform(-0.2, 0.2), 0.0, 0.3])
    b = Pose.from_axis_angle(rng.normal(size=3), rng.uniform(0.1, 0.4), [0.9, 0.1, 0.2])
    poses = ParamBlock("poses", np.concatenate([a.to_vec7(), b.to_vec7()]))
    return ChainProblem(scene, poses, batch, z, delta, LossWeights(), paper_literal)


def significant(block: ParamBlock, rel: float = 1e-4, floor: float = 0.0) -> np.ndarray:
    """Coordinates whose analytic gradient is not negligible relative to the block's largest and ``floor``."""
    g = np.abs(block.grads)
    top = g.max() if g.size else 0.0
    return np.flatnonzero(g >= max(rel * top, floor)) if top > 0 else np.arange(0)


def chain_fd_errors(prob: ChainProblem, n_probe: int = 12, eps_range=(1e-7, 1e-4),
                    seed: int = 0) -> dict[str, float]:
    """Max relative analytic-vs-central-difference error for every parameter block of ``prob``.

    Each probed coordinate gets the smallest step that keeps the round-off of
    the difference quotient 1e4 x below its gradient. Small steps matter here:
    the field is piecewise smooth (bilinear cells, ReLUs) and a wide stencil
    straddles kinks. Coordinates that would need a step above ``eps_range[1]``
    are too flat to check and are skipped.
    """
    lo, hi = eps_range
    budget = 1e4 * np.finfo(float).eps * max(abs(prob.backward()), 1.0)
    rng = np.random.default_rng(seed)
    out = {}
    for blk in [*prob.scene.scene_blocks(), prob.poses]:
        pool = significant(blk, floor=budget / hi)
        probes = rng.choice(pool, size=min(n_probe, pool.size), replace=False) if pool.size else pool
        worst = 0.0
        for i in probes:
            h = float(np.clip(budget / abs(blk.grads[i]), lo, hi))
            worst = max(worst, finite_diff_check(prob.loss, blk, h, 1, rng, np.array([i])))
        out[blk.name] = worst
    return out


CRITERIA: dict[int, str] = {}


def report(n: int, title: str, ok: bool, detail: str) -> bool:
    """Record and print one pass/fail line for acceptance criterion ``n``."""
    line = f"criterion {n} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    CRITERIA[n] = line
    print(line)
    return ok
