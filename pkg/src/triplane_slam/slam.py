"""Frame loop: tracking, keyframe mapping with co-visible frames, global bundle adjustment."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose, backproject, constant_speed_predict, reproject, write_trajectory
from .losses import CSV_HEADER, LossTerms, LossWeights, loss_and_grads
from .manager import SubMapManager, sample_allocation_points
from .params import BetaParam, ParamBlock, adam_step, save_checkpoint
from .renderer import RayBatch, SceneField, ray_points, render_backward, render_batch, sample_batch_depths
from .submap import Decoders, EncoderConfig
from .synthetic import Frame

log = logging.getLogger(__name__)


@dataclass
class SlamConfig:
    # scheduling
    K: int = 5
    M: int = 8
    G: int = 10
    G_min: int = 4
    ba_interval: int = 20
    n_cam: int = 1024
    n_map: int = 2048
    iters_track: int = 10
    iters_map: int = 15
    iters_ba: int = 15
    iters_init: int = 100
    min_track_pixels: int = 50
    # submaps
    P: float = 0.2
    l: float = 1.0
    alloc_points: int = 1000
    depth_max: float = 10.0
    alloc_every_frame: bool = False
    # encoders and decoders
    levels: int = 16
    n_min: int = 16
    feat_dim: int = 2
    hidden: int = 32
    sdf_init_bias: float = 0.0
    # rendering
    delta: float = 0.06
    n_g: int = 32
    n_d: int = 8
    near: float = 0.05
    far_deltas: float = 4.0
    # losses
    w_rgb: float = 5.0
    w_depth: float = 0.1
    w_fs: float = 10.0
    w_mid: float = 200.0
    w_tail: float = 10.0
    # optimizer
    lr_table: float = 1e-2
    lr_mlp: float = 1e-3
    lr_beta: float = 1e-3
    lr_pose_track: float = 1e-3
    lr_pose_map: float = 5e-4
    beta_init: float = 10.0
    # co-visibility
    covis_points: int = 200
    covis_min: float = 0.05
    # ablations and experiments
    grid_hash: bool = False
    single_map: bool = False
    no_ba: bool = False
    paper_literal_tsdf: bool = False
    pose_noise_trans: float = 0.0
    pose_noise_rot_deg: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.ba_interval < self.K:
            raise ValueError("ba_interval must be >= K")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_rgb, self.w_depth, self.w_fs, self.w_mid, self.w_tail)

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.levels, self.n_min, self.feat_dim, self.grid_hash, self.lr_table)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass(eq=False)
class Keyframe:
    frame: Frame
    pose: ParamBlock
    frozen: bool = False

    @property
    def frame_index(self) -> int:
        return self.frame.index

    def current_pose(self) -> Pose:
        return Pose.from_vec7(self.pose.values)


def renormalize(block: ParamBlock) -> None:
    block.values[:4] /= np.linalg.norm(block.values[:4])


def valid_pixels(depth: np.ndarray, depth_max: float = math.inf) -> np.ndarray:
    d = depth.ravel()
    return np.flatnonzero((d > 0) & (d <= depth_max))


def select_covisible(db: list[Keyframe], pose: Pose, intr: CameraIntrinsics, M: int,
                     rng: np.random.Generator, n_points: int = 200, min_score: float = 0.05) -> list[Keyframe]:
    """Up to ``M`` keyframes whose surface points best re-project into ``pose``."""
    scored = []
    for kf in db:
        pix = valid_pixels(kf.frame.depth)
        if pix.size == 0:
            continue
        pick = rng.choice(pix, size=min(n_points, pix.size), replace=False)
        v, u = np.divmod(pick, intr.width)
        pts = backproject(intr, kf.current_pose(), u, v, kf.frame.depth[v, u])
        score = covisibility_score(pts, pose, intr)
        if score > min_score:
            scored.append((score, kf))
    scored.sort(key=lambda x: -x[0])
    return [kf for _, kf in scored[:M]]


def covisibility_score(pts_world: np.ndarray, pose: Pose, intr: CameraIntrinsics) -> float:
    u, v, z = reproject(intr, pose, pts_world)
    ok = (z > 0) & intr.in_bounds(u, v)
    return float(ok.mean()) if ok.size else 0.0


class SLAM:
    """Sequential tracking + mapping + bundle adjustment over an RGB-D stream."""

    def __init__(self, intr: CameraIntrinsics, cfg: SlamConfig | None = None):
        self.intr = intr
        self.cfg = cfg = cfg or SlamConfig()
        self.rng = np.random.default_rng(cfg.seed)
        self.manager = SubMapManager(cfg.P, cfg.l, cfg.encoder, single_map=cfg.single_map, seed=cfg.seed)
        feat = cfg.levels * cfg.feat_dim
        self.decoders = Decoders(feat, cfg.hidden, cfg.lr_mlp, np.random.default_rng([cfg.seed, 1]),
                                 sdf_bias=cfg.sdf_init_bias)
        self.beta = BetaParam(cfg.beta_init, cfg.lr_beta)
        self.scene = SceneField(self.manager, self.decoders, self.beta)
        self.weights = cfg.loss_weights
        self.keyframes: list[Keyframe] = []
        self._kf_by_frame: dict[int, Keyframe] = {}
        self.tracked: dict[int, Pose] = {}
        self.stamps: dict[int, float] = {}
        self.loss_rows: list[str] = []
        self._iter = 0

    # -- bookkeeping ------------------------------------------------------------

    def pose_of(self, index: int) -> Pose:
        kf = self._kf_by_frame.get(index)
        return kf.current_pose() if kf is not None else self.tracked[index]

    def trajectory(self) -> tuple[list[float], list[Pose]]:
        idx = sorted(self.tracked)
        return [self.stamps[i] for i in idx], [self.pose_of(i) for i in idx]

    def _log(self, phase: str, terms: LossTerms) -> None:
        self.loss_rows.append(terms.csv_row(self._iter))
        self._iter += 1
        log.debug("%s iter %d loss %.5f", phase, self._iter, terms.total)

    # -- ray sampling -------------------------------------------------------------

    def sample_rays(self, frame: Frame, n: int, slot: int) -> RayBatch:
        pix = valid_pixels(frame.depth)
        pick = self.rng.choice(pix, size=min(n, pix.size), replace=False)
        v, u = np.divmod(pick, self.intr.width)
        return RayBatch(
            np.full(pick.size, slot, dtype=np.int64),
            self.intr.camera_dirs(u, v),
            frame.color[v, u],
            frame.depth[v, u],
        )

    def _evaluate(self, vec7s: np.ndarray, batch: RayBatch, want_scene: bool, want_pose: bool):
        """One forward/backward pass; returns (terms, pose grads, touched submaps) or None if no ray survives."""
        cfg = self.cfg
        z = sample_batch_depths(batch.gt_depth, cfg.near, cfg.n_g, cfg.n_d, cfg.delta,
                                cfg.far_deltas * cfg.delta, self.rng)
        far = ray_points(vec7s, batch, z[:, -1:])[:, 0, :]
        keep = self.manager.filter_rays(far)
        if not keep.any():
            return None
        batch, z = batch.subset(keep), z[keep]
        br = render_batch(self.scene, vec7s, batch, z)
        terms, g_c, g_d, g_s = loss_and_grads(br.result.c_hat, br.result.d_hat, br.result.s, z,
                                              batch.gt_color, batch.gt_depth, cfg.delta, self.weights,
                                              cfg.paper_literal_tsdf)
        g_pose = render_backward(self.scene, vec7s, batch, br, g_c, g_d, g_s, want_scene=want_scene,
                                 want_pose=want_pose, mark_observed=want_scene)
        touched = [g[0] for g in br.cache[0]]
        return terms, g_pose, touched

    # -- phases -------------------------------------------------------------------

    def initialize_first_frame(self, frame: Frame, gt_pose: Pose | None) -> None:
        if gt_pose is None:
            raise ValueError("the first frame needs a ground-truth pose")
        self.tracked[frame.index] = gt_pose
        self.stamps[frame.index] = frame.timestamp
        self._allocate(frame, gt_pose)
        kf = self._insert_keyframe(frame, gt_pose, frozen=True)
        self._optimize([kf], [self.cfg.n_map], self.cfg.iters_init, "init")

    def track_frame(self, frame: Frame) -> Pose:
        cfg = self.cfg
        i = frame.index
        prev = self.pose_of(i - 1)
        prev2 = self.pose_of(i - 2) if (i - 2) in self.tracked else prev
        guess = constant_speed_predict(prev, prev2)
        guess = self._perturb(guess)
        if valid_pixels(frame.depth).size < cfg.min_track_pixels:
            log.warning("frame %d: too few valid depth pixels, keeping constant-speed pose", i)
            return guess
        block = ParamBlock("track", guess.to_vec7(), cfg.lr_pose_track)
        for _ in range(cfg.iters_track):
            batch = self.sample_rays(frame, cfg.n_cam, 0)
            out = self._evaluate(block.values[None, :], batch, want_scene=False, want_pose=True)
            if out is None:
                log.warning("frame %d: no rays inside any submap", i)
                break
            terms, g_pose, _ = out
            block.grads += g_pose[0]
            adam_step(block)
            renormalize(block)
            self._check_finite([block])
            self._log("track", terms)
        return Pose.from_vec7(block.values)

    def map_frame(self, frame: Frame, pose: Pose) -> None:
        cfg = self.cfg
        if not cfg.alloc_every_frame:
            self._allocate(frame, pose)
        covis = select_covisible(self.keyframes, pose, self.intr, cfg.M, self.rng,
                                 cfg.covis_points, cfg.covis_min)
        kf = self._insert_keyframe(frame, pose)
        frames = [kf, *covis]
        self._optimize(frames, self._split_rays(cfg.n_map, len(frames)), cfg.iters_map, "map")

    def global_ba(self) -> bool:
        cfg = self.cfg
        if len(self.keyframes) < cfg.G_min:
            log.info("bundle adjustment skipped: %d keyframes < %d", len(self.keyframes), cfg.G_min)
            return False
        g = min(cfg.G, len(self.keyframes))
        pick = sorted(self.rng.choice(len(self.keyframes), size=g, replace=False))
        frames = [self.keyframes[j] for j in pick]
        self._optimize(frames, self._split_rays(cfg.n_map, g, even=True), cfg.iters_ba, "ba")
        return True

    def process(self, frame: Frame) -> Pose:
        cfg = self.cfg
        i = frame.index
        if not self.tracked:
            self.initialize_first_frame(frame, frame.gt_pose)
            return self.tracked[i]
        pose = self.track_frame(frame)
        self.tracked[i] = pose
        self.stamps[i] = frame.timestamp
        if cfg.alloc_every_frame:
            self._allocate(frame, pose)
        if i % cfg.K == 0:
            self.map_frame(frame, pose)
        if i % cfg.ba_interval == 0 and not cfg.no_ba:
            self.global_ba()
        return self.pose_of(i)

    def run(self, frames) -> tuple[list[float], list[Pose]]:
        for frame in frames:
            self.process(frame)
            log.info("frame %d done", frame.index)
        return self.trajectory()

    # -- internals ------------------------------------------------------------------

    def _perturb(self, pose: Pose) -> Pose:
        cfg = self.cfg
        if cfg.pose_noise_trans <= 0 and cfg.pose_noise_rot_deg <= 0:
            return pose
        dt = self.rng.normal(0.0, cfg.pose_noise_trans, 3)
        axis = self.rng.normal(size=3)
        angle = math.radians(self.rng.normal(0.0, cfg.pose_noise_rot_deg))
        delta = Pose.from_axis_angle(axis, angle, dt)
        return Pose(delta.compose(Pose(pose.q, np.zeros(3))).q, pose.t + dt)

    def _allocate(self, frame: Frame, pose: Pose) -> None:
        pts = sample_allocation_points(frame.depth, self.intr, pose, self.cfg.alloc_points, self.rng,
                                       self.cfg.depth_max)
        self.manager.maybe_allocate(pts, pose.t, frame.index)

    def _insert_keyframe(self, frame: Frame, pose: Pose, frozen: bool = False) -> Keyframe:
        kf = Keyframe(frame, ParamBlock(f"pose{frame.index}", pose.to_vec7(), self.cfg.lr_pose_map,
                                        frozen=frozen), frozen)
        self.keyframes.append(kf)
        self._kf_by_frame[frame.index] = kf
        return kf

    @staticmethod
    def _split_rays(n: int, n_frames: int, even: bool = False) -> list[int]:
        if n_frames == 1:
            return [n]
        if even:
            base = [n // n_frames] * n_frames
        else:
            rest = n - n // 2
            base = [n // 2] + [rest // (n_frames - 1)] * (n_frames - 1)
        return base

    def _optimize(self, frames: list[Keyframe], counts: list[int], iters: int, phase: str) -> None:
        for _ in range(iters):
            batch = RayBatch.concat([self.sample_rays(kf.frame, n, j)
                                     for j, (kf, n) in enumerate(zip(frames, counts))])
            vec7s = np.stack([kf.pose.values for kf in frames])
            want_pose = any(not kf.frozen for kf in frames)
            out = self._evaluate(vec7s, batch, want_scene=True, want_pose=want_pose)
            if out is None:
                log.warning("%s: no rays inside any submap", phase)
                return
            terms, g_pose, touched = out
            stepped = []
            for sm in touched:
                for blk in sm.blocks:
                    adam_step(blk)
                    stepped.append(blk)
            for blk in (*self.decoders.blocks, self.beta.block):
                adam_step(blk)
                stepped.append(blk)
            if g_pose is not None:
                for j, kf in enumerate(frames):
                    if kf.frozen:
                        continue
                    kf.pose.grads += g_pose[j]
                    adam_step(kf.pose)
                    renormalize(kf.pose)
                    stepped.append(kf.pose)
            self._check_finite(stepped)
            self._log(phase, terms)

    @staticmethod
    def _check_finite(blocks) -> None:
        for blk in blocks:
            if not np.all(np.isfinite(blk.values)):
                raise FloatingPointError(f"non-finite parameters in block {blk.name!r}")

    # -- outputs ----------------------------------------------------------------------

    def all_blocks(self) -> list[ParamBlock]:
        return [*self.scene.scene_blocks(), *(kf.pose for kf in self.keyframes)]

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stamps, poses = self.trajectory()
        write_trajectory(out / "trajectory.txt", stamps, poses)
        extra = [sm.manifest_line() for sm in self.manager]
        extra.append(f"meta levels {self.cfg.levels} n_min {self.cfg.n_min} feat_dim {self.cfg.feat_dim} "
                     f"hidden {self.cfg.hidden}")
        save_checkpoint(out / "checkpoint", self.all_blocks(), extra)
        (out / "losses.csv").write_text(CSV_HEADER + "\n" + "\n".join(self.loss_rows) + "\n")
        self.manager.write_boundary_log(out / "submaps.txt")


def restore_scene(checkpoint) -> SceneField:
    """Rebuild the neural field saved by :meth:`SLAM.save` (poses are ignored)."""
    from .params import load_checkpoint
    from .submap import SubMap

    blocks, extra = load_checkpoint(checkpoint)
    meta = {}
    submap_lines = []
    for line in extra:
        parts = line.split()
        if parts[0] == "meta":
            meta.update(zip(parts[1::2], (int(v) for v in parts[2::2])))
        else:
            submap_lines.append(parts[1:])
    grid = any(int(p[-1]) for p in submap_lines)
    enc = EncoderConfig(meta.get("levels", 16), meta.get("n_min", 16), meta.get("feat_dim", 2), grid)
    manager = SubMapManager(enc=enc)
    for p in submap_lines:
        idx = int(p[0])
        vals = [float(v) for v in p[1:7]]
        sm = SubMap(vals[:3], vals[3:], idx, enc)
        for blk in sm.blocks:
            saved = blocks.get(blk.name)
            if saved is None or saved.values.size != blk.values.size:
                raise ValueError(f"checkpoint block {blk.name!r} missing or mis-sized")
            blk.values[...] = saved.values.reshape(blk.values.shape)
        manager.add(sm)
    decoders = Decoders(enc.levels * enc.feat_dim, meta.get("hidden", 32))
    for blk in decoders.blocks:
        saved = blocks.get(blk.name)
        if saved is None or saved.values.size != blk.values.size:
            raise ValueError(f"checkpoint block {blk.name!r} missing or mis-sized")
        blk.values[...] = saved.values
    beta = BetaParam()
    beta.block.values[...] = blocks["log_beta"].values
    return SceneField(manager, decoders, beta)
