"""TSDF volume rendering: ray sampling, density, weights, and batched render/backprop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import quat_matrix_jacobian, quat_to_matrix
from .params import BetaParam, ParamBlock
from .submap import Decoders, sigmoid
from .manager import SubMapManager

REGULAR, NEAR_SURFACE = 0, 1


@dataclass
class RaySamples:
    depths: np.ndarray
    flags: np.ndarray
    near: float
    far: float


def sample_ray_depths(d: float, near: float, far: float, n_g: int, n_d: int, delta: float,
                      rng: np.random.Generator) -> RaySamples:
    """Stratified samples on [near, far] plus uniform samples in [d - delta, d + delta]."""
    if not far > near:
        raise ValueError("far must exceed near")
    edges = np.linspace(near, far, n_g + 1)
    reg = edges[:-1] + (edges[1:] - edges[:-1]) * rng.random(n_g)
    if d > 0 and n_d > 0:
        surf = np.maximum(rng.uniform(d - delta, d + delta, n_d), near)
    else:
        surf = np.empty(0)
    depths = np.concatenate([reg, surf])
    flags = np.concatenate([np.full(n_g, REGULAR), np.full(surf.size, NEAR_SURFACE)]).astype(np.int8)
    order = np.argsort(depths, kind="stable")
    return RaySamples(depths[order], flags[order], near, far)


def sample_batch_depths(gt_depth: np.ndarray, near: float, n_g: int, n_d: int, delta: float,
                        far_margin: float, rng: np.random.Generator) -> np.ndarray:
    """Vectorized :func:`sample_ray_depths` for rays with valid depth; (R, n_g + n_d) sorted."""
    R = gt_depth.size
    far = gt_depth + far_margin
    span = (far - near)[:, None]
    reg = near + span * (np.arange(n_g)[None, :] + rng.random((R, n_g))) / n_g
    surf = gt_depth[:, None] + delta * (2.0 * rng.random((R, n_d)) - 1.0)
    z = np.concatenate([reg, np.maximum(surf, near)], axis=1)
    z.sort(axis=1)
    return z


def sdf_to_density(s, beta: float):
    return beta * sigmoid(-beta * np.asarray(s, dtype=np.float64))


def compute_weights(sigma) -> np.ndarray:
    """Termination weights along the last axis (no inter-sample spacing)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    acc = np.cumsum(sigma, axis=-1)
    excl = acc - sigma
    return np.exp(-excl) * -np.expm1(-sigma)


def weights_backward(sigma, w, gw) -> np.ndarray:
    """d loss / d sigma given d loss / d weights."""
    trans = np.exp(-(np.cumsum(sigma, axis=-1) - sigma))
    gw_w = gw * w
    # sum over later samples n > j of gw_n * w_n
    later = np.cumsum(gw_w[..., ::-1], axis=-1)[..., ::-1] - gw_w
    return gw * trans * np.exp(-sigma) - later


@dataclass
class RenderResult:
    c_hat: np.ndarray
    d_hat: np.ndarray
    s: np.ndarray
    c: np.ndarray
    sigma: np.ndarray
    w: np.ndarray


def render_ray(depths, s, c, beta: float) -> RenderResult:
    """Composite one ray from per-sample TSDF ``s`` (N,) and colors ``c`` (N, 3)."""
    s = np.asarray(s, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    sigma = sdf_to_density(s, beta)
    w = compute_weights(sigma)
    return RenderResult(w @ c, float(w @ np.asarray(depths)), s, c, sigma, w)


# -- scene field over all submaps ---------------------------------------------

FREE_SPACE_SDF = 1.0


class SceneField:
    """TSDF/color field over a submap collection with shared decoders and beta."""

    def __init__(self, manager: SubMapManager, decoders: Decoders, beta: BetaParam):
        self.manager = manager
        self.decoders = decoders
        self.beta = beta

    def scene_blocks(self) -> list[ParamBlock]:
        return [*self.manager.blocks(), *self.decoders.blocks, self.beta.block]

    def query(self, pts: np.ndarray):
        """TSDF (M,) and color (M, 3) at world points; points outside every submap are free space."""
        M = pts.shape[0]
        owner = self.manager.locate(pts)
        s = np.full(M, FREE_SPACE_SDF)
        c = np.zeros((M, 3))
        groups = []
        fs_parts, fc_parts = [], []
        for k, sm in enumerate(self.manager.submaps):
            idx = np.flatnonzero(owner == k)
            if idx.size == 0:
                continue
            fs, fc, coords = sm.encode_features(pts[idx])
            groups.append((sm, idx, coords))
            fs_parts.append(fs)
            fc_parts.append(fc)
        dec_cache = None
        inside = owner >= 0
        if groups:
            order = np.concatenate([g[1] for g in groups])
            s_in, c_in, dec_cache = self.decoders.forward(np.vstack(fs_parts), np.vstack(fc_parts))
            s[order] = s_in
            c[order] = c_in
        else:
            order = np.empty(0, dtype=np.int64)
        return s, c, (groups, order, dec_cache, inside)

    def backward(self, cache, ds, dc, want_scene: bool = True, want_points: bool = False,
                 mark_observed: bool = False):
        groups, order, dec_cache, _ = cache
        dpts = np.zeros((ds.shape[0], 3)) if want_points else None
        if not groups:
            return dpts
        dfs, dfc = self.decoders.backward(dec_cache, ds[order], dc[order], want_params=want_scene)
        start = 0
        for sm, idx, coords in groups:
            sl = slice(start, start + idx.size)
            start += idx.size
            d = sm.backward_features(coords, dfs[sl], dfc[sl], want_table=want_scene, want_points=want_points)
            if mark_observed:
                sm.mark_observed(coords)
            if want_points:
                dpts[idx] = d
        return dpts


# -- batched rendering with gradients -----------------------------------------

@dataclass
class RayBatch:
    """Rays from one or more frames; ``frame`` indexes the pose array used to render."""

    frame: np.ndarray
    dirs_cam: np.ndarray
    gt_color: np.ndarray
    gt_depth: np.ndarray

    def __len__(self) -> int:
        return self.frame.size

    def subset(self, mask) -> "RayBatch":
        return RayBatch(self.frame[mask], self.dirs_cam[mask], self.gt_color[mask], self.gt_depth[mask])

    @staticmethod
    def concat(batches) -> "RayBatch":
        return RayBatch(*(np.concatenate([getattr(b, f) for b in batches])
                          for f in ("frame", "dirs_cam", "gt_color", "gt_depth")))


def _pose_arrays(vec7s: np.ndarray):
    q = vec7s[:, :4]
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    rots = np.stack([quat_to_matrix(x) for x in qn])
    return qn, rots, vec7s[:, 4:]


def ray_points(vec7s: np.ndarray, batch: RayBatch, z: np.ndarray) -> np.ndarray:
    _, rots, trans = _pose_arrays(vec7s)
    v = z[..., None] * batch.dirs_cam[:, None, :]
    return np.einsum("rij,rnj->rni", rots[batch.frame], v) + trans[batch.frame][:, None, :]


@dataclass
class BatchRender:
    result: RenderResult
    z: np.ndarray
    pts: np.ndarray
    cache: tuple = field(repr=False)


def render_batch(scene: SceneField, vec7s: np.ndarray, batch: RayBatch, z: np.ndarray) -> BatchRender:
    R, N = z.shape
    pts = ray_points(vec7s, batch, z)
    s, c, cache = scene.query(pts.reshape(-1, 3))
    s = s.reshape(R, N)
    c = c.reshape(R, N, 3)
    sigma = sdf_to_density(s, scene.beta.value)
    w = compute_weights(sigma)
    c_hat = np.einsum("rn,rnk->rk", w, c)
    d_hat = np.sum(w * z, axis=1)
    return BatchRender(RenderResult(c_hat, d_hat, s, c, sigma, w), z, pts, cache)


def render_backward(scene: SceneField, vec7s: np.ndarray, batch: RayBatch, br: BatchRender,
                    g_chat, g_dhat, g_s, want_scene: bool = True, want_pose: bool = False,
                    mark_observed: bool = False) -> np.ndarray | None:
    """Backpropagate through compositing and the field.

    Scene gradients accumulate into the parameter blocks; if ``want_pose``,
    returns d loss / d vec7 per pose row (shape like ``vec7s``).
    """
    res = br.result
    beta = scene.beta.value
    R, N = res.s.shape
    gw = np.einsum("rk,rnk->rn", g_chat, res.c) + g_dhat[:, None] * br.z
    gc = res.w[..., None] * g_chat[:, None, :]
    gsigma = weights_backward(res.sigma, res.w, gw)
    t = sigmoid(-beta * res.s)
    dsig_ds = -beta * beta * t * (1.0 - t)
    gs = gsigma * dsig_ds + g_s
    if want_scene:
        dsig_dbeta = t - beta * res.s * t * (1.0 - t)
        scene.beta.accumulate(float(np.sum(gsigma * dsig_dbeta)))
    inside = br.cache[3].reshape(R, N)
    gs = np.where(inside, gs, 0.0)
    gc = np.where(inside[..., None], gc, 0.0)
    dpts = scene.backward(br.cache, gs.reshape(-1), gc.reshape(-1, 3), want_scene=want_scene,
                          want_points=want_pose, mark_observed=mark_observed)
    if not want_pose:
        return None
    return pose_backward(vec7s, batch, br.z, dpts.reshape(R, N, 3))


def pose_backward(vec7s: np.ndarray, batch: RayBatch, z: np.ndarray, dpts: np.ndarray) -> np.ndarray:
    """Chain d loss / d world point into d loss / d vec7 (through quaternion normalization)."""
    out = np.zeros_like(vec7s)
    v = z[..., None] * batch.dirs_cam[:, None, :]
    for f in np.unique(batch.frame):
        sel = batch.frame == f
        g = dpts[sel].reshape(-1, 3)
        vf = v[sel].reshape(-1, 3)
        out[f, 4:] = g.sum(axis=0)
        G = g.T @ vf
        q = vec7s[f, :4]
        norm = np.linalg.norm(q)
        qn = q / norm
        g_qn = np.einsum("kij,ij->k", quat_matrix_jacobian(qn), G)
        out[f, :4] = (g_qn - qn * (qn @ g_qn)) / norm
    return out
