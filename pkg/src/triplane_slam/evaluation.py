"""Trajectory and reconstruction metrics, mesh extraction and frustum culling."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates
from skimage.measure import marching_cubes

from .geometry import CameraIntrinsics, Pose, backproject, reproject
from .renderer import RayBatch, SceneField, render_batch, sample_batch_depths


def align_rigid(est: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation R and translation t minimizing sum |R est + t - gt|^2 (scale fixed to 1)."""
    mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
    H = (est - mu_e).T @ (gt - mu_g)
    U, _, Vt = np.linalg.svd(H)
    S = np.eye(3)
    if np.linalg.det(Vt.T @ U.T) < 0:
        S[2, 2] = -1.0
    R = Vt.T @ S @ U.T
    return R, mu_g - R @ mu_e


def ate_rmse(est: Sequence[Pose], gt: Sequence[Pose]) -> float:
    """Absolute trajectory error after rigid alignment, in centimeters."""
    if len(est) != len(gt):
        raise ValueError(f"trajectory length mismatch: {len(est)} estimated vs {len(gt)} ground truth")
    if not est:
        raise ValueError("empty trajectory")
    e = np.array([p.t for p in est])
    g = np.array([p.t for p in gt])
    R, t = align_rigid(e, g)
    resid = e @ R.T + t - g
    return 100.0 * float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1))))


def render_depth_image(scene: SceneField, pose: Pose, intr: CameraIntrinsics, gt_depth: np.ndarray,
                       stride: int = 1, delta: float = 0.06, n_g: int = 32, n_d: int = 8,
                       near: float = 0.05, far_deltas: float = 4.0, seed: int = 0):
    """Rendered depth at valid pixels of a strided grid; returns (rendered, gt)."""
    v, u = np.mgrid[0:intr.height:stride, 0:intr.width:stride]
    u, v = u.ravel(), v.ravel()
    d = gt_depth[v, u]
    ok = d > 0
    u, v, d = u[ok], v[ok], d[ok]
    if d.size == 0:
        return np.empty(0), np.empty(0)
    batch = RayBatch(np.zeros(d.size, dtype=np.int64), intr.camera_dirs(u, v), np.zeros((d.size, 3)), d)
    z = sample_batch_depths(d, near, n_g, n_d, delta, far_deltas * delta, np.random.default_rng(seed))
    br = render_batch(scene, pose.to_vec7()[None], batch, z)
    return br.result.d_hat, d


def depth_l1_from_renders(rendered: Sequence[np.ndarray], gt: Sequence[np.ndarray]) -> float:
    r = np.concatenate([np.ravel(x) for x in rendered]) if rendered else np.empty(0)
    g = np.concatenate([np.ravel(x) for x in gt]) if gt else np.empty(0)
    ok = g > 0
    if not ok.any():
        raise ValueError("no valid depth pixels")
    return 100.0 * float(np.mean(np.abs(r[ok] - g[ok])))


def depth_l1(scene: SceneField, poses: Sequence[Pose], gt_depths: Sequence[np.ndarray],
             intr: CameraIntrinsics, stride: int = 1, **render_kw) -> float:
    """Mean |rendered - gt| depth over valid pixels of every ``stride``-th frame and pixel, in cm."""
    rendered, gts = [], []
    for pose, gd in list(zip(poses, gt_depths))[::stride]:
        r, g = render_depth_image(scene, pose, intr, gd, stride, **render_kw)
        rendered.append(r)
        gts.append(g)
    return depth_l1_from_renders(rendered, gts)


# -- meshes -------------------------------------------------------------------

MIN_FACE_AREA = 1e-12


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    def subset_faces(self, keep: np.ndarray) -> "TriangleMesh":
        faces = self.faces[keep]
        used = np.unique(faces)
        remap = np.full(len(self.vertices), -1, dtype=np.int64)
        remap[used] = np.arange(used.size)
        colors = self.colors[used] if self.colors is not None else None
        return TriangleMesh(self.vertices[used], remap[faces], colors)

    def sample_points(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if len(self.faces) == 0:
            return np.empty((0, 3))
        areas = self.face_areas()
        f = rng.choice(len(self.faces), size=n, p=areas / areas.sum())
        r1, r2 = rng.random(n), rng.random(n)
        s = np.sqrt(r1)
        a, b, c = (self.vertices[self.faces[f, k]] for k in range(3))
        return (1 - s)[:, None] * a + (s * (1 - r2))[:, None] * b + (s * r2)[:, None] * c

    def edge_use_counts(self) -> np.ndarray:
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def write_ply(self, path) -> None:
        lines = ["ply", "format ascii 1.0", f"element vertex {len(self.vertices)}",
                 "property float x", "property float y", "property float z"]
        if self.colors is not None:
            lines += ["property uchar red", "property uchar green", "property uchar blue"]
        lines += [f"element face {len(self.faces)}", "property list uchar int vertex_indices", "end_header"]
        body = []
        cols = None if self.colors is None else np.clip(np.round(self.colors * 255), 0, 255).astype(int)
        for i, v in enumerate(self.vertices):
            row = f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}"
            if cols is not None:
                row += f" {cols[i, 0]} {cols[i, 1]} {cols[i, 2]}"
            body.append(row)
        body += [f"3 {a} {b} {c}" for a, b, c in self.faces]
        Path(path).write_text("\n".join(lines + body) + "\n")


def read_ply(path) -> TriangleMesh:
    lines = Path(path).read_text().splitlines()
    nv = nf = 0
    has_color = False
    i = 0
    while lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        elif parts[:2] == ["property", "uchar"] and parts[2] == "red":
            has_color = True
        i += 1
    rows = [ln.split() for ln in lines[i + 1:i + 1 + nv]]
    verts = np.array([[float(x) for x in r[:3]] for r in rows]).reshape(-1, 3)
    colors = np.array([[int(x) for x in r[3:6]] for r in rows]).reshape(-1, 3) / 255.0 if has_color else None
    faces = np.array([[int(x) for x in ln.split()[1:4]] for ln in lines[i + 1 + nv:i + 1 + nv + nf]])
    return TriangleMesh(verts, faces.reshape(-1, 3), colors)


def _query_sdf(scene: SceneField, pts: np.ndarray, chunk: int = 200_000) -> np.ndarray:
    out = np.empty(pts.shape[0])
    for a in range(0, pts.shape[0], chunk):
        s, _, _ = scene.query(pts[a:a + chunk])
        out[a:a + chunk] = s
    return out


def _query_color(scene: SceneField, pts: np.ndarray, chunk: int = 200_000) -> np.ndarray:
    out = np.empty((pts.shape[0], 3))
    for a in range(0, pts.shape[0], chunk):
        _, c, _ = scene.query(pts[a:a + chunk])
        out[a:a + chunk] = c
    return out


def sdf_grid(scene: SceneField, bmin: np.ndarray, shape: tuple[int, int, int], voxel: float,
             refine: int = 4, band: float = 0.5) -> np.ndarray:
    """TSDF on a uniform grid, evaluated exactly only near the zero level.

    A grid ``refine`` times coarser is evaluated first; coarse cells whose
    corners change sign or come within ``band`` of zero (dilated by one cell)
    are evaluated at full resolution, the rest is trilinearly upsampled,
    which cannot introduce a zero crossing.
    """
    shape = tuple(int(s) for s in shape)
    if refine <= 1:
        axes = [bmin[a] + voxel * np.arange(shape[a]) for a in range(3)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
        return _query_sdf(scene, pts).reshape(shape)
    cshape = tuple((s - 1 + refine - 1) // refine + 1 for s in shape)
    cvox = voxel * refine
    axes = [bmin[a] + cvox * np.arange(cshape[a]) for a in range(3)]
    cpts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    cs = _query_sdf(scene, cpts).reshape(cshape)

    fine_idx = np.stack(np.meshgrid(*[np.arange(s) for s in shape], indexing="ij"), 0).reshape(3, -1)
    grid = map_coordinates(cs, fine_idx / refine, order=1, mode="nearest").reshape(shape)

    cells = np.zeros(tuple(c - 1 for c in cshape), dtype=bool)
    corners = [cs[i:i + cshape[0] - 1, j:j + cshape[1] - 1, k:k + cshape[2] - 1]
               for i in (0, 1) for j in (0, 1) for k in (0, 1)]
    cmin = np.minimum.reduce(corners)
    cmax = np.maximum.reduce(corners)
    cells = (cmin <= 0) & (cmax >= 0) | (np.minimum(np.abs(cmin), np.abs(cmax)) < band)
    from scipy.ndimage import binary_dilation

    cells = binary_dilation(cells, iterations=1)
    mark = np.zeros(shape, dtype=bool)
    for ci, cj, ck in np.argwhere(cells):
        mark[ci * refine:(ci + 1) * refine + 1, cj * refine:(cj + 1) * refine + 1,
             ck * refine:(ck + 1) * refine + 1] = True
    idx = np.argwhere(mark)
    if idx.size:
        grid[mark] = _query_sdf(scene, bmin + voxel * idx)
    return grid


def extract_mesh(scene: SceneField, voxel: float = 0.02, refine: int = 4, with_color: bool = True,
                 bmin=None, bmax=None) -> TriangleMesh:
    """Marching cubes on the zero level of the field over the union of submap bounds."""
    subs = scene.manager.submaps
    if not subs:
        raise ValueError("cannot extract a mesh from an empty submap manager")
    lo = np.min([s.bmin for s in subs], axis=0) if bmin is None else np.asarray(bmin, dtype=np.float64)
    hi = np.max([s.bmax for s in subs], axis=0) if bmax is None else np.asarray(bmax, dtype=np.float64)
    shape = tuple(int(np.floor((hi[a] - lo[a]) / voxel)) + 1 for a in range(3))
    grid = sdf_grid(scene, lo, shape, voxel, refine)
    if not (grid.min() < 0 < grid.max()):
        return TriangleMesh(np.empty((0, 3)), np.empty((0, 3), dtype=np.int64))
    verts, faces, _, _ = marching_cubes(grid, level=0.0, spacing=(voxel, voxel, voxel))
    mesh = TriangleMesh(verts + lo, faces[:, ::-1])
    mesh = mesh.subset_faces(mesh.face_areas() > MIN_FACE_AREA)
    if with_color and len(mesh.vertices):
        mesh.colors = _query_color(scene, mesh.vertices)
    return mesh


def cull_mesh(mesh: TriangleMesh, poses: Sequence[Pose], intr: CameraIntrinsics,
              depths: Sequence[np.ndarray], margin: float = 0.12) -> TriangleMesh:
    """Keep faces whose centroid is seen, unoccluded, by at least one frame."""
    cen = mesh.centroids()
    keep = np.zeros(len(cen), dtype=bool)
    for pose, depth in zip(poses, depths):
        todo = np.flatnonzero(~keep)
        if todo.size == 0:
            break
        u, v, z = reproject(intr, pose, cen[todo])
        ok = (z > 0) & intr.in_bounds(u, v)
        ui = np.clip(np.round(u[ok]).astype(np.int64), 0, intr.width - 1)
        vi = np.clip(np.round(v[ok]).astype(np.int64), 0, intr.height - 1)
        obs = depth[vi, ui]
        seen = (obs > 0) & (z[ok] <= obs + margin)
        keep[todo[ok][seen]] = True
    return mesh.subset_faces(keep)


def observed_surface_points(poses: Sequence[Pose], depths: Sequence[np.ndarray], intr: CameraIntrinsics,
                            n: int, rng: np.random.Generator) -> np.ndarray:
    pts = []
    for pose, depth in zip(poses, depths):
        v, u = np.nonzero(depth > 0)
        pts.append(backproject(intr, pose, u, v, depth[v, u]))
    allpts = np.vstack(pts)
    return allpts[rng.choice(len(allpts), size=min(n, len(allpts)), replace=False)]


def _nearest_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    from scipy.spatial import cKDTree

    return cKDTree(b).query(a)[0]


def chamfer_metrics(mesh: TriangleMesh, scene_sdf, gt_points: np.ndarray, n: int = 10_000,
                    rng: np.random.Generator | None = None) -> dict[str, float]:
    """Accuracy (mesh -> analytic surface) and completion (observed surface -> mesh), cm."""
    rng = np.random.default_rng(0) if rng is None else rng
    if len(mesh.faces) == 0:
        return {"accuracy_cm": float("inf"), "completion_cm": float("inf")}
    mpts = mesh.sample_points(n, rng)
    acc = np.abs(scene_sdf(mpts))
    comp = _nearest_dist(gt_points, mesh.sample_points(max(n, 4 * len(gt_points)), rng))
    return {"accuracy_cm": 100.0 * float(acc.mean()), "completion_cm": 100.0 * float(comp.mean())}
