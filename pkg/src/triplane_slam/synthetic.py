"""Analytic SDF scenes, a sphere-tracing RGB-D renderer, and dataset file I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose, format_trajectory, look_at, read_trajectory

HIT_EPS = 1e-4
MAX_DIST = 10.0
MAX_STEPS = 512


@dataclass(frozen=True)
class Primitive:
    shape: str
    center: tuple[float, float, float]
    size: tuple[float, ...]
    color: tuple[float, float, float]
    op: str = "union"

    def __post_init__(self):
        if self.shape not in ("box", "sphere"):
            raise ValueError(f"unknown primitive {self.shape!r}")
        if self.op not in ("union", "subtraction"):
            raise ValueError(f"unknown csg op {self.op!r}")

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = p - np.asarray(self.center)
        if self.shape == "sphere":
            return np.linalg.norm(q, axis=-1) - self.size[0]
        d = np.abs(q) - np.asarray(self.size)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        return outside + np.minimum(d.max(axis=-1), 0.0)


@dataclass
class AnalyticScene:
    primitives: list[Primitive]
    bmin: np.ndarray
    bmax: np.ndarray
    name: str = "custom"

    def sdf_and_color(self, p) -> tuple[np.ndarray, np.ndarray]:
        if not self.primitives:
            raise ValueError("empty scene")
        p = np.asarray(p, dtype=np.float64)
        first = self.primitives[0]
        d = first.sdf(p)
        col = np.broadcast_to(np.asarray(first.color, dtype=np.float64), p.shape).copy()
        for prim in self.primitives[1:]:
            b = prim.sdf(p)
            if prim.op == "union":
                closer = b < d
                d = np.where(closer, b, d)
                col[closer] = prim.color
            else:
                d = np.maximum(d, -b)
        return d, col

    def sdf(self, p) -> np.ndarray:
        return self.sdf_and_color(p)[0]

    def color(self, p) -> np.ndarray:
        return self.sdf_and_color(p)[1]


def scene_sdf(scene: AnalyticScene, p) -> np.ndarray:
    return scene.sdf(p)


def scene_color(scene: AnalyticScene, p) -> np.ndarray:
    return scene.color(p)


def box_room() -> AnalyticScene:
    """A 4 x 4 x 3 m room with distinctly colored walls, a sphere and a box."""
    hx, hy, hz = 2.0, 2.0, 1.5
    t = 0.1
    slabs = [
        Primitive("box", (0, 0, -t), (hx + t, hy + t, t), (0.55, 0.45, 0.35)),
        Primitive("box", (0, 0, 2 * hz + t), (hx + t, hy + t, t), (0.9, 0.9, 0.85)),
        Primitive("box", (hx + t, 0, hz), (t, hy + t, hz + t), (0.85, 0.25, 0.2)),
        Primitive("box", (-hx - t, 0, hz), (t, hy + t, hz + t), (0.2, 0.6, 0.3)),
        Primitive("box", (0, hy + t, hz), (hx + t, t, hz + t), (0.2, 0.35, 0.8)),
        Primitive("box", (0, -hy - t, hz), (hx + t, t, hz + t), (0.9, 0.8, 0.2)),
    ]
    room = [*slabs, Primitive("box", (0, 0, hz), (hx, hy, hz), (0, 0, 0), op="subtraction")]
    props = [
        Primitive("sphere", (0.3, 0.25, 0.25), (0.25,), (0.8, 0.3, 0.7)),
        Primitive("box", (-0.3, -0.25, 0.2), (0.25, 0.2, 0.2), (0.2, 0.75, 0.8)),
    ]
    return AnalyticScene(room + props, np.array([-hx, -hy, 0.0]), np.array([hx, hy, 2 * hz]), "box-room")


def single_sphere(radius: float = 0.5, center=(0.0, 0.0, 0.0)) -> AnalyticScene:
    c = np.asarray(center, dtype=np.float64)
    return AnalyticScene([Primitive("sphere", tuple(c), (radius,), (0.8, 0.4, 0.2))],
                         c - 2 * radius, c + 2 * radius, "sphere")


SCENES = {"box-room": box_room, "sphere": single_sphere}


# -- trajectories ---------------------------------------------------------------

@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "orbit"
    frames: int = 100
    target: tuple[float, float, float] = (0.0, 0.0, 0.8)
    center: tuple[float, float, float] = (0.0, 0.0, 1.5)
    radius: float = 1.2
    sweep: float = 0.5 * math.pi
    waypoints: tuple = field(default_factory=tuple)

    def poses(self) -> list[Pose]:
        n = self.frames
        cx, cy, cz = self.center
        out = []
        for i in range(n):
            s = i / max(n - 1, 1)
            if self.kind == "orbit":
                # eased so the camera starts and stops at rest
                a = self.sweep * s * s * (3 - 2 * s)
                eye = (cx + self.radius * math.cos(a), cy + self.radius * math.sin(a), cz)
            elif self.kind == "lissajous":
                a = 2 * math.pi * s
                # the phase keeps the eye off the vertical line through the target
                eye = (cx + self.radius * math.sin(a), cy + 0.6 * self.radius * math.sin(2 * a + 0.25 * math.pi),
                       cz + 0.2 * math.sin(3 * a))
            elif self.kind == "waypoint-lerp":
                if len(self.waypoints) < 2:
                    raise ValueError("waypoint-lerp needs at least two waypoints")
                wp = np.asarray(self.waypoints, dtype=np.float64)
                x = s * (len(wp) - 1)
                k = min(int(x), len(wp) - 2)
                eye = tuple((1 - (x - k)) * wp[k] + (x - k) * wp[k + 1])
            else:
                raise ValueError(f"unknown trajectory kind {self.kind!r}")
            out.append(look_at(eye, self.target))
        return out


DEFAULT_INTRINSICS = CameraIntrinsics(fx=50.0, fy=50.0, cx=31.5, cy=23.5, width=64, height=48, depth_scale=5000.0)


# -- sphere tracing -------------------------------------------------------------

def render_gt_frame(scene: AnalyticScene, intr: CameraIntrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Color (H, W, 3) in [0, 1] and camera-z depth (H, W), 0 where the ray misses."""
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    d_cam = intr.camera_dirs(u.ravel(), v.ravel())
    scale = np.linalg.norm(d_cam, axis=1)
    dirs = (d_cam / scale[:, None]) @ pose.rotation.T
    origin = pose.t
    t = np.zeros(dirs.shape[0])
    active = np.ones(dirs.shape[0], dtype=bool)
    hit = np.zeros(dirs.shape[0], dtype=bool)
    for _ in range(MAX_STEPS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        d = scene.sdf(origin + t[idx, None] * dirs[idx])
        done = np.abs(d) < HIT_EPS
        hit[idx[done]] = True
        t[idx] += np.where(done, 0.0, d)
        active[idx[done]] = False
        active[idx[t[idx] > MAX_DIST]] = False
    depth = np.where(hit, t / scale, 0.0)
    color = np.zeros((dirs.shape[0], 3))
    if hit.any():
        color[hit] = scene.color(origin + t[hit, None] * dirs[hit])
    return color.reshape(intr.height, intr.width, 3), depth.reshape(intr.height, intr.width)


# -- Netpbm / dataset I/O ---------------------------------------------------------

def write_ppm(path, rgb: np.ndarray) -> None:
    img = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.tobytes())


def write_pgm16(path, values: np.ndarray) -> None:
    img = np.clip(np.round(values), 0, 65535).astype(">u2")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + img.tobytes())


def _read_netpbm(path) -> tuple[str, int, int, int, bytes]:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos].decode())
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    return magic, w, h, maxval, data[pos + 1:]


def read_ppm(path) -> np.ndarray:
    magic, w, h, maxval, raw = _read_netpbm(path)
    if magic != "P6" or maxval > 255:
        raise ValueError(f"{path}: not an 8-bit P6 image")
    return np.frombuffer(raw[:w * h * 3], dtype=np.uint8).reshape(h, w, 3) / float(maxval)


def read_pgm16(path) -> np.ndarray:
    magic, w, h, maxval, raw = _read_netpbm(path)
    if magic != "P5":
        raise ValueError(f"{path}: not a P5 image")
    dtype = ">u2" if maxval > 255 else np.uint8
    return np.frombuffer(raw[:w * h * np.dtype(dtype).itemsize], dtype=dtype).reshape(h, w).astype(np.float64)


FRAME_RATE = 30.0


def generate_dataset(scene: AnalyticScene, traj: TrajectorySpec, intr: CameraIntrinsics, out_dir,
                     depth_noise: float = 0.0, seed: int = 0) -> list[Pose]:
    out = Path(out_dir)
    try:
        (out / "color").mkdir(parents=True, exist_ok=True)
        (out / "depth").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    rng = np.random.default_rng(seed)
    poses = traj.poses()
    for i, pose in enumerate(poses):
        color, depth = render_gt_frame(scene, intr, pose)
        if depth_noise > 0:
            depth = np.where(depth > 0, depth + rng.normal(0.0, depth_noise, depth.shape), 0.0)
        write_ppm(out / "color" / f"{i:06d}.ppm", color)
        write_pgm16(out / "depth" / f"{i:06d}.pgm", depth * intr.depth_scale)
    stamps = [i / FRAME_RATE for i in range(len(poses))]
    (out / "groundtruth.txt").write_text("# timestamp tx ty tz qx qy qz qw\n" + format_trajectory(stamps, poses))
    (out / "intrinsics.txt").write_text("# fx fy cx cy width height depth_scale\n" + intr.to_line() + "\n")
    (out / "scene.txt").write_text(scene.name + "\n")
    return poses


@dataclass
class Frame:
    index: int
    timestamp: float
    color: np.ndarray
    depth: np.ndarray
    gt_pose: Pose | None = None


class Dataset:
    """A generated sequence read back from disk."""

    def __init__(self, root):
        self.root = Path(root)
        if not (self.root / "intrinsics.txt").exists():
            raise FileNotFoundError(f"no dataset at {self.root} (intrinsics.txt missing)")
        lines = [ln for ln in (self.root / "intrinsics.txt").read_text().splitlines()
                 if ln.strip() and not ln.startswith("#")]
        self.intr = CameraIntrinsics.from_line(lines[0])
        self.color_files = sorted((self.root / "color").glob("*.ppm"))
        self.depth_files = sorted((self.root / "depth").glob("*.pgm"))
        if len(self.color_files) != len(self.depth_files):
            raise ValueError(f"{self.root}: {len(self.color_files)} color vs {len(self.depth_files)} depth frames")
        gt = self.root / "groundtruth.txt"
        self.stamps, self.gt_poses = read_trajectory(gt) if gt.exists() else ([], [])
        scene_file = self.root / "scene.txt"
        self.scene_name = scene_file.read_text().strip() if scene_file.exists() else None

    def __len__(self) -> int:
        return len(self.color_files)

    def __getitem__(self, i: int) -> Frame:
        color = read_ppm(self.color_files[i])
        depth = read_pgm16(self.depth_files[i]) / self.intr.depth_scale
        ts = self.stamps[i] if i < len(self.stamps) else i / FRAME_RATE
        gt = self.gt_poses[i] if i < len(self.gt_poses) else None
        return Frame(i, ts, color, depth, gt)

    def scene(self) -> AnalyticScene | None:
        return SCENES[self.scene_name]() if self.scene_name in SCENES else None
