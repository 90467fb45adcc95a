import numpy as np
import pytest

from triplane_slam.evaluation import (
    TriangleMesh,
    ate_rmse,
    chamfer_metrics,
    cull_mesh,
    depth_l1_from_renders,
    extract_mesh,
    read_ply,
)
from triplane_slam.geometry import CameraIntrinsics, Pose, look_at
from triplane_slam.manager import SubMapManager
from triplane_slam.params import BetaParam, adam_step
from triplane_slam.renderer import SceneField
from triplane_slam.submap import Decoders, EncoderConfig, SubMap


def _traj(n=100, seed=0):
    rng = np.random.default_rng(seed)
    return [Pose.from_axis_angle(rng.normal(size=3), rng.uniform(0, 1), rng.normal(size=3)) for _ in range(n)]


def test_ate_examples():
    gt = _traj()
    assert ate_rmse(gt, gt) < 1e-10
    shifted = [Pose(p.q, p.t + [0.3, -1, 2]) for p in gt]
    assert ate_rmse(shifted, gt) < 1e-10


def test_ate_single_outlier_hand_computed():
    gt = _traj()
    est = list(gt)
    est[17] = Pose(gt[17].q, gt[17].t + [0.1, 0, 0])
    R = ate_rmse(est, gt)
    # alignment can only reduce the residual below the unaligned value of 1.0 cm
    assert R <= 1.0 + 1e-9 and R > 0.95


def test_ate_rigid_invariance():
    gt = _traj(30, 1)
    T = Pose.from_axis_angle([1, 2, 0.5], 1.1, [3, -2, 0.5])
    est = [T @ p for p in gt]
    assert ate_rmse(est, gt) < 1e-9


def test_ate_length_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        ate_rmse(_traj(3), _traj(4))


def test_depth_l1_examples():
    gt = np.array([[1.0, 2.0], [0.0, 3.0]])
    assert depth_l1_from_renders([gt], [gt]) == 0.0
    assert np.isclose(depth_l1_from_renders([gt + 0.01], [gt]), 1.0)
    # invalid (zero) gt pixels are ignored even if the rendering is wild there
    r = gt + 0.01
    r[1, 0] = 50.0
    assert np.isclose(depth_l1_from_renders([r], [gt]), 1.0)


def _sphere_field(steps=400, radius=0.3, seed=0):
    enc = EncoderConfig(levels=8, n_min=8)
    rng = np.random.default_rng(seed)
    man = SubMapManager(enc=enc)
    sm = man.add(SubMap([-0.5] * 3, [0.5] * 3, 0, enc, rng))
    dec = Decoders(enc.levels * enc.feat_dim, rng=rng)
    trunc = 0.1
    for _ in range(steps):
        p = np.vstack([rng.uniform(-0.5, 0.5, (1024, 3)), _near_sphere(rng, 1024, radius)])
        target = np.clip((np.linalg.norm(p, axis=1) - radius) / trunc, -1, 1)
        fs, fc, coords = sm.encode_features(p)
        s, _, cache = dec.forward(fs, fc)
        ds = 2 * (s - target) / len(p)
        dfs, dfc = dec.backward(cache, ds, np.zeros((len(p), 3)))
        sm.backward_features(coords, dfs, dfc)
        for blk in (*sm.blocks, *dec.blocks):
            adam_step(blk)
    return SceneField(man, dec, BetaParam())


def _near_sphere(rng, n, radius):
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (radius + rng.uniform(-0.05, 0.05, (n, 1)))


@pytest.fixture(scope="module")
def sphere_field():
    return _sphere_field()


def test_sphere_mesh_close_to_surface_and_watertight(sphere_field):
    mesh = extract_mesh(sphere_field, voxel=0.04, with_color=False)
    dist = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.3)
    assert dist.max() <= 0.04
    assert np.all(mesh.edge_use_counts() == 2)


def test_finer_voxels_do_not_hurt(sphere_field):
    coarse = extract_mesh(sphere_field, voxel=0.04, with_color=False)
    fine = extract_mesh(sphere_field, voxel=0.02, with_color=False)
    err = [np.mean(np.abs(np.linalg.norm(m.vertices, axis=1) - 0.3)) for m in (coarse, fine)]
    assert err[1] <= err[0] + 1e-3


def test_uniform_free_space_gives_empty_mesh():
    enc = EncoderConfig(levels=2, n_min=4)
    man = SubMapManager(enc=enc)
    man.add(SubMap([0, 0, 0], [1, 1, 1], 0, enc))
    dec = Decoders(4, rng=np.random.default_rng(0), sdf_bias=1.0)
    for blk in dec.blocks:
        blk.values[:] = 0
    dec.f_s.layers[5][:] = 1.0
    mesh = extract_mesh(SceneField(man, dec, BetaParam()), voxel=0.1)
    assert len(mesh.faces) == 0


def test_empty_manager_rejected():
    with pytest.raises(ValueError):
        extract_mesh(SceneField(SubMapManager(), Decoders(32), BetaParam()))


def _tri(center, size=0.01):
    c = np.asarray(center, dtype=float)
    return [c + [size, 0, 0], c + [0, size, 0], c + [-size, -size, 0]]


def test_culling_examples():
    intr = CameraIntrinsics(20, 20, 9.5, 9.5, 20, 20)
    pose = Pose.identity()  # looking down +z at a wall 2 m away
    depth = np.full((20, 20), 2.0)
    verts = np.array(_tri([0, 0, 2.0]) + _tri([0, 0, -1.0]) + _tri([0, 0, 3.0]))
    mesh = TriangleMesh(verts, np.arange(9).reshape(3, 3))
    kept = cull_mesh(mesh, [pose], intr, [depth], margin=0.12)
    assert len(kept.faces) == 1
    assert np.allclose(kept.centroids()[0][2], 2.0, atol=0.01)


def test_ply_roundtrip(tmp_path):
    mesh = TriangleMesh(np.random.default_rng(0).random((4, 3)), np.array([[0, 1, 2], [0, 2, 3]]))
    mesh.colors = np.random.default_rng(1).random((4, 3))
    mesh.write_ply(tmp_path / "m.ply")
    back = read_ply(tmp_path / "m.ply")
    assert np.allclose(back.vertices, mesh.vertices, atol=1e-6)
    assert np.array_equal(back.faces, mesh.faces)
    assert (tmp_path / "m.ply").read_text().startswith("ply\nformat ascii")


def test_chamfer_on_exact_sphere_mesh(sphere_field):
    mesh = extract_mesh(sphere_field, voxel=0.02, with_color=False)
    rng = np.random.default_rng(0)
    d = rng.normal(size=(2000, 3))
    gt = 0.3 * d / np.linalg.norm(d, axis=1, keepdims=True)
    m = chamfer_metrics(mesh, lambda p: np.linalg.norm(p, axis=-1) - 0.3, gt, n=5000)
    assert m["accuracy_cm"] < 1.0 and m["completion_cm"] < 1.0
