import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from triplane_slam.hash_plane import HashPlane2D
from triplane_slam.params import ParamBlock, finite_diff_check
from triplane_slam.submap import (
    MLP,
    Decoders,
    EncoderConfig,
    SubMap,
    create_submap,
    decode,
    finest_resolution,
    map_sizing,
    project_to_planes,
    sigmoid,
)


@pytest.mark.parametrize("volume,n_max", [(8, 100), (27, 150), (1, 50), (0.125, 25)])
def test_sizing_examples(volume, n_max):
    assert map_sizing(volume) == (n_max, n_max * n_max)


def test_create_submap_sizes_tables():
    sm = create_submap([0, 0, 0], [2, 2, 2])
    assert (sm.n_max, sm.table_size) == (100, 10_000)
    assert sm.layout.res[-1] == 100
    assert sm.sdf.values.size == 3 * sm.layout.total * 2


def test_degenerate_or_tiny_box_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        SubMap([0, 0, 0], [1, 0, 1], 0)
    with pytest.raises(ValueError, match="too small"):
        SubMap([0, 0, 0], [0.1, 0.1, 0.1], 0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.05, 2000, allow_nan=False))
def test_finest_resolution_is_exact_floor(volume):
    n = finest_resolution(volume)
    target = volume * 125_000
    assert n ** 3 <= target < (n + 1) ** 3


def test_plane_projection_examples():
    lo, hi = np.zeros(3), np.ones(3)
    assert np.allclose(project_to_planes(lo, lo, hi), 0.0)
    assert np.allclose(project_to_planes([0.5, 0.5, 0.5], lo, hi), 0.5)
    got = project_to_planes([0.25, 0.5, 0.75], lo, hi)
    assert np.allclose(got, [[0.25, 0.5], [0.25, 0.75], [0.5, 0.75]])


def _small(seed=0, grid=False):
    return SubMap([-0.2, -0.2, -0.2], [0.2, 0.2, 0.2], 0, EncoderConfig(levels=3, n_min=4, grid_hash=grid),
                  np.random.default_rng(seed))


def test_zero_tables_give_zero_features():
    sm = _small()
    sm.sdf.values[:] = 0
    sm.color.values[:] = 0
    fs, fc, _ = sm.encode_features(np.random.default_rng(0).uniform(-0.2, 0.2, (5, 3)))
    assert not fs.any() and not fc.any()


def test_single_nonzero_plane_matches_encode2d():
    sm = _small()
    rng = np.random.default_rng(1)
    tables = sm.sdf.values.reshape(sm.table_shape)
    tables[:] = 0
    tables[0] = rng.normal(size=tables[0].shape)
    plane = HashPlane2D(sm.enc.n_min, sm.n_max, sm.enc.levels, 2, sm.table_size, table=tables[0].copy())
    p = rng.uniform(-0.2, 0.2, (6, 3))
    fs, _, coords = sm.encode_features(p)
    assert np.allclose(fs, plane.encode(coords[:, 0, :]))


@pytest.mark.parametrize("grid", [False, True])
def test_feature_gradients_match_finite_differences(grid):
    sm = _small(2, grid)
    rng = np.random.default_rng(3)
    for blk in sm.blocks:
        blk.values[:] = rng.normal(size=blk.values.size)
    p = rng.uniform(-0.19, 0.19, (10, 3))
    ws, wc = rng.normal(size=(10, sm.feature_dim)), rng.normal(size=(10, sm.feature_dim))

    def loss():
        fs, fc, _ = sm.encode_features(p)
        return float(np.sum(fs * ws) + np.sum(fc * wc))

    _, _, coords = sm.encode_features(p)
    dp = sm.backward_features(coords, ws, wc, want_table=True, want_points=True)
    for blk in sm.blocks:
        assert finite_diff_check(loss, blk, 1e-6, 20, rng, np.flatnonzero(blk.grads)) <= 1e-6
    for i in range(3):
        for a in range(3):
            e = np.zeros(3)
            e[a] = 1e-7
            p0 = p.copy()
            p[i] += e
            lp = loss()
            p[i] -= 2 * e
            lm = loss()
            p[:] = p0
            fd = (lp - lm) / 2e-7
            assert abs(fd - dp[i, a]) <= 1e-5 * max(1.0, abs(fd))


def test_contains_is_inclusive():
    sm = _small()
    assert sm.contains([[0.2, 0.2, 0.2], [-0.2, 0, 0]]).all()
    assert not sm.contains([0.2000001, 0, 0])


def test_decoder_affine_through_zero_input():
    dec = Decoders(6, rng=np.random.default_rng(0))
    for mlp, bias in ((dec.f_s, [0.7]), (dec.f_c, [0.1, -0.3, 2.0])):
        W3 = mlp.layers[4]
        W3[:] = 0
        mlp.layers[5][:] = bias
    s, c = decode(dec, np.zeros(6), np.zeros(6))
    assert np.isclose(s[0], 0.7)
    assert np.allclose(c[0], sigmoid(np.array([0.1, -0.3, 2.0])))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=6, max_size=6))
def test_color_is_inside_unit_cube(feat):
    dec = Decoders(6, rng=np.random.default_rng(1))
    _, c = decode(dec, np.zeros(6), np.array(feat) * 1e-3)
    assert np.all((c >= 0) & (c <= 1))


def test_mlp_jacobian_matches_finite_differences():
    rng = np.random.default_rng(5)
    mlp = MLP("m", 5, 3, 8, rng=rng)
    x = rng.normal(size=(7, 5))
    w = rng.normal(size=(7, 3))

    def loss():
        return float(np.sum(mlp.forward(x)[0] * w))

    _, cache = mlp.forward(x)
    dx = mlp.backward(cache, w)
    assert finite_diff_check(loss, mlp.block, 1e-6, 40, rng, np.flatnonzero(mlp.block.grads)) <= 1e-6
    xb = ParamBlock("x", x.reshape(-1))
    xb.grads[:] = dx.reshape(-1)
    x = xb.values.reshape(7, 5)
    assert finite_diff_check(loss, xb, 1e-6, 20, rng) <= 1e-6


def test_nonfinite_decoder_output_is_named():
    dec = Decoders(4, rng=np.random.default_rng(0))
    dec.f_c.block.values[0] = np.inf
    with pytest.raises(FloatingPointError, match="color decoder"):
        dec.forward(np.ones((1, 4)), np.ones((1, 4)))
