import time

import numpy as np
import pytest

from hoigen.errors import EmptyScene, ShapeMismatch
from hoigen.nn import fd_gradient_check
from hoigen.scene import (
    GeometricFeatureProvider,
    LabelEmbeddingProvider,
    OccupancyGrid,
    SceneEncoder,
    SceneEncoderConfig,
    ScenePoints,
    VoxelGridSpec,
    fps_sample,
    gated_fuse,
    grid_patches,
    read_pointcloud,
    voxelize,
    write_pointcloud,
)

DESK = SceneEncoderConfig(
    geo_dim=12,
    sem_dim=8,
    hidden_dim=10,
    token_dim=16,
    num_latents=4,
    pe_bands=2,
    pe_max_freq=4.0,
    grid=VoxelGridSpec(dims=(8, 8, 4), origin=(-1.0, -1.0, -0.2), cell_size=0.25),
    patch=2,
)


def _scene(rng, n=40, cfg=DESK):
    pos = rng.uniform(-0.9, 0.9, size=(n, 3)) * np.array([1, 1, 0.4])
    return ScenePoints(pos, rng.normal(size=(n, cfg.geo_dim)), rng.normal(size=(n, cfg.sem_dim)))


def test_fps_all_points():
    pts = np.random.default_rng(0).normal(size=(7, 3))
    idx = fps_sample(pts, 7)
    assert sorted(idx.tolist()) == list(range(7))


def test_fps_square_corners():
    pts = np.array(
        [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0.5, 0.5, 0]], dtype=float
    )
    idx = fps_sample(pts, 4)
    assert set(idx.tolist()) == {0, 1, 2, 3}


def test_fps_beats_random_subsets_on_minimum_spacing():
    rng = np.random.default_rng(1)
    for _ in range(100):
        pts = rng.uniform(size=(60, 3))
        idx = fps_sample(pts, 8)

        def min_pairwise(sub):
            d = np.linalg.norm(sub[:, None] - sub[None, :], axis=2)
            return d[np.triu_indices(len(sub), 1)].min()

        fps_spacing = min_pairwise(pts[idx])
        rand_spacing = min_pairwise(pts[rng.choice(60, 8, replace=False)])
        assert fps_spacing >= rand_spacing - 1e-12


def test_gated_fuse_limits():
    rng = np.random.default_rng(2)
    geo = rng.normal(size=(5, 6))
    sem = rng.normal(size=(5, 4))
    wg = rng.normal(size=(6, 3))
    ws = rng.normal(size=(4, 3))
    closed = gated_fuse(geo, sem, np.full(3, -40.0), wg, ws)
    assert np.allclose(closed, geo @ wg, atol=1e-6)
    half = gated_fuse(geo, sem, np.zeros(3), wg, ws)
    assert np.allclose(half, geo @ wg + 0.5 * (sem @ ws), atol=1e-12)


def test_gated_fuse_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        gated_fuse(np.zeros((3, 2)), np.zeros((4, 2)), np.zeros(2), np.eye(2), np.eye(2))


def test_build_tokens_row_permutation_equivariance():
    rng = np.random.default_rng(3)
    enc = SceneEncoder(DESK, rng=rng)
    scene = _scene(rng)
    fused = enc.gated_fuse(scene.geo_features, scene.sem_features)
    tokens = enc.build_tokens(fused, scene.positions)
    perm = rng.permutation(len(fused))
    tokens_p = enc.build_tokens(fused[perm], scene.positions[perm])
    assert np.allclose(tokens[perm], tokens_p, atol=1e-12)
    assert tokens.shape == (40, DESK.token_dim)


def test_zero_features_zero_positions_give_equal_rows():
    rng = np.random.default_rng(4)
    enc = SceneEncoder(DESK, rng=rng)
    fused = np.zeros((6, DESK.hidden_dim))
    tokens = enc.build_tokens(fused, np.zeros((6, 3)))
    assert np.allclose(tokens, tokens[0][None, :], atol=1e-12)


def test_compress_permutation_invariance_and_weights():
    rng = np.random.default_rng(5)
    enc = SceneEncoder(DESK, rng=rng)
    scene = _scene(rng)
    tokens, _ = enc.encode_cached(scene)
    s1 = tokens.local
    perm_scene = ScenePoints(
        scene.positions[::-1], scene.geo_features[::-1], scene.sem_features[::-1]
    )
    s2 = enc.encode(perm_scene).local
    assert np.allclose(s1, s2, atol=1e-6)
    w = enc.perceiver.attention_weights(
        enc.params["latent_q"],
        enc.build_tokens(enc.gated_fuse(scene.geo_features, scene.sem_features), scene.positions),
    )
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_compress_single_repeated_token():
    rng = np.random.default_rng(6)
    enc = SceneEncoder(DESK, rng=rng)
    token = rng.normal(size=DESK.token_dim)
    tiled = np.tile(token, (9, 1))
    out = enc.compress(tiled)
    expect = token @ enc.params["perceiver.wv"] @ enc.params["perceiver.wo"]
    assert np.allclose(out, np.tile(expect, (DESK.num_latents, 1)), atol=1e-9)


def test_voxelize_single_point():
    spec = VoxelGridSpec(dims=(4, 4, 4), origin=(0, 0, 0), cell_size=1.0)
    grid = voxelize(np.array([[1.5, 2.5, 0.5]]), spec)
    assert grid.data.sum() == 1
    assert grid.data[1, 2, 0]
    assert grid.clamped == 0


def test_voxelize_shift_by_one_cell():
    spec = VoxelGridSpec(dims=(6, 6, 6), origin=(0, 0, 0), cell_size=0.5)
    pts = np.array([[0.75, 1.25, 0.25], [1.75, 0.25, 1.25]])
    a = voxelize(pts, spec)
    b = voxelize(pts + np.array([0.5, 0, 0]), spec)
    assert np.array_equal(np.roll(a.data, 1, axis=0), b.data)


def test_voxelize_clamps_and_counts():
    spec = VoxelGridSpec(dims=(2, 2, 2), origin=(0, 0, 0), cell_size=1.0)
    grid = voxelize(np.array([[-5.0, 0.5, 0.5], [0.5, 0.5, 0.5]]), spec)
    assert grid.clamped == 1
    assert grid.data[0, 0, 0] and grid.data[0, 0, 0]


def test_voxelize_occupancy_matches_binning_oracle():
    rng = np.random.default_rng(7)
    spec = VoxelGridSpec(dims=(5, 7, 3), origin=(-1, -1, 0), cell_size=0.4)
    pts = rng.uniform(-1, 1, size=(300, 3)) * np.array([1, 1, 0.5]) + np.array([0, 0, 0.5])
    grid = voxelize(pts, spec)
    seen = set()
    for p in pts:
        cell = tuple(
            int(min(max(np.floor((p[i] - spec.origin[i]) / spec.cell_size), 0), spec.dims[i] - 1))
            for i in range(3)
        )
        seen.add(cell)
    assert grid.data.sum() == len(seen)


def test_voxelize_empty_raises():
    with pytest.raises(EmptyScene):
        voxelize(np.zeros((0, 3)), VoxelGridSpec())


def test_grid_patches_shape():
    spec = VoxelGridSpec(dims=(8, 8, 4), origin=(0, 0, 0), cell_size=0.1)
    grid = voxelize(np.array([[0.05, 0.05, 0.05]]), spec)
    patches = grid_patches(grid, 2)
    assert patches.shape == (4 * 4 * 2, 8)
    assert patches.sum() == 1.0


def test_encoder_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    enc = SceneEncoder(DESK, rng=rng)
    scene = _scene(rng, n=16)
    gl = rng.normal(size=(DESK.num_latents, DESK.token_dim))
    gg = rng.normal(size=DESK.token_dim)

    def loss_fn():
        toks = enc.encode(scene)
        return float(np.sum(gl * toks.local) + np.sum(gg * toks.glob))

    toks, cache = enc.encode_cached(scene)
    grads = enc.backward(cache, gl, gg)
    err = fd_gradient_check(loss_fn, enc.params, grads, np.random.default_rng(3), num_coords=64)
    assert err < 1e-4


def test_feature_providers_deterministic():
    rng = np.random.default_rng(9)
    pos = rng.uniform(size=(50, 3))
    geo = GeometricFeatureProvider(dim=10, k_neighbors=6)
    a = geo(pos)
    b = geo(pos)
    assert np.array_equal(a, b)
    assert a.shape == (50, 10)
    assert np.all(np.isfinite(a))
    sem = LabelEmbeddingProvider(dim=8, embed_dim=4, seed=1)
    la = sem(np.array([0, 1, 0, 2]))
    assert np.array_equal(la[0], la[2])
    assert not np.allclose(la[0], la[1])


def test_perceiver_cost_scales_linearly_in_scene_points():
    cfg = SceneEncoderConfig(
        geo_dim=4, sem_dim=4, hidden_dim=4, token_dim=32, num_latents=16,
        pe_bands=2, pe_max_freq=4.0,
        grid=VoxelGridSpec(dims=(4, 4, 4), origin=(-2, -2, -2), cell_size=1.0), patch=2,
    )
    enc = SceneEncoder(cfg, rng=np.random.default_rng(10))
    rng = np.random.default_rng(11)

    def timed(n):
        tokens = rng.normal(size=(n, cfg.token_dim))
        reps = []
        for _ in range(7):
            t0 = time.perf_counter()
            enc.compress(tokens)
            reps.append(time.perf_counter() - t0)
        return float(np.median(reps))

    t1k, t25k = timed(1000), timed(25000)
    # linear cost predicts ~25x; quadratic would be ~625x
    assert t25k / t1k < 120


def test_pointcloud_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    pos = rng.normal(size=(33, 3)).astype(np.float32)
    labels = rng.integers(0, 5, size=33)
    path = tmp_path / "scene.pcl"
    write_pointcloud(path, pos, labels)
    pos2, labels2 = read_pointcloud(path)
    assert np.array_equal(pos2, pos.astype(np.float64))
    assert np.array_equal(labels2, labels)
    write_pointcloud(path, pos)
    pos3, labels3 = read_pointcloud(path)
    assert labels3 is None and len(pos3) == 33
