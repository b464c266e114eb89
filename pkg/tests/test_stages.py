import numpy as np
import pytest

from hoigen.errors import DegenerateBatch, ShapeMismatch
from hoigen.flow import FlowConfig, FlowModel
from hoigen.hoirep import FRAME_DIM
from hoigen.nn import AdamW, fd_gradient_check
from hoigen.scene import SceneTokens
from hoigen.stages import (
    AlignHeads,
    GenerationInputs,
    GraspCond,
    HANDS_DIM,
    ManipCond,
    TemporalMask,
    TextEmbedder,
    clamp_transition,
    generate,
    infonce_align,
    inpaint_blend,
    masked_flow_loss,
    train_grasp_step,
)


def test_text_embedder_deterministic_and_spread():
    emb = TextEmbedder(dim=64, seed=3)
    a = emb("lift the box")
    b = emb("lift the box")
    c = emb("slide the cup to the left")
    assert np.array_equal(a, b)
    assert np.isclose(np.linalg.norm(a), 1.0)
    assert abs(float(a @ c)) < 0.5  # near-orthogonal in 64 dims


def test_temporal_mask_values():
    m = TemporalMask(6, 2)
    assert np.array_equal(m.frames(), [0, 0, 0, 1, 1, 1])
    flat = m.flat(3)
    assert flat.shape == (18,)
    assert np.array_equal(flat[:9], np.zeros(9))


def test_inpaint_blend_below_cutoff():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4))
    prefix = rng.normal(size=(3, 4))
    mask = TemporalMask(5, 2)
    out = inpaint_blend(x, prefix, mask, 0.5)
    assert np.array_equal(out[:3], prefix)
    assert np.array_equal(out[3:], x[3:])


def test_inpaint_blend_above_cutoff():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 4))
    prefix = rng.normal(size=(3, 4))
    out = inpaint_blend(x, prefix, TemporalMask(5, 2), 0.95)
    assert np.array_equal(out, x)


def test_mask_complementarity_partition():
    rng = np.random.default_rng(2)
    mask = TemporalMask(7, 3)
    x = rng.normal(size=(7, 2))
    prefix_full = rng.normal(size=(7, 2))
    m = mask.frames()[:, None]
    recon = m * x + (1 - m) * prefix_full
    assert np.array_equal(recon[:4], prefix_full[:4])
    assert np.array_equal(recon[4:], x[4:])


def test_clamp_transition_exact_and_idempotent():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 4))
    state = rng.normal(size=4)
    once = clamp_transition(x, state, 2)
    twice = clamp_transition(once, state, 2)
    assert np.array_equal(once[2], state)
    assert np.array_equal(once, twice)
    assert np.array_equal(once[[0, 1, 3, 4, 5]], x[[0, 1, 3, 4, 5]])


def test_infonce_orthogonal_pairs_low_temp():
    b, d = 4, 8
    embs = np.zeros((b, d))
    for i in range(b):
        embs[i, i] = 1.0
    loss, *_ = infonce_align(embs, embs, temp=0.01)
    assert loss < 1e-6


def test_infonce_identical_rows_ln_b():
    b = 5
    embs = np.tile(np.array([1.0, 2.0, 0.5, -1.0]), (b, 1))
    loss, *_ = infonce_align(embs, embs, temp=0.7)
    assert np.isclose(loss, np.log(b), atol=1e-9)


def test_infonce_b2_hand_computed():
    m = np.array([[1.0, 0.0], [0.0, 1.0]])
    t = np.array([[1.0, 0.0], [np.sqrt(0.5), np.sqrt(0.5)]])
    temp = 0.5
    sim = (m / np.linalg.norm(m, axis=1, keepdims=True)) @ (
        t / np.linalg.norm(t, axis=1, keepdims=True)
    ).T / temp
    ce_rows = -np.mean(np.log(np.exp(np.diag(sim)) / np.exp(sim).sum(axis=1)))
    ce_cols = -np.mean(np.log(np.exp(np.diag(sim)) / np.exp(sim).sum(axis=0)))
    expect = 0.5 * (ce_rows + ce_cols)
    loss, *_ = infonce_align(m, t, temp)
    assert np.isclose(loss, expect, atol=1e-12)


def test_infonce_symmetry_under_role_swap():
    rng = np.random.default_rng(4)
    m = rng.normal(size=(6, 16))
    t = rng.normal(size=(6, 16))
    l1, *_ = infonce_align(m, t, 0.7)
    l2, *_ = infonce_align(t, m, 0.7)
    assert np.isclose(l1, l2, atol=1e-12)


def test_infonce_degenerate_batch():
    with pytest.raises(DegenerateBatch):
        infonce_align(np.ones((1, 4)), np.ones((1, 4)), 0.7)


def test_infonce_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    m = rng.normal(size=(4, 6))
    t = rng.normal(size=(4, 6))
    temp = 0.7
    loss, g_m, g_t, g_temp = infonce_align(m, t, temp)
    h = 1e-6
    for arr, g in ((m, g_m), (t, g_t)):
        for _ in range(10):
            i, j = rng.integers(arr.shape[0]), rng.integers(arr.shape[1])
            orig = arr[i, j]
            arr[i, j] = orig + h
            lp = infonce_align(m, t, temp)[0]
            arr[i, j] = orig - h
            lm = infonce_align(m, t, temp)[0]
            arr[i, j] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - g[i, j]) / max(abs(fd), abs(g[i, j]), 1e-8) < 1e-4
    fd_t = (infonce_align(m, t, temp + h)[0] - infonce_align(m, t, temp - h)[0]) / (2 * h)
    assert abs(fd_t - g_temp) / max(abs(fd_t), 1e-8) < 1e-4


def test_align_heads_gradcheck_and_clamp():
    rng = np.random.default_rng(6)
    heads = AlignHeads(frame_dim=10, text_dim=12, embed_dim=16, hidden=8, rng=rng, dtype=np.float64)
    windows = rng.normal(size=(4, 30))  # 3 frames x 10 dims
    texts = rng.normal(size=(4, 12))

    def loss_fn():
        return heads.loss(windows, texts)[0]

    _, grads = heads.loss(windows, texts)
    err = fd_gradient_check(loss_fn, heads.params, grads, np.random.default_rng(0), num_coords=64)
    assert err < 1e-4

    heads.params["align.temp"][0] = 1e-5
    heads.clamp_temperature()
    assert heads.temperature == 0.01
    heads.params["align.temp"][0] = 500.0
    heads.clamp_temperature()
    assert heads.temperature == 100.0


def _grasp_setup(n_g=3, bps=5, text=8, seed=0):
    cfg = FlowConfig(sigma_min=1e-4, num_steps=10, cfg_scale=1.0, cond_drop_prob=0.3)
    model = FlowModel(
        n_g * HANDS_DIM,
        GraspCond.spec(bps, text),
        hidden=(24,),
        config=cfg,
        rng=np.random.default_rng(seed),
        dtype=np.float64,
    )
    return model


def test_train_grasp_step_lambda_zero():
    model = _grasp_setup()
    rng = np.random.default_rng(7)
    w = rng.normal(size=(4, model.window_dim))
    c = rng.normal(size=(4, model.cond_dim))
    t = rng.normal(size=(4, 8))
    heads = AlignHeads(frame_dim=HANDS_DIM, text_dim=8, embed_dim=16, hidden=8, dtype=np.float64)
    losses, _ = train_grasp_step(model, w, c, t, heads, np.random.default_rng(1), lambda_align=0.0)
    assert losses["total"] == losses["flow_loss"]


def test_train_grasp_step_gradients():
    model = _grasp_setup(seed=2)
    heads = AlignHeads(
        frame_dim=HANDS_DIM, text_dim=8, embed_dim=16, hidden=8,
        rng=np.random.default_rng(3), dtype=np.float64,
    )
    rng = np.random.default_rng(8)
    w = rng.normal(size=(4, model.window_dim))
    c = rng.normal(size=(4, model.cond_dim))
    t = rng.normal(size=(4, 8))
    all_params = {**model.params, **heads.params}

    def loss_fn():
        losses, _ = train_grasp_step(model, w, c, t, heads, np.random.default_rng(9), 0.1)
        return losses["total"]

    _, grads = train_grasp_step(model, w, c, t, heads, np.random.default_rng(9), 0.1)
    err = fd_gradient_check(loss_fn, all_params, grads, np.random.default_rng(4), num_coords=64)
    assert err < 1e-4


def test_train_grasp_loss_decreases():
    model = _grasp_setup(seed=5)
    heads = AlignHeads(
        frame_dim=HANDS_DIM, text_dim=8, embed_dim=16, hidden=8,
        rng=np.random.default_rng(6), dtype=np.float64,
    )
    rng = np.random.default_rng(10)
    w = rng.normal(size=(4, model.window_dim))
    c = rng.normal(size=(4, model.cond_dim))
    t = rng.normal(size=(4, 8))
    opt = AdamW(lr=3e-3, weight_decay=0.0)
    params = {**model.params, **heads.params}

    def eval_loss():
        losses, _ = train_grasp_step(model, w, c, t, heads, np.random.default_rng(123), 0.1)
        return losses["total"]

    start = eval_loss()
    train_rng = np.random.default_rng(11)
    for _ in range(100):
        _, grads = train_grasp_step(model, w, c, t, heads, train_rng, 0.1)
        opt.step(params, grads)
        heads.clamp_temperature()
    end = eval_loss()
    assert end < 0.7 * start


def _manip_setup(n=5, t_g=1, bps=4, text=6, latents=2, token=3, seed=0):
    cfg = FlowConfig(sigma_min=1e-4, num_steps=10, cfg_scale=1.0, cond_drop_prob=0.2)
    model = FlowModel(
        n * FRAME_DIM,
        ManipCond.spec(bps, text, latents, token),
        hidden=(16,),
        config=cfg,
        rng=np.random.default_rng(seed),
        dtype=np.float64,
    )
    return model, TemporalMask(n, t_g)


def test_masked_loss_ignores_prefix_predictions():
    model, mask = _manip_setup()
    rng = np.random.default_rng(12)
    x1 = rng.normal(size=(3, model.window_dim))
    cond = rng.normal(size=(3, model.cond_dim))

    loss_a, grads_a = masked_flow_loss(model, x1, cond, mask, np.random.default_rng(13))

    # corrupting the network output on prefix frames must not change anything
    prefix_cols = (mask.t_g + 1) * FRAME_DIM
    orig = model.predictor.forward_cached

    def corrupted(inputs):
        out, cache = orig(inputs)
        out = np.array(out)
        out[:, :prefix_cols] += 1e6
        return out, cache

    model.predictor.forward_cached = corrupted
    loss_b, grads_b = masked_flow_loss(model, x1, cond, mask, np.random.default_rng(13))
    model.predictor.forward_cached = orig
    assert np.isclose(loss_a, loss_b, rtol=1e-12)
    for k in grads_a:
        assert np.allclose(grads_a[k], grads_b[k], atol=1e-9)


def test_masked_loss_gradients():
    model, mask = _manip_setup(seed=7)
    rng = np.random.default_rng(14)
    x1 = rng.normal(size=(3, model.window_dim))
    cond = rng.normal(size=(3, model.cond_dim))

    def loss_fn():
        return masked_flow_loss(model, x1, cond, mask, np.random.default_rng(15))[0]

    _, grads = masked_flow_loss(model, x1, cond, mask, np.random.default_rng(15))
    err = fd_gradient_check(loss_fn, model.params, grads, np.random.default_rng(5), num_coords=64)
    assert err < 1e-4


def _generation_inputs(rng, n=5, n_g=2, bps=4, text=6, latents=2, token=3):
    x_init = rng.normal(size=FRAME_DIM)
    return GenerationInputs(
        object_bps=rng.normal(size=bps),
        text_embedding=rng.normal(size=text),
        text_grasp_embedding=rng.normal(size=text),
        scene=SceneTokens(rng.normal(size=(latents, token)), rng.normal(size=token)),
        x_init=x_init,
        anchor=np.array([0.1, 0.2, 0.3]),
        n=n,
        n_g=n_g,
        label="lift",
        text="lift it",
    )


def _two_models(seed=0):
    n, n_g, bps, text, latents, token = 5, 2, 4, 6, 2, 3
    cfg = FlowConfig(sigma_min=1e-4, num_steps=8, cfg_scale=2.5, cond_drop_prob=0.1)
    grasp = FlowModel(
        n_g * HANDS_DIM, GraspCond.spec(bps, text), hidden=(16,), config=cfg,
        rng=np.random.default_rng(seed), dtype=np.float64,
    )
    manip = FlowModel(
        n * FRAME_DIM, ManipCond.spec(bps, text, latents, token), hidden=(16,), config=cfg,
        rng=np.random.default_rng(seed + 1), dtype=np.float64,
    )
    return grasp, manip


def test_generate_deterministic_and_clamped():
    grasp, manip = _two_models()
    rng = np.random.default_rng(16)
    gi = _generation_inputs(rng)
    a = generate(grasp, manip, gi, seed=7)
    b = generate(grasp, manip, gi, seed=7)
    assert np.array_equal(a.data, b.data)
    c = generate(grasp, manip, gi, seed=8)
    assert not np.array_equal(a.data, c.data)


def test_generate_prefix_and_object_constancy():
    grasp, manip = _two_models(seed=3)
    rng = np.random.default_rng(17)
    gi = _generation_inputs(rng)
    steps = []
    seq = generate(grasp, manip, gi, seed=5, instrument=steps)
    t_g = gi.n_g - 1
    # object pose constant over the grasp segment and equal to the initial pose
    world_obj = gi.x_init[108:111] + np.asarray(gi.anchor)
    for t in range(t_g + 1):
        assert np.allclose(seq.data[t, 108:111], world_obj, atol=1e-12)
        assert np.allclose(seq.data[t, 111:117], gi.x_init[111:117], atol=1e-12)
    # every instrumented step below the cutoff preserved the prefix exactly
    low = [s for s in steps if s["tau"] < 0.9]
    assert low and all(s["prefix_exact"] for s in low)
    assert all(s["clamp_exact"] for s in steps)


def test_generate_transition_frame_matches_grasp_output():
    grasp, manip = _two_models(seed=9)
    rng = np.random.default_rng(18)
    gi = _generation_inputs(rng)
    seq = generate(grasp, manip, gi, seed=11)
    t_g = gi.n_g - 1
    # frames 0..t_g carry the grasp-stage hands; the object block is x_init's
    anchored_frame = seq.data[t_g].copy()
    anchored_frame[:54][:3] -= gi.anchor  # left hand translation back to anchored
    anchored_frame[54:108][:3] -= gi.anchor
    anchored_frame[108:111] -= gi.anchor
    assert np.allclose(anchored_frame[108:117], gi.x_init[108:117], atol=1e-12)


def test_generate_mixed_lengths_rejected():
    grasp, manip = _two_models(seed=12)
    rng = np.random.default_rng(19)
    a = _generation_inputs(rng)
    b = _generation_inputs(rng, n=6)
    from hoigen.stages import generate_batch

    with pytest.raises(ShapeMismatch):
        generate_batch(grasp, manip, [a, b], seed=1)
