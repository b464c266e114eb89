import math

import numpy as np
import pytest

from hoigen.errors import WrongDimension
from hoigen.nn import (
    AdamW,
    AttentionBlock,
    Mlp,
    adamw_step,
    fd_gradient_check,
    linear_anneal_lr,
    load_checkpoint,
    sample_time_logit_normal,
    save_checkpoint,
)


def test_mlp_zero_weights_zero_output():
    m = Mlp([4, 8, 3], dtype=np.float64)
    for n in m.params:
        m.params[n][:] = 0.0
    assert np.allclose(m.forward(np.ones(4)), 0.0)


def test_mlp_single_linear_layer_is_matmul():
    rng = np.random.default_rng(0)
    m = Mlp([5, 3], activations=["linear"], rng=rng, dtype=np.float64)
    x = rng.normal(size=5)
    assert np.allclose(m.forward(x), x @ m.params["w0"] + m.params["b0"], atol=1e-12)


def test_mlp_matches_reference_implementation():
    rng = np.random.default_rng(1)
    m = Mlp([6, 10, 7, 2], activations=["tanh", "gelu", "linear"], rng=rng, dtype=np.float64)
    x = rng.normal(size=6)

    def gelu_ref(z):
        return 0.5 * z * (1 + np.tanh(np.sqrt(2 / np.pi) * (z + 0.044715 * z**3)))

    h = np.tanh(x @ m.params["w0"] + m.params["b0"])
    h = gelu_ref(h @ m.params["w1"] + m.params["b1"])
    y = h @ m.params["w2"] + m.params["b2"]
    assert np.allclose(m.forward(x), y, atol=1e-12)


def test_mlp_wrong_input_width():
    m = Mlp([4, 2])
    with pytest.raises(WrongDimension):
        m.forward(np.zeros(5))


def test_linear_layer_gradient_is_outer_product():
    rng = np.random.default_rng(2)
    m = Mlp([4, 3], activations=["linear"], rng=rng, dtype=np.float64)
    x = rng.normal(size=4)
    up = rng.normal(size=3)
    _, cache = m.forward_cached(x)
    grads, gx = m.backward(cache, up)
    assert np.allclose(grads["w0"], np.outer(x, up), atol=1e-12)
    assert np.allclose(grads["b0"], up, atol=1e-12)
    assert np.allclose(gx, m.params["w0"] @ up, atol=1e-12)


def test_mlp_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    m = Mlp([5, 16, 16, 4], activations=["tanh", "gelu", "linear"], rng=rng, dtype=np.float64)
    x = rng.normal(size=(8, 5))
    target = rng.normal(size=(8, 4))

    def loss_fn():
        d = m.forward(x) - target
        return float(np.sum(d * d))

    y, cache = m.forward_cached(x)
    grads, _ = m.backward(cache, 2.0 * (y - target))
    err = fd_gradient_check(loss_fn, m.params, grads, np.random.default_rng(0), num_coords=64)
    assert err < 1e-4


def test_saturated_tanh_gradient_vanishes():
    m = Mlp([1, 1, 1], activations=["tanh", "linear"], dtype=np.float64)
    m.params["w0"][:] = 1.0
    m.params["b0"][:] = 0.0
    _, cache = m.forward_cached(np.array([20.0]))
    grads, _ = m.backward(cache, np.ones(1))
    assert abs(grads["w0"][0, 0]) < 1e-12


def test_adamw_zero_grad_no_decay_is_identity():
    opt = AdamW(lr=0.1, weight_decay=0.0)
    params = {"p": np.array([1.0, -2.0], dtype=np.float64)}
    adamw_step(opt, params, {"p": np.zeros(2)})
    assert np.allclose(params["p"], [1.0, -2.0])


def test_adamw_single_step_hand_computed():
    opt = AdamW(lr=0.01, weight_decay=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    p0 = 2.0
    g = 0.5
    params = {"p": np.array([p0])}
    adamw_step(opt, params, {"p": np.array([g])})
    m_hat = ((1 - 0.9) * g) / (1 - 0.9)
    v_hat = ((1 - 0.999) * g * g) / (1 - 0.999)
    expect = p0 - 0.01 * 0.1 * p0 - 0.01 * m_hat / (math.sqrt(v_hat) + 1e-8)
    assert np.isclose(params["p"][0], expect, atol=1e-12)


def test_adamw_reduces_to_sign_sgd():
    opt = AdamW(lr=0.05, weight_decay=0.0, beta1=0.0, beta2=0.0, eps=1e-8)
    params = {"p": np.array([1.0, 1.0])}
    g = np.array([0.3, -0.002])
    adamw_step(opt, params, {"p": g.copy()})
    expect = 1.0 - 0.05 * g / (np.abs(g) + 1e-8)
    assert np.allclose(params["p"], expect, atol=1e-12)


def test_adamw_quadratic_bowl_converges():
    opt = AdamW(lr=0.01, weight_decay=0.0)
    params = {"p": np.array([3.0, -4.0])}
    target = np.array([1.0, 2.0])
    for _ in range(5000):
        g = 2.0 * (params["p"] - target)
        opt.step(params, {"p": g})
        if np.max(np.abs(params["p"] - target)) < 1e-6:
            break
    assert np.max(np.abs(params["p"] - target)) < 1e-6


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(4)
    blk = AttentionBlock(8, rng=rng, dtype=np.float64)
    q = rng.normal(size=(5, 8))
    kv = rng.normal(size=(11, 8))
    w = blk.attention_weights(q, kv)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-6)


def test_attention_kv_permutation_invariance():
    rng = np.random.default_rng(5)
    blk = AttentionBlock(8, rng=rng, dtype=np.float64)
    q = rng.normal(size=(4, 8))
    kv = rng.normal(size=(9, 8))
    y = blk.forward(q, kv)
    perm = rng.permutation(9)
    y2 = blk.forward(q, kv[perm])
    assert np.allclose(y, y2, atol=1e-6)


def test_attention_single_repeated_token():
    rng = np.random.default_rng(6)
    blk = AttentionBlock(6, rng=rng, dtype=np.float64)
    q = rng.normal(size=(3, 6))
    token = rng.normal(size=6)
    kv = np.tile(token, (7, 1))
    y = blk.forward(q, kv)
    expect = np.tile(token @ blk.params["wv"] @ blk.params["wo"], (3, 1))
    assert np.allclose(y, expect, atol=1e-9)


def test_attention_gradients_match_finite_differences():
    rng = np.random.default_rng(7)
    blk = AttentionBlock(6, rng=rng, dtype=np.float64)
    q = rng.normal(size=(4, 6))
    kv = rng.normal(size=(9, 6))
    target = rng.normal(size=(4, 6))

    def loss_fn():
        d = blk.forward(q, kv) - target
        return float(np.sum(d * d))

    y, cache = blk.forward_cached(q, kv)
    grads, _, _ = blk.backward(cache, 2.0 * (y - target))
    err = fd_gradient_check(loss_fn, blk.params, grads, np.random.default_rng(1), num_coords=64)
    assert err < 1e-4


def test_logit_normal_properties():
    rng = np.random.default_rng(8)
    s = sample_time_logit_normal(rng, 0.0, 1.0, size=100_000)
    assert np.all((s > 0) & (s < 1))
    assert abs(np.median(s) - 0.5) < 0.01


def test_logit_normal_ks_against_analytic_cdf():
    rng = np.random.default_rng(9)
    n = 100_000
    s = np.sort(sample_time_logit_normal(rng, 0.0, 1.0, size=n))
    z = np.log(s / (1 - s))
    cdf = 0.5 * (1.0 + np.array([math.erf(v / math.sqrt(2)) for v in z]))
    ecdf_hi = np.arange(1, n + 1) / n
    ecdf_lo = np.arange(0, n) / n
    ks = max(np.max(np.abs(ecdf_hi - cdf)), np.max(np.abs(cdf - ecdf_lo)))
    assert ks < 0.01


def test_linear_anneal():
    assert linear_anneal_lr(1e-3, 0, 100) == 1e-3
    assert linear_anneal_lr(1e-3, 50, 100) == pytest.approx(5e-4)
    assert linear_anneal_lr(1e-3, 100, 100) == 0.0


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(10)
    params = {
        "a.w0": rng.normal(size=(4, 3)).astype(np.float32),
        "a.b0": rng.normal(size=3).astype(np.float32),
        "null": rng.normal(size=7).astype(np.float32),
    }
    base = str(tmp_path / "ckpt")
    save_checkpoint(base, params, meta={"seed": 7, "step": 123})
    loaded, meta = load_checkpoint(base)
    assert meta == {"seed": 7, "step": 123}
    for k in params:
        assert np.array_equal(loaded[k], params[k])
