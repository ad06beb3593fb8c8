import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from midl import tensor as T
from midl.layers import (
    ConfigError,
    GateConfig,
    LinearAnneal,
    MidlParams,
    PreconditionError,
    closed_form_gradients,
    dropout_fc_forward,
    f1_forward,
    f2_forward,
    fc_forward,
    gumbel_gate,
    midl_backward_check,
    midl_forward,
    random_topk_gate,
    topk_mask,
)
from midl.tensor import DimensionError, Tape, Tensor

from conftest import central_difference, rel_err

EVAL = dict(training=False)


def params(d_in=8, d_out=8, seed=0, **kw):
    return MidlParams.init(d_in, d_out, np.random.default_rng(seed), **kw)


# ---------------------------------------------------------------- fully connected


def test_fc_identity_and_hand_case():
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(fc_forward(x, np.eye(3), np.zeros(3)).data, x)
    out = fc_forward([[1.0, 1.0]], [[1.0, 2.0], [3.0, 4.0]], [0.0, 0.0])
    np.testing.assert_array_equal(out.data, [[3.0, 7.0]])


def test_fc_shape_mismatch():
    with pytest.raises(DimensionError):
        fc_forward(np.ones((2, 3)), np.ones((2, 4)))


def test_fc_weight_gradient_is_dz_times_x(rng):
    x = rng.standard_normal((1, 4))
    w = rng.standard_normal((3, 4))
    b = rng.standard_normal(3)
    r = rng.standard_normal((1, 3))
    W = Tensor(w, requires_grad=True)
    with Tape():
        T.sum(T.mul(fc_forward(x, W, b), r)).backward()
    # dL/dz_i = r_i, so dL/dW_ij = r_i * x_j for every weight
    np.testing.assert_allclose(W.grad, np.outer(r[0], x[0]), rtol=0, atol=1e-15)
    f = lambda: float(((x @ w.T + b) * r).sum())
    assert rel_err(W.grad, central_difference(f, w)) < 1e-5


# ---------------------------------------------------------------- dropout FC


def test_dropout_fc_reduces_to_fc(rng):
    x, w, b = rng.standard_normal((5, 4)), rng.standard_normal((3, 4)), rng.standard_normal(3)
    ref = fc_forward(x, w, b).data
    np.testing.assert_array_equal(dropout_fc_forward(x, w, b, 0.0, True, rng).data, ref)
    np.testing.assert_array_equal(dropout_fc_forward(x, w, b, 0.7, False).data, ref)


def test_dropout_p_must_be_below_one():
    with pytest.raises(ConfigError):
        dropout_fc_forward(np.ones((1, 2)), np.ones((1, 2)), None, 1.0, True, np.random.default_rng(0))


def test_inverted_dropout_is_unbiased(rng):
    x = np.array([[0.3, -1.2, 2.5, 0.8]])
    n = 100_000
    xs = np.repeat(x, n, axis=0)
    # identity weights expose the masked-scaled input directly
    out = dropout_fc_forward(xs, np.eye(4), None, 0.3, True, rng).data
    np.testing.assert_allclose(out.mean(axis=0), x[0], rtol=0.01)


def test_dropout_gradient_only_through_kept_inputs(rng):
    x = rng.standard_normal((6, 5))
    W = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    r = rng.standard_normal((6, 2))
    gen = np.random.default_rng(7)
    with Tape():
        T.sum(T.mul(dropout_fc_forward(x, W, None, 0.5, True, gen), r)).backward()
    keep = (np.random.default_rng(7).random(x.shape) >= 0.5) / 0.5
    np.testing.assert_allclose(W.grad, r.T @ (x * keep), atol=1e-12)
    dropped_everywhere = keep.sum(axis=0) == 0
    assert np.all(W.grad[:, dropped_everywhere] == 0)


# ---------------------------------------------------------------- Top-k


def test_topk_mask_examples():
    np.testing.assert_array_equal(topk_mask([[0.9, 0.1, 0.5]], 2), [[1, 0, 1]])
    np.testing.assert_array_equal(topk_mask([[0.2, 0.7, 0.1]], 3), [[1, 1, 1]])


def test_topk_ties_go_to_lowest_index():
    np.testing.assert_array_equal(topk_mask([[0.5, 0.5, 0.5, 0.5]], 2), [[1, 1, 0, 0]])
    np.testing.assert_array_equal(topk_mask([[0.1, 0.7, 0.7, 0.7]], 2), [[0, 1, 1, 0]])


def test_topk_range_check():
    with pytest.raises(ConfigError):
        topk_mask(np.ones((1, 3)), 0)
    with pytest.raises(ConfigError):
        topk_mask(np.ones((1, 3)), 4)


def sort_oracle(row, k):
    order = sorted(range(len(row)), key=lambda i: (-row[i], i))
    m = [0.0] * len(row)
    for i in order[:k]:
        m[i] = 1.0
    return m


def test_topk_matches_full_sort_oracle(rng):
    a = rng.random((200, 64))
    for k in (1, 7, 32, 63):
        mask = topk_mask(a, k)
        assert all(mask[i].tolist() == sort_oracle(a[i].tolist(), k) for i in range(len(a)))


@given(st.integers(0, 2**32 - 1), st.floats(0.01, 100.0))
@settings(max_examples=30)
def test_topk_mask_invariant_to_positive_logit_scaling(seed, c):
    r = np.random.default_rng(seed)
    logits = r.standard_normal((4, 16))
    a1 = T.sigmoid(logits).data
    a2 = T.sigmoid(logits * c).data
    # skip draws where scaling saturates sigmoid into exact ties
    if len(np.unique(a2)) < a2.size:
        return
    np.testing.assert_array_equal(topk_mask(a1, 5), topk_mask(a2, 5))


# ---------------------------------------------------------------- random and Gumbel gates


def test_random_topk_gate(rng):
    m = random_topk_gate(50, 10, 3, rng)
    assert (m.sum(axis=1) == 3).all()
    assert (random_topk_gate(5, 10, 10, rng) == 1).all()


def test_random_topk_uniformity(rng):
    m = random_topk_gate(100_000, 8, 3, rng)
    np.testing.assert_allclose(m.mean(axis=0), 3 / 8, atol=0.01 * 3 / 8 + 1e-12, rtol=0)


def test_gumbel_noiseless_reduces_to_sigmoid(rng):
    x, w = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    np.testing.assert_array_equal(gumbel_gate(x, w, 1.0, noise=np.zeros((3, 5))).data, T.sigmoid(x @ w).data)
    np.testing.assert_array_equal(gumbel_gate(x, w, 1.0, rng=None).data, T.sigmoid(x @ w).data)


def test_gumbel_high_temperature_is_half(rng):
    x, w = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    draws = np.stack([gumbel_gate(x, w, 1e4, rng).data for _ in range(200)])
    np.testing.assert_allclose(draws.mean(axis=0), 0.5, atol=0.01)


def test_gumbel_temperature_must_be_positive():
    with pytest.raises(ConfigError):
        gumbel_gate(np.ones((1, 2)), np.ones((2, 2)), 0.0)


def test_gumbel_mean_matches_quadrature(rng):
    x = np.array([[1.0, -0.5], [0.2, 0.3]])
    w = np.array([[0.8, -1.5, 0.1], [0.4, 2.0, -0.3]])
    tau = 0.7
    draws = np.stack([gumbel_gate(x, w, tau, rng).data for _ in range(10_000)])
    s = x @ w
    # g1 - g2 of two standard Gumbels is standard logistic
    logistic = lambda l: np.exp(-l) / (1 + np.exp(-l)) ** 2
    expected = np.vectorize(
        lambda si: integrate.quad(lambda l: logistic(l) / (1 + np.exp(-(si + l) / tau)), -60, 60)[0]
    )(s)
    np.testing.assert_allclose(draws.mean(axis=0), expected, atol=0.05)


# ---------------------------------------------------------------- gate config


def test_gate_config_resolution():
    assert GateConfig(k=0.5).resolve_k(256) == 128
    assert GateConfig(k=0.001).resolve_k(10) == 1
    assert GateConfig(k=3).resolve_k(8) == 3
    assert GateConfig(k=1.0).resolve_k(8) == 8
    with pytest.raises(ConfigError):
        GateConfig(k=9).resolve_k(8)
    with pytest.raises(ConfigError):
        GateConfig(mode="nope")
    with pytest.raises(ConfigError):
        GateConfig(fixed_alpha=1.5)
    with pytest.raises(ConfigError):
        GateConfig(post_gate_dropout_p=1.0)


def test_annealed_k_schedule():
    g = GateConfig(anneal=LinearAnneal(1.0, 0.5, 4))
    assert [g.resolve_k(8, e) for e in range(6)] == [8, 7, 6, 5, 4, 4]
    with pytest.raises(ConfigError):
        g.resolve_k(8)
    with pytest.raises(ConfigError):
        midl_forward(np.ones((1, 8)), params(), g)


# ---------------------------------------------------------------- MID-L forward


def test_default_rank_and_hidden():
    p = params(784, 256)
    assert (p.rank, p.hidden) == (128, 256)
    p = params(8, 8)
    assert (p.rank, p.hidden) == (4, 8)
    with pytest.raises(DimensionError):
        params(8, 4, rank=6)


def test_fixed_alpha_endpoints_are_exact(rng):
    p = params()
    x = rng.standard_normal((6, 8))
    f1, f2 = f1_forward(x, p).data, f2_forward(x, p).data
    z1, _ = midl_forward(x, p, GateConfig(mode="fixed_alpha", fixed_alpha=1.0))
    z0, _ = midl_forward(x, p, GateConfig(mode="fixed_alpha", fixed_alpha=0.0))
    zh, _ = midl_forward(x, p, GateConfig(mode="fixed_alpha", fixed_alpha=0.5))
    assert z1.data.tobytes() == f1.tobytes()
    assert z0.data.tobytes() == f2.tobytes()
    np.testing.assert_allclose(zh.data, (f1 + f2) / 2, rtol=1e-15, atol=1e-15)


def test_learned_mode_recomposes_from_trace(rng):
    p = params()
    x = rng.standard_normal((5, 8))
    z, tr = midl_forward(x, p, GateConfig(k=4, mode="learned"))
    assert tr.k == 4
    assert (tr.mask.sum(axis=1) == 4).all()
    np.testing.assert_array_equal(tr.alpha_hat, tr.alpha * tr.mask)
    assert ((tr.alpha > 0) & (tr.alpha < 1)).all()
    f1, f2 = f1_forward(x, p).data, f2_forward(x, p).data
    np.testing.assert_allclose(z.data, tr.alpha_hat * f1 + (1 - tr.alpha_hat) * f2, rtol=0, atol=1e-15)


def test_random_topk_mode_uses_mask_as_gate(rng):
    p = params()
    x = rng.standard_normal((5, 8))
    z, tr = midl_forward(x, p, GateConfig(k=3, mode="random_topk"), rng=rng)
    assert (tr.mask.sum(axis=1) == 3).all()
    np.testing.assert_array_equal(tr.alpha_hat, tr.mask)
    f1, f2 = f1_forward(x, p).data, f2_forward(x, p).data
    np.testing.assert_allclose(z.data, np.where(tr.mask == 1, f1, f2), atol=1e-15)


def test_eval_mode_is_deterministic(rng):
    p = params()
    x = rng.standard_normal((5, 8))
    for mode in ("learned", "gumbel"):
        g = GateConfig(mode=mode, post_gate_dropout_p=0.5)
        a, _ = midl_forward(x, p, g, training=False, rng=np.random.default_rng(1))
        b, _ = midl_forward(x, p, g, training=False, rng=np.random.default_rng(2))
        assert a.data.tobytes() == b.data.tobytes()


def test_post_gate_dropout_only_in_training(rng):
    p = params()
    x = rng.standard_normal((5, 8))
    g = GateConfig(k=4, post_gate_dropout_p=0.5)
    z_eval, tr = midl_forward(x, p, g, training=False)
    z_train, tr_train = midl_forward(x, p, g, training=True, rng=np.random.default_rng(3))
    assert not np.array_equal(z_eval.data, z_train.data)
    # the trace is recorded before dropout
    np.testing.assert_array_equal(tr.alpha_hat, tr_train.alpha_hat)


def test_midl_input_dimension_check():
    with pytest.raises(DimensionError):
        midl_forward(np.ones((2, 7)), params())


# ---------------------------------------------------------------- MID-L backward


def separated_setup(seed=0, batch=4, d=8, k=4):
    for s in range(seed, seed + 200):
        r = np.random.default_rng(s)
        p = MidlParams.init(d, d, r)
        x = r.uniform(-2, 2, (batch, d))
        a = np.sort(T.sigmoid(x @ p.w_alpha.data).data, axis=1)[:, ::-1]
        if (a[:, k - 1] - a[:, k]).min() > 1e-3:
            return p, x
    raise AssertionError("no separated draw found")


@pytest.mark.parametrize("ste", ["full", "masked"])
def test_backward_check_matches_both_oracles(ste):
    p, x = separated_setup()
    rep = midl_backward_check(p, x, 4, ste=ste)
    assert rep["max_error_closed_form"] < 1e-4
    assert rep["max_error_finite_difference"] < 1e-4


def test_backward_check_rejects_ties():
    p = params()
    x = np.zeros((2, 8))  # all gates exactly 0.5
    with pytest.raises(PreconditionError):
        midl_backward_check(p, x, 4)


def always_off_setup():
    r = np.random.default_rng(5)
    p = MidlParams.init(8, 8, r)
    x = r.uniform(-1, 1, (4, 8))
    x[:, 0] = 1.0
    w = p.w_alpha.data
    off = [1, 4, 6, 7]
    w[0, :] = 6.0
    w[0, off] = -6.0
    return p, x, off


def test_masked_out_neurons_get_zero_f1_gradient():
    p, x, off = always_off_setup()
    r = np.random.default_rng(9).standard_normal((4, 8))
    with Tape():
        z, tr = midl_forward(x, p, GateConfig(k=4), training=False)
        T.sum(T.mul(z, r)).backward()
    assert (tr.alpha_hat[:, off] == 0).all()
    assert (p.f1_up.grad[:, off] == 0).all()
    assert (p.f1_bias.grad[off] == 0).all()
    # the rich path carries these neurons at full weight 1 - a_hat = 1
    h2 = np.maximum(x @ p.f2_w1.data + p.f2_b1.data, 0)
    np.testing.assert_allclose(p.f2_w2.grad[:, off], h2.T @ r[:, off], atol=1e-14)
    assert np.all(np.abs(p.f2_w2.grad[:, off]).sum(axis=0) > 0)
    np.testing.assert_allclose(p.f2_b2.grad[off], r[:, off].sum(axis=0), atol=1e-14)


def test_full_ste_gate_gradient_has_no_mask_factor():
    p, x, off = always_off_setup()
    r = np.random.default_rng(2).standard_normal((4, 8))
    with Tape():
        z, tr = midl_forward(x, p, GateConfig(k=4, ste="full"), training=False)
        T.sum(T.mul(z, r)).backward()
    f1, f2 = f1_forward(x, p).data, f2_forward(x, p).data
    a = tr.alpha
    expected = x.T @ (r * (f1 - f2) * a * (1 - a))
    np.testing.assert_allclose(p.w_alpha.grad, expected, atol=1e-14)
    assert np.all(p.w_alpha.grad[:, off] != 0)

    p.w_alpha.zero_grad()
    with Tape():
        z, tr = midl_forward(x, p, GateConfig(k=4, ste="masked"), training=False)
        T.sum(T.mul(z, r)).backward()
    assert (p.w_alpha.grad[:, off] == 0).all()


def test_closed_form_agrees_with_autodiff_under_dropout_free_training(rng):
    p, x = separated_setup(seed=10)
    r = rng.standard_normal((4, 8))
    g = GateConfig(k=4, post_gate_dropout_p=0.0)
    with Tape():
        z, tr = midl_forward(x, p, g, training=True, rng=rng)
        T.sum(T.mul(z, r)).backward()
    cf = closed_form_gradients(x, p, tr, r)
    for name, t in p.named_tensors().items():
        assert rel_err(t.grad, cf[name]) < 1e-12, name
