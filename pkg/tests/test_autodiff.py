"""Gradient, optimizer and replay tests for the autodiff engine.

Every op's analytic gradient is checked against 64-bit central finite
differences; Adam's first step is checked against its closed form.
"""

import numpy as np
import pytest

from elvc import autodiff as ad
from elvc.errors import ConfigError, ContractError


def _rand(rng, *shape):
    # keep magnitudes moderate and away from relu/l1 kinks
    x = rng.standard_normal(shape)
    return x + 0.05 * np.sign(x)


def test_relu_clamps_at_zero():
    g = ad.Graph()
    x = g.constant([-2.0, 0.0, 3.0])
    y = g.relu(x)
    assert np.allclose(y.value, [0.0, 0.0, 3.0])


def test_softmax_symmetry():
    g = ad.Graph()
    y = g.softmax(g.constant([0.0, 0.0, 0.0]))
    assert np.allclose(y.value, [1 / 3, 1 / 3, 1 / 3])


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 3)).astype(np.float32)
    g = ad.Graph()
    y = g.matmul(g.constant(np.eye(3)), g.constant(a))
    assert np.allclose(y.value, a)


def test_forward_replay_with_new_inputs():
    g = ad.Graph()
    x = g.input("x", [1.0, 2.0])
    y = g.output("y", g.scale(x, 3.0))
    out = ad.forward(g, {"x": np.array([2.0, 2.0])})
    assert np.allclose(out["y"], [6.0, 6.0])


def test_forward_rejects_unknown_binding():
    g = ad.Graph()
    g.input("x", [1.0])
    with pytest.raises(ConfigError):
        ad.forward(g, {"bogus": np.array([1.0])})


def test_backward_square():
    g = ad.Graph()
    x = g.param("x", ad.Tensor([3.0], requires_grad=True))
    loss = g.sum(g.mul(x, x))
    grads = ad.backward(g, loss)
    assert np.allclose(grads["x"], [6.0])


def test_backward_requires_scalar_loss():
    g = ad.Graph()
    x = g.param("x", ad.Tensor([1.0, 2.0], requires_grad=True))
    y = g.relu(x)
    with pytest.raises(ContractError):
        ad.backward(g, y)


def test_unused_parameter_gets_zero_gradient():
    g = ad.Graph()
    x = g.param("x", ad.Tensor([2.0], requires_grad=True))
    g.param("unused", ad.Tensor([[1.0, 2.0]], requires_grad=True))
    loss = g.sum(g.mul(x, x))
    grads = ad.backward(g, loss)
    assert np.all(grads["unused"] == 0.0)
    assert grads["unused"].shape == (1, 2)


def test_softmax_gradient_matches_finite_difference():
    def f(g, leaves):
        y = g.softmax(leaves["x"])
        return g.sum(g.slice(y, (slice(0, 1),)))

    assert ad.grad_check(f, {"x": np.array([1.0, 2.0])}, h=1e-3) < 1e-4


def test_gradient_linearity_on_random_graphs():
    rng = np.random.default_rng(7)
    for _ in range(5):
        x0 = _rand(rng, 4, 5)
        w0 = _rand(rng, 5, 3)

        def build(g):
            x = g.param("x", ad.Tensor(x0, requires_grad=True))
            w = g.param("w", ad.Tensor(w0, requires_grad=True))
            h = g.tanh(g.matmul(x, w))
            la = g.l1_loss(h, g.constant(np.zeros((4, 3))))
            lb = g.sum(g.sigmoid(h))
            return la, lb

        ga = ad.Graph()
        la, lb = build(ga)
        grads_sum = ad.backward(ga, ga.add(la, lb))
        gb = ad.Graph()
        la2, lb2 = build(gb)
        part_a = ad.backward(gb, la2)
        gc = ad.Graph()
        la3, lb3 = build(gc)
        part_b = ad.backward(gc, lb3)
        for k in grads_sum:
            assert np.allclose(grads_sum[k], part_a[k] + part_b[k], atol=1e-5)


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(42)
        g = ad.Graph()
        x = g.param("x", ad.Tensor(rng.standard_normal((6, 6)), requires_grad=True))
        w = g.param("w", ad.Tensor(rng.standard_normal((6, 6)), requires_grad=True))
        loss = g.l1_loss(g.tanh(g.matmul(x, w)), g.constant(np.zeros((6, 6))))
        return loss.value.copy(), ad.backward(g, loss)

    l1, g1 = run()
    l2, g2 = run()
    assert l1.tobytes() == l2.tobytes()
    for k in g1:
        assert g1[k].tobytes() == g2[k].tobytes()


# --- per-op finite-difference sweep -------------------------------------------

def _op_cases(rng):
    """(name, builder, point) triples covering every differentiable op."""
    b, t, d = 2, 3, 4
    cases = []

    cases.append(("add_same", lambda g, lv: g.sum(g.tanh(g.add(lv["a"], lv["b"]))),
                  {"a": _rand(rng, t, d), "b": _rand(rng, t, d)}))
    cases.append(("add_bias", lambda g, lv: g.sum(g.tanh(g.add(lv["a"], lv["b"]))),
                  {"a": _rand(rng, b, t, d), "b": _rand(rng, d)}))
    cases.append(("mul", lambda g, lv: g.sum(g.mul(lv["a"], lv["b"])),
                  {"a": _rand(rng, t, d), "b": _rand(rng, t, d)}))
    cases.append(("matmul_2d", lambda g, lv: g.sum(g.tanh(g.matmul(lv["a"], lv["b"]))),
                  {"a": _rand(rng, t, d), "b": _rand(rng, d, 5)}))
    cases.append(("matmul_batched", lambda g, lv: g.sum(g.tanh(g.matmul(lv["a"], lv["b"]))),
                  {"a": _rand(rng, b, t, d), "b": _rand(rng, b, d, t)}))
    cases.append(("matmul_weight_bcast", lambda g, lv: g.sum(g.tanh(g.matmul(lv["a"], lv["b"]))),
                  {"a": _rand(rng, b, t, d), "b": _rand(rng, d, 5)}))
    cases.append(("transpose", lambda g, lv: g.sum(g.sigmoid(g.transpose(lv["a"], (1, 0, 2)))),
                  {"a": _rand(rng, b, t, d)}))
    cases.append(("reshape", lambda g, lv: g.sum(g.tanh(g.reshape(lv["a"], (t * d,)))),
                  {"a": _rand(rng, t, d)}))
    cases.append(("concat", lambda g, lv: g.sum(g.tanh(g.concat([lv["a"], lv["b"]], axis=1))),
                  {"a": _rand(rng, t, d), "b": _rand(rng, t, 2)}))
    cases.append(("slice", lambda g, lv: g.sum(g.tanh(g.slice(lv["a"], (slice(1, 3), slice(0, 2))))),
                  {"a": _rand(rng, t + 1, d)}))
    cases.append(("embedding",
                  lambda g, lv: g.sum(g.tanh(g.embedding(lv["tab"], np.array([0, 2, 2, 1])))),
                  {"tab": _rand(rng, 3, d)}))
    cases.append(("relu", lambda g, lv: g.sum(g.relu(lv["a"])), {"a": _rand(rng, t, d)}))
    cases.append(("sigmoid", lambda g, lv: g.sum(g.sigmoid(lv["a"])), {"a": _rand(rng, t, d)}))
    cases.append(("tanh", lambda g, lv: g.sum(g.tanh(lv["a"])), {"a": _rand(rng, t, d)}))
    cases.append(("softmax", lambda g, lv: g.l1_loss(g.softmax(lv["a"]), g.constant(np.zeros((t, d)))),
                  {"a": _rand(rng, t, d)}))
    cases.append(("layer_norm",
                  lambda g, lv: g.sum(g.tanh(g.layer_norm(lv["x"], lv["g"], lv["b"]))),
                  {"x": _rand(rng, t, d), "g": 1 + 0.1 * _rand(rng, d), "b": 0.1 * _rand(rng, d)}))

    mask = (rng.random((t, d)) > 0.4) / 0.6
    cases.append(("dropout", lambda g, lv: g.sum(g.tanh(g.dropout(lv["a"], mask))),
                  {"a": _rand(rng, t, d)}))
    fill = rng.random((t, d)) > 0.5
    cases.append(("masked_fill",
                  lambda g, lv: g.l1_loss(g.softmax(g.masked_fill(lv["a"], fill, -1e9)),
                                          g.constant(np.zeros((t, d)))),
                  {"a": _rand(rng, t, d)}))
    cases.append(("scale", lambda g, lv: g.sum(g.tanh(g.scale(lv["a"], 0.37))),
                  {"a": _rand(rng, t, d)}))
    cases.append(("l1_loss", lambda g, lv: g.l1_loss(lv["a"], lv["b"]),
                  {"a": _rand(rng, t, d), "b": _rand(rng, t, d)}))
    w = rng.random((t, d)).round() + 0.5
    cases.append(("l1_loss_weighted", lambda g, lv: g.l1_loss(lv["a"], lv["b"], weight=w),
                  {"a": _rand(rng, t, d), "b": _rand(rng, t, d)}))
    labels = (rng.random((t, d)) > 0.5).astype(float)
    cases.append(("bce_logits", lambda g, lv: g.bce_logits(lv["z"], g.constant(labels)),
                  {"z": _rand(rng, t, d)}))
    cases.append(("bce_logits_weighted",
                  lambda g, lv: g.bce_logits(lv["z"], g.constant(labels), weight=w),
                  {"z": _rand(rng, t, d)}))
    return cases


def test_every_op_gradient_against_finite_differences():
    rng = np.random.default_rng(123)
    worst = {}
    for trial in range(5):
        for name, fn, point in _op_cases(rng):
            err = ad.grad_check(fn, point, h=1e-4)
            worst[name] = max(worst.get(name, 0.0), err)
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    assert not bad, f"ops over tolerance: {bad}"


def test_two_layer_tanh_network_grad_check():
    rng = np.random.default_rng(5)

    def f(g, lv):
        h = g.tanh(g.add(g.matmul(lv["x"], lv["w1"]), lv["b1"]))
        y = g.tanh(g.add(g.matmul(h, lv["w2"]), lv["b2"]))
        return g.l1_loss(y, g.constant(np.zeros((4, 2))))

    for _ in range(20):
        point = {"x": _rand(rng, 4, 6), "w1": _rand(rng, 6, 5), "b1": _rand(rng, 5),
                 "w2": _rand(rng, 5, 2), "b2": _rand(rng, 2)}
        assert ad.grad_check(f, point) < 1e-4


def test_layer_norm_composite_grad_check():
    rng = np.random.default_rng(11)

    def f(g, lv):
        h = g.layer_norm(g.matmul(lv["x"], lv["w"]), lv["g"], lv["b"])
        return g.sum(g.sigmoid(h))

    for _ in range(10):
        point = {"x": _rand(rng, 3, 4), "w": _rand(rng, 4, 6),
                 "g": 1 + 0.1 * _rand(rng, 6), "b": 0.1 * _rand(rng, 6)}
        assert ad.grad_check(f, point) < 1e-4


def test_linear_map_grad_check_near_exact():
    def f(g, lv):
        return g.sum(g.matmul(lv["x"], g.constant(np.arange(12.0).reshape(4, 3))))

    assert ad.grad_check(f, {"x": np.random.default_rng(1).standard_normal((2, 4))}) < 1e-8


def test_grad_check_rejects_bad_h():
    with pytest.raises(ContractError):
        ad.grad_check(lambda g, lv: g.sum(lv["x"]), {"x": np.ones(2)}, h=1.0)


# --- Adam ----------------------------------------------------------------------

def test_adam_first_step_closed_form():
    rng = np.random.default_rng(3)
    g0 = rng.standard_normal((4, 3)).astype(np.float32)
    g0[g0 == 0] = 0.1
    params = {"w": ad.Tensor(np.ones((4, 3)), requires_grad=True)}
    state = ad.AdamState.init(params, lr=1e-3)
    ad.adam_step(params, {"w": g0}, state)
    # first step: m_hat = g, v_hat = g^2, so delta = -lr * g / (|g| + eps)
    expect = 1.0 - 1e-3 * g0 / (np.abs(g0) + 1e-8)
    assert np.allclose(params["w"].data, expect, atol=1e-6)
    assert state.t == 1


def test_adam_zero_gradient_keeps_params():
    params = {"w": ad.Tensor([1.0, -2.0], requires_grad=True)}
    state = ad.AdamState.init(params)
    before = params["w"].data.copy()
    ad.adam_step(params, {"w": np.zeros(2, dtype=np.float32)}, state)
    assert np.array_equal(params["w"].data, before)
    assert state.t == 1


def test_adam_missing_key_raises():
    params = {"w": ad.Tensor([1.0], requires_grad=True)}
    state = ad.AdamState.init(params)
    with pytest.raises(ContractError):
        ad.adam_step(params, {}, state)


def test_adam_deterministic_runs():
    def run():
        rng = np.random.default_rng(9)
        params = {"w": ad.Tensor(rng.standard_normal((5, 5)), requires_grad=True)}
        state = ad.AdamState.init(params, lr=3e-4)
        for _ in range(10):
            ad.adam_step(params, {"w": rng.standard_normal((5, 5)).astype(np.float32)}, state)
        return params["w"].data.tobytes()

    assert run() == run()
