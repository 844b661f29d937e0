import numpy as np
import pytest

from adaptive_collect.errors import DimensionError, NumericalError, StructuralError
from adaptive_collect.nn import (
    AdamState,
    LstmStack,
    adam_update,
    backward_sequence,
    clip_grad_norm,
    copy_params,
    dense_forward,
    forward_sequence,
    grad_check,
    init_dense,
    init_lstm,
    load_params,
    lstm_step,
    save_params,
    sub,
    zeros_like,
)

from oracles import lstm_step_reference


def _lstm(n_in, H, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    return {
        "Wx": scale * rng.normal(size=(n_in, 4 * H)),
        "Wh": scale * rng.normal(size=(H, 4 * H)),
        "b": scale * rng.normal(size=4 * H),
    }


def _network(n_in=4, H=3, layers=2, out=2, seed=0):
    rng = np.random.default_rng(seed)
    p = {}
    for i in range(layers):
        init_lstm(p, f"l{i}", n_in if i == 0 else H, H, rng)
    init_dense(p, "head", H, out, rng)
    # move off the init so every gate sees nonzero gradients
    for k in p:
        p[k] += 0.3 * rng.normal(size=p[k].shape)
    return p, LstmStack(tuple(f"l{i}" for i in range(layers)))


class TestLstmStep:
    def test_zero_params(self):
        p = {"Wx": np.zeros((2, 12)), "Wh": np.zeros((3, 12)), "b": np.zeros(12)}
        h, c, _ = lstm_step(p, np.ones((1, 2)), np.zeros((1, 3)), np.zeros((1, 3)))
        assert np.all(h == 0) and np.all(c == 0)

    def test_forget_saturation(self):
        p = _lstm(2, 3, seed=1)
        p["b"][3:6] = 50.0
        x, h, c = np.random.default_rng(2).normal(size=(3, 1, 2))[0], np.zeros((1, 3)), np.array([[0.4, -0.2, 0.9]])
        _, c_new, cache = lstm_step(p, x, h, c)
        i, g = cache[3], cache[6]
        np.testing.assert_allclose(c_new, c + i * g, atol=1e-12)

    def test_matches_reference(self):
        p = _lstm(4, 3, seed=3)
        rng = np.random.default_rng(4)
        x, h, c = rng.normal(size=(5, 4)), rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
        h1, c1, _ = lstm_step(p, x, h, c)
        h2, c2 = lstm_step_reference(p["Wx"], p["Wh"], p["b"], x, h, c)
        np.testing.assert_allclose(h1, h2, atol=1e-12)
        np.testing.assert_allclose(c1, c2, atol=1e-12)

    def test_hidden_bounded(self):
        p = _lstm(4, 6, seed=5, scale=20.0)
        rng = np.random.default_rng(6)
        h, _, _ = lstm_step(p, 50 * rng.normal(size=(64, 4)), rng.normal(size=(64, 6)), 50 * rng.normal(size=(64, 6)))
        assert np.all(np.abs(h) <= 1.0)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            lstm_step(_lstm(4, 3), np.zeros((1, 5)), np.zeros((1, 3)), np.zeros((1, 3)))

    def test_mask_keeps_state(self):
        p = _lstm(2, 3)
        rng = np.random.default_rng(0)
        h, c = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        h1, c1, _ = lstm_step(p, rng.normal(size=(2, 2)), h, c, mask=np.array([1.0, 0.0]))
        np.testing.assert_array_equal(h1[1], h[1])
        np.testing.assert_array_equal(c1[1], c[1])
        assert not np.allclose(h1[0], h[0])

    def test_forget_bias_initialized_to_one(self):
        p = {}
        init_lstm(p, "x", 3, 5, np.random.default_rng(0))
        np.testing.assert_array_equal(p["x.b"][5:10], 1.0)
        np.testing.assert_array_equal(np.delete(p["x.b"], range(5, 10)), 0.0)


class TestSequence:
    def test_length_one_is_step_plus_dense(self):
        p, stack = _network(layers=1)
        x = np.random.default_rng(1).normal(size=(1, 2, 4))
        out, _, _ = forward_sequence(p, stack, "head", x)
        h, _, _ = lstm_step(sub(p, "l0"), x[0], np.zeros((2, 3)), np.zeros((2, 3)))
        y, _ = dense_forward(sub(p, "head"), h)
        np.testing.assert_array_equal(out[0], y)

    def test_zero_length(self):
        p, stack = _network()
        out, state, _ = forward_sequence(p, stack, "head", np.zeros((0, 3, 4)))
        assert out.shape == (0, 3, 2)
        assert np.all(state == 0)

    def test_deterministic(self):
        p, stack = _network()
        x = np.random.default_rng(2).normal(size=(6, 3, 4))
        a, _, _ = forward_sequence(p, stack, "head", x)
        b, _, _ = forward_sequence(p, stack, "head", x)
        assert np.array_equal(a, b)

    def test_zero_output_grad(self):
        p, stack = _network()
        x = np.random.default_rng(2).normal(size=(5, 2, 4))
        out, _, cache = forward_sequence(p, stack, "head", x)
        grads, _, _ = backward_sequence(p, cache, np.zeros_like(out))
        assert all(np.all(g == 0) for g in grads.values())

    def test_grad_length_mismatch(self):
        p, stack = _network()
        out, _, cache = forward_sequence(p, stack, "head", np.zeros((3, 1, 4)))
        with pytest.raises(DimensionError):
            backward_sequence(p, cache, np.zeros((2, 1, 2)))

    def test_single_unit_hand_derivation(self):
        wx = np.array([[0.3, -0.2, 0.5, 0.7]])
        b = np.array([0.1, 1.0, -0.3, 0.2])
        p = {"c.Wx": wx.copy(), "c.Wh": np.array([[0.4, 0.1, -0.6, 0.2]]), "c.b": b.copy(),
             "d.W": np.array([[1.7]]), "d.b": np.array([0.05])}
        x = 0.8
        out, _, cache = forward_sequence(p, LstmStack(("c",)), "d", np.array([[[x]]]))
        grads, _, _ = backward_sequence(p, cache, np.ones((1, 1, 1)))

        sg = lambda z: 1 / (1 + np.exp(-z))  # noqa: E731
        z = x * wx[0] + b
        i, o, g = sg(z[0]), sg(z[2]), np.tanh(z[3])
        c1 = i * g
        h1 = o * np.tanh(c1)
        wd = 1.7
        dc = wd * o * (1 - np.tanh(c1) ** 2)
        dz = np.array([dc * g * i * (1 - i), 0.0, wd * np.tanh(c1) * o * (1 - o), dc * i * (1 - g * g)])
        assert out[0, 0, 0] == pytest.approx(wd * h1 + 0.05, abs=1e-14)
        np.testing.assert_allclose(grads["d.W"], [[h1]], atol=1e-14)
        np.testing.assert_allclose(grads["d.b"], [1.0])
        np.testing.assert_allclose(grads["c.Wx"][0], x * dz, atol=1e-14)
        np.testing.assert_allclose(grads["c.b"], dz, atol=1e-14)
        np.testing.assert_allclose(grads["c.Wh"], 0.0)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_random_network_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        n_in, H, T = rng.integers(1, 6), rng.integers(1, 6), rng.integers(1, 8)
        p, stack = _network(int(n_in), int(H), 2, 2, seed)
        xs = rng.normal(size=(T, 2, n_in))
        w = rng.normal(size=(T, 2, 2))

        def loss(q):
            out, _, _ = forward_sequence(q, stack, "head", xs)
            return float(np.sum(w * out))

        _, _, cache = forward_sequence(p, stack, "head", xs)
        grads, _, _ = backward_sequence(p, cache, w)
        assert grad_check(loss, p, grads, tolerance=1e-4).passed

    def test_mask_state0_and_final_gradient(self):
        p, stack = _network(4, 3, 2, 2, seed=9)
        rng = np.random.default_rng(9)
        xs = rng.normal(size=(6, 3, 4))
        mask = (rng.random((6, 3)) < 0.7).astype(float)
        s0 = 0.5 * rng.normal(size=(3, 2, 2, 3))
        w = rng.normal(size=(6, 3, 2))
        wf = rng.normal(size=s0.shape)

        def loss(q, s=s0):
            out, fin, _ = forward_sequence(q, stack, "head", xs, state0=s, mask=mask)
            return float(np.sum(w * out) + np.sum(wf * fin))

        _, _, cache = forward_sequence(p, stack, "head", xs, state0=s0, mask=mask)
        grads, _, ds0 = backward_sequence(p, cache, w, dfinal=wf)
        assert grad_check(loss, p, grads).passed
        assert grad_check(lambda q: loss(p, q["s"]), {"s": s0.copy()}, {"s": ds0}).passed


class TestGradCheck:
    def test_linear_head(self):
        rng = np.random.default_rng(0)
        p = {}
        init_dense(p, "h", 4, 3, rng)
        x, w = rng.normal(size=(5, 4)), rng.normal(size=(5, 3))
        y, cache = dense_forward(sub(p, "h"), x)
        g = zeros_like(p)
        from adaptive_collect.nn import dense_backward
        from adaptive_collect.nn.layers import _GradView

        dense_backward(sub(p, "h"), cache, w, _GradView(g, "h"))
        rep = grad_check(lambda q: float(np.sum(w * dense_forward(sub(q, "h"), x)[0])), p, g)
        assert rep.max_rel_error < 1e-7

    def test_two_layer_lstm_dims_4_3_seq_6(self):
        p, stack = _network(4, 3, 2, 1, seed=4)
        xs = np.random.default_rng(4).normal(size=(6, 2, 4))
        _, _, cache = forward_sequence(p, stack, "head", xs)
        grads, _, _ = backward_sequence(p, cache, np.ones((6, 2, 1)))
        rep = grad_check(lambda q: float(forward_sequence(q, stack, "head", xs)[0].sum()), p, grads, tolerance=1e-4)
        assert rep.passed and rep.n_checked == sum(v.size for v in p.values())

    def test_corrupted_gradient_fails(self):
        p, stack = _network(4, 3, 2, 1, seed=4)
        xs = np.random.default_rng(4).normal(size=(6, 2, 4))
        _, _, cache = forward_sequence(p, stack, "head", xs)
        grads, _, _ = backward_sequence(p, cache, np.ones((6, 2, 1)))
        k = "l0.Wx"
        i = int(np.argmax(np.abs(grads[k])))
        grads[k].reshape(-1)[i] *= 1.01
        rep = grad_check(lambda q: float(forward_sequence(q, stack, "head", xs)[0].sum()), p, grads, tolerance=1e-4)
        assert not rep.passed and rep.worst == (k, i)


class TestAdam:
    def test_zero_grads(self):
        p = {"w": np.array([1.0, -2.0])}
        st = AdamState(lr=0.1)
        adam_update(st, p, {"w": np.zeros(2)})
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])
        assert st.step == 1

    def test_first_step_closed_form(self):
        lr, g = 1e-3, 0.37
        p = {"w": np.array([2.0])}
        adam_update(AdamState(lr=lr), p, {"w": np.array([g])})
        # m_hat = g, v_hat = g^2 after bias correction
        assert p["w"][0] == pytest.approx(2.0 - lr * g / (abs(g) + 1e-8), abs=1e-15)

    def test_quadratic_descends_monotonically(self):
        p = {"x": np.array([3.0])}
        st = AdamState(lr=0.05)
        prev = 9.0
        for _ in range(50):
            adam_update(st, p, {"x": 2 * p["x"]})
            f = float(p["x"][0] ** 2)
            assert f < prev
            prev = f

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_update(AdamState(), {"w": np.zeros(2)}, {"w": np.zeros(3)})

    def test_non_finite_gradient_rejected(self):
        p = {"w": np.zeros(2)}
        with pytest.raises(NumericalError):
            adam_update(AdamState(), p, {"w": np.array([np.nan, 0.0])})
        np.testing.assert_array_equal(p["w"], 0.0)

    def test_clip(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(g, 1.0) == pytest.approx(5.0)
        assert np.sqrt(g["a"] ** 2 + g["b"] ** 2)[0] == pytest.approx(1.0)

    def test_deterministic_trajectories(self):
        def train(seed):
            p, stack = _network(seed=seed)
            st = AdamState(lr=1e-2)
            xs = np.random.default_rng(seed).normal(size=(4, 2, 4))
            for _ in range(5):
                out, _, cache = forward_sequence(p, stack, "head", xs)
                grads, _, _ = backward_sequence(p, cache, out)
                adam_update(st, p, grads)
            return p

        a, b = train(3), train(3)
        assert all(np.array_equal(a[k], b[k]) for k in a)


def test_checkpoint_round_trip(tmp_path):
    p, _ = _network()
    p["odd"] = np.array([np.pi, 1e-300, -0.0])
    save_params(tmp_path / "c.npz", p, {"kind": "test"})
    q, meta = load_params(tmp_path / "c.npz")
    assert meta["kind"] == "test" and meta["format_version"] == 1
    assert set(q) == set(p)
    for k in p:
        assert q[k].tobytes() == p[k].tobytes()


def test_checkpoint_rejects_foreign_file(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(2))
    with pytest.raises(StructuralError):
        load_params(tmp_path / "x.npz")


def test_copy_is_deep():
    p, _ = _network()
    q = copy_params(p)
    q["head.b"] += 1
    assert not np.array_equal(p["head.b"], q["head.b"])
