import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anc_lab import nn
from anc_lab.errors import CorruptFile, NumericFault, ShapeError


def fresh():
    return {}, {}


def upstream_loss(layer, x, up):
    return float(np.sum(up * layer.forward(x)))


def check_input_grad(layer, x, rng=0, kink_fn=None):
    up = np.random.default_rng(rng).standard_normal(layer.forward(x).shape)
    layer.forward(x)
    dx = layer.backward(up)
    return nn.input_grad_check(layer.forward, x.copy(), dx, up, kink_fn=kink_fn)


def check_param_grad(layer, x, rng=0, kink_fn=None):
    up = np.random.default_rng(rng).standard_normal(layer.forward(x).shape)
    for g in layer.grads.values():
        g.fill(0)
    layer.forward(x)
    layer.backward(up)
    return nn.grad_check(lambda: upstream_loss(layer, x, up), layer.params,
                         {k: v.copy() for k, v in layer.grads.items()}, kink_fn=kink_fn)


class TestConvBlock:
    def test_identity_kernel_pools_max(self):
        p, g = fresh()
        block = nn.ConvBlock(p, g, "b.", 2, 2, kernel=1, groups=1, rng=0, norm=False)
        p["b.conv.weight"][...] = np.eye(2)[:, :, None, None]
        x = np.random.default_rng(0).uniform(0.1, 1.0, (2, 6, 8))
        expected = x.reshape(2, 3, 2, 4, 2).max(axis=(2, 4))
        np.testing.assert_array_equal(nn.conv_block_forward(x, block), expected)

    def test_output_halved(self):
        p, g = fresh()
        block = nn.ConvBlock(p, g, "b.", 8, 16, rng=0)
        assert block.forward(np.zeros((8, 513, 256))).shape == (16, 256, 128)

    def test_shape_error(self):
        p, g = fresh()
        block = nn.ConvBlock(p, g, "b.", 3, 4, rng=0)
        with pytest.raises(ShapeError):
            block.forward(np.zeros((2, 8, 8)))

    def test_input_gradient(self):
        p, g = fresh()
        block = nn.ConvBlock(p, g, "b.", 3, 8, rng=1)
        p["b.norm.gamma"][...] = np.random.default_rng(2).uniform(0.5, 1.5, 8)
        x = np.random.default_rng(3).standard_normal((3, 10, 12))
        res = check_input_grad(block, x, kink_fn=block.kinks)
        assert res.max_rel_error < 1e-5 and res.checked >= 150

    def test_param_gradient(self):
        p, g = fresh()
        block = nn.ConvBlock(p, g, "b.", 3, 8, rng=4)
        x = np.random.default_rng(5).standard_normal((3, 10, 12))
        res = check_param_grad(block, x, kink_fn=block.kinks)
        assert res.max_rel_error < 1e-5


class TestLayers:
    def test_conv_brute_force(self):
        p, g = fresh()
        conv = nn.Conv2d(p, g, "c.", 2, 3, 3, rng=0)
        p["c.bias"][...] = [0.1, -0.2, 0.3]
        x = np.random.default_rng(1).standard_normal((2, 5, 6))
        y = conv.forward(x)
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        w = p["c.weight"]
        for o in range(3):
            for i in range(5):
                for j in range(6):
                    ref = np.sum(w[o] * xp[:, i : i + 3, j : j + 3]) + p["c.bias"][o]
                    assert y[o, i, j] == pytest.approx(ref, abs=1e-12)

    def test_conv_gradients(self):
        p, g = fresh()
        conv = nn.Conv2d(p, g, "c.", 2, 4, 3, rng=0)
        x = np.random.default_rng(1).standard_normal((2, 7, 5))
        assert check_input_grad(conv, x).max_rel_error < 1e-7
        assert check_param_grad(conv, x).max_rel_error < 1e-7

    def test_group_norm_constant_input(self):
        p, g = fresh()
        gn = nn.GroupNorm(p, g, "n.", 8, 4, affine=False)
        np.testing.assert_array_equal(gn.forward(np.full((8, 4, 4), 3.7)), 0.0)

    def test_group_norm_statistics(self):
        p, g = fresh()
        gn = nn.GroupNorm(p, g, "n.", 8, 4, affine=False)
        y = gn.forward(np.random.default_rng(0).standard_normal((8, 5, 5)) * 3 + 1).reshape(4, -1)
        np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=1), 1, atol=1e-3)

    def test_group_norm_gradients(self):
        p, g = fresh()
        gn = nn.GroupNorm(p, g, "n.", 8, 4)
        p["n.gamma"][...] = np.linspace(0.5, 2, 8)
        p["n.beta"][...] = np.linspace(-1, 1, 8)
        x = np.random.default_rng(1).standard_normal((8, 3, 4))
        assert check_input_grad(gn, x).max_rel_error < 1e-6
        assert check_param_grad(gn, x).max_rel_error < 1e-6

    def test_maxpool_drops_odd_edge_and_routes_gradient(self):
        pool = nn.MaxPool2()
        x = np.arange(2 * 5 * 5, dtype=float).reshape(2, 5, 5)
        y = pool.forward(x)
        assert y.shape == (2, 2, 2)
        dx = pool.backward(np.ones_like(y))
        assert dx.sum() == 8 and np.all(dx[:, 4, :] == 0) and np.all(dx[:, :, 4] == 0)
        assert np.all(dx[x == y.max()] == 1)

    def test_maxpool_tie_first(self):
        pool = nn.MaxPool2()
        pool.forward(np.ones((1, 2, 2)))
        dx = pool.backward(np.ones((1, 1, 1)))
        np.testing.assert_array_equal(dx[0], [[1, 0], [0, 0]])

    def test_maxpool_too_small(self):
        with pytest.raises(ShapeError):
            nn.MaxPool2().forward(np.ones((1, 1, 4)))

    def test_relu_gradient_excludes_zero(self):
        relu = nn.ReLU()
        x = np.array([[[-1.0, 0.0, 2.0]]])
        relu.forward(x)
        np.testing.assert_array_equal(relu.backward(np.ones_like(x)), [[[0, 0, 1]]])

    def test_kinks_reported(self):
        # inputs sitting exactly on the ReLU hinge are skipped, not compared
        relu = nn.ReLU()
        x = np.zeros((1, 4, 4))
        x[0, 0, :2] = [0.5, -0.5]
        res = check_input_grad(relu, x, kink_fn=relu.kinks)
        assert res.skipped_kinks > 0 and res.max_rel_error < 1e-7

    def test_freq_pool(self):
        x = np.random.default_rng(0).standard_normal((4, 1, 7))
        np.testing.assert_array_equal(nn.adaptive_avg_pool_freq(x), x[:, 0, :].T)
        np.testing.assert_array_equal(nn.adaptive_avg_pool_freq(np.full((3, 5, 2), 2.5)), 2.5)
        x = np.random.default_rng(1).standard_normal((3, 6, 4))
        ref = np.array([[sum(x[c, f, t] for f in range(6)) / 6 for c in range(3)] for t in range(4)])
        np.testing.assert_allclose(nn.adaptive_avg_pool_freq(x), ref, atol=1e-12)
        with pytest.raises(ShapeError):
            nn.adaptive_avg_pool_freq(np.zeros((3, 0, 4)))

    def test_freq_pool_gradient(self):
        layer = nn.FreqAvgPool()
        assert check_input_grad(layer, np.random.default_rng(2).standard_normal((3, 5, 4))).max_rel_error < 1e-8

    def test_linear_gradients(self):
        p, g = fresh()
        lin = nn.Linear(p, g, "l.", 6, 4, rng=0)
        p["l.bias"][...] = [0.1, 0.2, -0.3, 0.0]
        x = np.random.default_rng(1).standard_normal(6)
        assert check_input_grad(lin, x).max_rel_error < 1e-7
        assert check_param_grad(lin, x).max_rel_error < 1e-7


def scalar_gru(z, h, wr, ur, br, wu, uu, bu, wh, uh, bh):
    sig = lambda a: 1 / (1 + math.exp(-a))
    r = sig(wr * z + ur * h + br)
    u = sig(wu * z + uu * h + bu)
    cand = math.tanh(wh * z + uh * (r * h) + bh)
    return (1 - u) * h + u * cand


class TestGru:
    def test_zero_params(self):
        p, g = fresh()
        gru = nn.GRU(p, g, "g.", 64, 64, rng=0)
        for v in p.values():
            v.fill(0)
        np.testing.assert_array_equal(nn.gru_step(np.ones(64), np.zeros(64), gru), 0.0)

    def test_scalar_reference(self):
        p, g = fresh()
        gru = nn.GRU(p, g, "g.", 1, 1, rng=0)
        vals = dict(wr=0.3, ur=-0.7, br=0.1, wu=1.1, uu=0.4, bu=-0.2, wh=-0.9, uh=0.8, bh=0.05)
        p["g.W"][:, 0] = [vals["wr"], vals["wu"], vals["wh"]]
        p["g.U"][:, 0] = [vals["ur"], vals["uu"], vals["uh"]]
        p["g.b"][...] = [vals["br"], vals["bu"], vals["bh"]]
        h = 0.25
        for z in (0.5, -1.2, 2.0):
            got = nn.gru_step(np.array([z]), np.array([h]), gru)[0]
            ref = scalar_gru(z, h, **vals)
            assert got == pytest.approx(ref, abs=1e-12)
            h = ref
        seq = gru.forward(np.array([[0.5], [-1.2], [2.0]]), h0=np.array([0.25]))
        assert seq[-1, 0] == pytest.approx(h, abs=1e-12)

    def test_four_step_gradients(self):
        p, g = fresh()
        gru = nn.GRU(p, g, "g.", 5, 6, rng=1)
        p["g.b"][...] = np.random.default_rng(2).normal(0, 0.3, 18)
        z = np.random.default_rng(3).standard_normal((4, 5))
        assert check_input_grad(gru, z).max_rel_error < 1e-5
        assert check_param_grad(gru, z).max_rel_error < 1e-5

    def test_non_finite(self):
        p, g = fresh()
        gru = nn.GRU(p, g, "g.", 2, 2, rng=0)
        with pytest.raises(NumericFault):
            gru.step(np.array([np.nan, 0.0]), np.zeros(2))

    def test_shape(self):
        p, g = fresh()
        gru = nn.GRU(p, g, "g.", 3, 4, rng=0)
        with pytest.raises(ShapeError):
            gru.forward(np.zeros((5, 2)))


class TestSoftmaxLoss:
    def test_zero_head_uniform(self):
        p, g = fresh()
        lin = nn.Linear(p, g, "h.", 64, 36, rng=0)
        p["h.weight"].fill(0)
        np.testing.assert_allclose(nn.linear_softmax(np.ones(64), lin), 1 / 36, atol=1e-15)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), shift=st.floats(-500, 500))
    def test_sum_and_shift(self, seed, shift):
        z = np.random.default_rng(seed).normal(0, 20, 36)
        p = nn.softmax(z)
        assert abs(p.sum() - 1) < 1e-9 and np.all(p >= 0)
        np.testing.assert_allclose(nn.softmax(z + shift), p, atol=1e-12)

    def test_extended_precision_oracle(self):
        from decimal import Decimal, getcontext

        getcontext().prec = 50
        z = np.random.default_rng(0).normal(0, 5, 36)
        ex = [Decimal(float(v)).exp() for v in z]
        total = sum(ex)
        ref = np.array([float(e / total) for e in ex])
        assert np.max(np.abs(nn.softmax(z) - ref)) < 1e-12

    def test_cross_entropy_cases(self):
        assert nn.cross_entropy(nn.one_hot(3, 36), nn.one_hot(3, 36)).loss == 0.0
        res = nn.cross_entropy(np.full(36, 1 / 36), nn.one_hot(0, 36))
        assert res.loss == pytest.approx(math.log(36), abs=1e-12)
        assert round(res.loss, 4) == 3.5835
        clamp = nn.cross_entropy(nn.one_hot(1, 36), nn.one_hot(0, 36))
        assert clamp.clamped and clamp.loss == pytest.approx(-math.log(1e-30))
        with pytest.raises(ShapeError):
            nn.cross_entropy(np.ones(3) / 3, nn.one_hot(0, 4))

    def test_logit_gradient(self):
        z = np.random.default_rng(1).standard_normal(36)
        y = nn.one_hot(7, 36)
        box = {"z": z}
        loss = lambda: nn.cross_entropy(nn.softmax(box["z"]), y).loss
        res = nn.grad_check(loss, box, {"z": nn.cross_entropy(nn.softmax(z), y).grad}, n_coords=36)
        assert res.max_rel_error < 1e-6


class TestAdam:
    def test_zero_gradient(self):
        params = {"w": np.array([1.0, -2.0])}
        state = nn.AdamState()
        nn.adam_update(params, {"w": np.zeros(2)}, state)
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])
        assert state.step == 1

    def test_first_step_magnitude(self):
        params = {"w": np.array([0.0, 0.0])}
        nn.adam_update(params, {"w": np.array([5.0, -0.3])}, nn.AdamState(lr=0.01))
        np.testing.assert_allclose(params["w"], [-0.01, 0.01], rtol=1e-6)

    def test_quadratic(self):
        params = {"w": np.array([0.0])}
        state = nn.AdamState(lr=0.1)
        for _ in range(50):
            nn.adam_update(params, {"w": 2 * (params["w"] - 3)}, state)
        assert abs(params["w"][0] - 3) < 0.5

    def test_non_finite(self):
        with pytest.raises(NumericFault):
            nn.adam_update({"w": np.zeros(1)}, {"w": np.array([np.inf])}, nn.AdamState())

    def test_hand_computed_second_step(self):
        params = {"w": np.array([1.0])}
        state = nn.AdamState(lr=0.1)
        nn.adam_update(params, {"w": np.array([1.0])}, state)
        nn.adam_update(params, {"w": np.array([-1.0])}, state)
        m = 0.9 * 0.1 - 0.1
        v = 0.999 * 0.001 + 0.001
        step = 0.1 * (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert params["w"][0] == pytest.approx(1.0 - 0.1 * 1 / (1 + 1e-8) - step, abs=1e-12)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = {"a.weight": np.random.default_rng(0).standard_normal((3, 2, 2)), "b": np.arange(4.0)}
        nn.save_checkpoint(tmp_path / "m.ancn", params)
        back = nn.load_checkpoint(tmp_path / "m.ancn")
        assert list(back) == list(params)
        for k in params:
            assert back[k].tobytes() == params[k].tobytes()
        text = (tmp_path / "m.ancn.txt").read_text()
        assert "a.weight\t3x2x2\t12" in text and "total\t-\t16" in text

    def test_corrupt(self, tmp_path):
        nn.save_checkpoint(tmp_path / "m.ancn", {"w": np.ones(5)})
        data = (tmp_path / "m.ancn").read_bytes()
        for name, blob in [("t", data[:-3]), ("m", b"NOPE" + data[4:]), ("x", data + b"\0" * 8)]:
            (tmp_path / name).write_bytes(blob)
            with pytest.raises(CorruptFile):
                nn.load_checkpoint(tmp_path / name)
