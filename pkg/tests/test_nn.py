import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cradle.numerics import autodiff as ad
from cradle.numerics.nn import (
    AdamState,
    MlpSpec,
    NonFiniteGradient,
    adam_step,
    clip_by_global_norm,
    init_mlp,
    mlp_forward,
)


def test_zero_depth_spec_is_identity():
    spec = MlpSpec((3,))
    x = np.array([[1.0, -2.0, 0.5]])
    np.testing.assert_array_equal(mlp_forward(spec, {}, "net", ad.as_tensor(x))["out"].data, x)


def test_softmax_head_on_zero_logits():
    spec = MlpSpec((2,), heads=(("p", 3, "softmax"),))
    params = {"net.p.w": np.zeros((2, 3)), "net.p.b": np.zeros(3)}
    out = mlp_forward(spec, params, "net", ad.as_tensor(np.array([[4.0, -1.0]])))["p"].data
    np.testing.assert_allclose(out, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_hand_set_two_layer_net():
    spec = MlpSpec((2, 2), "relu", (("y", 1, "identity"),))
    params = {
        "net.h0.w": np.array([[1.0, 2.0], [3.0, -1.0]]),
        "net.h0.b": np.array([0.5, 0.0]),
        "net.y.w": np.array([[2.0], [-1.0]]),
        "net.y.b": np.array([0.25]),
    }
    # hidden pre-activation: [1 - 3 + 0.5, 2 + 1 + 0] = [-1.5, 3] -> relu [0, 3]
    # output: 0 * 2 + 3 * -1 + 0.25
    out = mlp_forward(spec, params, "net", ad.as_tensor(np.array([[1.0, -1.0]])))["y"].data
    np.testing.assert_allclose(out, [[-2.75]])


@given(arrays(np.float64, (5, 4), elements=st.floats(-20, 20)))
def test_softmax_rows_sum_to_one(x):
    spec = MlpSpec((4, 6), "softplus", (("p", 7, "softmax"), ("s", 2, "softplus")))
    params = init_mlp(spec, "f", np.random.default_rng(0))
    out = mlp_forward(spec, params, "f", ad.as_tensor(x))
    np.testing.assert_allclose(out["p"].data.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(out["s"].data > 0)


def test_input_width_mismatch():
    spec = MlpSpec((3, 4))
    params = init_mlp(spec, "f", np.random.default_rng(0))
    with pytest.raises(ValueError, match="input width"):
        mlp_forward(spec, params, "f", ad.as_tensor(np.ones((2, 5))))


def test_spec_validation():
    with pytest.raises(ValueError):
        MlpSpec(())
    with pytest.raises(ValueError):
        MlpSpec((3,), heads=(("p", 1, "softmax"),))
    with pytest.raises(ValueError):
        MlpSpec((3,), activation="tanh")


def test_init_is_seeded_and_bounded():
    spec = MlpSpec((16, 8), heads=(("y", 2, "identity"),))
    a = init_mlp(spec, "f", np.random.default_rng(4))
    b = init_mlp(spec, "f", np.random.default_rng(4))
    assert a.keys() == b.keys() == {"f.h0.w", "f.h0.b", "f.y.w", "f.y.b"}
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    assert np.abs(a["f.h0.w"]).max() <= 0.25


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = {"w": np.array([1.0, -2.0])}
        new, _ = adam_step(p, {"w": np.zeros(2)}, AdamState(lr=0.1))
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_first_step(self):
        new, st_ = adam_step({"p": np.array(0.0)}, {"p": np.array(1.0)}, AdamState(lr=0.1))
        # bias-corrected m/v are exactly g and g^2 after one step
        assert float(new["p"]) == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
        assert st_.step == 1

    def test_clipping_halves_gradient(self):
        g = {"a": np.array([120.0, 0.0]), "b": np.array([160.0])}  # norm 200
        clipped, norm = clip_by_global_norm(g, 100.0)
        assert norm == pytest.approx(200.0)
        np.testing.assert_allclose(clipped["a"], [60.0, 0.0])
        np.testing.assert_allclose(clipped["b"], [80.0])
        s1, s2 = AdamState(lr=0.1, clip_norm=100.0), AdamState(lr=0.1, clip_norm=np.inf)
        adam_step({"a": np.zeros(2), "b": np.zeros(1)}, g, s1)
        adam_step({"a": np.zeros(2), "b": np.zeros(1)}, clipped, s2)
        np.testing.assert_allclose(s1.m["a"], s2.m["a"])
        np.testing.assert_allclose(s1.v["b"], s2.v["b"])

    def test_under_threshold_untouched(self):
        g = {"a": np.array([3.0, 4.0])}
        clipped, norm = clip_by_global_norm(g, 100.0)
        assert norm == 5.0
        assert clipped["a"] is g["a"]

    def test_non_finite_names_parameter(self):
        with pytest.raises(NonFiniteGradient, match="dec.h0.w"):
            adam_step({"dec.h0.w": np.zeros(2)}, {"dec.h0.w": np.array([1.0, np.nan])}, AdamState())

    def test_does_not_mutate_params(self):
        p = {"w": np.array([1.0])}
        adam_step(p, {"w": np.array([2.0])}, AdamState(lr=0.5))
        assert p["w"][0] == 1.0

    @given(arrays(np.float64, (3,), elements=st.floats(-1e3, 1e3)), st.integers(1, 5))
    def test_deterministic(self, g, steps):
        def run():
            s = AdamState(lr=0.01, clip_norm=10.0)
            p = {"w": np.zeros(3)}
            for _ in range(steps):
                p, s = adam_step(p, {"w": g}, s)
            return p["w"]

        np.testing.assert_array_equal(run(), run())

    def test_minimises_quadratic(self):
        p, s = {"w": np.array([3.0, -2.0])}, AdamState(lr=0.05)
        for _ in range(2000):
            p, s = adam_step(p, {"w": 2 * p["w"]}, s)
        assert np.abs(p["w"]).max() < 1e-2
