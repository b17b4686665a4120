"""Engine tests: primitive vjps against central differences, tape semantics,
shape/domain error contracts, and the data-movement ops' exact inverses."""

import numpy as np
import pytest

from bimal.numerics import (
    DomainError,
    Graph,
    NondeterministicError,
    Param,
    ShapeError,
    StateError,
    Tensor,
    apply_primitive,
    backward,
    broadcast_to,
    concat,
    conv2d,
    finite_diff_check,
    log_softmax_channels,
    matmul_channels,
    slice_axis,
    squeeze2x2,
    unsqueeze2x2,
)

RNG = np.random.default_rng(42)


def scalarize(t, w):
    """Project any tensor to a scalar with fixed random weights."""
    return (t * Tensor(w)).sum()


class TestPrimitiveGradients:
    """Every primitive's vjp must agree with central finite differences."""

    def check(self, build, *param_arrays, eps=1e-5, tol=1e-6):
        params = [Param(a.copy(), f"p{i}") for i, a in enumerate(param_arrays)]
        err = finite_diff_check(lambda: build(*params), params, eps=eps)
        assert err < tol, f"max rel error {err}"

    def test_add(self):
        a, b = RNG.normal(size=(3, 4)), RNG.normal(size=(3, 4))
        w = RNG.normal(size=(3, 4))
        self.check(lambda p, q: scalarize(p.value + q.value, w), a, b)

    def test_sub(self):
        a, b = RNG.normal(size=(3, 4)), RNG.normal(size=(3, 4))
        w = RNG.normal(size=(3, 4))
        self.check(lambda p, q: scalarize(p.value - q.value, w), a, b)

    def test_mul(self):
        a, b = RNG.normal(size=(3, 4)), RNG.normal(size=(3, 4))
        w = RNG.normal(size=(3, 4))
        self.check(lambda p, q: scalarize(p.value * q.value, w), a, b)

    def test_div(self):
        a = RNG.normal(size=(3, 4))
        b = RNG.uniform(0.5, 2.0, size=(3, 4))
        w = RNG.normal(size=(3, 4))
        self.check(lambda p, q: scalarize(p.value / q.value, w), a, b)

    def test_scalar_operand(self):
        a = RNG.normal(size=(3, 4))
        s = np.asarray(0.7)
        w = RNG.normal(size=(3, 4))
        self.check(lambda p, q: scalarize(p.value * q.value + q.value, w), a, s)

    def test_neg(self):
        a = RNG.normal(size=(5,))
        w = RNG.normal(size=(5,))
        self.check(lambda p: scalarize(-p.value, w), a)

    def test_exp(self):
        a = RNG.normal(size=(3, 3))
        w = RNG.normal(size=(3, 3))
        self.check(lambda p: scalarize(p.value.exp(), w), a)

    def test_log(self):
        a = RNG.uniform(0.2, 3.0, size=(3, 3))
        w = RNG.normal(size=(3, 3))
        self.check(lambda p: scalarize(p.value.log(), w), a)

    def test_tanh(self):
        a = RNG.normal(size=(3, 3))
        w = RNG.normal(size=(3, 3))
        self.check(lambda p: scalarize(p.value.tanh(), w), a)

    def test_sum(self):
        a = RNG.normal(size=(4, 2))
        self.check(lambda p: p.value.sum() * 1.3, a)

    def test_mean(self):
        a = RNG.normal(size=(4, 2))
        self.check(lambda p: p.value.mean() * 1.3, a)

    def test_broadcast(self):
        a = RNG.normal(size=(3,))
        w = RNG.normal(size=(2, 4, 3))
        self.check(lambda p: scalarize(broadcast_to(p.value, (2, 4, 3)), w), a)

    def test_reshape(self):
        a = RNG.normal(size=(2, 6))
        w = RNG.normal(size=(3, 4))
        self.check(lambda p: scalarize(p.value.reshape((3, 4)), w), a)

    def test_slice(self):
        a = RNG.normal(size=(4, 5, 3))
        w = RNG.normal(size=(4, 2, 3))
        self.check(lambda p: scalarize(slice_axis(p.value, 1, 1, 3), w), a)

    def test_concat(self):
        a, b = RNG.normal(size=(2, 3)), RNG.normal(size=(2, 2))
        w = RNG.normal(size=(2, 5))
        self.check(lambda p, q: scalarize(concat((p.value, q.value), 1), w), a, b)

    def test_matmul_channels(self):
        wmat = RNG.normal(size=(3, 3))
        x = RNG.normal(size=(4, 5, 3))
        w = RNG.normal(size=(4, 5, 3))
        self.check(
            lambda p, q: scalarize(matmul_channels(p.value, q.value), w), wmat, x
        )

    def test_conv2d(self):
        x = RNG.normal(size=(5, 4, 2))
        k = RNG.normal(size=(3, 3, 2, 3)) * 0.5
        b = RNG.normal(size=(3,))
        w = RNG.normal(size=(5, 4, 3))
        self.check(
            lambda p, q, r: scalarize(conv2d(p.value, q.value, r.value), w), x, k, b
        )

    def test_log_softmax_channels(self):
        x = RNG.normal(size=(3, 4, 5))
        w = RNG.normal(size=(3, 4, 5))
        self.check(lambda p: scalarize(log_softmax_channels(p.value), w), x)

    def test_squeeze2x2(self):
        x = RNG.normal(size=(4, 6, 2))
        w = RNG.normal(size=(2, 3, 8))
        self.check(lambda p: scalarize(squeeze2x2(p.value), w), x)


class TestOracleValues:
    """Hand-derivable values and exact identities."""

    def test_matmul_channels_matches_einsum(self):
        w = RNG.normal(size=(6, 6))
        x = RNG.normal(size=(7, 5, 6))
        got = matmul_channels(Tensor(w), Tensor(x)).data
        want = np.einsum("ij,hwj->hwi", w, x)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-13)

    def test_conv2d_matches_direct_loop(self):
        x = RNG.normal(size=(6, 5, 3))
        k = RNG.normal(size=(3, 3, 3, 4))
        b = RNG.normal(size=(4,))
        got = conv2d(Tensor(x), Tensor(k), Tensor(b)).data
        xp = np.zeros((8, 7, 3))
        xp[1:-1, 1:-1] = x
        want = np.zeros((6, 5, 4))
        for i in range(6):
            for j in range(5):
                patch = xp[i : i + 3, j : j + 3, :]
                want[i, j] = np.einsum("abc,abcd->d", patch, k) + b
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)

    def test_log_softmax_rows_normalize(self):
        x = RNG.normal(size=(4, 4, 6)) * 5
        ls = log_softmax_channels(Tensor(x)).data
        np.testing.assert_allclose(np.exp(ls).sum(axis=2), 1.0, atol=1e-12)
        # invariant under adding a per-pixel constant to the logits
        ls2 = log_softmax_channels(Tensor(x + 3.7)).data
        np.testing.assert_allclose(ls, ls2, atol=1e-12)

    def test_squeeze_unsqueeze_roundtrip_exact(self):
        x = RNG.normal(size=(8, 6, 3))
        y = unsqueeze2x2(squeeze2x2(Tensor(x)))
        assert np.array_equal(y.data, x)
        z = RNG.normal(size=(4, 3, 12))
        w = squeeze2x2(unsqueeze2x2(Tensor(z)))
        assert np.array_equal(w.data, z)

    def test_squeeze_is_a_permutation(self):
        x = np.arange(2 * 4 * 1, dtype=np.float64).reshape(2, 4, 1)
        y = squeeze2x2(Tensor(x)).data
        assert sorted(y.reshape(-1)) == sorted(x.reshape(-1))
        # top-left 2x2 block of channel 0 lands in the first 4 channels
        np.testing.assert_array_equal(y[0, 0], [x[0, 0, 0], x[0, 1, 0], x[1, 0, 0], x[1, 1, 0]])

    def test_quadratic_fd_is_exact(self):
        # central differences are exact for quadratics up to roundoff
        p = Param(np.array([1.5, -2.0, 0.5]), "w")
        err = finite_diff_check(lambda: (p.value * p.value).sum(), [p], eps=1e-3)
        assert err < 1e-8


class TestTapeSemantics:
    def test_backward_accumulates_additively(self):
        p = Param(np.array(2.0), "w")
        with Graph():
            loss = (p.value * p.value).sum()
        backward(loss)
        assert p.grad.data == pytest.approx(4.0)
        backward(loss)
        assert p.grad.data == pytest.approx(8.0)
        p.zero_grad()
        assert p.grad.data == 0.0

    def test_fan_out_sums_gradients(self):
        p = Param(np.array(3.0), "w")
        with Graph():
            a = p.value * 2.0
            loss = (a + a).sum()  # d/dp = 4
        backward(loss)
        assert p.grad.data == pytest.approx(4.0)

    def test_reverse_sweep_visits_each_node_once(self):
        calls = {"n": 0}
        p = Param(np.array([1.0, 2.0]), "w")
        with Graph() as g:
            a = p.value.exp()
            b = a * a
            loss = b.sum()
        orig = g._vjps[a._node]

        def counting(gout):
            calls["n"] += 1
            return orig(gout)

        g._vjps[a._node] = counting
        backward(loss)
        assert calls["n"] == 1

    def test_gradients_map_exposes_input_grads(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]))
        with Graph() as g:
            loss = (x * x).sum()
        backward(loss)
        np.testing.assert_allclose(g.grad_wrt(x), [2.0, 4.0, 6.0])

    def test_no_graph_means_pure_numpy(self):
        x = Tensor(np.ones(3))
        y = x * 2.0
        assert y._graph is None
        with pytest.raises(StateError):
            backward((x * x).sum())

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3))
        with Graph():
            y = x * 2.0
        with pytest.raises(ShapeError):
            backward(y)

    def test_graphs_are_independent(self):
        p = Param(np.array(1.0), "w")
        with Graph():
            l1 = (p.value * 3.0).sum()
        with Graph():
            l2 = (p.value * 5.0).sum()
        backward(l1)
        backward(l2)
        assert p.grad.data == pytest.approx(8.0)


class TestErrorContracts:
    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))

    def test_log_domain_error_carries_index(self):
        x = np.ones((2, 2))
        x[1, 0] = -1.0
        with pytest.raises(DomainError, match=r"\(1, 0\)"):
            Tensor(x).log()

    def test_div_by_zero(self):
        with pytest.raises(DomainError):
            Tensor(np.ones(3)) / Tensor(np.array([1.0, 0.0, 2.0]))

    def test_slice_bounds(self):
        with pytest.raises(ShapeError):
            slice_axis(Tensor(np.ones((2, 3))), 1, 2, 5)

    def test_conv_kernel_shape(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.ones((4, 4, 2))), Tensor(np.ones((5, 5, 2, 3))), Tensor(np.zeros(3)))

    def test_squeeze_odd_dims(self):
        with pytest.raises(ShapeError):
            squeeze2x2(Tensor(np.ones((3, 4, 1))))

    def test_unknown_primitive(self):
        with pytest.raises(ValueError, match="unknown primitive"):
            apply_primitive("matmul", [Tensor(np.ones(2))])

    def test_eps_out_of_range(self):
        p = Param(np.array(1.0), "w")
        with pytest.raises(ValueError):
            finite_diff_check(lambda: (p.value * p.value).sum(), [p], eps=0.5)

    def test_nondeterministic_loss_detected(self):
        p = Param(np.array(1.0), "w")
        state = {"k": 0.0}

        def noisy():
            state["k"] += 1.0
            return (p.value * state["k"]).sum()

        with pytest.raises(NondeterministicError):
            finite_diff_check(noisy, [p])


class TestApplyPrimitiveDispatch:
    def test_all_named_primitives_dispatch(self):
        a = Tensor(np.ones((2, 2)))
        b = Tensor(np.full((2, 2), 2.0))
        assert apply_primitive("add", [a, b]).data[0, 0] == 3.0
        assert apply_primitive("sub", [a, b]).data[0, 0] == -1.0
        assert apply_primitive("mul", [a, b]).data[0, 0] == 2.0
        assert apply_primitive("div", [a, b]).data[0, 0] == 0.5
        assert apply_primitive("neg", [a]).data[0, 0] == -1.0
        assert apply_primitive("exp", [a]).data[0, 0] == pytest.approx(np.e)
        assert apply_primitive("log", [a]).data[0, 0] == 0.0
        assert apply_primitive("tanh", [a]).data[0, 0] == pytest.approx(np.tanh(1.0))
        assert apply_primitive("sum", [a]).data == 4.0
        assert apply_primitive("mean", [a]).data == 1.0
        assert apply_primitive("broadcast", [Tensor(np.ones(2))], shape=(3, 2)).shape == (3, 2)
        assert apply_primitive("reshape", [a], shape=(4,)).shape == (4,)
        assert apply_primitive("slice", [a], axis=0, start=0, stop=1).shape == (1, 2)
        assert apply_primitive("concat", [a, b], axis=1).shape == (2, 4)

    def test_purity(self):
        a = np.array([1.0, 2.0])
        r1 = apply_primitive("exp", [Tensor(a)]).data
        r2 = apply_primitive("exp", [Tensor(a)]).data
        assert np.array_equal(r1, r2)
        assert np.array_equal(a, [1.0, 2.0])
