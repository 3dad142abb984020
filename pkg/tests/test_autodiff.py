import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vaprompt import autodiff as ad
from vaprompt.autodiff import NonFiniteError, ShapeError, Tensor, forward_primitive


def _rand(rng, shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


class TestForwardExamples:
    def test_softmax_uniform_logits(self):
        out = forward_primitive("softmax", [Tensor([0.0, 0.0, 0.0])])
        np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], rtol=0, atol=1e-15)

    def test_matmul_identity(self):
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        out = forward_primitive("matmul", [Tensor(np.eye(2)), m])
        np.testing.assert_array_equal(out.data, m.data)

    def test_symmetry_points(self):
        assert forward_primitive("sigmoid", [Tensor(0.0)]).item() == 0.5
        assert forward_primitive("tanh", [Tensor(0.0)]).item() == 0.0

    def test_unknown_primitive(self):
        with pytest.raises(ValueError, match="unknown primitive"):
            forward_primitive("conv3d", [Tensor(1.0)])

    @pytest.mark.parametrize(
        "op,shapes",
        [("matmul", [(2, 3), (2, 3)]), ("add", [(2, 3), (4,)]), ("mul", [(3,), (2,)]),
         ("sub", [(2, 2), (3, 3)])],
    )
    def test_shape_mismatch_names_primitive_and_shapes(self, op, shapes):
        inputs = [Tensor(np.ones(s)) for s in shapes]
        with pytest.raises(ShapeError) as exc:
            forward_primitive(op, inputs)
        msg = str(exc.value)
        assert op in msg and str(shapes[0]) in msg and str(shapes[1]) in msg

    def test_concat_mismatch(self):
        with pytest.raises(ShapeError, match="concat"):
            ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))])

    def test_log_of_nonpositive_rejected(self):
        with pytest.raises(NonFiniteError, match="log"):
            ad.log(Tensor([1.0, 0.0]))

    def test_softmax_of_infinite_rejected(self):
        with pytest.raises(NonFiniteError, match="softmax"):
            ad.softmax(Tensor([np.inf, 0.0]))

    def test_no_graph_without_grad(self):
        out = ad.add(Tensor([1.0]), Tensor([2.0]))
        assert not out.requires_grad and out._parents == ()

    def test_no_grad_context(self):
        x = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = ad.square(x)
        assert not y.requires_grad
        assert ad.square(x).requires_grad


class TestBackwardExamples:
    def test_square_sum(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        ad.backward(ad.sum(ad.square(x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_sigmoid_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        ad.backward(ad.sum(ad.sigmoid(x)))
        np.testing.assert_array_equal(x.grad, [0.25])

    def test_kl_of_softmax_gradient(self):
        rng = np.random.default_rng(7)
        w = rng.dirichlet(np.ones(9))
        z = Tensor(rng.normal(size=9), requires_grad=True)

        def kl(z):
            p = ad.softmax(z)
            return ad.sum(ad.mul(Tensor(w), ad.sub(Tensor(np.log(w)), ad.log(p))))

        ad.backward(kl(z))
        expected = np.exp(z.data) / np.exp(z.data).sum() - w
        np.testing.assert_allclose(z.grad, expected, atol=1e-14)
        report = ad.gradient_check(kl, z, step=1e-5, tolerance=1e-7)
        assert report.passed, report.max_rel_error

    def test_nonscalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            ad.backward(ad.square(x))

    def test_reuse_accumulates_exactly(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=4), rng.normal(size=4)
        x = Tensor(rng.normal(size=4), requires_grad=True)
        ad.backward(ad.sum(ad.mul(x, Tensor(a))))
        ga = x.grad.copy()
        x.grad = None
        ad.backward(ad.sum(ad.mul(x, Tensor(b))))
        gb = x.grad.copy()
        x.grad = None
        ad.backward(ad.add(ad.sum(ad.mul(x, Tensor(a))), ad.sum(ad.mul(x, Tensor(b)))))
        np.testing.assert_array_equal(x.grad, ga + gb)

    def test_leaf_grads_accumulate_across_calls(self):
        x = Tensor([3.0], requires_grad=True)
        ad.backward(ad.sum(ad.square(x)))
        ad.backward(ad.sum(ad.square(x)))
        np.testing.assert_array_equal(x.grad, [12.0])

    def test_select_and_slice_scatter(self):
        x = Tensor(np.arange(12.0).reshape(3, 4), requires_grad=True)
        y = ad.add(ad.sum(ad.select(x, 1, axis=0)), ad.sum(ad.slice(x, 1, 3, axis=1)))
        ad.backward(y)
        expected = np.zeros((3, 4))
        expected[1] += 1
        expected[:, 1:3] += 1
        np.testing.assert_array_equal(x.grad, expected)


class TestGraph:
    def _graph(self):
        rng = np.random.default_rng(0)
        x = _rand(rng, (3, 4))
        w = _rand(rng, (4, 2))
        h = ad.tanh(x @ w)
        return ad.sum(ad.square(h) + h), x, w

    def test_inputs_precede_nodes(self):
        loss, _, _ = self._graph()
        nodes = ad.graph_nodes(loss)
        pos = {n._id: i for i, n in enumerate(nodes)}
        for n in nodes:
            for p in n._parents:
                if p.requires_grad:
                    assert pos[p._id] < pos[n._id]

    def test_each_node_visited_once(self):
        loss, _, _ = self._graph()
        calls = {}
        for n in ad.graph_nodes(loss):
            if n._backward is not None:
                fn = n._backward

                def counted(g, fn=fn, key=n._id):
                    calls[key] = calls.get(key, 0) + 1
                    return fn(g)

                n._backward = counted
        ad.backward(loss)
        assert calls and set(calls.values()) == {1}

    def test_graph_discarded_after_backward(self):
        loss, x, _ = self._graph()
        ad.backward(loss)
        assert loss._parents == () and loss._backward is None
        assert x.grad is not None

    def test_determinism_bitwise(self):
        def run():
            loss, x, w = self._graph()
            ad.backward(loss)
            return loss.data.copy(), x.grad.copy(), w.grad.copy()

        for a, b in zip(run(), run()):
            assert a.tobytes() == b.tobytes()


class TestGradientCheck:
    def test_quadratic_is_exact(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 3)))
        report = ad.gradient_check(lambda t: ad.sum(ad.square(t)), x, step=1e-5, tolerance=1e-7)
        assert report.max_rel_error < 1e-7
        assert report.passed and report.failures == []

    def test_report_flags_wrong_gradient(self):
        x = Tensor(np.ones(3))

        def f(t):
            # Backward multiplies by 2, but the function value is 1x: analytic is wrong by 2x.
            out = ad.sum(t)
            return ad._make(out.data, (t,), lambda g: (2 * np.ones(t.shape) * g,), "bad")

        report = ad.gradient_check(f, x)
        assert not report.passed and len(report.failures) == 3


# (builder, domain) pairs; each builder maps input tensors to a scalar loss
# via a fixed random projection so every output element carries gradient.
def _proj_sum(out, rng):
    return ad.sum(ad.mul(out, Tensor(rng.normal(size=out.shape))))


PRIMITIVE_CASES = {
    "matmul": (lambda t: ad.matmul(t[0], t[1]), [(3, 4), (4, 2)], (-2, 2)),
    "batched_matmul": (lambda t: ad.matmul(t[0], t[1]), [(2, 3, 4), (4, 2)], (-2, 2)),
    "add": (lambda t: ad.add(t[0], t[1]), [(3, 4), (4,)], (-2, 2)),
    "sub": (lambda t: ad.sub(t[0], t[1]), [(3, 1), (3, 4)], (-2, 2)),
    "mul": (lambda t: ad.mul(t[0], t[1]), [(3, 4), (3, 4)], (-2, 2)),
    "div": (lambda t: ad.div(t[0], ad.add(ad.square(t[1]), 1.0)), [(3, 4), (3, 4)], (-2, 2)),
    "scale": (lambda t: ad.scale(t[0], -1.7), [(5,)], (-2, 2)),
    "concat": (lambda t: ad.concat([t[0], t[1]], axis=-1), [(2, 3), (2, 2)], (-2, 2)),
    "slice": (lambda t: ad.slice(t[0], 1, 3, axis=-1), [(2, 4)], (-2, 2)),
    "select": (lambda t: ad.select(t[0], 2, axis=1), [(2, 4, 3)], (-2, 2)),
    "stack": (lambda t: ad.stack([t[0], t[1]], axis=1), [(2, 3), (2, 3)], (-2, 2)),
    "reshape": (lambda t: ad.reshape(t[0], (3, 4)), [(2, 6)], (-2, 2)),
    "transpose": (lambda t: ad.transpose(t[0], (2, 0, 1)), [(2, 3, 4)], (-2, 2)),
    "sigmoid": (lambda t: ad.sigmoid(t[0]), [(3, 4)], (-2, 2)),
    "tanh": (lambda t: ad.tanh(t[0]), [(3, 4)], (-2, 2)),
    "relu": (lambda t: ad.relu(t[0]), [(3, 4)], (-2, 2)),
    "exp": (lambda t: ad.exp(t[0]), [(3, 4)], (-2, 2)),
    "log": (lambda t: ad.log(t[0]), [(3, 4)], (0.1, 2)),
    "sqrt": (lambda t: ad.sqrt(t[0]), [(3, 4)], (0.1, 2)),
    "square": (lambda t: ad.square(t[0]), [(3, 4)], (-2, 2)),
    "softmax": (lambda t: ad.softmax(t[0]), [(3, 5)], (-2, 2)),
    "log_softmax": (lambda t: ad.log_softmax(t[0]), [(3, 5)], (-2, 2)),
    "mean": (lambda t: ad.mean(t[0], axis=0), [(3, 4)], (-2, 2)),
    "mean_all": (lambda t: ad.mean(t[0]), [(3, 4)], (-2, 2)),
    "sum": (lambda t: ad.sum(t[0], axis=(0, 2), keepdims=True), [(2, 3, 4)], (-2, 2)),
    "causal_conv1d": (
        lambda t: ad.causal_conv1d(t[0], t[1], t[2], dilation=2), [(2, 6, 3), (3, 3, 4), (4,)], (-2, 2)
    ),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_match_central_differences(name):
    build, shapes, (lo, hi) = PRIMITIVE_CASES[name]
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        inputs = [Tensor(rng.uniform(lo, hi, size=s)) for s in shapes]
        proj_rng_seed = seed + 1000

        def f(_, inputs=inputs):
            return _proj_sum(build(inputs), np.random.default_rng(proj_rng_seed))

        for x in inputs:
            report = ad.gradient_check(f, x, step=1e-5, tolerance=1e-5)
            worst = max(worst, report.max_rel_error)
    assert worst < 1e-5, f"{name}: max relative error {worst:.3e}"


def test_causal_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(7, 3)), rng.normal(size=(3, 3, 2)), rng.normal(size=2)
    d = 2
    expected = np.tile(b, (7, 1))
    for t in range(7):
        for j in range(3):
            src = t - (2 - j) * d
            if src >= 0:
                expected[t] += x[src] @ w[j]
    out = ad.causal_conv1d(Tensor(x), Tensor(w), Tensor(b), dilation=d)
    np.testing.assert_allclose(out.data, expected, atol=1e-13)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(z):
    p = ad.softmax(Tensor(z)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-2, 2, allow_nan=False)))
def test_outputs_finite_on_finite_inputs(x):
    t = Tensor(x, requires_grad=True)
    loss = ad.sum(ad.tanh(t) * ad.sigmoid(t) + ad.exp(t) + ad.relu(t))
    ad.backward(loss)
    assert np.all(np.isfinite(loss.data)) and np.all(np.isfinite(t.grad))
