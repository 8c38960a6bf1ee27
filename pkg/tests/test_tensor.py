"""Tensor engine checks: every operation's gradient against central finite
differences, convolution against a direct seven-loop evaluation, and the
structural invariants of the tape."""

import numpy as np
import pytest

from gcaps.tensor import (
    GradTape,
    NonFiniteError,
    ShapeError,
    Tensor,
    conv2d,
    elementwise,
    matmul,
    no_grad,
    numeric_gradient,
    reduce,
    softmax_along,
)


def check_grad(build, shapes, rng, rel_tol=1e-6, eps=1e-5, scale=1.0):
    """Compare autodiff gradients of ``build`` against finite differences.

    ``build`` maps a list of Tensors to a scalar Tensor.  Each input is
    checked separately; comparison is relative to the larger gradient norm
    with an absolute floor.
    """
    arrays = [rng.standard_normal(s) * scale for s in shapes]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(tensors)
    out.backward()
    for k, t in enumerate(tensors):
        def f(x, k=k):
            subst = [Tensor(x) if i == k else Tensor(arrays[i])
                     for i in range(len(arrays))]
            return build(subst).item()

        numeric = numeric_gradient(f, arrays[k], eps=eps)
        denom = max(np.linalg.norm(numeric), np.linalg.norm(t.grad), 1e-8)
        err = np.linalg.norm(t.grad - numeric) / denom
        assert err < rel_tol, f"input {k}: relative gradient error {err:.3e}"


class TestElementwise:
    def test_binary_ops_match_finite_differences(self):
        rng = np.random.default_rng(11)
        for op in ("add", "sub", "mul"):
            check_grad(lambda ts, op=op: elementwise(op, ts[0], ts[1]).sum(),
                       [(3, 4), (3, 4)], rng)

    def test_div_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        a = rng.standard_normal((3, 4))
        b = rng.uniform(0.5, 2.0, (3, 4))
        ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
        (ta / tb).sum().backward()
        num_a = numeric_gradient(lambda x: (Tensor(x) / Tensor(b)).sum().item(), a)
        num_b = numeric_gradient(lambda x: (Tensor(a) / Tensor(x)).sum().item(), b)
        assert np.allclose(ta.grad, num_a, rtol=1e-6, atol=1e-9)
        assert np.allclose(tb.grad, num_b, rtol=1e-6, atol=1e-9)

    def test_unary_ops_match_finite_differences(self):
        rng = np.random.default_rng(13)
        check_grad(lambda ts: ts[0].exp().sum(), [(4, 3)], rng, scale=0.5)
        check_grad(lambda ts: ts[0].sigmoid().sum(), [(4, 3)], rng)
        check_grad(lambda ts: (-ts[0]).sum(), [(4, 3)], rng)

    def test_sqrt_gradient_on_positive_input(self):
        rng = np.random.default_rng(14)
        a = rng.uniform(0.5, 3.0, (5,))
        t = Tensor(a, requires_grad=True)
        t.sqrt().sum().backward()
        num = numeric_gradient(lambda x: Tensor(x).sqrt().sum().item(), a)
        assert np.allclose(t.grad, num, rtol=1e-6)

    def test_relu_gradient_away_from_kink(self):
        a = np.array([-2.0, -0.5, 0.5, 3.0])
        t = Tensor(a, requires_grad=True)
        t.relu().sum().backward()
        assert np.array_equal(t.grad, np.array([0.0, 0.0, 1.0, 1.0]))

    def test_broadcast_gradient_sums_over_expanded_axes(self):
        # d/db sum(a + b) with b of shape (4,) against a of shape (3, 4)
        # must collapse the broadcast axis: each b entry is used 3 times.
        a = Tensor(np.zeros((3, 4)), requires_grad=True)
        b = Tensor(np.zeros(4), requires_grad=True)
        (a + b).sum().backward()
        assert np.array_equal(b.grad, np.full(4, 3.0))
        assert np.array_equal(a.grad, np.ones((3, 4)))

    def test_broadcast_gradcheck_mul(self):
        rng = np.random.default_rng(15)
        check_grad(lambda ts: (ts[0] * ts[1]).sum(), [(2, 3, 4), (4,)], rng)
        check_grad(lambda ts: (ts[0] * ts[1]).sum(), [(2, 3, 4), (3, 1)], rng)

    def test_incompatible_shapes_raise(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((3, 4))) + Tensor(np.zeros((3, 5)))

    def test_python_scalar_operands(self):
        t = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        out = (2.0 * t + 1.0 - t / 2.0).sum()
        out.backward()
        assert np.allclose(t.grad, np.full(2, 1.5))
        assert out.item() == pytest.approx(2.0 + 1.5 * 3.0)

    def test_unknown_op_kind_rejected(self):
        with pytest.raises(ValueError):
            elementwise("cosh", Tensor(np.zeros(2)))


class TestMatmul:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        check_grad(lambda ts: matmul(ts[0], ts[1]).sum(), [(3, 4), (4, 5)], rng)

    def test_batched_with_leading_broadcast(self):
        rng = np.random.default_rng(22)
        check_grad(lambda ts: matmul(ts[0], ts[1]).sum(), [(6, 3, 4), (4, 5)], rng)
        check_grad(lambda ts: matmul(ts[0], ts[1]).sum(), [(2, 1, 3, 4), (5, 4, 2)], rng)

    def test_inner_dimension_mismatch_raises(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 6))))

    def test_rank_below_two_raises(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.zeros(4)), Tensor(np.zeros((4, 2))))


class TestReduce:
    def test_sum_mean_gradients(self):
        rng = np.random.default_rng(31)
        for axis in (None, 0, 1, -1):
            check_grad(lambda ts, ax=axis: reduce("sum", ts[0], ax).sum()
                       if ax is not None else reduce("sum", ts[0], ax),
                       [(3, 5)], rng)
            check_grad(lambda ts, ax=axis: reduce("mean", ts[0], ax).sum()
                       if ax is not None else reduce("mean", ts[0], ax),
                       [(3, 5)], rng)

    def test_keepdims_shapes(self):
        t = Tensor(np.arange(12.0).reshape(3, 4))
        assert reduce("sum", t, 1, keepdims=True).shape == (3, 1)
        assert reduce("max", t, 0, keepdims=True).shape == (1, 4)
        assert reduce("mean", t, None).shape == ()

    def test_max_gradient_at_unique_maximum(self):
        rng = np.random.default_rng(32)
        # Spread values far apart so finite differences never cross a tie.
        a = rng.permutation(np.arange(12.0)).reshape(3, 4)
        t = Tensor(a, requires_grad=True)
        reduce("max", t, 1).sum().backward()
        num = numeric_gradient(lambda x: reduce("max", Tensor(x), 1).sum().item(), a)
        assert np.allclose(t.grad, num, atol=1e-9)

    def test_max_tie_routes_to_lowest_index(self):
        t = Tensor(np.array([[2.0, 5.0, 5.0, 1.0]]), requires_grad=True)
        reduce("max", t, 1).sum().backward()
        assert np.array_equal(t.grad, np.array([[0.0, 1.0, 0.0, 0.0]]))

    def test_global_max_tie_single_winner(self):
        t = Tensor(np.full((2, 3), 7.0), requires_grad=True)
        reduce("max", t, None).backward()
        assert t.grad.sum() == 1.0
        assert t.grad.reshape(-1)[0] == 1.0

    def test_invalid_axis_raises(self):
        with pytest.raises(ShapeError):
            reduce("sum", Tensor(np.zeros((2, 3))), 2)


class TestSoftmax:
    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(41)
        check_grad(lambda ts: (softmax_along(ts[0], 1) * ts[1]).sum(),
                   [(4, 6), (4, 6)], rng)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(42)
        y = softmax_along(Tensor(rng.standard_normal((5, 7)) * 30.0), 1)
        assert np.allclose(y.data.sum(axis=1), 1.0, atol=1e-12)

    def test_uniform_on_zeros(self):
        for n in (10, 1152, 36):
            y = softmax_along(Tensor(np.zeros((2, n))), 1)
            assert np.allclose(y.data, 1.0 / n, atol=1e-15)

    def test_large_magnitude_inputs_stay_finite(self):
        y = softmax_along(Tensor(np.array([[1e4, -1e4, 0.0]])), 1)
        assert np.isfinite(y.data).all()
        assert y.data.sum() == pytest.approx(1.0)

    def test_nonfinite_input_rejected(self):
        with pytest.raises(NonFiniteError):
            softmax_along(Tensor(np.array([[np.nan, 0.0]])), 1)

    def test_negative_axis(self):
        rng = np.random.default_rng(43)
        x = rng.standard_normal((3, 4, 5))
        assert np.allclose(softmax_along(Tensor(x), -1).data,
                           softmax_along(Tensor(x), 2).data)


class TestStructureOps:
    def test_reshape_and_transpose_gradients(self):
        rng = np.random.default_rng(51)
        check_grad(lambda ts: (ts[0].reshape(6, 2) * ts[1]).sum(),
                   [(3, 4), (6, 2)], rng)
        check_grad(lambda ts: (ts[0].transpose(1, 0, 2) * ts[1]).sum(),
                   [(2, 3, 4), (3, 2, 4)], rng)

    def test_transpose_requires_permutation(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))).transpose(0, 0)


def conv2d_direct(x, k, stride, padding):
    """Definition-level convolution: loop over every output element."""
    b, c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, c_out, h_out, w_out))
    for n in range(b):
        for o in range(c_out):
            for i in range(h_out):
                for j in range(w_out):
                    acc = 0.0
                    for c in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * k[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


class TestConv2d:
    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 0), (1, 2), (2, 1)])
    def test_matches_direct_evaluation(self, stride, padding):
        rng = np.random.default_rng(61)
        x = rng.standard_normal((2, 3, 9, 8))
        k = rng.standard_normal((4, 3, 3, 3))
        got = conv2d(Tensor(x), Tensor(k), stride=stride, padding=padding)
        want = conv2d_direct(x, k, stride, padding)
        assert got.shape == want.shape
        assert np.allclose(got.data, want, atol=1e-10)

    def test_output_size_formula(self):
        x = Tensor(np.zeros((1, 1, 28, 28)))
        k9 = Tensor(np.zeros((4, 1, 9, 9)))
        assert conv2d(x, k9, stride=1).shape == (1, 4, 20, 20)
        x20 = Tensor(np.zeros((1, 4, 20, 20)))
        k = Tensor(np.zeros((8, 4, 9, 9)))
        assert conv2d(x20, k, stride=2).shape == (1, 8, 6, 6)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1)])
    def test_gradients_match_finite_differences(self, stride, padding):
        rng = np.random.default_rng(62)
        check_grad(lambda ts: conv2d(ts[0], ts[1], stride=stride, padding=padding).sum(),
                   [(2, 2, 6, 7), (3, 2, 3, 3)], rng, rel_tol=1e-6)

    def test_gradient_with_downstream_weighting(self):
        # A non-uniform cotangent exercises the column scatter fully.
        rng = np.random.default_rng(63)
        wgt = rng.standard_normal((1, 2, 3, 3))
        check_grad(lambda ts: (conv2d(ts[0], ts[1], stride=2) * Tensor(wgt)).sum(),
                   [(1, 2, 7, 7), (2, 2, 3, 3)], rng)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((2, 4, 3, 3))))

    def test_oversized_kernel_raises(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 5, 5))))


class TestAutodiffMechanics:
    def test_tape_orders_inputs_before_outputs(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = a * 2.0
        c = b + a
        d = c.sum()
        tape = GradTape.from_root(d)
        pos = {id(n): i for i, n in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                assert pos[id(parent)] < pos[id(node)]
        assert pos[id(a)] < pos[id(b)] < pos[id(c)] < pos[id(d)]

    def test_diamond_graph_accumulates_both_paths(self):
        a = Tensor(np.array([3.0]), requires_grad=True)
        out = (a * a + a * 2.0).sum()   # d/da = 2a + 2 = 8
        out.backward()
        assert np.allclose(a.grad, [8.0])

    def test_grad_accumulates_across_backward_calls(self):
        a = Tensor(np.ones(2), requires_grad=True)
        (a * 3.0).sum().backward()
        first = a.grad.copy()
        (a * 3.0).sum().backward()
        assert np.array_equal(a.grad, 2.0 * first)
        a.clear_grad()
        assert a.grad is None

    def test_backward_requires_scalar(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            (a * 2.0).backward()

    def test_no_grad_builds_no_graph(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            out = (a * 2.0).sum()
        assert not out.requires_grad
        assert out._parents == ()

    def test_constant_subtree_not_recorded(self):
        a = Tensor(np.ones(3))
        out = a * 2.0
        assert not out.requires_grad
        assert out._parents == ()

    def test_detach_blocks_gradient(self):
        a = Tensor(np.full(3, 2.0), requires_grad=True)
        (a.detach() * a).sum().backward()
        assert np.allclose(a.grad, np.full(3, 2.0))

    def test_shared_leaf_in_long_chain(self):
        rng = np.random.default_rng(71)
        check_grad(lambda ts: ((ts[0] * ts[0]).exp().sigmoid()).sum(),
                   [(3,)], rng, scale=0.3)

    def test_float64_is_default(self):
        assert Tensor([1, 2, 3]).data.dtype == np.float64

    def test_item_requires_single_element(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros(3)).item()
