"""Autodiff engine: forward values, backward gradients, graph mechanics."""

import numpy as np
import pytest

from gestrec import gradsuite, ops
from gestrec.autodiff import (DomainError, Node, ShapeError, backward, grad_check,
                              no_grad, parameter)
from gestrec.rng import Rng


class TestForwardValues:
    def test_matmul_identity(self):
        A = np.array([[1.0, 2.0], [3.0, 4.0]], np.float32)
        out = ops.matmul(np.eye(2, dtype=np.float32), A)
        assert np.allclose(out.value, A)

    def test_softmax_symmetry(self):
        out = ops.softmax(np.zeros(2, np.float32))
        assert np.allclose(out.value, [0.5, 0.5])

    def test_softmax_normalized(self):
        r = Rng(0)
        out = ops.softmax(r.normal((5, 7)), axis=-1)
        assert np.allclose(out.value.sum(axis=-1), 1.0, atol=1e-6)
        assert (out.value > 0).all() and (out.value < 1).all()

    def test_relu_sign_boundary(self):
        out = ops.relu(np.array([-1.0, 2.0], np.float32))
        assert np.allclose(out.value, [0.0, 2.0])

    def test_ops_pure(self):
        r = Rng(1)
        x = r.normal((4, 4))
        for fn in (lambda: ops.softmax(x).value,
                   lambda: ops.gelu(x).value,
                   lambda: ops.layer_norm(x, np.ones(4, np.float32),
                                          np.zeros(4, np.float32)).value):
            assert np.array_equal(fn(), fn())


class TestBackward:
    def test_sum_gives_ones(self):
        for shape in [(3,), (2, 3), (2, 2, 2)]:
            x = parameter(Rng(0).normal(shape))
            backward(ops.sum_(x))
            assert np.array_equal(x.grad, np.ones(shape, np.float32))

    def test_dot_self(self):
        x = parameter(np.array([1.0, 2.0]))
        backward(ops.matmul(x, x))
        assert np.allclose(x.grad, [2.0, 4.0])

    def test_ce_gradient_is_softmax_minus_onehot(self):
        # frozen from a central finite-difference oracle at step 1e-3
        z = np.array([0.3, -1.2, 0.8, 0.1], np.float64)
        label = 2
        leaf = parameter(z, dtype=np.float64)
        backward(ops.cross_entropy_with_logits(leaf, np.asarray(label)))
        e = np.exp(z - z.max())
        p = e / e.sum()
        expected = p.copy()
        expected[label] -= 1.0
        assert np.allclose(leaf.grad, expected, atol=1e-12)
        num = np.zeros_like(z)
        for i in range(z.size):
            zp, zm = z.copy(), z.copy()
            zp[i] += 1e-3
            zm[i] -= 1e-3
            ce = lambda v: float(ops.cross_entropy_with_logits(
                Node(v), np.asarray(label)).value)
            num[i] = (ce(zp) - ce(zm)) / 2e-3
        assert np.allclose(leaf.grad, num, atol=1e-5)

    def test_multi_consumer_accumulates(self):
        x = parameter(np.array([3.0]))
        backward(ops.sum_(ops.add(ops.mul(x, x), ops.mul(x, x))))
        assert np.allclose(x.grad, 12.0)

    def test_backward_returns_leaf_map(self):
        a = parameter(np.ones(3))
        b = parameter(np.ones(3))
        leaves = backward(ops.sum_(ops.mul(a, b)))
        assert set(leaves) == {id(a), id(b)}

    def test_nonscalar_root_rejected(self):
        x = parameter(np.ones((2, 2)))
        with pytest.raises(ShapeError):
            backward(ops.mul(x, 2.0))

    def test_no_grad_skips_recording(self):
        x = parameter(np.ones(3))
        with no_grad():
            y = ops.sum_(ops.mul(x, x))
        assert y.parents == () and y._backward is None


class TestErrors:
    def test_shape_error_names_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            ops.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_add_broadcast_mismatch(self):
        with pytest.raises(ShapeError, match="add"):
            ops.add(np.ones((2, 3)), np.ones((4,)))

    def test_log_domain(self):
        with pytest.raises(DomainError):
            ops.log(np.array([1.0, -0.5]))

    def test_sqrt_domain(self):
        with pytest.raises(DomainError):
            ops.sqrt(np.array([-1.0]))

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError, match="conv2d"):
            ops.conv2d(np.ones((1, 2, 4, 4)), np.ones((3, 1, 3, 3)), np.zeros(3))

    def test_cross_entropy_label_range(self):
        with pytest.raises(DomainError):
            ops.cross_entropy_with_logits(np.ones((2, 3)), np.array([0, 3]))


class TestForwardOpDispatch:
    def test_registry_dispatch(self):
        out = ops.forward_op("add", [np.ones(2), np.ones(2)])
        assert np.allclose(out.value, 2.0)

    def test_unknown_tag(self):
        with pytest.raises(KeyError):
            ops.forward_op("fma", [np.ones(2)])


class TestGradCheck:
    def test_linear_exact(self):
        rep = grad_check(lambda l: ops.sum_(l[0]), [Rng(0).normal((3, 3), dtype=np.float64)],
                         tol=1e-6)
        assert rep.passed and rep.max_rel_err < 1e-6

    def test_every_op_case_passes_f64(self):
        for name in gradsuite.OP_CASES:
            rep = gradsuite.check_op(name, seed=0, tol=1e-4)
            assert rep.passed, f"{name}: {rep.max_rel_err}"

    def test_bad_tol_rejected(self):
        with pytest.raises(ValueError):
            grad_check(lambda l: ops.sum_(l[0]), [np.ones(2)], tol=0.0)

    def test_nonfinite_inputs_rejected(self):
        with pytest.raises(DomainError):
            grad_check(lambda l: ops.sum_(l[0]), [np.array([1.0, np.nan])])


class TestDtypePolicy:
    def test_scalar_does_not_promote(self):
        x = parameter(np.ones(3, np.float32))
        out = ops.mul(x, 0.5)
        assert out.value.dtype == np.float32

    def test_mixed_node_dtypes_rejected(self):
        a = parameter(np.ones(2), dtype=np.float32)
        b = parameter(np.ones(2), dtype=np.float64)
        with pytest.raises(ShapeError, match="mixed dtypes"):
            ops.add(a, b)
