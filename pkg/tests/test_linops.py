"""Difference stencils, convolution, block maps, and their exact adjoints."""

import numpy as np
import pytest

from drsaddle.linops import (
    BlockRowOperator,
    FunctionMap,
    MatrixMap,
    conv2d,
    conv2d_adjoint,
    dense_matrix,
    div2d,
    grad2d,
    laplacian,
    mixed_laplacian,
    op_norm_estimate,
    sym_deriv,
    sym_div,
)
from drsaddle.spaces import BlockLayout, BlockVector


def inner(a, b):
    return float(np.vdot(a, b))


class TestMatrixMap:
    M = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])

    def make(self):
        return MatrixMap(self.M, BlockLayout([(2,)]))

    def test_hand_arithmetic_forward(self):
        op = self.make()
        x = BlockVector.from_blocks([np.array([1.0, 1.0])])
        assert op.apply(x).data.tolist() == [3.0, 7.0, 11.0]

    def test_zero_input_zero_output(self):
        op = self.make()
        assert np.all(op.apply(BlockVector(op.domain)).data == 0.0)
        assert np.all(op.adjoint(BlockVector(op.codomain)).data == 0.0)

    def test_adjoint_is_transpose_row(self):
        op = self.make()
        e = BlockVector.from_blocks([np.array([1.0, 0.0, 0.0])])
        assert op.adjoint(e).data.tolist() == [1.0, 2.0]

    def test_shape_layout_mismatch_rejected(self):
        with pytest.raises(ValueError):
            MatrixMap(self.M, BlockLayout([(3,)]), BlockLayout([(2,)]))

    def test_linearity(self):
        op = self.make()
        rng = np.random.default_rng(0)
        x = BlockVector(op.domain, rng.standard_normal(2))
        z = BlockVector(op.domain, rng.standard_normal(2))
        lhs = op.apply(BlockVector(op.domain, 2.0 * x.data - 3.0 * z.data))
        rhs = 2.0 * op.apply(x) - 3.0 * op.apply(z)
        np.testing.assert_allclose(lhs.data, rhs.data, rtol=1e-12)


class TestFunctionMap:
    def test_identity_returns_input(self):
        lay = BlockLayout([(4,)])
        ident = FunctionMap(lay, lay, lambda v: v.copy(), lambda v: v.copy())
        x = BlockVector(lay, np.arange(4.0))
        assert np.array_equal(ident.apply(x).data, x.data)


class TestBlockRowOperator:
    def test_stack_matches_rows_and_adjoint_sums(self):
        rng = np.random.default_rng(1)
        dom = BlockLayout([(3,)])
        rows = [MatrixMap(rng.standard_normal((2, 3)), dom) for _ in range(3)]
        op = BlockRowOperator(rows)
        x = BlockVector(dom, rng.standard_normal(3))
        y = op.apply(x)
        for i, r in enumerate(rows):
            np.testing.assert_array_equal(y.flat_block(i), r.apply(x).data)
            np.testing.assert_array_equal(op.apply_row(i, x), r.apply(x).data)
        yy = BlockVector(op.codomain, rng.standard_normal(6))
        expect = sum(
            r.adjoint(BlockVector(r.codomain, yy.flat_block(i).copy())).data
            for i, r in enumerate(rows)
        )
        np.testing.assert_allclose(op.adjoint(yy).data, expect, rtol=1e-14)

    def test_mismatched_domains_rejected(self):
        a = MatrixMap(np.ones((1, 2)), BlockLayout([(2,)]))
        b = MatrixMap(np.ones((1, 3)), BlockLayout([(3,)]))
        with pytest.raises(ValueError):
            BlockRowOperator([a, b])


class TestGradDiv:
    def test_constant_image_zero_gradient(self):
        u = np.full((6, 5), 3.7)
        gx, gy = grad2d(u)
        assert np.all(gx == 0.0) and np.all(gy == 0.0)

    def test_ramp_forward_difference(self):
        # u(i, j) = i: unit x-difference except the far row, no y-difference
        u = np.arange(5.0)[:, None] * np.ones((1, 4))
        gx, gy = grad2d(u)
        assert np.all(gx[:-1, :] == 1.0)
        assert np.all(gx[-1, :] == 0.0)
        assert np.all(gy == 0.0)

    def test_div_of_zero_field(self):
        assert np.all(div2d(np.zeros((4, 4)), np.zeros((4, 4))) == 0.0)

    def test_div_of_constant_gradient(self):
        gx, gy = grad2d(np.full((5, 5), 2.0))
        assert np.all(div2d(gx, gy) == 0.0)

    def test_adjoint_identity_100_probes(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            u = rng.standard_normal((8, 8))
            p1 = rng.standard_normal((8, 8))
            p2 = rng.standard_normal((8, 8))
            gx, gy = grad2d(u)
            lhs = inner(gx, p1) + inner(gy, p2)
            rhs = -inner(u, div2d(p1, p2))
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    @pytest.mark.parametrize("shape", [(1, 1), (1, 6), (6, 1), (2, 2)])
    def test_adjoint_identity_degenerate_grids(self, shape):
        rng = np.random.default_rng(13)
        u = rng.standard_normal(shape)
        p1 = rng.standard_normal(shape)
        p2 = rng.standard_normal(shape)
        gx, gy = grad2d(u)
        lhs = inner(gx, p1) + inner(gy, p2)
        rhs = -inner(u, div2d(p1, p2))
        assert abs(lhs - rhs) <= 1e-12


class TestSymDeriv:
    def test_zero_field(self):
        z = np.zeros((4, 4))
        for q in sym_deriv(z, z):
            assert np.all(q == 0.0)

    def test_unit_shear(self):
        # w1(i, j) = j, w2 = 0: only the mixed halves respond
        w1 = np.ones((5, 1)) * np.arange(4.0)[None, :]
        w2 = np.zeros((5, 4))
        q1, q2, q3, q4 = sym_deriv(w1, w2)
        assert np.all(q1 == 0.0) and np.all(q2 == 0.0)
        assert np.all(q3[:, :-1] == 0.5)
        assert np.all(q3[:, -1] == 0.0)

    def test_mixed_components_bitwise_equal(self):
        rng = np.random.default_rng(3)
        w1 = rng.standard_normal((7, 6))
        w2 = rng.standard_normal((7, 6))
        _, _, q3, q4 = sym_deriv(w1, w2)
        assert np.array_equal(q3, q4)

    def test_sym_div_zero(self):
        z = np.zeros((4, 4))
        v1, v2 = sym_div(z, z, z, z)
        assert np.all(v1 == 0.0) and np.all(v2 == 0.0)

    def test_sym_div_of_constant_field_derivative(self):
        c1 = np.full((5, 5), 1.5)
        c2 = np.full((5, 5), -0.5)
        v1, v2 = sym_div(*sym_deriv(c1, c2))
        assert np.all(v1 == 0.0) and np.all(v2 == 0.0)

    def test_adjoint_identity_with_sym_deriv(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            w1 = rng.standard_normal((6, 7))
            w2 = rng.standard_normal((6, 7))
            qs = [rng.standard_normal((6, 7)) for _ in range(4)]
            es = sym_deriv(w1, w2)
            lhs = sum(inner(e, q) for e, q in zip(es, qs))
            v1, v2 = sym_div(*qs)
            rhs = -(inner(w1, v1) + inner(w2, v2))
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_normal_operator_splits_into_laplacians(self):
        # sym_div(sym_deriv w) == (componentwise laplacian + cross part) / 2
        rng = np.random.default_rng(5)
        w1 = rng.standard_normal((8, 8))
        w2 = rng.standard_normal((8, 8))
        v1, v2 = sym_div(*sym_deriv(w1, w2))
        m1, m2 = mixed_laplacian(w1, w2)
        np.testing.assert_allclose(v1, 0.5 * (laplacian(w1) + m1), atol=1e-10)
        np.testing.assert_allclose(v2, 0.5 * (laplacian(w2) + m2), atol=1e-10)


class TestConv2d:
    def test_delta_kernel_is_identity(self):
        rng = np.random.default_rng(6)
        u = rng.standard_normal((9, 9))
        delta = np.zeros((3, 3))
        delta[1, 1] = 1.0
        np.testing.assert_array_equal(conv2d(u, delta), u)

    def test_normalized_kernel_preserves_constants(self):
        kernel = np.full((3, 5), 1.0 / 15.0)
        u = np.full((8, 8), 4.2)
        np.testing.assert_allclose(conv2d(u, kernel), u, rtol=1e-13)

    def test_kernel_larger_than_image_rejected(self):
        with pytest.raises(ValueError):
            conv2d(np.zeros((2, 2)), np.ones((5, 5)))

    def test_adjoint_identity_16x16(self):
        rng = np.random.default_rng(7)
        kernel = rng.standard_normal((5, 5))
        for _ in range(20):
            u = rng.standard_normal((16, 16))
            y = rng.standard_normal((16, 16))
            lhs = inner(conv2d(u, kernel), y)
            rhs = inner(u, conv2d_adjoint(y, kernel))
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_adjoint_matches_dense_transpose(self):
        # even-sized kernel exercises the asymmetric padding split
        rng = np.random.default_rng(8)
        kernel = rng.standard_normal((2, 3))
        lay = BlockLayout([(8, 8)])

        def fwd(v):
            return BlockVector.from_blocks([conv2d(v.block(0), kernel)])

        def adj(v):
            return BlockVector.from_blocks([conv2d_adjoint(v.block(0), kernel)])

        op = FunctionMap(lay, lay, fwd, adj)
        A = dense_matrix(op)
        e = BlockVector(lay)
        At = np.empty_like(A)
        for j in range(lay.total):
            e.data[:] = 0.0
            e.data[j] = 1.0
            At[:, j] = op.adjoint(e).data
        np.testing.assert_allclose(At, A.T, atol=1e-12)


class TestOpNormEstimate:
    def test_identity_norm_one(self):
        lay = BlockLayout([(10,)])
        ident = FunctionMap(lay, lay, lambda v: v.copy(), lambda v: v.copy())
        assert op_norm_estimate(ident) == pytest.approx(1.0, abs=1e-8)

    def test_diagonal_dominant_eigenvalue(self):
        op = MatrixMap(np.diag([3.0, 1.0]), BlockLayout([(2,)]))
        assert op_norm_estimate(op, iters=200) == pytest.approx(3.0, abs=1e-8)

    def test_zero_operator(self):
        op = MatrixMap(np.zeros((2, 2)), BlockLayout([(2,)]))
        assert op_norm_estimate(op) == 0.0

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(9)
        op = MatrixMap(rng.standard_normal((6, 4)), BlockLayout([(4,)]))
        a = op_norm_estimate(op, iters=7, seed=3)
        b = op_norm_estimate(op, iters=7, seed=3)
        assert a == b

    def test_nondecreasing_in_iterations(self):
        rng = np.random.default_rng(10)
        op = MatrixMap(rng.standard_normal((8, 8)), BlockLayout([(8,)]))
        estimates = [op_norm_estimate(op, iters=i, seed=1) for i in (1, 5, 20, 80)]
        for a, b in zip(estimates, estimates[1:]):
            assert b >= a - 1e-12

    def test_stacked_deblur_operator_norm(self):
        # unit first row (delta kernel): the published sqrt(14) step-size
        # constant is a safe upper bound on the stacked norm, not the norm
        # itself (dense SVD puts it near 3.44); assert both sides
        from drsaddle.problems import tgv_operator

        delta = np.zeros((1, 1))
        delta[0, 0] = 1.0
        op = tgv_operator(16, 16, delta)
        est = op_norm_estimate(op, iters=400, seed=0)
        assert est <= np.sqrt(14.0) * 1.01
        assert est >= 3.40

    def test_power_iteration_matches_dense_svd(self):
        from drsaddle.problems import tgv_operator

        delta = np.ones((1, 1))
        op = tgv_operator(8, 8, delta)
        exact = np.linalg.svd(dense_matrix(op), compute_uv=False)[0]
        est = op_norm_estimate(op, iters=500, seed=0)
        assert est == pytest.approx(exact, rel=1e-6)


class TestShippedOperatorAdjoints:
    def test_every_block_map_passes_probe_battery(self):
        rng = np.random.default_rng(11)
        from drsaddle.problems import tgv_operator, motion_blur_kernel

        ops = [
            MatrixMap(rng.standard_normal((5, 3)), BlockLayout([(3,)])),
            tgv_operator(8, 8, motion_blur_kernel(3, 0.0)),
        ]
        for op in ops:
            norm = max(op_norm_estimate(op, iters=50), 1e-12)
            for _ in range(100):
                x = BlockVector(op.domain, rng.standard_normal(op.domain.total))
                y = BlockVector(op.codomain, rng.standard_normal(op.codomain.total))
                lhs = op.apply(x).dot(y)
                rhs = x.dot(op.adjoint(y))
                assert abs(lhs - rhs) <= 1e-10 * norm * x.norm() * y.norm() + 1e-12
