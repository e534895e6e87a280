"""Linear operators: block maps, difference stencils, and boundary-exact convolution.

All adjoints here are exact matrix transposes of the forward maps (up to
floating-point roundoff), including the image-boundary handling.  That is
what makes the inner-product identity <K x, y> == <x, K* y> testable at
tight tolerances and keeps saddle-point iterations consistent.
"""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy import signal

from .spaces import BlockLayout, BlockVector

__all__ = [
    "LinearMap",
    "FunctionMap",
    "MatrixMap",
    "BlockRowOperator",
    "grad2d",
    "div2d",
    "sym_deriv",
    "sym_div",
    "laplacian",
    "mixed_laplacian",
    "conv2d",
    "conv2d_adjoint",
    "conv_pads",
    "op_norm_estimate",
    "dense_matrix",
]


# ---------------------------------------------------------------------------
# block linear maps
# ---------------------------------------------------------------------------


class LinearMap:
    """A linear map between block-vector spaces with an explicit adjoint."""

    def __init__(self, domain: BlockLayout, codomain: BlockLayout):
        self.domain = domain
        self.codomain = codomain

    def apply(self, x: BlockVector) -> BlockVector:
        raise NotImplementedError

    def adjoint(self, y: BlockVector) -> BlockVector:
        raise NotImplementedError

    # Row API: one codomain block at a time, used by dual-block-stochastic
    # solvers.  Maps that support it expose n_rows == len(codomain).
    @property
    def n_rows(self) -> int:
        return len(self.codomain)

    def apply_row(self, i: int, x: BlockVector) -> np.ndarray:
        """Flat block ``i`` of ``apply(x)``."""
        raise NotImplementedError

    def adjoint_row(self, i: int, y_i: np.ndarray) -> BlockVector:
        """Adjoint of row ``i`` applied to a flat dual block."""
        raise NotImplementedError


class FunctionMap(LinearMap):
    """Linear map given by a forward/adjoint callable pair."""

    def __init__(self, domain, codomain, fwd, adj):
        super().__init__(domain, codomain)
        self._fwd = fwd
        self._adj = adj

    def apply(self, x: BlockVector) -> BlockVector:
        return self._fwd(x)

    def adjoint(self, y: BlockVector) -> BlockVector:
        return self._adj(y)


class MatrixMap(LinearMap):
    """Dense matrix acting on the flattened domain.

    The codomain defaults to a single block holding the matrix output.
    """

    def __init__(self, matrix: np.ndarray, domain: BlockLayout,
                 codomain: Optional[BlockLayout] = None):
        matrix = np.asarray(matrix, dtype=np.float64)
        if codomain is None:
            codomain = BlockLayout([(matrix.shape[0],)])
        if matrix.shape != (codomain.total, domain.total):
            raise ValueError("matrix shape does not match layouts")
        super().__init__(domain, codomain)
        self.matrix = matrix

    def apply(self, x: BlockVector) -> BlockVector:
        return BlockVector(self.codomain, self.matrix @ x.data)

    def adjoint(self, y: BlockVector) -> BlockVector:
        return BlockVector(self.domain, self.matrix.T @ y.data)


class BlockRowOperator(LinearMap):
    """Stack of row maps sharing one domain; codomain block i is row i's output.

    Each row map must have a single-block codomain.  ``apply`` evaluates the
    rows one by one, so the full application and the row API produce the same
    floats, which is what makes the n=1 stochastic/deterministic collapse
    exact.
    """

    def __init__(self, rows: Sequence[LinearMap]):
        rows = list(rows)
        if not rows:
            raise ValueError("need at least one row")
        domain = rows[0].domain
        for r in rows:
            if r.domain != domain:
                raise ValueError("rows must share a domain")
            if len(r.codomain) != 1:
                raise ValueError("row codomains must be single blocks")
        codomain = BlockLayout([r.codomain.shapes[0] for r in rows])
        super().__init__(domain, codomain)
        self.rows = rows

    def apply(self, x: BlockVector) -> BlockVector:
        out = BlockVector.zeros(self.codomain)
        for i, r in enumerate(self.rows):
            out.flat_block(i)[:] = r.apply(x).data
        return out

    def adjoint(self, y: BlockVector) -> BlockVector:
        out = np.zeros(self.domain.total)
        for i, r in enumerate(self.rows):
            out += r.adjoint(BlockVector(r.codomain, y.flat_block(i).copy())).data
        return BlockVector(self.domain, out)

    def apply_row(self, i: int, x: BlockVector) -> np.ndarray:
        return self.rows[i].apply(x).data

    def adjoint_row(self, i: int, y_i: np.ndarray) -> BlockVector:
        r = self.rows[i]
        return r.adjoint(BlockVector(r.codomain, np.asarray(y_i, dtype=np.float64)))


# ---------------------------------------------------------------------------
# first-order difference stencils (forward differences, zero at the far edge;
# the divergences below are the exact negative adjoints)
# ---------------------------------------------------------------------------


def _dx_fwd(a: np.ndarray) -> np.ndarray:
    d = np.zeros_like(a)
    d[:-1, :] = a[1:, :] - a[:-1, :]
    return d


def _dy_fwd(a: np.ndarray) -> np.ndarray:
    d = np.zeros_like(a)
    d[:, :-1] = a[:, 1:] - a[:, :-1]
    return d


def _dx_back_div(p: np.ndarray) -> np.ndarray:
    # column of the transposed forward difference, negated: first row keeps
    # p[0], interior rows p[i]-p[i-1], last row -p[-2] (p's last row unused)
    if p.shape[0] == 1:
        return np.zeros_like(p)
    d = np.empty_like(p)
    d[0, :] = p[0, :]
    d[1:-1, :] = p[1:-1, :] - p[:-2, :]
    d[-1, :] = -p[-2, :]
    return d


def _dy_back_div(p: np.ndarray) -> np.ndarray:
    if p.shape[1] == 1:
        return np.zeros_like(p)
    d = np.empty_like(p)
    d[:, 0] = p[:, 0]
    d[:, 1:-1] = p[:, 1:-1] - p[:, :-2]
    d[:, -1] = -p[:, -2]
    return d


def grad2d(u: np.ndarray):
    """Forward-difference gradient with a zero (Neumann) far edge."""
    return _dx_fwd(u), _dy_fwd(u)


def div2d(p1: np.ndarray, p2: np.ndarray) -> np.ndarray:
    """Discrete divergence; satisfies <grad u, p> == -<u, div p> exactly."""
    return _dx_back_div(p1) + _dy_back_div(p2)


def sym_deriv(w1: np.ndarray, w2: np.ndarray):
    """Symmetrized derivative of a 2-d vector field: 4 components, 3rd == 4th."""
    off = 0.5 * (_dy_fwd(w1) + _dx_fwd(w2))
    return _dx_fwd(w1), _dy_fwd(w2), off, off.copy()


def sym_div(q1, q2, q3, q4):
    """Divergence of a symmetric tensor field; <sym_deriv w, q> == -<w, sym_div q>."""
    v1 = _dx_back_div(q1) + 0.5 * (_dy_back_div(q3) + _dy_back_div(q4))
    v2 = 0.5 * (_dx_back_div(q3) + _dx_back_div(q4)) + _dy_back_div(q2)
    return v1, v2


def laplacian(u: np.ndarray) -> np.ndarray:
    """div(grad(u)) with the boundary conventions above (negative semidefinite)."""
    gx, gy = grad2d(u)
    return div2d(gx, gy)


def mixed_laplacian(w1: np.ndarray, w2: np.ndarray):
    """Componentwise cross-coupled second differences of a vector field.

    Together with the componentwise Laplacian it decomposes the normal
    operator of :func:`sym_deriv`:  (sym_div o sym_deriv) w
    == (laplacian w + mixed_laplacian w) / 2.
    """
    v1 = _dx_back_div(_dx_fwd(w1)) + _dy_back_div(_dx_fwd(w2))
    v2 = _dy_back_div(_dy_fwd(w2)) + _dx_back_div(_dy_fwd(w1))
    return v1, v2


# ---------------------------------------------------------------------------
# 2-d convolution with symmetric (reflect-including-edge) boundary
# ---------------------------------------------------------------------------


def conv_pads(kernel_shape):
    """(top, bottom, left, right) padding for a centered kernel."""
    kh, kw = kernel_shape
    t = (kh - 1) // 2
    l = (kw - 1) // 2
    return t, kh - 1 - t, l, kw - 1 - l


def conv2d(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate ``x`` with ``kernel`` under symmetric boundary extension."""
    t, b, l, r = conv_pads(kernel.shape)
    if max(t, b) >= x.shape[0] or max(l, r) >= x.shape[1]:
        raise ValueError("kernel too large for image under symmetric padding")
    xpad = np.pad(x, ((t, b), (l, r)), mode="symmetric")
    return signal.correlate(xpad, kernel, mode="valid")


def _fold_axis0(zp: np.ndarray, t: int, b: int) -> np.ndarray:
    d = zp.shape[0] - t - b
    out = zp[t : t + d].copy()
    if t:
        out[:t] += zp[:t][::-1]
    if b:
        out[d - b :] += zp[t + d :][::-1]
    return out


def conv2d_adjoint(y: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`conv2d` (zero-embed, full convolution, fold)."""
    t, b, l, r = conv_pads(kernel.shape)
    zp = signal.convolve(y, kernel, mode="full")
    zp = _fold_axis0(zp, t, b)
    zp = _fold_axis0(zp.T, l, r).T
    return np.ascontiguousarray(zp)


# ---------------------------------------------------------------------------
# utilities
# ---------------------------------------------------------------------------


def op_norm_estimate(op: LinearMap, iters: int = 100, seed: int = 0) -> float:
    """Operator-norm estimate by power iteration on ``op* op``.

    Deterministic for a given seed; returns 0.0 for the zero operator.  The
    estimate approaches the true norm from below.
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(op.domain.total)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return 0.0
    v /= nv
    lam = 0.0
    for _ in range(int(iters)):
        w = op.adjoint(op.apply(BlockVector(op.domain, v))).data
        lam = np.linalg.norm(w)
        if lam == 0.0:
            return 0.0
        v = w / lam
    return float(np.sqrt(lam))


def dense_matrix(op: LinearMap) -> np.ndarray:
    """Dense matrix of a block map, by probing basis vectors.  Test-scale only."""
    n = op.domain.total
    m = op.codomain.total
    out = np.empty((m, n))
    e = BlockVector.zeros(op.domain)
    for j in range(n):
        e.data[:] = 0.0
        e.data[j] = 1.0
        out[:, j] = op.apply(e).data
    return out
