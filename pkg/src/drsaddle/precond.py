"""Feasible preconditioners for the inner linear solve of the x-update.

A preconditioner here is a self-adjoint positive-definite map M with
``M >= T`` (T the target operator of the x-update); the update applies one
sweep ``x <- x + M^{-1}(b - T x)``.  Feasibility is what the convergence
theory needs, and :func:`check_feasible` probes it with random Rayleigh
quotients.  The gap ``M - T`` also enters the solver weight norms, so every
implementation exposes it.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .linops import (
    LinearMap,
    conv2d,
    conv2d_adjoint,
    dense_matrix,
    laplacian,
    mixed_laplacian,
)
from .spaces import BlockVector

__all__ = [
    "Preconditioner",
    "ExactPreconditioner",
    "RichardsonPreconditioner",
    "SgsPreconditioner",
    "build_exact",
    "build_richardson",
    "build_sgs_redblack",
    "redblack_perm",
    "grad_matrices",
    "precond_step",
    "adjust_rhs_tgv",
    "check_feasible",
]


class Preconditioner:
    """Base class; concrete classes fill in M^{-1}, M, and the gap M - T."""

    kind = "abstract"

    def __init__(self, T: LinearMap):
        self.T = T

    def apply_Minv(self, r: BlockVector) -> BlockVector:
        raise NotImplementedError

    def apply_M(self, v: BlockVector) -> BlockVector:
        raise NotImplementedError

    def gap_apply(self, v_flat: np.ndarray) -> np.ndarray:
        """(M - T) applied to a flat primal vector (for weight norms)."""
        bv = BlockVector(self.T.domain, v_flat.copy())
        return self.apply_M(bv).data - self.T.apply(bv).data

    def step(self, x: BlockVector, b: BlockVector) -> BlockVector:
        """One preconditioned sweep x + M^{-1}(b - T x)."""
        r = b - self.T.apply(x)
        return x + self.apply_Minv(r)


def precond_step(pre: Preconditioner, x: BlockVector, b: BlockVector) -> BlockVector:
    return pre.step(x, b)


class ExactPreconditioner(Preconditioner):
    """M = T via dense Cholesky; test scale only (assembles T densely)."""

    kind = "exact"

    def __init__(self, T: LinearMap):
        super().__init__(T)
        A = dense_matrix(T)
        A = 0.5 * (A + A.T)
        self._dense = A
        self._chol = scipy.linalg.cho_factor(A)

    def apply_Minv(self, r: BlockVector) -> BlockVector:
        return BlockVector(self.T.domain, scipy.linalg.cho_solve(self._chol, r.data))

    def apply_M(self, v: BlockVector) -> BlockVector:
        return BlockVector(self.T.domain, self._dense @ v.data)

    def gap_apply(self, v_flat: np.ndarray) -> np.ndarray:
        return np.zeros_like(v_flat)


class RichardsonPreconditioner(Preconditioner):
    """Scaled identity M = c*I; the caller picks c >= ||T||."""

    kind = "richardson"

    def __init__(self, T: LinearMap, diag_scale: float):
        super().__init__(T)
        if diag_scale <= 0:
            raise ValueError("diag_scale must be positive")
        self.diag_scale = float(diag_scale)

    def apply_Minv(self, r: BlockVector) -> BlockVector:
        return BlockVector(self.T.domain, r.data / self.diag_scale)

    def apply_M(self, v: BlockVector) -> BlockVector:
        return BlockVector(self.T.domain, v.data * self.diag_scale)

    def gap_apply(self, v_flat: np.ndarray) -> np.ndarray:
        bv = BlockVector(self.T.domain, v_flat.copy())
        return self.diag_scale * v_flat - self.T.apply(bv).data


class SgsPreconditioner(Preconditioner):
    """Symmetric Gauss-Seidel on a sparse surrogate A >= T.

    With A = D + L + L^T split along a supplied ordering (red/black within
    each grid block here), the forward-then-backward sweep realizes
    M = (D + L) D^{-1} (D + L^T) = A + L D^{-1} L^T >= A >= T, so feasibility
    holds for any ordering.  Triangular solves go through prefactored splu.

    ``T_prime`` keeps the surrogate as a LinearMap and ``rhs_shift`` the map
    (b, x) -> b + (A - T)x, so the mathematically identical sweep against the
    surrogate can be exercised as well.
    """

    kind = "sgs"

    def __init__(self, T: LinearMap, A: sp.spmatrix, perm: np.ndarray,
                 T_prime: Optional[LinearMap] = None,
                 rhs_shift: Optional[Callable] = None):
        super().__init__(T)
        n = A.shape[0]
        if n != T.domain.total:
            raise ValueError("sparse surrogate size does not match domain")
        perm = np.asarray(perm, dtype=np.intp)
        if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
            raise ValueError("perm must be a permutation of the unknowns")
        Ap = A.tocsr()[perm][:, perm].tocsr()
        diag = Ap.diagonal()
        if np.any(diag <= 0):
            raise ValueError("surrogate diagonal must be positive")
        low = sp.tril(Ap, -1, format="csr")
        self._perm = perm
        self._iperm = np.argsort(perm)
        self._diag = diag
        self._DL = (sp.diags(diag) + low).tocsc()
        self._DU = (sp.diags(diag) + low.T).tocsc()
        self._lu_fwd = spla.splu(self._DL, permc_spec="NATURAL")
        self._lu_bwd = spla.splu(self._DU, permc_spec="NATURAL")
        self.T_prime = T_prime
        self.rhs_shift = rhs_shift

    def apply_Minv(self, r: BlockVector) -> BlockVector:
        rp = r.data[self._perm]
        z = self._lu_fwd.solve(rp)
        v = self._lu_bwd.solve(self._diag * z)
        out = np.empty_like(v)
        out[self._perm] = v
        return BlockVector(self.T.domain, out)

    def apply_M(self, v: BlockVector) -> BlockVector:
        vp = v.data[self._perm]
        w = self._DU @ vp
        w = self._DL @ (w / self._diag)
        out = np.empty_like(w)
        out[self._perm] = w
        return BlockVector(self.T.domain, out)

    def step_prime(self, x: BlockVector, b: BlockVector) -> BlockVector:
        """The same sweep written against the surrogate with a shifted rhs."""
        if self.T_prime is None or self.rhs_shift is None:
            raise ValueError("no surrogate path configured")
        bp = self.rhs_shift(b, x)
        r = bp - self.T_prime.apply(x)
        return x + self.apply_Minv(r)


def build_exact(T: LinearMap) -> ExactPreconditioner:
    return ExactPreconditioner(T)


def build_richardson(T: LinearMap, diag_scale: float) -> RichardsonPreconditioner:
    return RichardsonPreconditioner(T, diag_scale)


def build_sgs_redblack(T: LinearMap, A: sp.spmatrix, perm: np.ndarray,
                       T_prime: Optional[LinearMap] = None,
                       rhs_shift: Optional[Callable] = None) -> SgsPreconditioner:
    return SgsPreconditioner(T, A, perm, T_prime, rhs_shift)


def redblack_perm(grid_shapes: Sequence[Sequence[int]]) -> np.ndarray:
    """Red-then-black ordering within each stacked 2-d grid block.

    Blocks stay in their given order (e.g. image first, then the two field
    components); inside each block the even-parity pixels come first.
    """
    parts = []
    offset = 0
    for (d1, d2) in grid_shapes:
        par = (np.add.outer(np.arange(d1), np.arange(d2)) % 2).ravel()
        idx = np.arange(d1 * d2)
        parts.append(offset + idx[par == 0])
        parts.append(offset + idx[par == 1])
        offset += d1 * d2
    return np.concatenate(parts)


def grad_matrices(d1: int, d2: int):
    """Sparse forward-difference matrices matching the grad2d stencils."""
    dx = sp.diags([-np.ones(d1), np.ones(d1 - 1)], [0, 1], format="lil")
    dx[d1 - 1, :] = 0.0
    dy = sp.diags([-np.ones(d2), np.ones(d2 - 1)], [0, 1], format="lil")
    dy[d2 - 1, :] = 0.0
    Gx = sp.kron(dx.tocsr(), sp.eye(d2), format="csr")
    Gy = sp.kron(sp.eye(d1), dy.tocsr(), format="csr")
    return Gx, Gy


def adjust_rhs_tgv(b: BlockVector, x: BlockVector, kernel: np.ndarray,
                   sigma: float, tau: float) -> BlockVector:
    """Shift the x-update rhs so sweeping against the Laplacian surrogate
    matches sweeping against the true target: b' = b + (A - T)x.

    For the TGV target the shift is st*(I - C*C) on the image part (C the
    blur) and st/2 times the gap between the componentwise and the mixed
    second differences on the field part, st = sigma*tau.
    """
    st = sigma * tau
    u = x.block(0)
    w1 = x.block(1)
    w2 = x.block(2)
    out = b.copy()
    out.block(0)[:] += st * (u - conv2d_adjoint(conv2d(u, kernel), kernel))
    m1, m2 = mixed_laplacian(w1, w2)
    out.block(1)[:] += 0.5 * st * (m1 - laplacian(w1))
    out.block(2)[:] += 0.5 * st * (m2 - laplacian(w2))
    return out


def check_feasible(pre: Preconditioner, probes: int = 1000, seed: int = 0) -> float:
    """Smallest normalized Rayleigh quotient of M - T over random probes.

    Feasible preconditioners return a value >= -1e-10 (roundoff only).
    """
    rng = np.random.default_rng(seed)
    n = pre.T.domain.total
    worst = np.inf
    for _ in range(int(probes)):
        v = rng.standard_normal(n)
        quad = float(v @ pre.gap_apply(v)) / float(v @ v)
        worst = min(worst, quad)
    return worst
