"""Problem builders: TGV-regularized Poisson deblurring, ridge-regularized
smoothed-hinge classification, and a small quadratic program with interval
dual constraints.

Each builder returns a :class:`~drsaddle.solvers.SaddleProblem` whose
all-blocks dual resolvent is elementwise identical to its per-block form, a
requirement for the exact deterministic/stochastic collapse.  The QP builder
also returns its saddle point, which is known in closed form by construction.
"""

from __future__ import annotations

import warnings
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .linops import (
    BlockRowOperator,
    FunctionMap,
    LinearMap,
    _dx_back_div,
    _dx_fwd,
    _dy_back_div,
    _dy_fwd,
    conv2d,
    conv2d_adjoint,
    laplacian,
    mixed_laplacian,
)
from .metrics import ReferencePoint, primal_value
from .precond import grad_matrices, redblack_perm, adjust_rhs_tgv
from .prox import (
    eval_hinge_conjugate,
    eval_kl,
    eval_kl_conjugate,
    eval_smoothed_hinge,
    project_inf_ball,
    prox_ridge,
    resolvent_hinge_conjugate,
    resolvent_kl_conjugate,
    smoothed_hinge_grad,
)
from .solvers import SaddleProblem, SolverConfig, run
from .spaces import BlockLayout, BlockVector

__all__ = [
    "motion_blur_kernel",
    "synth_image",
    "make_deblur_data",
    "read_pgm",
    "read_image",
    "write_pgm",
    "tgv_operator",
    "build_tgv_kl",
    "SampleAverageOperator",
    "synth_classification",
    "build_classification",
    "build_toy_qp",
    "parse_libsvm",
    "serialize_libsvm",
    "reference_solution",
    "make_problem",
]

FEAS_TOL = 1e-9


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def motion_blur_kernel(length: int, angle_deg: float = 0.0) -> np.ndarray:
    """Linear motion blur: ``length`` unit taps splat bilinearly along a line
    through the kernel center, normalized to unit mass.

    Angle zero moves along the second (column) axis, so the kernel's center
    row carries ``length`` equal taps.
    """
    if length < 1:
        raise ValueError("length must be at least 1")
    size = int(length)
    k = np.zeros((size, size))
    c = (size - 1) / 2.0
    theta = np.deg2rad(angle_deg)
    for i in range(size):
        t = i - c
        r = c + t * np.sin(theta)
        q = c + t * np.cos(theta)
        r0 = int(np.floor(r))
        q0 = int(np.floor(q))
        fr = r - r0
        fq = q - q0
        for dr, wr in ((0, 1.0 - fr), (1, fr)):
            for dq, wq in ((0, 1.0 - fq), (1, fq)):
                w = wr * wq
                if w == 0.0:
                    continue
                rr = min(max(r0 + dr, 0), size - 1)
                qq = min(max(q0 + dq, 0), size - 1)
                k[rr, qq] += w
    return k / k.sum()


def synth_image(d1: int, d2: int) -> np.ndarray:
    """Deterministic test image in [0, 1]: ramp, blob, square, dark disk."""
    yy, xx = np.meshgrid(np.linspace(0, 1, d1), np.linspace(0, 1, d2),
                         indexing="ij")
    img = 0.15 + 0.25 * (xx + yy) / 2.0
    img += 0.55 * np.exp(-((xx - 0.30) ** 2 + (yy - 0.35) ** 2) / 0.03)
    img[(xx > 0.55) & (xx < 0.82) & (yy > 0.55) & (yy < 0.85)] = 0.92
    img[((xx - 0.72) ** 2 + (yy - 0.22) ** 2) < 0.012] = 0.06
    return np.clip(img, 0.0, 1.0)


def make_deblur_data(d1: int, d2: int, kernel: np.ndarray, seed: int = 5,
                     peak: float = 1000.0, poisson: bool = True,
                     clean: Optional[np.ndarray] = None):
    """Clean image, its blur, and the observation used as data.

    With ``poisson`` the observation is a seeded Poisson draw at ``peak``
    counts per unit intensity, rescaled back to intensity units; otherwise
    it is the blur itself clamped to be nonnegative.
    """
    if clean is None:
        clean = synth_image(d1, d2)
    blurred = conv2d(clean, kernel)
    if poisson:
        rng = np.random.default_rng(seed)
        b = rng.poisson(np.clip(blurred, 0.0, None) * peak)
        b = b.astype(np.float64) / peak
    else:
        b = np.clip(blurred, 0.0, None)
    return clean, blurred, b


def read_pgm(path) -> np.ndarray:
    """Grayscale image from a PGM file (ascii P2 or binary P5), as floats
    in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    magic = raw[:2]
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"{path}: not a PGM file (magic {magic!r})")
    # header tokens may be separated by comments starting with '#'
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    width, height, maxval = (int(t) for t in tokens)
    if not (0 < maxval < 65536):
        raise ValueError(f"{path}: bad maxval {maxval}")
    if magic == b"P2":
        vals = np.array(raw[pos:].split(), dtype=np.float64)
    else:
        pos += 1  # single whitespace byte after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        vals = np.frombuffer(raw, dtype=dtype, count=width * height,
                             offset=pos).astype(np.float64)
    if vals.size != width * height:
        raise ValueError(f"{path}: expected {width * height} samples, "
                         f"got {vals.size}")
    return vals.reshape(height, width) / float(maxval)


def read_image(path) -> np.ndarray:
    """Grayscale image in [0, 1] from a PGM (P2/P5) or 8-bit gray PNG file."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
    if magic[:2] in (b"P2", b"P5"):
        return read_pgm(path)
    if magic == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
        return arr / 255.0
    raise ValueError(f"{path}: unsupported image format")


def write_pgm(path, img: np.ndarray) -> None:
    """Binary 8-bit PGM of an intensity image, clipped to [0, 1]."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.round(arr * 255.0).astype("u1")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# TGV-regularized Poisson deblurring
# ---------------------------------------------------------------------------


def _primal_from(layout: BlockLayout, u=None, w1=None, w2=None) -> BlockVector:
    out = BlockVector.zeros(layout)
    if u is not None:
        out.block(0)[:] = u
    if w1 is not None:
        out.block(1)[:] = w1
    if w2 is not None:
        out.block(2)[:] = w2
    return out


def tgv_operator(d1: int, d2: int, kernel: np.ndarray) -> BlockRowOperator:
    """The deblurring analysis operator on (image, field1, field2).

    Six dual rows: blurred image, the two first-order coupling rows
    (gradient minus field), the two diagonal second-order rows, and the
    symmetrized off-diagonal pair stacked twice so the tensor stays symmetric
    under joint sampling.
    """
    primal = BlockLayout([(d1, d2)] * 3)
    img = BlockLayout([(d1, d2)])
    pair = BlockLayout([(2, d1, d2)])

    def row(fwd, adj, cod=img):
        return FunctionMap(primal, cod, fwd, adj)

    def bv(cod, arr):
        v = BlockVector.zeros(cod)
        v.block(0)[:] = arr
        return v

    rows = [
        row(lambda x: bv(img, conv2d(x.block(0), kernel)),
            lambda y: _primal_from(primal, u=conv2d_adjoint(y.block(0), kernel))),
        row(lambda x: bv(img, _dx_fwd(x.block(0)) - x.block(1)),
            lambda y: _primal_from(primal, u=-_dx_back_div(y.block(0)),
                                   w1=-y.block(0))),
        row(lambda x: bv(img, _dy_fwd(x.block(0)) - x.block(2)),
            lambda y: _primal_from(primal, u=-_dy_back_div(y.block(0)),
                                   w2=-y.block(0))),
        row(lambda x: bv(img, _dx_fwd(x.block(1))),
            lambda y: _primal_from(primal, w1=-_dx_back_div(y.block(0)))),
        row(lambda x: bv(img, _dy_fwd(x.block(2))),
            lambda y: _primal_from(primal, w2=-_dy_back_div(y.block(0)))),
        row(lambda x: bv(pair, np.stack([
                0.5 * (_dy_fwd(x.block(1)) + _dx_fwd(x.block(2)))] * 2)),
            lambda y: _primal_from(
                primal,
                w1=-0.5 * _dy_back_div(y.block(0)[0] + y.block(0)[1]),
                w2=-0.5 * _dx_back_div(y.block(0)[0] + y.block(0)[1])),
            cod=pair),
    ]
    return BlockRowOperator(rows)


def _resolvent_all(layout: BlockLayout, block_fn):
    """All-blocks dual resolvent as the literal per-block loop."""

    def rg(z: BlockVector, step: float) -> BlockVector:
        out = BlockVector.zeros(layout)
        for i in range(len(layout)):
            out.flat_block(i)[:] = block_fn(i, z.flat_block(i), step)
        return out

    return rg


def _kl_sup_term(v: np.ndarray, b: np.ndarray, lo: float, hi: float) -> float:
    """sup over y in [lo, hi] of <v, y> minus the count-data conjugate term.

    Requires lo < 1; the maximizer stays strictly below 1 wherever b > 0, so
    the value is finite.
    """
    v = v.ravel()
    b = b.ravel()
    ystar = np.full_like(v, lo)
    posv = v > 0
    posb = b > 0
    m = posv & posb
    ystar[m] = np.clip(1.0 - b[m] / v[m], lo, hi)
    ystar[posv & ~posb] = hi
    total = float(v @ ystar)
    if np.any(posb):
        bb = b[posb]
        yb = ystar[posb]
        total += float(np.sum(bb - bb * np.log(bb / (1.0 - yb))))
    return total


def _ball_sup_term(v: np.ndarray, radius: float, lo: float, hi: float) -> float:
    el = max(lo, -radius)
    eh = min(hi, radius)
    return float(np.sum(np.maximum(v * el, v * eh)))


def _interval_inf_term(w: np.ndarray, lo, hi) -> float:
    return float(np.sum(np.minimum(w * lo, w * hi)))


def build_tgv_kl(kernel: np.ndarray, data: np.ndarray, alpha0: float,
                 alpha1: float, clean: Optional[np.ndarray] = None,
                 name: str = "tgv_kl") -> SaddleProblem:
    """Total-generalized-variation deblurring with count-data fidelity.

    Primal blocks: image in [0, 1] plus a two-component slope field.  Dual
    blocks: fidelity scores, two first-order residuals bounded by ``alpha1``,
    and three second-order rows bounded by ``alpha0`` (the symmetrized
    off-diagonal pair is one jointly-updated block).
    """
    b = np.asarray(data, dtype=np.float64)
    d1, d2 = b.shape
    if np.any(b < 0):
        raise ValueError("count data must be nonnegative")
    K = tgv_operator(d1, d2, kernel)
    primal = K.domain
    dual = K.codomain
    radii = (None, alpha1, alpha1, alpha0, alpha0, alpha0)

    def res_F(z: BlockVector, step: float) -> BlockVector:
        out = z.copy()
        np.clip(out.block(0), 0.0, 1.0, out=out.block(0))
        return out

    def res_G_block(i: int, z: np.ndarray, step: float) -> np.ndarray:
        if i == 0:
            return resolvent_kl_conjugate(z, step, b.ravel())
        return project_inf_ball(z, radii[i])

    def eval_F(x: BlockVector) -> float:
        u = x.block(0)
        if u.min() < -FEAS_TOL or u.max() > 1.0 + FEAS_TOL:
            return np.inf
        return 0.0

    def eval_G(y: BlockVector) -> float:
        total = eval_kl_conjugate(y.flat_block(0), b.ravel(), tol=FEAS_TOL)
        for i in range(1, 6):
            r = radii[i]
            if np.max(np.abs(y.flat_block(i))) > r + FEAS_TOL * max(1.0, r):
                return np.inf
        return total

    def eval_G_conj(v: BlockVector) -> float:
        total = eval_kl(v.flat_block(0), b.ravel())
        for i in range(1, 6):
            total += radii[i] * float(np.sum(np.abs(v.flat_block(i))))
        return total

    def sup_dual(v: BlockVector, box) -> float:
        if box is None:
            box = default_box_dual
        total = _kl_sup_term(v.flat_block(0), b.ravel(), *box[0])
        for i in range(1, 6):
            total += _ball_sup_term(v.flat_block(i), radii[i], *box[i])
        return total

    def inf_primal(w: BlockVector, box) -> float:
        if box is None:
            box = default_box_primal
        lo0, hi0 = max(box[0][0], 0.0), min(box[0][1], 1.0)
        total = _interval_inf_term(w.flat_block(0), lo0, hi0)
        for i in (1, 2):
            total += _interval_inf_term(w.flat_block(i), *box[i])
        return total

    def sgs_factory(sigma: float, tau: float):
        st = sigma * tau
        Gx, Gy = grad_matrices(d1, d2)
        lap = -(Gx.T @ Gx + Gy.T @ Gy)
        n = d1 * d2
        B = ((1.0 + st) * sp.eye(n) - st * lap).tocsr()
        A = sp.bmat(
            [[B, -st * Gx.T, -st * Gy.T],
             [-st * Gx, B, None],
             [-st * Gy, None, B]],
            format="csr",
        )
        perm = redblack_perm([(d1, d2)] * 3)

        def ap(x: BlockVector) -> BlockVector:
            return BlockVector(primal, A @ x.data)

        T_prime = FunctionMap(primal, primal, ap, ap)

        def rhs_shift(bvec: BlockVector, x: BlockVector) -> BlockVector:
            return adjust_rhs_tgv(bvec, x, kernel, sigma, tau)

        return A, perm, T_prime, rhs_shift

    default_box_dual = [(-3.0, 1.0)] + [(-alpha1, alpha1)] * 2 + \
        [(-alpha0, alpha0)] * 3
    default_box_primal = [(0.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)]

    # ||K x||^2 <= ||u||^2 + 2(8||u||^2 + ||w||^2) + 8||w||^2 <= 17 ||x||^2
    # for a nonnegative unit-mass kernel (Young) and forward differences.
    prob = SaddleProblem(
        name=name,
        K=K,
        resolvent_F=res_F,
        resolvent_G=_resolvent_all(dual, res_G_block),
        resolvent_G_block=res_G_block,
        eval_F=eval_F,
        eval_G=eval_G,
        eval_G_conj=eval_G_conj,
        norm_K_sq_bound=17.0,
        default_precond="sgs",
        sgs_factory=sgs_factory,
        initial_x=_primal_from(primal, u=np.clip(b, 0.0, 1.0)),
        sup_dual=sup_dual,
        inf_primal=inf_primal,
        default_box_primal=default_box_primal,
        default_box_dual=default_box_dual,
        psnr_truth=np.asarray(clean, dtype=np.float64) if clean is not None else None,
        meta={"kind": "deblur", "data": b, "kernel": np.asarray(kernel),
              "alpha0": float(alpha0), "alpha1": float(alpha1)},
    )
    return prob


# ---------------------------------------------------------------------------
# linear classification with smoothed hinge loss and ridge penalty
# ---------------------------------------------------------------------------


class SampleAverageOperator(LinearMap):
    """x -> (a_i^T x / n)_i with one scalar dual block per sample."""

    def __init__(self, features: np.ndarray):
        A = np.ascontiguousarray(features, dtype=np.float64)
        n, d = A.shape
        super().__init__(BlockLayout([(d,)]), BlockLayout([(1,)] * n))
        self.A = A
        self.n = n

    def apply(self, x: BlockVector) -> BlockVector:
        return BlockVector(self.codomain, self.A @ x.data / self.n)

    def adjoint(self, y: BlockVector) -> BlockVector:
        return BlockVector(self.domain, self.A.T @ y.data / self.n)

    def apply_row(self, i: int, x: BlockVector) -> np.ndarray:
        return np.array([float(self.A[i] @ x.data) / self.n])

    def adjoint_row(self, i: int, y_i: np.ndarray) -> BlockVector:
        s = float(np.asarray(y_i).ravel()[0]) / self.n
        return BlockVector(self.domain, self.A[i] * s)


def synth_classification(n: int, d: int, seed: int = 0):
    """Gaussian features with labels from a noisy linear teacher."""
    rng = np.random.default_rng(seed)
    x_true = rng.standard_normal(d) / np.sqrt(d)
    A = rng.standard_normal((n, d))
    margins = A @ x_true + 0.3 * rng.standard_normal(n)
    labels = np.where(margins >= 0.0, 1.0, -1.0)
    return A, labels


def build_classification(features: np.ndarray, labels: np.ndarray, lam: float,
                         name: str = "classification") -> SaddleProblem:
    """(1/n) sum_i smoothed_hinge(a_i^T x; b_i) + lam/2 ||x||^2 in saddle form,
    one scalar dual block per sample."""
    A = np.ascontiguousarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n, d = A.shape
    if labels.shape != (n,) or not np.all(np.abs(labels) == 1.0):
        raise ValueError("labels must be +1/-1, one per sample")
    if lam <= 0:
        raise ValueError("ridge weight must be positive")
    K = SampleAverageOperator(A)
    primal, dual = K.domain, K.codomain

    lo_y = np.minimum(-labels, 0.0)
    hi_y = np.maximum(-labels, 0.0)

    def res_F(z: BlockVector, step: float) -> BlockVector:
        return BlockVector(primal, prox_ridge(z.data, step, lam))

    def res_G(z: BlockVector, step: float) -> BlockVector:
        return BlockVector(
            dual, resolvent_hinge_conjugate(z.data, step, labels, n))

    def res_G_block(i: int, z: np.ndarray, step: float) -> np.ndarray:
        return resolvent_hinge_conjugate(z, step, labels[i:i + 1], n)

    def eval_F(x: BlockVector) -> float:
        return 0.5 * lam * x.norm_sq()

    def eval_G(y: BlockVector) -> float:
        return eval_hinge_conjugate(y.data, labels, n, tol=FEAS_TOL)

    def eval_G_conj(v: BlockVector) -> float:
        return float(np.sum(eval_smoothed_hinge(n * v.data, labels))) / n

    def sup_dual(v: BlockVector, box) -> float:
        lo = lo_y
        hi = hi_y
        if box is not None:
            lo = np.maximum(lo, np.array([p[0] for p in box]))
            hi = np.minimum(hi, np.array([p[1] for p in box]))
        y = np.clip(n * v.data - labels, lo, hi)
        return float(np.sum(v.data * y - (labels * y + 0.5 * y * y) / n))

    def inf_primal(w: BlockVector, box) -> float:
        if box is None:
            box = default_box_primal
        lo, hi = box[0]
        x = np.clip(-w.data / lam, lo, hi)
        return float(np.sum(0.5 * lam * x * x + w.data * x))

    gram = A @ A.T if n <= d else A.T @ A
    top = float(np.linalg.eigvalsh(gram)[-1])
    norm_k_sq = top * (1.0 + 1e-9) / (n * n) + 1e-15

    # strong convexity bounds the solution: ||x*|| <= ||grad P(0)|| / lam
    radius = 2.0 * float(np.linalg.norm(A.T @ labels / n)) / lam + 1.0
    default_box_primal = [(-radius, radius)]

    q_op = FunctionMap(primal, primal,
                       lambda x: BlockVector(primal, lam * x.data),
                       lambda x: BlockVector(primal, lam * x.data))

    return SaddleProblem(
        name=name,
        K=K,
        resolvent_F=res_F,
        resolvent_G=res_G,
        resolvent_G_block=res_G_block,
        eval_F=eval_F,
        eval_G=eval_G,
        eval_G_conj=eval_G_conj,
        norm_K_sq_bound=norm_k_sq,
        Q=q_op,
        f=BlockVector.zeros(primal),
        norm_Q_bound=lam,
        default_precond="richardson",
        sup_dual=sup_dual,
        inf_primal=inf_primal,
        default_box_primal=default_box_primal,
        default_box_dual=None,
        meta={"kind": "classification", "features": A, "labels": labels,
              "lam": float(lam)},
    )


# ---------------------------------------------------------------------------
# small QP with interval-constrained quadratic dual blocks
# ---------------------------------------------------------------------------


def build_toy_qp(active: bool = True) -> Tuple[SaddleProblem, ReferencePoint]:
    """Three primal variables, three dual blocks, saddle point by construction.

    F(x) = x^T Q x / 2 - f^T x with diagonal Q > 0; each G_i is a strongly
    convex quadratic plus an interval indicator.  In the ``active`` variant
    one interval bound binds at the solution with a positive multiplier,
    which keeps the ergodic optimality measure decaying at the generic 1/K
    rate; the inactive variant is locally smooth and converges linearly.
    """
    q_diag = np.array([1.0, 2.0, 0.5])
    mats = [
        np.array([[0.6, -0.3, 0.2], [0.1, 0.5, -0.4]]),
        np.array([[-0.2, 0.4, 0.7]]),
        np.array([[0.3, 0.3, -0.1], [-0.5, 0.2, 0.6]]),
    ]
    s_curv = [0.5, 1.0, 0.8]
    if active:
        x_star = np.array([0.3, -0.2, 0.5])
        y_star_blocks = [np.array([0.4, -0.1]), np.array([0.25]),
                        np.array([-0.3, 0.15])]
        nu = 0.7
    else:
        x_star = np.array([0.006, -0.004, 0.01])
        y_star_blocks = [np.array([0.008, -0.002]), np.array([0.005]),
                        np.array([-0.006, 0.003])]
        nu = 0.0

    primal = BlockLayout([(3,)])
    rows = [
        FunctionMap(primal, BlockLayout([(m.shape[0],)]),
                    (lambda mm: lambda x: BlockVector(
                        BlockLayout([(mm.shape[0],)]), mm @ x.data))(m),
                    (lambda mm: lambda y: BlockVector(primal, mm.T @ y.data))(m))
        for m in mats
    ]
    K = BlockRowOperator(rows)
    dual = K.codomain

    v_star = [m @ x_star for m in mats]
    c_blocks = []
    lo_blocks = []
    hi_blocks = []
    for i, (m, s, ys) in enumerate(zip(mats, s_curv, y_star_blocks)):
        c = v_star[i] - s * ys
        lo = ys - 1.0
        hi = ys + 1.0
        if active and i == 0:
            c = c.copy()
            c[0] -= nu          # bound binds: v* = s y* + c + nu at the top
            hi = ys + np.array([0.0, 1.0])
            lo = ys - np.array([2.0, 1.0])
        c_blocks.append(c)
        lo_blocks.append(np.asarray(lo, dtype=np.float64) + 0.0 * ys)
        hi_blocks.append(np.asarray(hi, dtype=np.float64) + 0.0 * ys)

    x_star_bv = BlockVector.from_blocks([x_star])
    y_star_bv = BlockVector.from_blocks(y_star_blocks)
    f_arr = q_diag * x_star + K.adjoint(y_star_bv).data
    f_bv = BlockVector(primal, f_arr.copy())

    def res_F(z: BlockVector, step: float) -> BlockVector:
        return BlockVector(primal, (z.data + step * f_arr) / (1.0 + step * q_diag))

    def res_G_block(i: int, z: np.ndarray, step: float) -> np.ndarray:
        t = (z - step * c_blocks[i]) / (1.0 + step * s_curv[i])
        return np.clip(t, lo_blocks[i], hi_blocks[i])

    def eval_F(x: BlockVector) -> float:
        v = x.data
        return float(0.5 * v @ (q_diag * v) - f_arr @ v)

    def eval_G(y: BlockVector) -> float:
        total = 0.0
        for i in range(3):
            yi = y.flat_block(i)
            if np.any(yi < lo_blocks[i] - FEAS_TOL) or \
                    np.any(yi > hi_blocks[i] + FEAS_TOL):
                return np.inf
            yc = np.clip(yi, lo_blocks[i], hi_blocks[i])
            total += float(0.5 * s_curv[i] * yc @ yc + c_blocks[i] @ yc)
        return total

    def _conj_block(i: int, v: np.ndarray, lo=None, hi=None) -> float:
        el = lo_blocks[i] if lo is None else np.maximum(lo_blocks[i], lo)
        eh = hi_blocks[i] if hi is None else np.minimum(hi_blocks[i], hi)
        y = np.clip((v - c_blocks[i]) / s_curv[i], el, eh)
        return float(v @ y - 0.5 * s_curv[i] * y @ y - c_blocks[i] @ y)

    def eval_G_conj(v: BlockVector) -> float:
        return sum(_conj_block(i, v.flat_block(i)) for i in range(3))

    def sup_dual(v: BlockVector, box) -> float:
        if box is None:
            return eval_G_conj(v)
        return sum(_conj_block(i, v.flat_block(i), box[i][0], box[i][1])
                   for i in range(3))

    def inf_primal(w: BlockVector, box) -> float:
        if box is None:
            box = default_box_primal
        lo, hi = box[0]
        x = np.clip((f_arr - w.data) / q_diag, lo, hi)
        return float(0.5 * x @ (q_diag * x) - f_arr @ x + w.data @ x)

    default_box_primal = [(-3.0, 3.0)]

    q_op = FunctionMap(primal, primal,
                       lambda x: BlockVector(primal, q_diag * x.data),
                       lambda x: BlockVector(primal, q_diag * x.data))

    k_dense = np.vstack(mats)
    norm_k_sq = float(np.linalg.norm(k_dense, 2) ** 2) * (1.0 + 1e-9) + 1e-15

    prob = SaddleProblem(
        name="toy_qp_active" if active else "toy_qp_pure",
        K=K,
        resolvent_F=res_F,
        resolvent_G=_resolvent_all(dual, res_G_block),
        resolvent_G_block=res_G_block,
        eval_F=eval_F,
        eval_G=eval_G,
        eval_G_conj=eval_G_conj,
        norm_K_sq_bound=norm_k_sq,
        Q=q_op,
        f=f_bv,
        norm_Q_bound=float(q_diag.max()),
        default_precond="exact",
        sup_dual=sup_dual,
        inf_primal=inf_primal,
        default_box_primal=default_box_primal,
        default_box_dual=None,
        meta={"kind": "toy_qp", "active": bool(active), "multiplier": nu,
              "q_diag": q_diag, "c_blocks": c_blocks, "s_curv": s_curv,
              "lo_blocks": lo_blocks, "hi_blocks": hi_blocks},
    )

    # stationarity audit of the constructed saddle point
    r_primal = float(np.linalg.norm(
        q_diag * x_star - f_arr + K.adjoint(y_star_bv).data))
    resid_dual = 0.0
    for i in range(3):
        g = v_star[i] - (s_curv[i] * y_star_blocks[i] + c_blocks[i])
        at_hi = hi_blocks[i] - y_star_blocks[i] < 1e-12
        at_lo = y_star_blocks[i] - lo_blocks[i] < 1e-12
        ok = np.where(at_hi, g >= -1e-12, np.where(at_lo, g <= 1e-12,
                                                   np.abs(g) < 1e-12))
        resid_dual = max(resid_dual, 0.0 if np.all(ok) else np.inf)
        interior = ~(at_hi | at_lo)
        if np.any(interior):
            resid_dual = max(resid_dual, float(np.max(np.abs(g[interior]))))
    ref = ReferencePoint(
        x_star_bv, y_star_bv, primal_value(prob, x_star_bv),
        meta={"method": "construction", "kkt_primal_residual": r_primal,
              "kkt_dual_residual": resid_dual, "multiplier": nu},
    )
    prob.meta["reference"] = ref
    return prob, ref


# ---------------------------------------------------------------------------
# LIBSVM-format I/O
# ---------------------------------------------------------------------------


def parse_libsvm(source: Union[str, Iterable[str]],
                 n_features: Optional[int] = None):
    """Parse LIBSVM-format lines into a dense feature matrix and labels.

    ``source`` is a path, a string of lines, or an iterable of lines.  Labels
    must be +1/-1 (0 is accepted as -1 with a warning).  Feature indices are
    1-based and must be strictly increasing per line.  Errors carry the
    offending 1-based line number.
    """
    if isinstance(source, str):
        if "\n" not in source and ":" not in source:
            with open(source, "r") as fh:
                lines = fh.readlines()
        else:
            lines = source.splitlines()
    else:
        lines = list(source)

    rows: List[dict] = []
    labels: List[float] = []
    max_idx = 0
    for ln, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            lab = float(parts[0])
        except ValueError:
            raise ValueError(f"line {ln}: bad label {parts[0]!r}")
        if lab == 0.0:
            warnings.warn(f"line {ln}: label 0 interpreted as -1")
            lab = -1.0
        if lab not in (1.0, -1.0):
            raise ValueError(f"line {ln}: label must be +1, -1, or 0, "
                             f"got {parts[0]!r}")
        entries = {}
        prev = 0
        for tok in parts[1:]:
            if ":" not in tok:
                raise ValueError(f"line {ln}: malformed feature {tok!r}")
            si, sv = tok.split(":", 1)
            try:
                idx = int(si)
            except ValueError:
                raise ValueError(f"line {ln}: bad feature index {si!r}")
            if idx < 1:
                raise ValueError(f"line {ln}: feature index {idx} below 1")
            if idx <= prev:
                raise ValueError(
                    f"line {ln}: feature indices must be strictly increasing "
                    f"({idx} after {prev})")
            try:
                val = float(sv)
            except ValueError:
                raise ValueError(f"line {ln}: bad feature value {sv!r}")
            entries[idx] = val
            prev = idx
        max_idx = max(max_idx, prev)
        rows.append(entries)
        labels.append(lab)

    if not rows:
        raise ValueError("no samples found")
    d = n_features if n_features is not None else max_idx
    if max_idx > d:
        raise ValueError(f"feature index {max_idx} exceeds n_features={d}")
    A = np.zeros((len(rows), d))
    for r, entries in enumerate(rows):
        for idx, val in entries.items():
            A[r, idx - 1] = val
    return A, np.array(labels)


def serialize_libsvm(features: np.ndarray, labels: np.ndarray) -> str:
    """Write samples in LIBSVM format (nonzeros only, 1-based indices)."""
    A = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if A.ndim != 2 or labels.shape != (A.shape[0],):
        raise ValueError("need a 2-d feature matrix and one label per row")
    out = []
    for i in range(A.shape[0]):
        lab = "+1" if labels[i] > 0 else "-1"
        toks = [lab]
        row = A[i]
        for j in np.nonzero(row)[0]:
            toks.append(f"{j + 1}:{float(row[j])!r}")
        out.append(" ".join(toks))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# reference solutions
# ---------------------------------------------------------------------------


def _newton_reference(prob: SaddleProblem, tol: float = 1e-10,
                      max_iter: int = 200) -> ReferencePoint:
    A = prob.meta["features"]
    labels = prob.meta["labels"]
    lam = prob.meta["lam"]
    n, d = A.shape

    def value(x):
        return float(np.mean(eval_smoothed_hinge(A @ x, labels))) + \
            0.5 * lam * float(x @ x)

    def grad(x):
        return A.T @ smoothed_hinge_grad(A @ x, labels) / n + lam * x

    x = np.zeros(d)
    it = 0
    g = grad(x)
    while float(np.linalg.norm(g)) > tol and it < max_iter:
        m = labels * (A @ x)
        mask = (m > 0.0) & (m < 1.0)
        H = lam * np.eye(d)
        if np.any(mask):
            Am = A[mask]
            H = H + Am.T @ Am / n
        p = np.linalg.solve(H, -g)
        t = 1.0
        v0 = value(x)
        slope = float(g @ p)
        while value(x + t * p) > v0 + 0.25 * t * slope and t > 1e-12:
            t *= 0.5
        x = x + t * p
        g = grad(x)
        it += 1
    gn = float(np.linalg.norm(g))
    if gn > tol:
        raise RuntimeError(f"reference solve stalled at gradient norm {gn:g}")
    y = smoothed_hinge_grad(A @ x, labels)
    x_bv = BlockVector(prob.primal_layout, x.copy())
    y_bv = BlockVector(prob.dual_layout, y.copy())
    return ReferencePoint(
        x_bv, y_bv, primal_value(prob, x_bv),
        meta={"method": "newton", "grad_norm": gn, "iterations": it})


def _long_run_reference(prob: SaddleProblem, epochs: float, sigma: float,
                        tau: float, precond: str = "auto") -> ReferencePoint:
    from .solvers import make_preconditioner, step_residual

    cfg = SolverConfig(algorithm="pdr", sigma=sigma, tau=tau,
                       preconditioner=precond, epochs=epochs, cadence=max(
                           1.0, epochs))
    res = run(prob, cfg)
    pre = make_preconditioner(prob, cfg)
    resid = step_residual(prob, cfg, pre, res.state)
    return ReferencePoint(
        res.x_test, res.y_test, primal_value(prob, res.x_test),
        meta={"method": "long_run", "epochs": float(epochs),
              "rms_step_residual": resid, "sigma": sigma, "tau": tau})


def reference_solution(prob: SaddleProblem, tol: float = 1e-10,
                       epochs: float = 5000.0, sigma: float = 5.0,
                       tau: float = 0.1) -> ReferencePoint:
    """Independent solution of a problem instance with a certificate.

    QP instances return their constructed saddle point, classification runs a
    damped Newton solve on the smooth primal, and deblurring falls back to a
    long unrelaxed solver run certified by its final step residual.
    """
    kind = prob.meta.get("kind")
    if kind == "toy_qp":
        return prob.meta["reference"]
    if kind == "classification":
        return _newton_reference(prob, tol=tol)
    if kind == "deblur":
        return _long_run_reference(prob, epochs, sigma, tau)
    raise ValueError(f"no reference strategy for problem kind {kind!r}")


# ---------------------------------------------------------------------------
# config-driven construction
# ---------------------------------------------------------------------------


def make_problem(cfg: dict) -> SaddleProblem:
    """Build a problem from a validated configuration mapping."""
    kind = cfg.get("kind")
    if kind == "deblur":
        kernel = motion_blur_kernel(int(cfg.get("blur_len", 5)),
                                    float(cfg.get("blur_angle", 0.0)))
        if "image" in cfg:
            clean = read_image(cfg["image"])
            d1, d2 = clean.shape
        else:
            clean = None
            d1, d2 = int(cfg["d1"]), int(cfg["d2"])
        clean, _, b = make_deblur_data(
            d1, d2, kernel,
            seed=int(cfg.get("data_seed", 5)),
            peak=float(cfg.get("peak", 1000.0)),
            poisson=bool(cfg.get("poisson", False)),
            clean=clean)
        return build_tgv_kl(kernel, b, float(cfg["alpha0"]),
                            float(cfg["alpha1"]), clean=clean)
    if kind == "classification":
        lam = float(cfg["lam"])
        if "path" in cfg:
            A, labels = parse_libsvm(cfg["path"],
                                     n_features=cfg.get("n_features"))
        else:
            A, labels = synth_classification(int(cfg["n"]), int(cfg["d"]),
                                             seed=int(cfg.get("data_seed", 0)))
        return build_classification(A, labels, lam)
    if kind == "toy_qp":
        prob, _ = build_toy_qp(active=cfg.get("variant", "active") == "active")
        return prob
    raise ValueError(f"unknown problem kind {kind!r}")
