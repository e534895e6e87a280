"""Resolvents and convex function evaluators used by the solver families.

Every resolvent here is the exact minimizer of ``step*g(t) + (t - z)^2 / 2``
for its function ``g``; tests validate them against a golden-section oracle
and check firm nonexpansiveness.  Evaluators return ``inf`` outside domains
(conventions: ``0*log 0 = 0``; ``-a*log 0 = inf`` for ``a > 0``).
"""

from __future__ import annotations

from typing import Callable, Tuple

import numpy as np

__all__ = [
    "prox_box",
    "project_inf_ball",
    "prox_ridge",
    "resolvent_kl_conjugate",
    "resolvent_hinge_conjugate",
    "eval_kl",
    "eval_kl_conjugate",
    "eval_smoothed_hinge",
    "smoothed_hinge_grad",
    "eval_hinge_conjugate",
    "golden_min",
    "golden_max",
]


def prox_box(z: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Projection onto the box [lo, hi] (resolvent of its indicator)."""
    if lo > hi:
        raise ValueError("box bounds out of order")
    return np.clip(z, lo, hi)


def project_inf_ball(z: np.ndarray, radius: float) -> np.ndarray:
    """Projection onto the sup-norm ball of the given radius."""
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    return np.clip(z, -radius, radius)


def prox_ridge(z: np.ndarray, step: float, lam: float) -> np.ndarray:
    """Resolvent of x -> lam/2 ||x||^2, i.e. shrinkage by 1/(1 + step*lam)."""
    return z / (1.0 + step * lam)


def resolvent_kl_conjugate(z: np.ndarray, step: float, b: np.ndarray) -> np.ndarray:
    """Resolvent of the convex conjugate of the Kullback-Leibler fidelity.

    For g*(s) = sum s - b log s (s >= 0) the conjugate g has the closed-form
    resolvent (z + 1 - sqrt((z - 1)^2 + 4*step*b)) / 2, elementwise.  For
    b == 0 this reduces to min(z, 1), the projection onto the domain.
    """
    b = np.asarray(b)
    if np.any(b < 0):
        raise ValueError("KL data must be nonnegative")
    return 0.5 * (z + 1.0 - np.sqrt((z - 1.0) ** 2 + 4.0 * step * b))


def resolvent_hinge_conjugate(z: np.ndarray, step: float, labels: np.ndarray,
                              n_samples: int) -> np.ndarray:
    """Resolvent of y -> (labels*y + y^2/2)/n + indicator(labels*y in [-1, 0]).

    The interval is [min(-label,0), max(-label,0)] per entry; labels must be
    plus/minus one.
    """
    b = np.asarray(labels, dtype=np.float64)
    if np.any(np.abs(b) != 1.0):
        raise ValueError("labels must be +1 or -1")
    n = float(n_samples)
    t = (n * z - step * b) / (n + step)
    return np.clip(t, np.minimum(-b, 0.0), np.maximum(-b, 0.0))


# ---------------------------------------------------------------------------
# evaluators
# ---------------------------------------------------------------------------


def eval_kl(s: np.ndarray, b: np.ndarray) -> float:
    """sum(s - b log s) over s >= 0, with inf outside the domain."""
    s = np.asarray(s, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(s < 0.0):
        return np.inf
    pos = b > 0.0
    if np.any(pos & (s <= 0.0)):
        return np.inf
    total = float(np.sum(s))
    bp = b[pos]
    if bp.size:
        total -= float(np.sum(bp * np.log(s[pos])))
    return total


def eval_kl_conjugate(z: np.ndarray, b: np.ndarray, tol: float = 0.0) -> float:
    """Conjugate of :func:`eval_kl`: sum over entries of -b + b log(b/(1-z)).

    Finite iff z <= 1 everywhere and z < 1 wherever b > 0; entries with
    b == 0 contribute zero.  ``tol`` loosens the domain check to absorb
    roundoff in averaged iterates.
    """
    z = np.asarray(z, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(z > 1.0 + tol):
        return np.inf
    pos = b > 0.0
    if np.any(pos & (z >= 1.0)):
        return np.inf
    bp = b[pos]
    if not bp.size:
        return 0.0
    return float(np.sum(-bp + bp * np.log(bp / (1.0 - z[pos]))))


def eval_smoothed_hinge(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Smoothed hinge loss, elementwise: 0 / quadratic / linear by margin."""
    lab = np.asarray(labels, dtype=np.float64)
    if np.any(np.abs(lab) != 1.0):
        raise ValueError("labels must be +1 or -1")
    m = lab * np.asarray(z, dtype=np.float64)
    out = np.where(m <= 0.0, 0.5 - m, 0.5 * (1.0 - m) ** 2)
    return np.where(m >= 1.0, 0.0, out)


def smoothed_hinge_grad(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Derivative of :func:`eval_smoothed_hinge` with respect to z."""
    b = np.asarray(labels, dtype=np.float64)
    m = b * np.asarray(z, dtype=np.float64)
    out = np.where(m <= 0.0, -b, -b * (1.0 - m))
    return np.where(m >= 1.0, 0.0, out)


def eval_hinge_conjugate(y: np.ndarray, labels: np.ndarray, n_samples: int,
                         tol: float = 1e-9) -> float:
    """(labels*y + y^2/2)/n summed, inf if y leaves [min(-b,0), max(-b,0)]."""
    y = np.asarray(y, dtype=np.float64)
    b = np.asarray(labels, dtype=np.float64)
    lo = np.minimum(-b, 0.0)
    hi = np.maximum(-b, 0.0)
    if np.any(y < lo - tol) or np.any(y > hi + tol):
        return np.inf
    yc = np.clip(y, lo, hi)
    return float(np.sum(b * yc + 0.5 * yc * yc) / float(n_samples))


# ---------------------------------------------------------------------------
# golden-section search (vectorized; used as an independent oracle and as the
# fallback for restricted-gap terms without a closed form)
# ---------------------------------------------------------------------------

_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


def golden_min(f: Callable[[np.ndarray], np.ndarray], lo, hi,
               iters: int = 200) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise golden-section minimization of a unimodal function.

    ``lo``/``hi`` are broadcastable arrays of interval endpoints; returns the
    minimizer array and f at it.  200 iterations shrink the interval by about
    1e-41, far below double precision.
    """
    a = np.asarray(lo, dtype=np.float64).copy()
    b = np.asarray(hi, dtype=np.float64).copy()
    a, b = np.broadcast_arrays(a, b)
    a = a.copy()
    b = b.copy()
    for _ in range(int(iters)):
        h = b - a
        c = b - _INVPHI * h
        d = a + _INVPHI * h
        fc = f(c)
        fd = f(d)
        keep_left = fc <= fd
        b = np.where(keep_left, d, b)
        a = np.where(keep_left, a, c)
    x = 0.5 * (a + b)
    return x, f(x)


def golden_max(f: Callable[[np.ndarray], np.ndarray], lo, hi,
               iters: int = 200) -> Tuple[np.ndarray, np.ndarray]:
    """Elementwise golden-section maximization (see :func:`golden_min`)."""
    x, negfx = golden_min(lambda t: -f(t), lo, hi, iters)
    return x, -negfx
