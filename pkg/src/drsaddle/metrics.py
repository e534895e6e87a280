"""Convergence metrics, run traces, and reference solutions.

The trace schema is fixed: every run records the same columns in the same
order so traces are directly comparable and byte-identical across repeats
(modulo the wall-clock column, which is excluded from determinism claims).

Quantities whose decay the solvers certify are evaluated at the ergodic
average of the transitional pair; image quality is evaluated at the current
transitional primal point.  Metrics that do not apply to a run (no reference
available, no box model, non-image problem) are recorded as ``inf`` so the
schema never changes shape.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

from .spaces import (
    BlockLayout,
    BlockVector,
    DiagonalWeight,
    StateU,
    state_combine,
    weighted_norm_sq,
)

__all__ = [
    "lagrangian",
    "bregman_H",
    "restricted_gap",
    "primal_value",
    "primal_error",
    "psnr",
    "ergodic_update",
    "rate_fit",
    "TRACE_COLUMNS",
    "RunTrace",
    "MetricRecorder",
    "ReferencePoint",
]


# ---------------------------------------------------------------------------
# pointwise quantities
# ---------------------------------------------------------------------------


def lagrangian(prob, x: BlockVector, y: BlockVector) -> float:
    """F(x) + <K x, y> - G(y)."""
    return prob.eval_F(x) + prob.K.apply(x).dot(y) - prob.eval_G(y)


def bregman_H(prob, z: Tuple[BlockVector, BlockVector],
              z_ref: Tuple[BlockVector, BlockVector]) -> float:
    """Saddle Bregman distance L(x, y_ref) - L(x_ref, y).

    Nonnegative when z_ref is a saddle point; this is the quantity whose
    ergodic decay the solvers guarantee.
    """
    x, y = z
    x_ref, y_ref = z_ref
    return lagrangian(prob, x, y_ref) - lagrangian(prob, x_ref, y)


def restricted_gap(prob, x: BlockVector, y: BlockVector,
                   box_primal=None, box_dual=None) -> float:
    """Duality gap restricted to bounded boxes around the solution.

    The boxes default to the problem's own (chosen to contain its saddle
    point); the problem supplies the two closed-form partial optimizations.
    """
    if prob.sup_dual is None or prob.inf_primal is None:
        return float("inf")
    bp = box_primal if box_primal is not None else prob.default_box_primal
    bd = box_dual if box_dual is not None else prob.default_box_dual
    best_dual = prob.sup_dual(prob.K.apply(x), bd)
    best_primal = prob.inf_primal(prob.K.adjoint(y), bp)
    return prob.eval_F(x) + best_dual + prob.eval_G(y) - best_primal


def primal_value(prob, x: BlockVector) -> float:
    """F(x) + sum_i G_i*((K x)_i)."""
    return prob.eval_F(x) + prob.eval_G_conj(prob.K.apply(x))


def primal_error(prob, x: BlockVector, ref_primal: float) -> float:
    """Relative primal suboptimality (absolute when the optimum is ~ 0)."""
    val = primal_value(prob, x)
    denom = abs(ref_primal)
    if denom < 1e-30:
        denom = 1.0
    return (val - ref_primal) / denom


def psnr(img: np.ndarray, truth: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; inf for an exact match."""
    diff = np.asarray(img, dtype=float) - np.asarray(truth, dtype=float)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def ergodic_update(mean: BlockVector, value: BlockVector, count: int) -> BlockVector:
    """Running mean after folding in the count-th sample."""
    return mean + (1.0 / count) * (value - mean)


def rate_fit(ks: Sequence[float], vals: Sequence[float],
             k_min: float, k_max: float, min_points: int = 5) -> float:
    """Least-squares slope of log10(val) against log10(k) on [k_min, k_max].

    Non-finite and non-positive values are dropped; raises if fewer than
    ``min_points`` usable samples remain.
    """
    ks = np.asarray(ks, dtype=float)
    vals = np.asarray(vals, dtype=float)
    mask = (ks >= k_min) & (ks <= k_max) & (ks > 0)
    mask &= np.isfinite(vals) & (vals > 0)
    if int(mask.sum()) < min_points:
        raise ValueError(
            f"rate_fit needs at least {min_points} usable points, "
            f"got {int(mask.sum())}")
    slope = np.polyfit(np.log10(ks[mask]), np.log10(vals[mask]), 1)[0]
    return float(slope)


# ---------------------------------------------------------------------------
# run traces
# ---------------------------------------------------------------------------


TRACE_COLUMNS = (
    "k", "epoch", "bregman", "gap", "primal", "primal_err_rel",
    "psnr", "mp_dist", "wall_ms",
)


def _fmt(name: str, v: float) -> str:
    if name == "k":
        return str(int(v))
    v = float(v)
    if np.isnan(v):
        return "nan"
    if np.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


@dataclass
class RunTrace:
    """Column store of per-checkpoint metric rows."""

    rows: list = field(default_factory=list)

    def append(self, row: dict) -> None:
        self.rows.append(tuple(float(row[c]) for c in TRACE_COLUMNS))

    def column(self, name: str) -> np.ndarray:
        idx = TRACE_COLUMNS.index(name)
        return np.array([r[idx] for r in self.rows], dtype=float)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(",".join(TRACE_COLUMNS) + "\n")
            for r in self.rows:
                fh.write(",".join(_fmt(c, v) for c, v in
                                  zip(TRACE_COLUMNS, r)) + "\n")

    @classmethod
    def from_csv(cls, path) -> "RunTrace":
        with open(path, "r") as fh:
            header = fh.readline().strip().split(",")
            if tuple(header) != TRACE_COLUMNS:
                raise ValueError(f"unexpected trace header in {path}")
            tr = cls()
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                tr.rows.append(tuple(float(t) for t in line.split(",")))
        return tr


class MetricRecorder:
    """Collects one trace row per run snapshot.

    ``ref`` supplies the saddle point and optimal primal value; ``ref_state``
    and ``weight`` enable the preconditioner-weighted distance-to-solution
    column.  ``with_gap`` switches the restricted-gap column on (it costs a
    few partial optimizations per checkpoint).
    """

    def __init__(self, prob, ref: Optional["ReferencePoint"] = None,
                 ref_state: Optional[StateU] = None,
                 weight: Optional[DiagonalWeight] = None,
                 with_gap: bool = False,
                 box_primal=None, box_dual=None):
        self.prob = prob
        self.ref = ref
        self.ref_state = ref_state
        self.weight = weight
        self.with_gap = with_gap
        self.box_primal = box_primal
        self.box_dual = box_dual
        self.trace = RunTrace()

    def _mp_dist(self, state) -> float:
        if self.weight is None or self.ref_state is None:
            return float("inf")
        if not isinstance(state, StateU):
            return float("inf")
        if state.has_x_bar != self.ref_state.has_x_bar:
            return float("inf")
        diff = state_combine(1.0, state, -1.0, self.ref_state)
        return float(np.sqrt(max(weighted_norm_sq(diff, self.weight), 0.0)))

    def __call__(self, snap: dict) -> None:
        prob = self.prob
        erg = (snap["erg_x"], snap["erg_y"])
        row = {c: float("inf") for c in TRACE_COLUMNS}
        row["k"] = snap["k"]
        row["epoch"] = snap["epoch"]
        row["wall_ms"] = snap["wall_ms"]
        row["primal"] = primal_value(prob, erg[0])
        if self.ref is not None:
            row["bregman"] = bregman_H(prob, erg, (self.ref.x, self.ref.y))
            row["primal_err_rel"] = primal_error(prob, erg[0], self.ref.primal)
        if self.with_gap:
            row["gap"] = restricted_gap(prob, erg[0], erg[1],
                                        self.box_primal, self.box_dual)
        if prob.psnr_truth is not None:
            img = snap["x_test"].block(0)
            row["psnr"] = psnr(img, prob.psnr_truth)
        row["mp_dist"] = self._mp_dist(snap["state"])
        self.trace.append(row)


# ---------------------------------------------------------------------------
# reference solutions
# ---------------------------------------------------------------------------


@dataclass
class ReferencePoint:
    """A saddle point with its primal value and provenance certificate.

    ``meta`` records how the point was obtained and the stationarity
    residual it satisfies, so downstream tolerance choices are auditable.
    """

    x: BlockVector
    y: BlockVector
    primal: float
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        header = {
            "format": "drsaddle-ref-v1",
            "primal": self.primal,
            "x_shapes": [list(s) for s in self.x.layout.shapes],
            "y_shapes": [list(s) for s in self.y.layout.shapes],
            "meta": self.meta,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            fh.write(self.x.data.astype("<f8").tobytes())
            fh.write(self.y.data.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ReferencePoint":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode())
            if header.get("format") != "drsaddle-ref-v1":
                raise ValueError(f"not a reference file: {path}")
            x_lay = BlockLayout(tuple(tuple(s) for s in header["x_shapes"]))
            y_lay = BlockLayout(tuple(tuple(s) for s in header["y_shapes"]))
            xb = np.frombuffer(fh.read(8 * x_lay.total), dtype="<f8")
            yb = np.frombuffer(fh.read(8 * y_lay.total), dtype="<f8")
        x = BlockVector(x_lay, xb.astype(np.float64))
        y = BlockVector(y_lay, yb.astype(np.float64))
        return cls(x, y, float(header["primal"]), dict(header["meta"]))
