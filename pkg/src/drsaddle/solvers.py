"""Saddle-point solvers: preconditioned Douglas-Rachford iterations, their
relaxed and dual-block-stochastic variants, and a primal-dual hybrid gradient
baseline pair.

All solvers target min_x max_y  F(x) + sum_i <K_i x, y_i> - G_i(y_i) and share
one state shape: primal/dual iterates plus shadow ("bar") partners that absorb
the resolvent corrections.  The x-update is a single preconditioned sweep
``x + M^{-1}(b - T x)``; transitional (test) variables are the resolvent
outputs whose ergodic averages carry the O(1/K) gap guarantees.

Design notes that matter for exact reproducibility:

* relaxed combinations take the fast path when a factor equals 1.0, so the
  relaxed steppers with a unit schedule produce bit-identical trajectories to
  their unrelaxed counterparts;
* the stochastic steppers update the sampled dual blocks with exactly the
  per-row operator evaluations the deterministic steppers would produce, so a
  single-block problem collapses the stochastic solver onto the deterministic
  one, float for float;
* every stochastic step consumes exactly one uniform draw.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from .linops import FunctionMap, LinearMap
from .precond import (
    Preconditioner,
    build_exact,
    build_richardson,
    build_sgs_redblack,
)
from .spaces import (
    BlockLayout,
    BlockVector,
    DiagonalWeight,
    StateU,
    WeightTerm,
    combine,
    state_combine,
    weighted_norm_sq,
)

__all__ = [
    "RelaxationSchedule",
    "SamplingScheme",
    "SolverConfig",
    "SaddleProblem",
    "PdhgState",
    "RunResult",
    "sample_index",
    "make_target",
    "make_preconditioner",
    "weight_m",
    "weight_relaxed",
    "weight_residual",
    "fixed_point_state",
    "pdr_step",
    "rpdr_step",
    "pdrq_step",
    "rpdrq_step",
    "srpdr_step",
    "srpdrq_step",
    "pdhg_init",
    "pdhg_step",
    "spdhg_step",
    "step_residual",
    "prop23_slack",
    "prop26_slack",
    "lemma31_slack",
    "lemma51_slack",
    "run",
    "ALGORITHMS",
]


# ---------------------------------------------------------------------------
# schedules, sampling, configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RelaxationSchedule:
    """Nondecreasing relaxation factors rho(k), rho_x(k), rho_y(k) in (0, 2).

    Each factor ramps linearly from its start to its end value over
    ``ramp_steps`` iterations (constant when start == end or ramp_steps == 0).
    """

    rho_start: float = 1.0
    rho_end: float = 1.0
    rho_x_start: float = 1.0
    rho_x_end: float = 1.0
    rho_y_start: float = 1.0
    rho_y_end: float = 1.0
    ramp_steps: int = 0

    def __post_init__(self):
        vals = [
            self.rho_start, self.rho_end, self.rho_x_start,
            self.rho_x_end, self.rho_y_start, self.rho_y_end,
        ]
        if not all(0.0 < v < 2.0 for v in vals):
            raise ValueError("relaxation factors must lie strictly in (0, 2)")
        if (self.rho_end < self.rho_start or self.rho_x_end < self.rho_x_start
                or self.rho_y_end < self.rho_y_start):
            raise ValueError("relaxation factors must be nondecreasing")
        if self.ramp_steps < 0:
            raise ValueError("ramp_steps must be nonnegative")

    @classmethod
    def unit(cls) -> "RelaxationSchedule":
        return cls()

    @classmethod
    def constant(cls, rho: float, rho_x: Optional[float] = None,
                 rho_y: Optional[float] = None) -> "RelaxationSchedule":
        rx = rho if rho_x is None else rho_x
        ry = rho if rho_y is None else rho_y
        return cls(rho, rho, rx, rx, ry, ry, 0)

    @classmethod
    def partial(cls, rho_x: float, rho_y: Optional[float] = None) -> "RelaxationSchedule":
        """Unit iterate relaxation, relaxed shadow updates only."""
        ry = rho_x if rho_y is None else rho_y
        return cls(1.0, 1.0, rho_x, rho_x, ry, ry, 0)

    def _at(self, start: float, end: float, k: int) -> float:
        if self.ramp_steps == 0 or start == end:
            return end if self.ramp_steps == 0 else start
        if k >= self.ramp_steps:
            return end
        return start + (end - start) * (k / self.ramp_steps)

    def rho(self, k: int) -> float:
        return self._at(self.rho_start, self.rho_end, k)

    def rho_x(self, k: int) -> float:
        return self._at(self.rho_x_start, self.rho_x_end, k)

    def rho_y(self, k: int) -> float:
        return self._at(self.rho_y_start, self.rho_y_end, k)

    @property
    def lower(self) -> float:
        return min(self.rho_start, self.rho_x_start, self.rho_y_start)

    @property
    def upper(self) -> float:
        return max(self.rho_end, self.rho_x_end, self.rho_y_end)

    @property
    def is_unit(self) -> bool:
        return self.lower == 1.0 and self.upper == 1.0


@dataclass(frozen=True)
class SamplingScheme:
    """Sampling distribution over disjoint units of dual blocks.

    A unit is a tuple of dual block indices updated together; singleton units
    give plain index sampling.  Probabilities are positive and sum to one
    (p = 1 is allowed only in the single-unit case, which is what makes the
    deterministic collapse expressible).
    """

    units: Tuple[Tuple[int, ...], ...]
    probs: Tuple[float, ...]

    def __post_init__(self):
        if len(self.units) != len(self.probs) or not self.units:
            raise ValueError("units and probs must be equal-length and nonempty")
        seen = set()
        for unit in self.units:
            if not unit:
                raise ValueError("empty sampling unit")
            for i in unit:
                if i in seen:
                    raise ValueError("sampling units must be disjoint")
                seen.add(i)
        if any(p <= 0.0 for p in self.probs):
            raise ValueError("unit probabilities must be positive")
        if len(self.probs) > 1 and any(p >= 1.0 for p in self.probs):
            raise ValueError("unit probabilities must be below one")
        if abs(sum(self.probs) - 1.0) > 1e-9:
            raise ValueError("unit probabilities must sum to one")

    @classmethod
    def uniform(cls, n_blocks: int) -> "SamplingScheme":
        units = tuple((i,) for i in range(n_blocks))
        return cls(units, tuple(1.0 / n_blocks for _ in range(n_blocks)))

    @classmethod
    def from_probs(cls, probs: Sequence[float]) -> "SamplingScheme":
        units = tuple((i,) for i in range(len(probs)))
        return cls(units, tuple(float(p) for p in probs))

    @classmethod
    def partition(cls, units: Sequence[Sequence[int]],
                  probs: Optional[Sequence[float]] = None) -> "SamplingScheme":
        units_t = tuple(tuple(int(i) for i in u) for u in units)
        if probs is None:
            probs = [1.0 / len(units_t)] * len(units_t)
        return cls(units_t, tuple(float(p) for p in probs))

    @property
    def n_units(self) -> int:
        return len(self.units)

    def covers(self, n_blocks: int) -> bool:
        return sorted(i for u in self.units for i in u) == list(range(n_blocks))

    def block_probs(self, n_blocks: int) -> np.ndarray:
        """Per dual block probability of being updated in one step."""
        out = np.zeros(n_blocks)
        for unit, p in zip(self.units, self.probs):
            for i in unit:
                out[i] = p
        if np.any(out == 0.0):
            raise ValueError("sampling units must cover every dual block")
        return out

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.probs)


def sample_index(scheme: SamplingScheme, rng: np.random.Generator) -> int:
    """Draw one unit index; consumes exactly one uniform variate."""
    u = rng.random()
    j = int(np.searchsorted(scheme.cumulative, u, side="right"))
    return min(j, scheme.n_units - 1)


@dataclass
class SolverConfig:
    """Step sizes, preconditioner choice, schedules, sampling, and budget."""

    algorithm: str
    sigma: float
    tau: float
    preconditioner: object = "auto"  # kind string or a Preconditioner instance
    relaxation: RelaxationSchedule = field(default_factory=RelaxationSchedule.unit)
    sampling: Optional[SamplingScheme] = None
    seed: int = 0
    epochs: float = 10.0
    cadence: float = 1.0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.sigma <= 0 or self.tau <= 0:
            raise ValueError("step sizes must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if self.cadence <= 0:
            raise ValueError("cadence must be positive")
        info = ALGORITHMS[self.algorithm]
        if not info.relaxed and not self.relaxation.is_unit:
            raise ValueError(f"{self.algorithm} requires a unit relaxation schedule")


@dataclass
class AlgorithmInfo:
    stochastic: bool
    quadratic: bool
    relaxed: bool
    baseline: bool = False


ALGORITHMS = {
    "pdr": AlgorithmInfo(False, False, False),
    "rpdr": AlgorithmInfo(False, False, True),
    "pdrq": AlgorithmInfo(False, True, False),
    "rpdrq": AlgorithmInfo(False, True, True),
    "spdr": AlgorithmInfo(True, False, False),
    "srpdr": AlgorithmInfo(True, False, True),
    "spdrq": AlgorithmInfo(True, True, False),
    "srpdrq": AlgorithmInfo(True, True, True),
    "pdhg": AlgorithmInfo(False, False, False, baseline=True),
    "spdhg": AlgorithmInfo(True, False, False, baseline=True),
}


# ---------------------------------------------------------------------------
# problem container
# ---------------------------------------------------------------------------


@dataclass
class SaddleProblem:
    """A saddle-point problem instance with everything the solvers need.

    ``resolvent_G`` evaluates all dual blocks at once and must produce the
    same floats as ``resolvent_G_block`` applied per block.  ``eval_G_conj``
    receives K x and returns sum_i G_i*((K x)_i), the dual-transfer part of
    the primal objective.  ``Q``/``f`` hold the quadratic form of F when the
    quadratic-objective solver family applies.
    """

    name: str
    K: LinearMap
    resolvent_F: Callable[[BlockVector, float], BlockVector]
    resolvent_G: Callable[[BlockVector, float], BlockVector]
    resolvent_G_block: Callable[[int, np.ndarray, float], np.ndarray]
    eval_F: Callable[[BlockVector], float]
    eval_G: Callable[[BlockVector], float]
    eval_G_conj: Callable[[BlockVector], float]
    norm_K_sq_bound: float
    Q: Optional[LinearMap] = None
    f: Optional[BlockVector] = None
    norm_Q_bound: float = 0.0
    default_precond: str = "richardson"
    sgs_factory: Optional[Callable] = None
    initial_x: Optional[BlockVector] = None
    sup_dual: Optional[Callable] = None
    inf_primal: Optional[Callable] = None
    default_box_primal: Optional[list] = None
    default_box_dual: Optional[list] = None
    psnr_truth: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def primal_layout(self) -> BlockLayout:
        return self.K.domain

    @property
    def dual_layout(self) -> BlockLayout:
        return self.K.codomain

    @property
    def n_dual(self) -> int:
        return len(self.K.codomain)

    @property
    def has_quadratic(self) -> bool:
        return self.Q is not None and self.f is not None


def make_target(prob: SaddleProblem, sigma: float, tau: float,
                quadratic: bool) -> LinearMap:
    """The x-update target: I + st K*K, or sigma Q + st K*K for quadratic F."""
    st = sigma * tau
    K = prob.K
    lay = prob.primal_layout

    if quadratic:
        if not prob.has_quadratic:
            raise ValueError("problem has no quadratic objective data")
        Q = prob.Q

        def fwd(x: BlockVector) -> BlockVector:
            return combine(sigma, Q.apply(x), st, K.adjoint(K.apply(x)))
    else:

        def fwd(x: BlockVector) -> BlockVector:
            return combine(1.0, x, st, K.adjoint(K.apply(x)))

    return FunctionMap(lay, lay, fwd, fwd)  # self-adjoint


def make_preconditioner(prob: SaddleProblem, cfg: SolverConfig) -> Preconditioner:
    quadratic = ALGORITHMS[cfg.algorithm].quadratic
    if isinstance(cfg.preconditioner, Preconditioner):
        return cfg.preconditioner
    kind = cfg.preconditioner
    if kind == "auto":
        kind = prob.default_precond
    T = make_target(prob, cfg.sigma, cfg.tau, quadratic)
    st = cfg.sigma * cfg.tau
    if kind == "exact":
        return build_exact(T)
    if kind == "richardson":
        if quadratic:
            scale = cfg.sigma * prob.norm_Q_bound + st * prob.norm_K_sq_bound + 1e-9
        else:
            scale = 1.0 + st * prob.norm_K_sq_bound
        return build_richardson(T, scale)
    if kind == "sgs":
        if quadratic:
            raise ValueError("sgs preconditioner is wired for the non-quadratic path")
        if prob.sgs_factory is None:
            raise ValueError(f"problem {prob.name!r} has no sgs factory")
        A, perm, T_prime, rhs_shift = prob.sgs_factory(cfg.sigma, cfg.tau)
        return build_sgs_redblack(T, A, perm, T_prime, rhs_shift)
    raise ValueError(f"unknown preconditioner kind {kind!r}")


# ---------------------------------------------------------------------------
# weight matrices
# ---------------------------------------------------------------------------


def weight_m(prob: SaddleProblem, pre: Preconditioner, sigma: float, tau: float,
             quadratic: bool = False,
             block_probs: Optional[np.ndarray] = None) -> DiagonalWeight:
    """The solver weight: diag[(N1 - I)/sigma, 0, I/sigma, P^{-1}/tau] in the
    full variant and diag[N1/sigma, 0, P^{-1}/tau] in the quadratic one.

    With the computational choice N2 = I the dual-iterate section weighs zero;
    N1 - I (resp. N1) equals the preconditioner gap M - T in both variants.
    ``block_probs`` folds the stochastic 1/p_i correction into the shadow dual
    scales (ones when omitted).
    """
    n = prob.n_dual
    if block_probs is None:
        block_probs = np.ones(n)
    x_term = WeightTerm(1.0 / sigma, pre.gap_apply)
    y_terms = tuple(WeightTerm(0.0) for _ in range(n))
    ybar_terms = tuple(
        WeightTerm(1.0 / (tau * float(block_probs[i]))) for i in range(n)
    )
    xbar_term = None if quadratic else WeightTerm(1.0 / sigma)
    return DiagonalWeight(x_term, y_terms, xbar_term, ybar_terms)


def weight_relaxed(base: DiagonalWeight, rho: float, rho_x: float,
                   rho_y: float) -> DiagonalWeight:
    """Scale the sections by the inverse relaxation factors."""
    return base.scaled(1.0 / rho, 1.0 / rho, 1.0 / rho_x, 1.0 / rho_y)


def weight_residual(base: DiagonalWeight, rho: float, rho_x: float,
                    rho_y: float) -> DiagonalWeight:
    """Scale by (2 - rho)/rho^2 per section: the step-residual weight of the
    relaxed descent inequality."""
    fx = (2.0 - rho) / rho**2
    fxx = (2.0 - rho_x) / rho_x**2
    fyy = (2.0 - rho_y) / rho_y**2
    return base.scaled(fx, fx, fxx, fyy)


def fixed_point_state(prob: SaddleProblem, x_star: BlockVector,
                      y_star: BlockVector, sigma: float, tau: float,
                      quadratic: bool = False) -> StateU:
    """The solver state whose stationarity encodes a saddle point:
    x_bar = x + sigma K* y and y_bar = y - tau K x."""
    y_bar = y_star - tau * prob.K.apply(x_star)
    if quadratic:
        return StateU(x_star.copy(), y_star.copy(), None, y_bar)
    x_bar = x_star + sigma * prob.K.adjoint(y_star)
    return StateU(x_star.copy(), y_star.copy(), x_bar, y_bar)


# ---------------------------------------------------------------------------
# deterministic steppers
# ---------------------------------------------------------------------------


def _relax(rho: float, old: BlockVector, new: BlockVector) -> BlockVector:
    # exact fast path keeps unit-schedule trajectories bit-identical
    if rho == 1.0:
        return new
    return combine(1.0 - rho, old, rho, new)


def _shadow(rho: float, bar: BlockVector, test: BlockVector,
            trans: BlockVector) -> BlockVector:
    if rho == 1.0:
        return bar + (test - trans)
    return bar + rho * (test - trans)


def _pdr_core(u: StateU, prob: SaddleProblem, cfg: SolverConfig,
              pre: Preconditioner):
    sigma, tau = cfg.sigma, cfg.tau
    K = prob.K
    b = u.x_bar - sigma * K.adjoint(u.y_bar)
    x_t = pre.step(u.x, b)
    y_t = u.y_bar + tau * K.apply(x_t)
    x_test = prob.resolvent_F(combine(2.0, x_t, -1.0, u.x_bar), sigma)
    y_test = prob.resolvent_G(combine(2.0, y_t, -1.0, u.y_bar), tau)
    return x_t, y_t, x_test, y_test


def pdr_step(u: StateU, prob: SaddleProblem, cfg: SolverConfig,
             pre: Preconditioner):
    """One unrelaxed step; returns (next state, x_test, y_test)."""
    x_t, y_t, x_test, y_test = _pdr_core(u, prob, cfg, pre)
    nxt = StateU(x_t, y_t, u.x_bar + (x_test - x_t), u.y_bar + (y_test - y_t))
    return nxt, x_test, y_test


def rpdr_step(u: StateU, prob: SaddleProblem, cfg: SolverConfig,
              pre: Preconditioner, k: int):
    """One relaxed step; returns (next state, x_test, y_test, (x_t, y_t))."""
    x_t, y_t, x_test, y_test = _pdr_core(u, prob, cfg, pre)
    sched = cfg.relaxation
    rho, rho_x, rho_y = sched.rho(k), sched.rho_x(k), sched.rho_y(k)
    nxt = StateU(
        _relax(rho, u.x, x_t),
        _relax(rho, u.y, y_t),
        _shadow(rho_x, u.x_bar, x_test, x_t),
        _shadow(rho_y, u.y_bar, y_test, y_t),
    )
    return nxt, x_test, y_test, (x_t, y_t)


def _pdrq_core(u: StateU, prob: SaddleProblem, cfg: SolverConfig,
               pre: Preconditioner):
    sigma, tau = cfg.sigma, cfg.tau
    K = prob.K
    b = sigma * prob.f - sigma * K.adjoint(u.y_bar)
    x_t = pre.step(u.x, b)
    y_t = u.y_bar + tau * K.apply(x_t)
    y_test = prob.resolvent_G(combine(2.0, y_t, -1.0, u.y_bar), tau)
    return x_t, y_t, y_test


def pdrq_step(u: StateU, prob: SaddleProblem, cfg: SolverConfig,
              pre: Preconditioner):
    """Quadratic-objective step (no primal shadow; x itself is transitional)."""
    x_t, y_t, y_test = _pdrq_core(u, prob, cfg, pre)
    nxt = StateU(x_t, y_t, None, u.y_bar + (y_test - y_t))
    return nxt, x_t, y_test


def rpdrq_step(u: StateU, prob: SaddleProblem, cfg: SolverConfig,
               pre: Preconditioner, k: int):
    x_t, y_t, y_test = _pdrq_core(u, prob, cfg, pre)
    sched = cfg.relaxation
    rho, rho_y = sched.rho(k), sched.rho_y(k)
    x_new = _relax(rho, u.x, x_t)
    nxt = StateU(
        x_new,
        _relax(rho, u.y, y_t),
        None,
        _shadow(rho_y, u.y_bar, y_test, y_t),
    )
    return nxt, x_new, y_test, (x_t, y_t)


# ---------------------------------------------------------------------------
# stochastic steppers
# ---------------------------------------------------------------------------


def srpdr_step(u: StateU, y_test_prev: BlockVector, prob: SaddleProblem,
               cfg: SolverConfig, pre: Preconditioner, k: int,
               rng: Optional[np.random.Generator], unit: Optional[Sequence[int]] = None):
    """Relaxed stochastic step: full x-update, one sampled dual unit.

    ``unit`` forces the updated dual blocks (used by the conditional-descent
    enumeration); otherwise one unit is sampled from cfg.sampling.  The
    returned y_test merges the refreshed blocks into the carried ones.
    Returns (next state, x_test, y_test, unit).
    """
    sigma, tau = cfg.sigma, cfg.tau
    K = prob.K
    sched = cfg.relaxation
    rho, rho_x, rho_y = sched.rho(k), sched.rho_x(k), sched.rho_y(k)

    b = u.x_bar - sigma * K.adjoint(u.y_bar)
    x_t = pre.step(u.x, b)
    x_test = prob.resolvent_F(combine(2.0, x_t, -1.0, u.x_bar), sigma)

    if unit is None:
        unit = cfg.sampling.units[sample_index(cfg.sampling, rng)]
    y_new = u.y.copy()
    y_bar_new = u.y_bar.copy()
    y_test = y_test_prev.copy()
    for i in unit:
        ybar_i = u.y_bar.flat_block(i)
        y_ti = ybar_i + tau * K.apply_row(i, x_t)
        y_test_i = prob.resolvent_G_block(i, 2.0 * y_ti - ybar_i, tau)
        if rho == 1.0:
            y_new.flat_block(i)[:] = y_ti
        else:
            y_new.flat_block(i)[:] = (1.0 - rho) * u.y.flat_block(i) + rho * y_ti
        if rho_y == 1.0:
            y_bar_new.flat_block(i)[:] = ybar_i + (y_test_i - y_ti)
        else:
            y_bar_new.flat_block(i)[:] = ybar_i + rho_y * (y_test_i - y_ti)
        y_test.flat_block(i)[:] = y_test_i

    nxt = StateU(
        _relax(rho, u.x, x_t),
        y_new,
        _shadow(rho_x, u.x_bar, x_test, x_t),
        y_bar_new,
    )
    return nxt, x_test, y_test, tuple(unit)


def srpdrq_step(u: StateU, y_test_prev: BlockVector, prob: SaddleProblem,
                cfg: SolverConfig, pre: Preconditioner, k: int,
                rng: Optional[np.random.Generator], unit: Optional[Sequence[int]] = None):
    """Stochastic quadratic-objective step; see :func:`srpdr_step`."""
    sigma, tau = cfg.sigma, cfg.tau
    K = prob.K
    sched = cfg.relaxation
    rho, rho_y = sched.rho(k), sched.rho_y(k)

    b = sigma * prob.f - sigma * K.adjoint(u.y_bar)
    x_t = pre.step(u.x, b)

    if unit is None:
        unit = cfg.sampling.units[sample_index(cfg.sampling, rng)]
    y_new = u.y.copy()
    y_bar_new = u.y_bar.copy()
    y_test = y_test_prev.copy()
    for i in unit:
        ybar_i = u.y_bar.flat_block(i)
        y_ti = ybar_i + tau * K.apply_row(i, x_t)
        y_test_i = prob.resolvent_G_block(i, 2.0 * y_ti - ybar_i, tau)
        if rho == 1.0:
            y_new.flat_block(i)[:] = y_ti
        else:
            y_new.flat_block(i)[:] = (1.0 - rho) * u.y.flat_block(i) + rho * y_ti
        if rho_y == 1.0:
            y_bar_new.flat_block(i)[:] = ybar_i + (y_test_i - y_ti)
        else:
            y_bar_new.flat_block(i)[:] = ybar_i + rho_y * (y_test_i - y_ti)
        y_test.flat_block(i)[:] = y_test_i

    x_new = _relax(rho, u.x, x_t)
    nxt = StateU(x_new, y_new, None, y_bar_new)
    return nxt, x_new, y_test, tuple(unit)


# ---------------------------------------------------------------------------
# primal-dual hybrid gradient baseline (dual-extrapolated form)
# ---------------------------------------------------------------------------


@dataclass
class PdhgState:
    x: BlockVector
    y: BlockVector
    z: BlockVector      # K* y, maintained incrementally
    z_bar: BlockVector  # extrapolated K* y

    def copy(self) -> "PdhgState":
        return PdhgState(self.x.copy(), self.y.copy(), self.z.copy(),
                         self.z_bar.copy())


def pdhg_init(prob: SaddleProblem, x0: BlockVector, y0: BlockVector) -> PdhgState:
    z = prob.K.adjoint(y0)
    return PdhgState(x0.copy(), y0.copy(), z, z.copy())


def _pdhg_update(st: PdhgState, prob: SaddleProblem, cfg: SolverConfig,
                 units, pinv: float):
    sigma, tau = cfg.sigma, cfg.tau
    K = prob.K
    x_new = prob.resolvent_F(st.x - tau * st.z_bar, tau)
    y_new = st.y.copy()
    dz = BlockVector.zeros(prob.primal_layout)
    for i in units:
        t_i = st.y.flat_block(i) + sigma * K.apply_row(i, x_new)
        y_i = prob.resolvent_G_block(i, t_i, sigma)
        dz.data += K.adjoint_row(i, y_i - st.y.flat_block(i)).data
        y_new.flat_block(i)[:] = y_i
    z_new = st.z + dz
    z_bar = z_new + pinv * dz
    return PdhgState(x_new, y_new, z_new, z_bar)


def pdhg_step(st: PdhgState, prob: SaddleProblem, cfg: SolverConfig) -> PdhgState:
    """Deterministic baseline: prox on x against the extrapolated dual
    transfer, then prox on every dual block (extrapolation parameter 1)."""
    return _pdhg_update(st, prob, cfg, range(prob.n_dual), 1.0)


def spdhg_step(st: PdhgState, prob: SaddleProblem, cfg: SolverConfig,
               rng: Optional[np.random.Generator],
               unit: Optional[Sequence[int]] = None) -> Tuple[PdhgState, Tuple[int, ...]]:
    """Stochastic baseline: one sampled dual unit, 1/p-corrected extrapolation."""
    if unit is None:
        j = sample_index(cfg.sampling, rng)
        unit = cfg.sampling.units[j]
        pinv = 1.0 / cfg.sampling.probs[j]
    else:
        probs = dict(zip(cfg.sampling.units, cfg.sampling.probs))
        pinv = 1.0 / probs[tuple(unit)]
    return _pdhg_update(st, prob, cfg, unit, pinv), tuple(unit)


# ---------------------------------------------------------------------------
# diagnostics: residuals and descent inequalities
# ---------------------------------------------------------------------------


def step_residual(prob: SaddleProblem, cfg: SolverConfig, pre: Preconditioner,
                  u: StateU, y_test: Optional[BlockVector] = None) -> float:
    """Root-mean-square displacement of one unrelaxed deterministic step."""
    quadratic = ALGORITHMS[cfg.algorithm].quadratic
    if quadratic:
        nxt, _, _ = pdrq_step(u, prob, cfg, pre)
    else:
        nxt, _, _ = pdr_step(u, prob, cfg, pre)
    total = 0.0
    dim = 0
    for a, b in zip(u.sections(), nxt.sections()):
        d = a.data - b.data
        total += float(d @ d)
        dim += d.size
    return float(np.sqrt(total / dim))


def _bregman(prob, z, z_ref):
    from .metrics import bregman_H  # local import keeps module deps acyclic

    return bregman_H(prob, z, z_ref)


def prop23_slack(prob: SaddleProblem, cfg: SolverConfig, pre: Preconditioner,
                 u: StateU, k: int, z_ref: Tuple[BlockVector, BlockVector],
                 ref_state: StateU, base_weight: DiagonalWeight):
    """Per-step descent inequality of the relaxed solver at a reference state.

    Returns (next state, x_test, y_test, slack); the inequality holds when
    slack >= -roundoff.  ``ref_state`` must lie on the shadow manifold of the
    reference point and ``base_weight`` must be the matching solver weight.
    """
    sched = cfg.relaxation
    rho, rho_x, rho_y = sched.rho(k), sched.rho_x(k), sched.rho_y(k)
    w_rel = weight_relaxed(base_weight, rho, rho_x, rho_y)
    w_res = weight_residual(base_weight, rho, rho_x, rho_y)
    nxt, x_test, y_test, _ = rpdr_step(u, prob, cfg, pre, k)
    lhs = _bregman(prob, (x_test, y_test), z_ref)
    d_prev = state_combine(1.0, u, -1.0, ref_state)
    d_next = state_combine(1.0, nxt, -1.0, ref_state)
    d_step = state_combine(1.0, nxt, -1.0, u)
    rhs = 0.5 * (
        weighted_norm_sq(d_prev, w_rel)
        - weighted_norm_sq(d_next, w_rel)
        - weighted_norm_sq(d_step, w_res)
    )
    return nxt, x_test, y_test, rhs - lhs


def prop26_slack(prob: SaddleProblem, cfg: SolverConfig, pre: Preconditioner,
                 u: StateU, k: int, z_ref: Tuple[BlockVector, BlockVector],
                 ref_state: StateU, base_weight: DiagonalWeight):
    """Quadratic-variant analogue of :func:`prop23_slack` (transitional x)."""
    sched = cfg.relaxation
    rho, rho_y = sched.rho(k), sched.rho_y(k)
    w_rel = weight_relaxed(base_weight, rho, rho, rho_y)
    w_res = weight_residual(base_weight, rho, rho, rho_y)
    nxt, _, y_test, (x_t, _) = rpdrq_step(u, prob, cfg, pre, k)
    lhs = _bregman(prob, (x_t, y_test), z_ref)
    d_prev = state_combine(1.0, u, -1.0, ref_state)
    d_next = state_combine(1.0, nxt, -1.0, ref_state)
    d_step = state_combine(1.0, nxt, -1.0, u)
    rhs = 0.5 * (
        weighted_norm_sq(d_prev, w_rel)
        - weighted_norm_sq(d_next, w_rel)
        - weighted_norm_sq(d_step, w_res)
    )
    return nxt, x_t, y_test, rhs - lhs


def _enumerated_slack(step_fn, quadratic, prob, cfg, pre, u, y_test_prev, k,
                      z_ref, ref_state):
    """Conditional-expectation descent inequality by exhaustive enumeration."""
    sched = cfg.relaxation
    rho, rho_x, rho_y = sched.rho(k), sched.rho_x(k), sched.rho_y(k)
    probs_vec = cfg.sampling.block_probs(prob.n_dual)
    base = weight_m(prob, pre, cfg.sigma, cfg.tau, quadratic=quadratic,
                    block_probs=probs_vec)
    w_rel = weight_relaxed(base, rho, rho if quadratic else rho_x, rho_y)
    w_res = weight_residual(base, rho, rho if quadratic else rho_x, rho_y)

    # transitional pair of the one-step deterministic relaxed update
    if quadratic:
        _, _, y_test_full, (x_t, _) = rpdrq_step(u, prob, cfg, pre, k)
        lhs = _bregman(prob, (x_t, y_test_full), z_ref)
    else:
        _, x_test_full, y_test_full, _ = rpdr_step(u, prob, cfg, pre, k)
        lhs = _bregman(prob, (x_test_full, y_test_full), z_ref)

    d_prev_sq = weighted_norm_sq(state_combine(1.0, u, -1.0, ref_state), w_rel)
    e_next = 0.0
    e_step = 0.0
    for unit, p in zip(cfg.sampling.units, cfg.sampling.probs):
        nxt, _, _, _ = step_fn(u, y_test_prev, prob, cfg, pre, k, None, unit)
        e_next += p * weighted_norm_sq(state_combine(1.0, nxt, -1.0, ref_state), w_rel)
        e_step += p * weighted_norm_sq(state_combine(1.0, nxt, -1.0, u), w_res)
    rhs = 0.5 * (d_prev_sq - e_next - e_step)
    return rhs - lhs


def lemma31_slack(prob, cfg, pre, u, y_test_prev, k, z_ref, ref_state):
    """Stochastic descent inequality (full variant), enumerated over units."""
    return _enumerated_slack(srpdr_step, False, prob, cfg, pre, u,
                             y_test_prev, k, z_ref, ref_state)


def lemma51_slack(prob, cfg, pre, u, y_test_prev, k, z_ref, ref_state):
    """Stochastic descent inequality (quadratic variant), enumerated."""
    return _enumerated_slack(srpdrq_step, True, prob, cfg, pre, u,
                             y_test_prev, k, z_ref, ref_state)


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    trace: object                 # RunTrace when a recorder was given
    state: object                 # final StateU or PdhgState
    x_test: BlockVector
    y_test: BlockVector
    erg_x: BlockVector
    erg_y: BlockVector
    iterations: int
    steps_per_epoch: int


def _initial_state(prob: SaddleProblem, quadratic: bool) -> StateU:
    x0 = prob.initial_x.copy() if prob.initial_x is not None else \
        BlockVector.zeros(prob.primal_layout)
    y0 = BlockVector.zeros(prob.dual_layout)
    ybar0 = BlockVector.zeros(prob.dual_layout)
    if quadratic:
        return StateU(x0, y0, None, ybar0)
    return StateU(x0, y0, x0.copy(), ybar0)


def run(prob: SaddleProblem, cfg: SolverConfig, recorder=None,
        pre: Optional[Preconditioner] = None) -> RunResult:
    """Run the configured solver for ``cfg.epochs`` epochs.

    One epoch is one deterministic step or (number of sampling units)
    stochastic steps.  ``recorder`` is called with a snapshot dict at epoch 0,
    on the cadence grid, and at the final step.  Ergodic averages collect the
    transitional pair (iterate pair for the baselines; relaxed x for the
    quadratic family).
    """
    info = ALGORITHMS[cfg.algorithm]
    cfg = _normalized_config(prob, cfg, info)
    if pre is None and not info.baseline:
        pre = make_preconditioner(prob, cfg)
    rng = np.random.default_rng(cfg.seed) if info.stochastic else None

    spe = cfg.sampling.n_units if info.stochastic else 1
    total = int(round(cfg.epochs * spe))
    stride = max(1, int(round(cfg.cadence * spe)))

    if info.baseline:
        x0 = prob.initial_x.copy() if prob.initial_x is not None else \
            BlockVector.zeros(prob.primal_layout)
        state = pdhg_init(prob, x0, BlockVector.zeros(prob.dual_layout))
        x_test = state.x.copy()
        y_test = state.y.copy()
    else:
        state = _initial_state(prob, info.quadratic)
        x_test = state.x.copy()
        y_test = BlockVector.zeros(prob.dual_layout)

    erg_x = x_test.copy()
    erg_y = y_test.copy()
    t0 = time.perf_counter()

    def snap(k):
        return {
            "k": k,
            "epoch": k / spe,
            "state": state,
            "x_test": x_test,
            "y_test": y_test,
            "erg_x": erg_x,
            "erg_y": erg_y,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }

    if recorder is not None:
        recorder(snap(0))

    for k in range(total):
        if cfg.algorithm == "pdr":
            state, x_test, y_test = pdr_step(state, prob, cfg, pre)
        elif cfg.algorithm == "rpdr":
            state, x_test, y_test, _ = rpdr_step(state, prob, cfg, pre, k)
        elif cfg.algorithm == "pdrq":
            state, x_test, y_test = pdrq_step(state, prob, cfg, pre)
        elif cfg.algorithm == "rpdrq":
            state, x_test, y_test, _ = rpdrq_step(state, prob, cfg, pre, k)
        elif cfg.algorithm in ("spdr", "srpdr"):
            state, x_test, y_test, _ = srpdr_step(state, y_test, prob, cfg,
                                                  pre, k, rng)
        elif cfg.algorithm in ("spdrq", "srpdrq"):
            state, x_test, y_test, _ = srpdrq_step(state, y_test, prob, cfg,
                                                   pre, k, rng)
        elif cfg.algorithm == "pdhg":
            state = pdhg_step(state, prob, cfg)
            x_test, y_test = state.x, state.y
        elif cfg.algorithm == "spdhg":
            state, _ = spdhg_step(state, prob, cfg, rng)
            x_test, y_test = state.x, state.y
        m = k + 1
        erg_x = combine(1.0 - 1.0 / m, erg_x, 1.0 / m, x_test)
        erg_y = combine(1.0 - 1.0 / m, erg_y, 1.0 / m, y_test)
        if recorder is not None and ((k + 1) % stride == 0 or k + 1 == total):
            recorder(snap(k + 1))

    trace = getattr(recorder, "trace", None)
    return RunResult(trace, state, x_test, y_test, erg_x, erg_y, total, spe)


def _normalized_config(prob: SaddleProblem, cfg: SolverConfig,
                       info: AlgorithmInfo) -> SolverConfig:
    if info.quadratic and not prob.has_quadratic:
        raise ValueError(
            f"{cfg.algorithm} needs quadratic objective data on the problem")
    if info.stochastic:
        sampling = cfg.sampling or SamplingScheme.uniform(prob.n_dual)
        if not sampling.covers(prob.n_dual):
            raise ValueError("sampling units must cover all dual blocks")
        if sampling is not cfg.sampling:
            cfg = replace(cfg, sampling=sampling)
    return cfg
