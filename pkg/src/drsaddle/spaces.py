"""Flat-storage block vectors, solver state tuples, and weighted semi-norms.

Vectors with heterogeneous blocks (images, vector fields, per-sample scalars)
are stored as one contiguous float64 array plus a layout describing the block
shapes.  Arithmetic runs on the flat array, so costs do not grow with the
number of blocks; per-block shaped views are exposed for operators and
resolvents.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "BlockLayout",
    "BlockVector",
    "StateU",
    "WeightTerm",
    "DiagonalWeight",
    "weighted_norm_sq",
    "weighted_inner",
    "combine",
    "state_combine",
]


class BlockLayout:
    """Shapes, sizes, and flat offsets of the blocks of a :class:`BlockVector`."""

    __slots__ = ("shapes", "sizes", "offsets", "total")

    def __init__(self, shapes: Sequence[Sequence[int]]):
        self.shapes = tuple(tuple(int(n) for n in s) for s in shapes)
        if not self.shapes:
            raise ValueError("layout needs at least one block")
        self.sizes = tuple(int(np.prod(s, dtype=np.int64)) for s in self.shapes)
        offs = [0]
        for n in self.sizes:
            offs.append(offs[-1] + n)
        self.offsets = tuple(offs[:-1])
        self.total = offs[-1]

    def __len__(self) -> int:
        return len(self.shapes)

    def __eq__(self, other) -> bool:
        return isinstance(other, BlockLayout) and self.shapes == other.shapes

    def __hash__(self) -> int:
        return hash(self.shapes)

    def __repr__(self) -> str:
        return f"BlockLayout({list(self.shapes)!r})"


class BlockVector:
    """A block vector stored as one flat float64 array.

    Parameters
    ----------
    layout : BlockLayout
    data : ndarray, optional
        Flat storage of length ``layout.total``; zeros when omitted.
        The array is used as-is (no copy) when it already is a contiguous
        float64 vector of the right length.
    """

    __slots__ = ("layout", "data")

    def __init__(self, layout: BlockLayout, data: Optional[np.ndarray] = None):
        self.layout = layout
        if data is None:
            self.data = np.zeros(layout.total)
        else:
            arr = np.ascontiguousarray(data, dtype=np.float64).reshape(-1)
            if arr.shape[0] != layout.total:
                raise ValueError(
                    f"data length {arr.shape[0]} != layout total {layout.total}"
                )
            self.data = arr

    # -- construction helpers -------------------------------------------------

    @classmethod
    def zeros(cls, layout: BlockLayout) -> "BlockVector":
        return cls(layout)

    @classmethod
    def from_blocks(cls, blocks: Sequence[np.ndarray]) -> "BlockVector":
        layout = BlockLayout([np.shape(b) for b in blocks])
        data = np.concatenate([np.asarray(b, dtype=np.float64).ravel() for b in blocks])
        return cls(layout, data)

    def copy(self) -> "BlockVector":
        return BlockVector(self.layout, self.data.copy())

    # -- block access ----------------------------------------------------------

    def block(self, i: int) -> np.ndarray:
        """Shaped view of block ``i`` (writes go through to the flat storage)."""
        o, n = self.layout.offsets[i], self.layout.sizes[i]
        return self.data[o : o + n].reshape(self.layout.shapes[i])

    def flat_block(self, i: int) -> np.ndarray:
        o, n = self.layout.offsets[i], self.layout.sizes[i]
        return self.data[o : o + n]

    def set_block(self, i: int, value: np.ndarray) -> None:
        o, n = self.layout.offsets[i], self.layout.sizes[i]
        self.data[o : o + n] = np.asarray(value, dtype=np.float64).ravel()

    def blocks(self):
        return [self.block(i) for i in range(len(self.layout))]

    # -- arithmetic ------------------------------------------------------------

    def _check(self, other: "BlockVector") -> None:
        if self.layout != other.layout:
            raise ValueError("layout mismatch")

    def __add__(self, other: "BlockVector") -> "BlockVector":
        self._check(other)
        return BlockVector(self.layout, self.data + other.data)

    def __sub__(self, other: "BlockVector") -> "BlockVector":
        self._check(other)
        return BlockVector(self.layout, self.data - other.data)

    def __mul__(self, a: float) -> "BlockVector":
        return BlockVector(self.layout, self.data * float(a))

    __rmul__ = __mul__

    def __neg__(self) -> "BlockVector":
        return BlockVector(self.layout, -self.data)

    def dot(self, other: "BlockVector") -> float:
        self._check(other)
        return float(self.data @ other.data)

    def norm_sq(self) -> float:
        return float(self.data @ self.data)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    def __repr__(self) -> str:
        return f"BlockVector(n_blocks={len(self.layout)}, total={self.layout.total})"


def combine(a: float, u: BlockVector, b: float, v: BlockVector) -> BlockVector:
    """a*u + b*v on matching layouts."""
    u._check(v)
    return BlockVector(u.layout, float(a) * u.data + float(b) * v.data)


@dataclass
class StateU:
    """Solver state: primal/dual iterates plus their shadow (bar) partners.

    The quadratic-objective variant carries no ``x_bar``; it is ``None`` there.
    """

    x: BlockVector
    y: BlockVector
    x_bar: Optional[BlockVector]
    y_bar: BlockVector

    @property
    def has_x_bar(self) -> bool:
        return self.x_bar is not None

    def copy(self) -> "StateU":
        return StateU(
            self.x.copy(),
            self.y.copy(),
            self.x_bar.copy() if self.x_bar is not None else None,
            self.y_bar.copy(),
        )

    def sections(self):
        """The non-None sections in canonical order (x, y[, x_bar], y_bar)."""
        out = [self.x, self.y]
        if self.x_bar is not None:
            out.append(self.x_bar)
        out.append(self.y_bar)
        return out


def state_combine(a: float, u: StateU, b: float, v: StateU) -> StateU:
    """a*u + b*v section by section."""
    if u.has_x_bar != v.has_x_bar:
        raise ValueError("state variant mismatch")
    return StateU(
        combine(a, u.x, b, v.x),
        combine(a, u.y, b, v.y),
        combine(a, u.x_bar, b, v.x_bar) if u.x_bar is not None else None,
        combine(a, u.y_bar, b, v.y_bar),
    )


@dataclass(frozen=True)
class WeightTerm:
    """One diagonal-weight entry: ``scale * <op(v), v>`` (op = identity if None).

    ``op`` receives and returns the flat section vector and must be symmetric
    positive semidefinite for the induced quadratic form to be a semi-norm.
    """

    scale: float = 1.0
    op: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def quad(self, v: np.ndarray) -> float:
        if self.scale == 0.0:
            return 0.0
        w = self.op(v) if self.op is not None else v
        return self.scale * float(v @ w)

    def bilinear(self, v: np.ndarray, z: np.ndarray) -> float:
        if self.scale == 0.0:
            return 0.0
        w = self.op(v) if self.op is not None else v
        return self.scale * float(w @ z)


@dataclass(frozen=True)
class DiagonalWeight:
    """Block-diagonal weight on solver states.

    Sections: one term for the whole primal block vector (it may hide a
    non-diagonal PSD map such as a preconditioner gap), one scalar-or-map term
    per dual block, an optional term for the primal shadow section, and one
    term per dual shadow block.  Per-block probability corrections (1/p_i)
    are folded into the dual scales by the factories that build weights.
    """

    x: WeightTerm
    y: tuple
    x_bar: Optional[WeightTerm]
    y_bar: tuple

    def matches(self, u: StateU) -> bool:
        return (self.x_bar is not None) == u.has_x_bar

    def _terms_and_blocks(self, u: StateU):
        yield self.x, u.x.data
        for i, t in enumerate(self.y):
            yield t, u.y.flat_block(i)
        if self.x_bar is not None:
            yield self.x_bar, u.x_bar.data
        for i, t in enumerate(self.y_bar):
            yield t, u.y_bar.flat_block(i)

    def scaled(self, x_f: float, y_f: float, xbar_f: float, ybar_f: float) -> "DiagonalWeight":
        """New weight with per-section multiplicative factors."""
        return DiagonalWeight(
            WeightTerm(self.x.scale * x_f, self.x.op),
            tuple(WeightTerm(t.scale * y_f, t.op) for t in self.y),
            WeightTerm(self.x_bar.scale * xbar_f, self.x_bar.op)
            if self.x_bar is not None
            else None,
            tuple(WeightTerm(t.scale * ybar_f, t.op) for t in self.y_bar),
        )


def weighted_norm_sq(u: StateU, weight: DiagonalWeight) -> float:
    """Quadratic form ``<W u, u>`` of the block-diagonal weight."""
    if not weight.matches(u):
        raise ValueError("weight/state variant mismatch")
    return sum(t.quad(v) for t, v in weight._terms_and_blocks(u))


def weighted_inner(u: StateU, v: StateU, weight: DiagonalWeight) -> float:
    """Bilinear form ``<W u, v>`` (W symmetric per block)."""
    if not (weight.matches(u) and weight.matches(v)):
        raise ValueError("weight/state variant mismatch")
    total = 0.0
    pairs = zip(weight._terms_and_blocks(u), weight._terms_and_blocks(v))
    for (t, a), (_, b) in pairs:
        total += t.bilinear(a, b)
    return total
