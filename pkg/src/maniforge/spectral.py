"""Diagonal sectorial operators, fractional powers, graph norms and projectors.

Everything lives in the eigenbasis of the linear part, so ``A`` is a vector of
eigenvalues and ``Ã^α`` is a componentwise power.  States are plain numpy
arrays inside the library; :class:`StateVector` is the tagged value type used
at API boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np


class DimensionError(ValueError):
    """A state and the operator/splitting it is used with disagree in size."""


@dataclass(frozen=True, eq=False)
class SpectralOperator:
    """Diagonal operator ``A`` with shift ``zeta`` so that ``A + zeta`` is >= 1."""

    eigenvalues: np.ndarray
    zeta: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float).copy()
        if lam.ndim != 1 or lam.size == 0:
            raise DimensionError("eigenvalues must be a nonempty 1-d array")
        if not np.all(np.isfinite(lam)):
            raise ValueError("eigenvalues must be finite")
        if np.any(np.diff(lam) < 0):
            raise ValueError("eigenvalues must be nondecreasing")
        zeta = self.zeta
        if zeta is None:
            zeta = max(0.0, 1.0 - float(lam.min()))
        zeta = float(zeta)
        if zeta < 0 or np.any(lam + zeta <= 0):
            raise ValueError("A + zeta must have strictly positive spectrum")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)
        object.__setattr__(self, "zeta", zeta)

    @property
    def n(self) -> int:
        return self.eigenvalues.size

    @property
    def shifted(self) -> np.ndarray:
        """Eigenvalues of ``Ã = A + zeta``."""
        return self.eigenvalues + self.zeta

    def power_weights(self, alpha: float) -> np.ndarray:
        if alpha < 0:
            raise ValueError("alpha must be >= 0")
        if alpha == 0:
            return np.ones(self.n)
        return self.shifted**alpha

    def __eq__(self, other):
        if not isinstance(other, SpectralOperator):
            return NotImplemented
        return self.zeta == other.zeta and np.array_equal(self.eigenvalues, other.eigenvalues)

    def __hash__(self):
        return hash((self.zeta, self.eigenvalues.tobytes()))


@dataclass(frozen=True, eq=False)
class StateVector:
    coefficients: np.ndarray
    space: SpectralOperator

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=float).copy()
        if c.ndim != 1:
            raise DimensionError("state coefficients must be 1-d")
        if c.size != self.space.n:
            raise DimensionError(f"state has {c.size} coefficients, operator has dimension {self.space.n}")
        if not np.all(np.isfinite(c)):
            raise ValueError("state contains non-finite entries")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)

    def __eq__(self, other):
        if not isinstance(other, StateVector):
            return NotImplemented
        return self.space == other.space and np.array_equal(self.coefficients, other.coefficients)

    def __len__(self):
        return self.coefficients.size


def _coeffs(op: SpectralOperator, v) -> np.ndarray:
    if isinstance(v, StateVector):
        if v.space != op:
            raise DimensionError("state belongs to a different operator")
        return v.coefficients
    arr = np.asarray(v, dtype=float)
    if arr.shape[-1] != op.n:
        raise DimensionError(f"expected trailing dimension {op.n}, got {arr.shape[-1]}")
    return arr


def fractional_power_apply(op: SpectralOperator, alpha: float, v):
    """Apply ``Ã^alpha`` componentwise; ``alpha = 0`` is the identity.

    Accepts a :class:`StateVector` (returns one) or an array whose last axis is
    the coefficient axis (returns an array).
    """
    c = _coeffs(op, v)
    out = c if alpha == 0 else c * op.power_weights(alpha)
    if isinstance(v, StateVector):
        return StateVector(out, op)
    return np.array(out, dtype=float, copy=True)


def graph_norm(op: SpectralOperator, gamma: float, v):
    """``|v|_gamma = |Ã^gamma v|``; vectorized over leading axes for arrays."""
    w = fractional_power_apply(op, gamma, v)
    if isinstance(w, StateVector):
        return float(np.linalg.norm(w.coefficients))
    return np.linalg.norm(w, axis=-1)


@dataclass(frozen=True, eq=False)
class Splitting:
    """Index-set realization of complementary spectral projectors ``P`` and ``Q``."""

    p_indices: np.ndarray
    q_indices: np.ndarray
    gap_width: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.p_indices, dtype=int)
        q = np.asarray(self.q_indices, dtype=int)
        if np.intersect1d(p, q).size:
            raise ValueError("P and Q index sets overlap")
        n = p.size + q.size
        if n and not np.array_equal(np.sort(np.concatenate([p, q])), np.arange(n)):
            raise ValueError("P and Q index sets must partition 0..n-1")
        if self.gap_width < 0:
            raise ValueError("gap width must be >= 0")
        object.__setattr__(self, "p_indices", np.sort(p))
        object.__setattr__(self, "q_indices", np.sort(q))

    @classmethod
    def leading(cls, n: int, m: int, eigenvalues: Sequence[float] | None = None) -> "Splitting":
        """``P`` = first ``m`` modes (the low end of the spectrum)."""
        if not 0 <= m <= n:
            raise ValueError("need 0 <= m <= n")
        gap = 0.0
        if eigenvalues is not None and 0 < m < n:
            gap = float(eigenvalues[m] - eigenvalues[m - 1])
        return cls(np.arange(m), np.arange(m, n), max(gap, 0.0))

    @property
    def n(self) -> int:
        return self.p_indices.size + self.q_indices.size

    @property
    def m(self) -> int:
        return self.p_indices.size

    def mask(self, which: Literal["P", "Q"]) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        mask[self.p_indices if which == "P" else self.q_indices] = True
        return mask

    def matrix(self, which: Literal["P", "Q"]) -> np.ndarray:
        return np.diag(self.mask(which).astype(float))


def project(split: Splitting, which: Literal["P", "Q"], v):
    """Zero the complementary components; ``project(P, v) + project(Q, v) == v``."""
    if which not in ("P", "Q"):
        raise ValueError("which must be 'P' or 'Q'")
    if isinstance(v, StateVector):
        if v.space.n != split.n:
            raise DimensionError("splitting and state dimensions differ")
        return StateVector(np.where(split.mask(which), v.coefficients, 0.0), v.space)
    arr = np.asarray(v, dtype=float)
    if arr.shape[-1] != split.n:
        raise DimensionError("splitting and state dimensions differ")
    return np.where(split.mask(which), arr, 0.0)
