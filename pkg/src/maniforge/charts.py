"""Flat charts ``v = origin + E_P x + E_Q y`` and maps expressed in them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .models import TimeMap
from .spectral import Splitting


@dataclass(frozen=True, eq=False)
class Chart:
    origin: np.ndarray
    EP: np.ndarray
    EQ: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin, dtype=float)
        EP = np.asarray(self.EP, dtype=float)
        EQ = np.asarray(self.EQ, dtype=float)
        n = origin.size
        if EP.shape[0] != n or EQ.shape[0] != n or EP.shape[1] + EQ.shape[1] != n:
            raise ValueError("chart bases must be n x m and n x (n-m)")
        basis = np.hstack([EP, EQ])
        cond = np.linalg.cond(basis)
        if not np.isfinite(cond) or cond > 1e12:
            raise ValueError(f"chart basis is singular (condition number {cond:.2e})")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "EP", EP)
        object.__setattr__(self, "EQ", EQ)
        object.__setattr__(self, "_inverse", np.linalg.inv(basis))

    @classmethod
    def index(cls, split: Splitting, origin=None) -> "Chart":
        """Coordinate chart of a diagonal splitting: P and Q are coordinate blocks."""
        eye = np.eye(split.n)
        origin = np.zeros(split.n) if origin is None else origin
        return cls(origin, eye[:, split.p_indices], eye[:, split.q_indices])

    @property
    def n(self) -> int:
        return self.origin.size

    @property
    def m(self) -> int:
        return self.EP.shape[1]

    @property
    def k(self) -> int:
        return self.EQ.shape[1]

    def lift(self, x, y) -> np.ndarray:
        return self.origin + np.asarray(x) @ self.EP.T + np.asarray(y) @ self.EQ.T

    def coordinates(self, v):
        c = (np.asarray(v, dtype=float) - self.origin) @ self._inverse.T
        return c[..., : self.m], c[..., self.m :]

    def vector_coordinates(self, w):
        """Chart components of tangent columns ``w`` (..., n, r)."""
        c = self._inverse @ w
        return c[..., : self.m, :], c[..., self.m :, :]


class ChartMap:
    """``(x, y) -> (g¹, g²)``: a time map read in chart coordinates."""

    def __init__(self, tmap: TimeMap, chart: Chart):
        if tmap.dim != chart.n:
            raise ValueError("map and chart dimensions differ")
        self.tmap = tmap
        self.chart = chart

    @property
    def m(self):
        return self.chart.m

    @property
    def k(self):
        return self.chart.k

    def fiber_norm(self, y) -> np.ndarray:
        """``|E_Q y|_γ`` for fiber coordinates ``y`` (..., k)."""
        return self.tmap.norm(np.asarray(y) @ self.chart.EQ.T)

    def __call__(self, x, y):
        return self.chart.coordinates(self.tmap(self.chart.lift(x, y)))

    def with_tangent(self, x, y, T):
        """Values and ``Dg·[I; T]`` split into base rows ``(B, m, m)`` and fiber rows ``(B, k, m)``.

        The base rows are ``d₁g¹ + d₂g¹T`` and the fiber rows ``d₁g² + d₂g²T``.
        """
        x = np.atleast_2d(x)
        y = np.atleast_2d(y)
        cols = self.chart.EP[None] + self.chart.EQ[None] @ T
        gv, gw = self.tmap.with_tangent(self.chart.lift(x, y), cols)
        g1, g2 = self.chart.coordinates(gv)
        d1, d2 = self.chart.vector_coordinates(gw)
        return g1, g2, d1, d2

    def normal_blocks(self, x, y):
        """``d₂g¹`` (B, m, k) and ``d₂g²`` (B, k, k)."""
        x = np.atleast_2d(x)
        y = np.atleast_2d(y)
        cols = np.broadcast_to(self.chart.EQ, (x.shape[0],) + self.chart.EQ.shape)
        _, gw = self.tmap.with_tangent(self.chart.lift(x, y), np.array(cols))
        return self.chart.vector_coordinates(gw)
