"""Sections over a P-ball, the graph transform and its derivative transform.

A section stores fiber values ``Φ(x)`` (and optionally a derivative field
``T(x) ≈ DΦ(x)``) on a tensor grid over ``[-ρ, ρ]^m``.  One transform step
solves ``g¹(x, Φ(x)) = ξ`` for every node ``ξ`` and sets
``Φ'(ξ) = g²(x, Φ(x))`` and ``T'(ξ) = [d₁g² + d₂g²T][d₁g¹ + d₂g¹T]⁻¹``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.interpolate import NdBSpline, make_interp_spline

from .charts import ChartMap
from .models import TimeMap, _ComposedMap

RING = 1.25  # preimages may land in the ring rho < |x|_inf <= RING * rho


class OverflowViolation(RuntimeError):
    """A preimage left the extension ring: the map does not overflow the ball."""


class PreimageError(RuntimeError):
    pass


class SmoothingConditionError(RuntimeError):
    """``d₁g¹ + d₂g¹T`` is singular at some node."""


# ---------------------------------------------------------------------------
# interpolation


class GridInterpolant:
    """Tensor B-spline through values on a uniform grid (degree 1 or 3)."""

    def __init__(self, axis: np.ndarray, values: np.ndarray, kind: str):
        m = values.ndim - 1
        if kind == "multilinear":
            t = np.concatenate([[axis[0]], axis, [axis[-1]]])
            coeffs, degree = values, 1
        elif kind == "cubic":
            if axis.size < 4:
                raise ValueError("cubic interpolation needs at least 4 nodes per axis")
            coeffs = values
            t = None
            for i in range(m):
                moved = np.moveaxis(coeffs, i, 0)
                spl = make_interp_spline(axis, moved, k=3)
                coeffs = np.moveaxis(spl.c, 0, i)
                t = spl.t
            degree = 3
        else:
            raise ValueError(f"unknown interpolation {kind!r}")
        self.m = m
        self.spline = NdBSpline((t,) * m, coeffs, degree)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.spline(x)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        """``(B, k, m)``: partial derivatives along each base axis."""
        parts = []
        for j in range(self.m):
            nu = [0] * self.m
            nu[j] = 1
            parts.append(self.spline(x, nu=nu))
        return np.stack(parts, axis=-1)


# ---------------------------------------------------------------------------
# sections


@dataclass(frozen=True, eq=False)
class Section:
    """Fiber values ``(g,)*m + (k,)`` on the grid, optional derivative ``(..., k, m)``.

    ``eps`` is the tube radius and ``delta`` the Lipschitz bound used for the
    admissibility flags; ``eps`` defaults to ``2 ρ δ``.
    """

    rho: float
    values: np.ndarray
    derivative: np.ndarray | None = None
    interpolation: Literal["multilinear", "cubic"] = "multilinear"
    eps: float | None = None
    delta: float = 0.5
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim < 2 or not 1 <= vals.ndim - 1 <= 3:
            raise ValueError("values must have shape (g,)*m + (k,) with 1 <= m <= 3")
        g = vals.shape[0]
        if any(s != g for s in vals.shape[:-1]) or g < 2:
            raise ValueError("grid must have the same node count (>= 2) on every axis")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if not np.all(np.isfinite(vals)):
            raise ValueError("section values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if self.derivative is not None:
            der = np.array(self.derivative, dtype=float)
            if der.shape != vals.shape + (vals.ndim - 1,):
                raise ValueError(f"derivative must have shape {vals.shape + (vals.ndim - 1,)}")
            der.setflags(write=False)
            object.__setattr__(self, "derivative", der)
        if self.eps is None:
            object.__setattr__(self, "eps", 2.0 * self.rho * self.delta)
        if self.interpolation not in ("multilinear", "cubic"):
            raise ValueError(f"unknown interpolation {self.interpolation!r}")

    # -- construction -----------------------------------------------------
    @classmethod
    def zeros(cls, m: int, k: int, rho: float, g: int = 33, interpolation="multilinear",
              with_derivative: bool = True, eps=None, delta=0.5) -> "Section":
        shape = (g,) * m + (k,)
        der = np.zeros(shape + (m,)) if with_derivative else None
        return cls(rho, np.zeros(shape), der, interpolation, eps, delta)

    @classmethod
    def from_function(cls, f, rho, m, g=33, df=None, interpolation="multilinear", eps=None, delta=0.5):
        """Sample ``f`` (and ``df``) at the nodes; both take ``(B, m)`` arrays."""
        axis = np.linspace(-rho, rho, g)
        nodes = _grid_nodes(axis, m)
        vals = np.asarray(f(nodes), dtype=float)
        k = vals.shape[-1]
        der = None
        if df is not None:
            der = np.asarray(df(nodes), dtype=float).reshape((g,) * m + (k, m))
        return cls(rho, vals.reshape((g,) * m + (k,)), der, interpolation, eps, delta)

    def replace(self, values=None, derivative=None, keep_derivative=True) -> "Section":
        vals = self.values if values is None else values
        der = derivative if derivative is not None else (self.derivative if keep_derivative else None)
        return Section(self.rho, vals, der, self.interpolation, self.eps, self.delta)

    # -- geometry ---------------------------------------------------------
    @property
    def m(self) -> int:
        return self.values.ndim - 1

    @property
    def k(self) -> int:
        return self.values.shape[-1]

    @property
    def g(self) -> int:
        return self.values.shape[0]

    @property
    def axis(self) -> np.ndarray:
        return np.linspace(-self.rho, self.rho, self.g)

    @property
    def spacing(self) -> float:
        return 2.0 * self.rho / (self.g - 1)

    @property
    def nodes(self) -> np.ndarray:
        return _grid_nodes(self.axis, self.m)

    @property
    def flat_values(self) -> np.ndarray:
        return self.values.reshape(-1, self.k)

    @property
    def flat_derivative(self) -> np.ndarray | None:
        if self.derivative is None:
            return None
        return self.derivative.reshape(-1, self.k, self.m)

    # -- evaluation -------------------------------------------------------
    def _interp(self, which: str) -> GridInterpolant:
        if which not in self._cache:
            data = self.values if which == "values" else self.derivative.reshape(self.values.shape[:-1] + (-1,))
            self._cache[which] = GridInterpolant(self.axis, data, self.interpolation)
        return self._cache[which]

    def _slope_inside(self, x):
        if self.derivative is not None:
            return self._interp("derivative")(x).reshape(x.shape[0], self.k, self.m)
        return self._interp("values").gradient(x)

    def _radial(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        size = np.max(np.abs(x), axis=1)
        limit = RING * self.rho * (1 + 1e-12)
        if np.any(size > limit):
            bad = int(np.argmax(size))
            raise OverflowViolation(
                f"point {x[bad].tolist()} lies outside the extension ring |x| <= {RING}*rho = {RING * self.rho:g}"
            )
        outside = size > self.rho
        r = x.copy()
        r[outside] *= (self.rho / size[outside])[:, None]
        return x, r, outside

    def evaluate(self, x) -> np.ndarray:
        """``Φ(x)`` for ``x`` (B, m); first-order extension along rays in the ring."""
        x, r, outside = self._radial(x)
        out = self._interp("values")(r)
        if np.any(outside):
            slope = self._slope_inside(r[outside])
            out[outside] += np.einsum("bkm,bm->bk", slope, x[outside] - r[outside])
        return out

    def slope(self, x) -> np.ndarray:
        """``T(x)`` (B, k, m): interpolated derivative field (or interpolant gradient)."""
        _, r, _ = self._radial(x)
        return self._slope_inside(r)

    # -- diagnostics ------------------------------------------------------
    def lipschitz_estimate(self, weights: np.ndarray | None = None, EQ: np.ndarray | None = None) -> float:
        """Largest neighbour secant slope; refined upward by ``sup |T|`` when a derivative is stored."""
        vals = self.values if EQ is None else (self.values @ EQ.T) * (1.0 if weights is None else weights)
        best = 0.0
        h = self.spacing
        for ax in range(self.m):
            diff = np.diff(vals, axis=ax)
            if diff.size:
                best = max(best, float(np.max(np.linalg.norm(diff, axis=-1))) / h)
        if self.derivative is not None:
            best = max(best, float(np.max(_fiber_op_norm(self.flat_derivative, EQ, weights))))
        return best

    def max_fiber(self, weights=None, EQ=None) -> float:
        v = self.flat_values if EQ is None else self.flat_values @ EQ.T
        if weights is not None:
            v = v * weights
        return float(np.max(np.linalg.norm(v, axis=-1)))


def _grid_nodes(axis: np.ndarray, m: int) -> np.ndarray:
    mesh = np.meshgrid(*([axis] * m), indexing="ij")
    return np.stack([c.ravel() for c in mesh], axis=1)


def _fiber_op_norm(T: np.ndarray, EQ=None, weights=None) -> np.ndarray:
    """Per-node operator norm of fiber-valued linear maps ``T`` (B, k, m)."""
    M = T if EQ is None else EQ[None] @ T
    if weights is not None:
        M = M * weights[None, :, None]
    if M.shape[-1] == 1:
        return np.linalg.norm(M[..., 0], axis=-1)
    return np.linalg.norm(M, ord=2, axis=(1, 2))


def lipschitz_estimate(section: Section, chart_map: ChartMap | None = None) -> float:
    if chart_map is None:
        return section.lipschitz_estimate()
    return section.lipschitz_estimate(_weights(chart_map), chart_map.chart.EQ)


def _weights(chart_map: ChartMap) -> np.ndarray:
    model = chart_map.tmap.model
    return model.operator.power_weights(model.gamma)


# ---------------------------------------------------------------------------
# preimages and one transform step


@dataclass
class StepData:
    preimages: np.ndarray  # (B, m)
    g2: np.ndarray  # (B, k) = new values
    base_block: np.ndarray  # d₁g¹ + d₂g¹T   (B, m, m)
    fiber_block: np.ndarray  # d₁g² + d₂g²T  (B, k, m)
    newton_iterations: int


def linearized_preimages(chart_map: ChartMap, section: Section, targets: np.ndarray) -> np.ndarray:
    """Preimages under the base map linearized at the chart origin."""
    zero = np.zeros((1, chart_map.m))
    g1, _, d1, _ = chart_map.with_tangent(zero, section.evaluate(zero), section.slope(zero))
    return np.linalg.solve(d1[0], (targets - g1[0]).T).T


def solve_preimages(chart_map: ChartMap, section: Section, targets: np.ndarray, guess: np.ndarray,
                    tol: float = 1e-10, max_iter: int = 50) -> StepData:
    """Newton for ``g¹(x, Φ(x)) = ξ`` at every target, vectorized over nodes."""
    targets = np.atleast_2d(targets)
    x = np.array(guess, dtype=float)
    B = x.shape[0]
    limit = RING * section.rho
    g1 = np.empty_like(x)
    g2 = np.empty((B, chart_map.k))
    d1 = np.empty((B, chart_map.m, chart_map.m))
    d2 = np.empty((B, chart_map.k, chart_map.m))
    active = np.arange(B)
    res = np.full(B, np.inf)
    for it in range(max_iter + 1):
        xa = x[active]
        a1, a2, b1, b2 = chart_map.with_tangent(xa, section.evaluate(xa), section.slope(xa))
        g1[active], g2[active], d1[active], d2[active] = a1, a2, b1, b2
        r = a1 - targets[active]
        res[active] = np.max(np.abs(r), axis=1)
        done = res[active] <= tol * np.maximum(1.0, np.max(np.abs(targets[active]), axis=1))
        active = active[~done]
        if active.size == 0:
            return StepData(x, g2, d1, d2, it)
        if it == max_iter:
            break
        ra = r[~done]
        try:
            step = np.linalg.solve(d1[active], -ra[..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise SmoothingConditionError("base block d1g1 + d2g1 T is singular during the preimage solve") from None
        # keep iterates inside the ring; shrink the step where it would leave
        t = np.ones(active.size)
        for _ in range(40):
            trial = x[active] + t[:, None] * step
            over = np.max(np.abs(trial), axis=1) > limit
            if not np.any(over):
                break
            t[over] *= 0.5
        x[active] = x[active] + t[:, None] * step
    worst = active[int(np.argmax(res[active]))]
    raise PreimageError(
        f"preimage Newton failed at node {int(worst)} (target {targets[worst].tolist()}), "
        f"residual {res[worst]:.3e} after {max_iter} iterations"
    )


def _preimages(chart_map, section, targets, warm=None, tol=1e-10, max_iter=50) -> StepData:
    first = warm if warm is not None else linearized_preimages(chart_map, section, targets)
    try:
        return solve_preimages(chart_map, section, targets, first, tol, max_iter)
    except (PreimageError, OverflowViolation):
        if warm is None:
            raise
        return solve_preimages(chart_map, section, targets,
                               linearized_preimages(chart_map, section, targets), tol, max_iter)


def _derivative_from(data: StepData) -> np.ndarray:
    try:
        return np.linalg.solve(np.swapaxes(data.base_block, 1, 2), np.swapaxes(data.fiber_block, 1, 2)).swapaxes(1, 2)
    except np.linalg.LinAlgError:
        raise SmoothingConditionError("d1g1 + d2g1 T is singular at some node") from None


def graph_transform_step(section: Section, chart_map: ChartMap, warm=None, tol=1e-10, max_iter=50):
    """One step of the graph transform; returns ``(new_section, StepData)``.

    If ``section`` carries a derivative field, the derivative transform is
    applied in the same pass (coupled iteration).
    """
    data = _preimages(chart_map, section, section.nodes, warm, tol, max_iter)
    shape = section.values.shape
    der = None
    if section.derivative is not None:
        der = _derivative_from(data).reshape(shape + (section.m,))
    return section.replace(values=data.g2.reshape(shape), derivative=der, keep_derivative=False), data


def derivative_transform_step(section: Section, chart_map: ChartMap, tol=1e-10) -> np.ndarray:
    """``T'`` at the nodes, shape ``(g,)*m + (k, m)``."""
    data = _preimages(chart_map, section, section.nodes, None, tol)
    return _derivative_from(data).reshape(section.values.shape + (section.m,))


# ---------------------------------------------------------------------------
# iteration


@dataclass
class TransformReport:
    iterations: int
    c0_history: list
    c1_history: list | None
    contraction_ratio: float
    converged: bool
    admissibility_violations: list = field(default_factory=list)
    ratio_bound: float | None = None
    ratio_within_bound: bool | None = None
    newton_iterations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "c0_history": [float(c) for c in self.c0_history],
            "c1_history": None if self.c1_history is None else [float(c) for c in self.c1_history],
            "contraction_ratio": float(self.contraction_ratio),
            "converged": bool(self.converged),
            "admissibility_violations": self.admissibility_violations,
            "ratio_bound": self.ratio_bound,
            "ratio_within_bound": self.ratio_within_bound,
        }


def geometric_ratio(history, floor: float = 1e-13, tail: int = 8) -> float:
    """Least-squares ratio of the last ``tail`` history entries above ``floor``."""
    h = np.asarray(history, dtype=float)
    h = h[h > floor]
    if h.size < 2:
        return 0.0
    h = h[-tail:]
    slope = np.polyfit(np.arange(h.size), np.log(h), 1)[0]
    return float(math.exp(slope))


def iterate_to_fixed_point(section: Section, chart_map: ChartMap, tol_c0: float = 1e-10, tol_c1: float = 1e-8,
                           max_iter: int = 50, ratio_bound: float | None = None, newton_tol: float = 1e-10):
    """Alternate value and derivative steps until both sup-changes fall below tolerance.

    Non-convergence is reported (``converged=False``), not raised.
    """
    weights = _weights(chart_map)
    EQ = chart_map.chart.EQ
    c0, c1, violations, newton = [], ([] if section.derivative is not None else None), [], []
    current, warm = section, None
    converged = False
    for it in range(1, max_iter + 1):
        new, data = graph_transform_step(current, chart_map, warm, newton_tol)
        warm = data.preimages
        newton.append(data.newton_iterations)
        dv = (new.flat_values - current.flat_values) @ EQ.T * weights
        c0.append(float(np.max(np.linalg.norm(dv, axis=1))))
        if c1 is not None:
            c1.append(float(np.max(_fiber_op_norm(new.flat_derivative - current.flat_derivative, EQ, weights))))
        sup = new.max_fiber(weights, EQ)
        lip = new.lipschitz_estimate(weights, EQ)
        if sup > new.eps or lip > new.delta:
            violations.append({"iteration": it, "sup": sup, "lipschitz": lip, "eps": new.eps, "delta": new.delta})
        current = new
        if c0[-1] <= tol_c0 and (c1 is None or c1[-1] <= tol_c1):
            converged = True
            break
    ratio = geometric_ratio(c0)
    report = TransformReport(it, c0, c1, ratio, converged, violations, ratio_bound, None, newton)
    if ratio_bound is not None:
        report.ratio_within_bound = bool(ratio <= 1.2 * ratio_bound)
    return current, report


def invariance_residual(section: Section, chart_map: ChartMap) -> float:
    """``max |g²(x,Φ(x)) - Φ(g¹(x,Φ(x)))|_γ`` over nodes whose image stays in the ball."""
    x = section.nodes
    g1, g2 = chart_map(x, section.evaluate(x))
    inside = np.max(np.abs(g1), axis=1) <= section.rho
    if not np.any(inside):
        return 0.0
    diff = g2[inside] - section.evaluate(g1[inside])
    return float(np.max(chart_map.fiber_norm(diff)))


def finite_difference_slope(section: Section) -> np.ndarray:
    """Central differences of the nodal values (one-sided at the edges), ``(g,)*m + (k, m)``."""
    parts = [np.gradient(section.values, section.spacing, axis=ax, edge_order=2) for ax in range(section.m)]
    return np.stack(parts, axis=-1)


def c1_consistency(section: Section) -> tuple[float, float]:
    """``(max |T - FD(Φ)|, threshold)`` with threshold ``max(1e-6, 10·e_h)``.

    ``e_h = h²/3 · max|Φ'''|`` bounds the truncation error of the second-order
    differences (the one-sided edge formula has the larger constant); the
    third derivative is estimated from third differences of the nodal values.
    """
    if section.derivative is None:
        raise ValueError("section has no derivative field")
    fd = finite_difference_slope(section)
    err = float(np.max(np.abs(section.derivative - fd)))
    third = 0.0
    if section.g >= 4:
        for ax in range(section.m):
            d3 = np.diff(section.values, n=3, axis=ax) / section.spacing**3
            third = max(third, float(np.max(np.abs(d3))))
    e_h = section.spacing**2 / 3.0 * third
    return err, max(1e-6, 10.0 * e_h)


# ---------------------------------------------------------------------------
# cutoff and truncated map


@dataclass(frozen=True)
class CutoffSpec:
    """``θ_R(s) = θ(s/R²)`` with ``θ = 1`` on [0,2], cubic smoothstep on [2,4], 0 after."""

    R: float

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError("cutoff radius must be positive")

    @staticmethod
    def theta(x):
        x = np.asarray(x, dtype=float)
        s = np.clip((x - 2.0) / 2.0, 0.0, 1.0)
        return np.where(x <= 2.0, 1.0, np.where(x >= 4.0, 0.0, 1.0 - s * s * (3.0 - 2.0 * s)))

    @staticmethod
    def theta_prime(x):
        x = np.asarray(x, dtype=float)
        s = (x - 2.0) / 2.0
        inner = (x > 2.0) & (x < 4.0)
        return np.where(inner, -3.0 * s * (1.0 - s), 0.0)

    def theta_R(self, sq_norm):
        return self.theta(np.asarray(sq_norm) / self.R**2)


class TruncatedMap(_ComposedMap):
    """``G(v) - θ_R(|v|²)(G(v) - G_h(v))``; equals ``G_h`` bitwise where θ = 1 and ``G`` where θ = 0."""

    def __init__(self, base: TimeMap, perturbed: TimeMap, cutoff: CutoffSpec):
        super().__init__(base)
        if perturbed.dim != base.dim:
            raise ValueError("maps act on different spaces")
        self.perturbed = perturbed
        self.cutoff = cutoff

    def _evaluate(self, v, w):
        model = self.model
        sq = model.norm(v) ** 2
        th = self.cutoff.theta_R(sq)
        gv, gw = self.base._evaluate(v, w)
        hv, hw = self.perturbed._evaluate(v, w)
        blend = gv - th[:, None] * (gv - hv)
        out = np.where((th == 1.0)[:, None], hv, np.where((th == 0.0)[:, None], gv, blend))
        if w is None:
            return out, None
        # d/dv θ(|v|²/R²) = θ'(x) 2 Ã^{2γ} v / R²
        weights2 = model.operator.power_weights(model.gamma) ** 2
        grad = self.cutoff.theta_prime(sq / self.cutoff.R**2)[:, None] * 2.0 * weights2 * v / self.cutoff.R**2
        diff = gv - hv
        dblend = gw - th[:, None, None] * (gw - hw) - diff[:, :, None] * np.einsum("bn,bnr->br", grad, w)[:, None, :]
        dout = np.where((th == 1.0)[:, None, None], hw, np.where((th == 0.0)[:, None, None], gw, dblend))
        return out, dout


def truncate_map(base: TimeMap, perturbed: TimeMap, cutoff: CutoffSpec) -> TruncatedMap:
    return TruncatedMap(base, perturbed, cutoff)
