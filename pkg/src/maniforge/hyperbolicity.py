"""Linearization, spectral splitting, dichotomy constants, Lyapunov-type numbers, conditions.

Sign convention for generators: reports hold ``J``, the Jacobian of the vector
field ``du/dt = F(u)``.  The sectorial-operator form ``u_t + Cu = 0`` has
``C = -J``, so the unstable (P) block is where ``Re eig J > 0``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from scipy.linalg import expm, schur

from .charts import Chart, ChartMap
from .graph_transform import Section, _preimages, linearized_preimages
from .models import HyperbolicityError, TimeMap
from .spectral import SpectralOperator, Splitting

Kind = Literal["map", "generator"]


class DichotomyFailure(RuntimeWarning):
    pass


class ConditionWarning(UserWarning):
    pass


class InvertibilityError(RuntimeError):
    """The base map restricted to the section is not invertible at a sample."""


# ---------------------------------------------------------------------------
# linearization and splitting


@dataclass
class LinearizationReport:
    matrix: np.ndarray
    eigenvalues: np.ndarray
    kind: Kind
    margin: float
    hyperbolic: bool
    distance: float  # min | |μ| - 1 | (map) or min |Re λ| (generator)
    point: np.ndarray | None = None
    tau: float | None = None

    @property
    def unstable_count(self) -> int:
        return int(np.sum(_unstable(self.eigenvalues, self.kind)))


def _unstable(ev, kind):
    return np.abs(ev) > 1.0 if kind == "map" else ev.real > 0.0


def _distance(ev, kind):
    return float(np.min(np.abs(np.abs(ev) - 1.0))) if kind == "map" else float(np.min(np.abs(ev.real)))


def classify(matrix, kind: Kind = "map", margin: float = 1e-6, point=None, tau=None) -> LinearizationReport:
    matrix = np.asarray(matrix, dtype=float)
    if not np.all(np.isfinite(matrix)):
        raise np.linalg.LinAlgError("linearization contains non-finite entries")
    try:
        ev = np.linalg.eigvals(matrix)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"eigensolver failed; condition number {np.linalg.cond(matrix):.3e}") from exc
    order = np.lexsort((ev.imag, -np.abs(ev) if kind == "map" else -ev.real))
    ev = ev[order]
    dist = _distance(ev, kind)
    return LinearizationReport(matrix, ev, kind, margin, dist > margin, dist, point, tau)


def linearize_map(tmap: TimeMap, point, kind: Kind = "map", margin: float = 1e-6) -> LinearizationReport:
    """``DG(ū)`` column by column (map) or the field Jacobian ``J`` (generator)."""
    point = np.asarray(point, dtype=float)
    matrix = tmap.jacobian(point) if kind == "map" else tmap.model.jacobian(point)
    return classify(matrix, kind, margin, point, tmap.model.tau)


@dataclass
class SpectralSplit:
    """Invariant-subspace bases and the oblique spectral projectors."""

    kind: Kind
    EP: np.ndarray
    EQ: np.ndarray
    block_p: np.ndarray  # matrix restricted to span(EP) in that basis
    block_q: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    eigenvalues_p: np.ndarray
    eigenvalues_q: np.ndarray

    @property
    def m(self) -> int:
        return self.EP.shape[1]

    @property
    def splitting(self) -> Splitting:
        """Index splitting in chart coordinates (P first)."""
        n = self.EP.shape[0]
        return Splitting(np.arange(self.m), np.arange(self.m, n))

    def chart(self, origin) -> Chart:
        return Chart(origin, self.EP, self.EQ)


def _column_signs(Z: np.ndarray) -> np.ndarray:
    if Z.size == 0:
        return np.ones(Z.shape[1])
    idx = np.argmax(np.abs(Z), axis=0)
    return np.where(Z[idx, np.arange(Z.shape[1])] < 0, -1.0, 1.0)


def spectral_split(report: LinearizationReport) -> SpectralSplit:
    if not report.hyperbolic:
        raise HyperbolicityError(
            f"eigenvalue within {report.margin:g} of the dividing "
            f"{'unit circle' if report.kind == 'map' else 'imaginary axis'} (distance {report.distance:.3e})"
        )
    A = report.matrix
    n = A.shape[0]
    first, second = ("ouc", "iuc") if report.kind == "map" else ("rhp", "lhp")
    Tp, Zp, m = schur(A, output="real", sort=first)
    Tq, Zq, k = schur(A, output="real", sort=second)
    if m + k != n:
        raise HyperbolicityError("spectral subspaces do not span the space")
    # fix column signs (largest entry positive) so charts do not depend on LAPACK's choice
    dp, dq = _column_signs(Zp[:, :m]), _column_signs(Zq[:, :k])
    EP, EQ = Zp[:, :m] * dp, Zq[:, :k] * dq
    bp = Tp[:m, :m] * dp[:, None] * dp[None, :]
    bq = Tq[:k, :k] * dq[:, None] * dq[None, :]
    basis = np.hstack([EP, EQ])
    inv = np.linalg.inv(basis)
    P = EP @ inv[:m]
    Q = EQ @ inv[m:]
    evp = np.linalg.eigvals(Tp[:m, :m]) if m else np.array([])
    evq = np.linalg.eigvals(Tq[:k, :k]) if k else np.array([])
    return SpectralSplit(report.kind, EP, EQ, bp, bq, P, Q, evp, evq)


# ---------------------------------------------------------------------------
# exponential dichotomy


@dataclass
class DichotomyReport:
    a: float
    tau: float
    norm_p_expansion: float  # |e^{Cτ}|_P|  (backward flow on the unstable part)
    norm_q_contraction: float  # |e^{-Cτ}|_Q|
    success: bool
    tried: list = field(default_factory=list)
    sampled_max: float = 0.0

    def to_dict(self):
        return {"a": self.a, "tau": self.tau, "norm_p_expansion": self.norm_p_expansion,
                "norm_q_contraction": self.norm_q_contraction, "pass": self.success, "tried": self.tried}


def _restricted_norms(split: SpectralSplit, t: float, steps_per_tau: float | None):
    if split.kind == "generator":
        p = expm(-split.block_p * t) if split.m else np.zeros((0, 0))
        q = expm(split.block_q * t) if split.block_q.size else np.zeros((0, 0))
    else:
        k = int(round(t / steps_per_tau))
        p = np.linalg.matrix_power(np.linalg.inv(split.block_p), k) if split.m else np.zeros((0, 0))
        q = np.linalg.matrix_power(split.block_q, k) if split.block_q.size else np.zeros((0, 0))
    norm = lambda M: float(np.linalg.norm(M, 2)) if M.size else 0.0
    return norm(p), norm(q), p, q


def dichotomy_constants(split: SpectralSplit, tau: float, samples: int = 64, cap_doublings: int = 12,
                        map_tau: float | None = None, seed: int = 0) -> DichotomyReport:
    """``a = max(|e^{Cτ}|_P|, |e^{-Cτ}|_Q|)`` over ``t ∈ [τ, 4τ]``, doubling τ until ``a < 1``.

    For maps (``split.kind == 'map'``) time is counted in steps of
    ``map_tau``: ``e^{Cτ}|_P`` becomes ``DG^{-k}|_P`` and ``e^{-Cτ}|_Q`` becomes ``DG^k|_Q``.
    Random unit vectors (``samples`` of them) confirm the bound on each block.
    """
    rng = np.random.default_rng(seed)
    if split.kind == "map" and not map_tau:
        raise ValueError("map dichotomies need the map time step")
    tried = []
    t0 = tau
    for _ in range(cap_doublings + 1):
        grid = np.linspace(t0, 4 * t0, 13)
        if split.kind == "map":
            grid = np.unique(np.maximum(1, np.round(grid / map_tau))) * map_tau
        vals = [_restricted_norms(split, t, map_tau) for t in grid]
        a_p = max(v[0] for v in vals)
        a_q = max(v[1] for v in vals)
        a = max(a_p, a_q)
        tried.append((float(t0), float(a)))
        if a < 1.0:
            break
        t0 *= 2.0
    # sampled confirmation at the reported τ
    _, _, Mp, Mq = _restricted_norms(split, grid[0], map_tau)
    sampled = 0.0
    for M in (Mp, Mq):
        if M.size:
            v = rng.normal(size=(samples, M.shape[1]))
            v /= np.linalg.norm(v, axis=1, keepdims=True)
            sampled = max(sampled, float(np.max(np.linalg.norm(v @ M.T, axis=1))))
    success = a < 1.0
    if not success:
        warnings.warn(f"no dichotomy with a < 1 found up to tau = {t0:g}", DichotomyFailure)
    return DichotomyReport(float(a), float(t0), float(a_p), float(a_q), success, tried, sampled)


# ---------------------------------------------------------------------------
# operator norms


def operator_norm(M: np.ndarray, iterations: int = 50, rtol: float = 1e-12, seed: int = 0) -> np.ndarray:
    """Largest singular value by power iteration on ``MᵀM``; batched over leading axes."""
    M = np.asarray(M, dtype=float)
    # rescale so that MᵀM neither underflows nor overflows
    scale = np.max(np.abs(M), axis=(-2, -1), keepdims=True) if M.size else np.ones(M.shape[:-2] + (1, 1))
    scale = np.where(scale > 0, scale, 1.0)
    M = M / scale
    batch = M.shape[:-2]
    rng = np.random.default_rng(seed)
    v = rng.normal(size=batch + (M.shape[-1], 1))
    v /= np.linalg.norm(v, axis=-2, keepdims=True)
    MT = np.swapaxes(M, -1, -2)
    sigma = np.zeros(batch)
    for _ in range(iterations):
        w = MT @ (M @ v)
        nw = np.linalg.norm(w, axis=-2, keepdims=True)
        new_sigma = np.sqrt(nw[..., 0, 0])
        safe = np.where(nw > 0, nw, 1.0)
        v = np.where(nw > 0, w / safe, v)
        if np.all(np.abs(new_sigma - sigma) <= rtol * np.maximum(new_sigma, 1e-300)):
            sigma = new_sigma
            break
        sigma = new_sigma
    return sigma * scale[..., 0, 0]


# ---------------------------------------------------------------------------
# Lyapunov-type numbers


@dataclass
class LyapunovNumbers:
    nu: float
    theta: float | None
    horizon: float
    base_point: np.ndarray
    norm_A: float = float("nan")
    norm_B: float = float("nan")

    def to_dict(self):
        return {"nu": self.nu, "theta": self.theta, "tau": self.horizon,
                "base_point": [float(x) for x in self.base_point]}


def _backward_orbit(chart_map: ChartMap, section: Section | None, x0, steps: int):
    orbit = [np.atleast_2d(np.asarray(x0, dtype=float))]
    for _ in range(steps):
        if section is None:
            orbit.append(orbit[-1].copy())
            continue
        target = orbit[-1]
        data = _preimages(chart_map, section, target, None)
        orbit.append(data.preimages)
    return orbit[::-1]  # p_{-steps}, ..., p_0


def lyapunov_type_numbers(chart_map: ChartMap, section: Section | None = None, base_point=None,
                          steps: int = 4) -> LyapunovNumbers:
    """Finite-horizon ``ν_T = |B_T|^{1/T}`` and ``θ_T = log|A_T| / (-log|B_T|)`` with ``T = steps·τ``.

    ``A_T`` is the inverse of the base (tangential) derivative of ``G^steps``
    restricted to the section, ``B_T`` the Q-block of ``DG^steps`` on the
    fiber directions, both along the orbit ending at ``base_point``.  Without
    a section the chart origin must be a fixed point and the orbit is
    constant.
    """
    m = chart_map.m
    x0 = np.zeros(m) if base_point is None else np.asarray(base_point, dtype=float)
    orbit = _backward_orbit(chart_map, section, x0, steps)
    chart, tmap = chart_map.chart, chart_map.tmap
    x = orbit[0]
    if section is None:
        y = np.zeros((1, chart_map.k))
        T = np.zeros((1, chart_map.k, m))
    else:
        y = section.evaluate(x)
        T = section.slope(x)
    state = chart.lift(x, y)
    tangent = np.concatenate([chart.EP[None] + chart.EQ[None] @ T, chart.EQ[None]], axis=2)
    for _ in range(steps):
        state, tangent = tmap.with_tangent(state, tangent)
    base_rows, fiber_rows = chart.vector_coordinates(tangent)
    A_forward = base_rows[0, :, :m]
    B = fiber_rows[0, :, m:]
    T_time = steps * tmap.model.tau
    try:
        A = np.linalg.inv(A_forward)
    except np.linalg.LinAlgError:
        raise InvertibilityError("base derivative along the orbit is singular") from None
    nA = float(operator_norm(A)) if A.size else 0.0
    nB = float(operator_norm(B)) if B.size else 0.0
    nu = nB ** (1.0 / T_time) if nB > 0 else 0.0
    theta = None
    if nu < 1.0 and nB > 0:
        theta = math.log(nA) / (-math.log(nB))
    return LyapunovNumbers(nu, theta, T_time, orbit[-1][0], nA, nB)


# ---------------------------------------------------------------------------
# conditions


@dataclass
class ConditionCheck:
    stability_lhs: float
    smoothing_lhs: float
    theta1: float
    passed: bool
    margin: float
    samples: int
    tau: float | None = None
    per_sample_B: list = field(default_factory=list)
    per_sample_A: list = field(default_factory=list)

    def to_dict(self):
        return {"stability_lhs": self.stability_lhs, "smoothing_lhs": self.smoothing_lhs,
                "theta1": self.theta1, "pass": self.passed, "tau": self.tau, "samples": self.samples}


def check_conditions(chart_map: ChartMap, section: Section, samples=None, theta1: float = 0.9,
                     warn_margin: float = 0.1) -> ConditionCheck:
    """Stability ``|B(p)| < ϑ1`` and smoothing ``|A(p)||B(p)| < ϑ1`` on sampled points.

    ``samples`` are base coordinates ``ξ`` (default: every node); ``p`` is the
    point of the section over ``ξ`` and both operators are evaluated at its
    preimage ``(x, Φ(x))``.
    """
    if not 0.0 < theta1 < 1.0:
        raise ValueError("theta1 must lie in (0, 1)")
    xi = section.nodes if samples is None else np.atleast_2d(np.asarray(samples, dtype=float))
    try:
        data = _preimages(chart_map, section, xi, None)
    except Exception as exc:  # noqa: BLE001 - reraised with context
        raise InvertibilityError(f"base map is not invertible over the samples: {exc}") from exc
    x = data.preimages
    _, d22 = chart_map.normal_blocks(x, section.evaluate(x))
    Bn = operator_norm(d22)
    try:
        Ainv = np.linalg.inv(data.base_block)
    except np.linalg.LinAlgError:
        raise InvertibilityError("tangential derivative is singular at a sample") from None
    An = operator_norm(Ainv)
    stab = float(np.max(Bn))
    smooth = float(np.max(An * Bn))
    passed = stab < theta1 and smooth < theta1
    margin = (theta1 - max(stab, smooth)) / theta1
    if passed and margin < warn_margin:
        warnings.warn(f"conditions pass with only {100 * margin:.1f}% margin", ConditionWarning)
    return ConditionCheck(stab, smooth, theta1, passed, margin, int(xi.shape[0]), chart_map.tmap.model.tau,
                          Bn.tolist(), An.tolist())


# ---------------------------------------------------------------------------
# spectral gap


@dataclass
class GapCheck:
    passed: bool
    m: int
    lambda_margin: float  # λ_m - K3
    gap_margin: float  # (λ_{m+1} - λ_m) - K4 λ_{m+1}^β


def spectral_gap_check(op: SpectralOperator, m: int, K3: float, K4: float, beta: float,
                       shifted: bool = False) -> GapCheck:
    """``λ_m >= K3`` and ``λ_{m+1} - λ_m >= K4 λ_{m+1}^β`` (``m`` counts modes from 1)."""
    lam = op.shifted if shifted else op.eigenvalues
    if not 1 <= m < lam.size:
        raise ValueError(f"need 1 <= m < n = {lam.size}")
    lm, lm1 = float(lam[m - 1]), float(lam[m])
    rhs = K4 * (lm1**beta if lm1 > 0 else 0.0)
    lmarg = lm - K3
    gmarg = (lm1 - lm) - rhs
    return GapCheck(lmarg >= 0 and gmarg >= 0, m, lmarg, gmarg)


def choose_inertial_dimension(op: SpectralOperator, K3: float = 1.0, K4: float = 1.0, beta: float = 0.5,
                              shifted: bool = True, m_max: int | None = None) -> int:
    """Smallest ``m`` passing :func:`spectral_gap_check`."""
    top = op.n - 1 if m_max is None else min(m_max, op.n - 1)
    for m in range(1, top + 1):
        if spectral_gap_check(op, m, K3, K4, beta, shifted).passed:
            return m
    raise ValueError("no m satisfies the spectral gap condition")


def projector_defects(split: SpectralSplit) -> dict:
    P, Q = split.P, split.Q
    n = P.shape[0]
    norm = lambda M: float(np.linalg.norm(M, 2))
    return {"P2-P": norm(P @ P - P), "PQ": norm(P @ Q), "QP": norm(Q @ P), "P+Q-I": norm(P + Q - np.eye(n))}
