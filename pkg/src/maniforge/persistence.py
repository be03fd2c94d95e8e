"""Manifold distances, global unstable clouds, convergence sweeps and the appendix example."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .charts import Chart, ChartMap
from .graph_transform import Section, TransformReport, _fiber_op_norm, iterate_to_fixed_point
from .hyperbolicity import LinearizationReport, linearize_map
from .models import (
    AppendixPolar,
    DivergenceError,
    HyperbolicityError,
    PerturbationSpec,
    TimeMap,
    TimeStepScheme,
    build_model,
    newton_fixed_point,
    perturbed_map,
)


class EmptyCloudError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (N, n)
    provenance: tuple  # one label per point

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[0] == 0:
            raise EmptyCloudError("point cloud must be a nonempty (N, n) array")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite points")
        prov = tuple(self.provenance)
        if len(prov) != pts.shape[0]:
            raise ValueError("one provenance label per point is required")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "provenance", prov)

    @classmethod
    def of(cls, points, label: str = "trajectorySample") -> "PointCloud":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return cls(pts, (label,) * pts.shape[0])

    def __len__(self):
        return self.points.shape[0]

    def union(self, other: "PointCloud") -> "PointCloud":
        return PointCloud(np.vstack([self.points, other.points]), self.provenance + other.provenance)


def _cloud_array(c) -> np.ndarray:
    if isinstance(c, PointCloud):
        return c.points
    arr = np.atleast_2d(np.asarray(c, dtype=float))
    if arr.shape[0] == 0:
        raise EmptyCloudError("empty cloud")
    return arr


def hausdorff_semidistance(A, B, weights: np.ndarray | None = None) -> float:
    """``sup_{a∈A} inf_{b∈B} |a - b|``, measured as ``|W(a - b)|`` with diagonal ``W``.

    Pass ``weights = Ã^γ`` eigenvalue powers for the graph norm ``|·|_γ``.
    """
    a, b = _cloud_array(A), _cloud_array(B)
    if a.shape[1] != b.shape[1]:
        raise ValueError("clouds live in different dimensions")
    if weights is not None:
        a, b = a * weights, b * weights
    d, _ = cKDTree(b).query(a, k=1)
    return float(np.max(d))


# ---------------------------------------------------------------------------
# section distances


@dataclass
class SectionDistance:
    c0: float
    c1: float | None
    resampled: bool


def section_distances(phi: Section, psi: Section, EQ=None, weights=None) -> SectionDistance:
    """C⁰ and C¹ sup distances at the nodes of ``phi`` (``psi`` is resampled if its grid differs)."""
    if phi.k != psi.k or phi.m != psi.m:
        raise ValueError("sections have different base or fiber dimensions")
    same = phi.g == psi.g and phi.rho == psi.rho
    if same:
        vals, der = psi.flat_values, psi.flat_derivative
    else:
        nodes = phi.nodes
        vals = psi.evaluate(nodes)
        der = psi.slope(nodes) if psi.derivative is not None else None
    dv = phi.flat_values - vals
    if EQ is not None:
        dv = dv @ EQ.T
    if weights is not None:
        dv = dv * weights
    c0 = float(np.max(np.linalg.norm(dv, axis=1)))
    c1 = None
    if phi.derivative is not None and der is not None:
        c1 = float(np.max(_fiber_op_norm(phi.flat_derivative - der, EQ, weights)))
    return SectionDistance(c0, c1, not same)


# ---------------------------------------------------------------------------
# clouds


def lift_section(section: Section, chart: Chart, density: int | None = None) -> np.ndarray:
    """States on the graph of ``section``; ``density`` resamples each axis with that many points."""
    if density is None:
        x = section.nodes
    else:
        axis = np.linspace(-section.rho, section.rho, density)
        x = np.stack([c.ravel() for c in np.meshgrid(*([axis] * section.m), indexing="ij")], axis=1)
    return chart.lift(x, section.evaluate(x))


@dataclass
class CloudResult:
    cloud: PointCloud | None
    discarded: int
    escaped_all: bool
    per_step_lipschitz: list = field(default_factory=list)


def global_unstable_cloud(section: Section, chart: Chart, tmap: TimeMap, iterations: int,
                          bound_box: float, density: int | None = None, center=None) -> CloudResult:
    """Union of ``G^j`` (j = 0..iterations) of the lifted local manifold.

    Points with ``|v - center|_γ > bound_box`` are dropped and counted; the
    empirical per-step Lipschitz constant (max ratio of consecutive-point
    spacing growth) is recorded alongside.
    """
    start = lift_section(section, chart, density)
    center = chart.origin if center is None else np.asarray(center, dtype=float)
    norm = tmap.norm
    pts, labels, discarded, lips = [], [], 0, []
    current = start
    inside = norm(current - center) <= bound_box
    discarded += int(np.sum(~inside))
    current = current[inside]
    if current.shape[0]:
        pts.append(current)
        labels.extend(["localManifold"] * current.shape[0])
    for j in range(1, iterations + 1):
        if current.shape[0] == 0:
            break
        nxt = tmap(current)
        if current.shape[0] > 1:
            before = np.linalg.norm(np.diff(current, axis=0), axis=1)
            after = np.linalg.norm(np.diff(nxt, axis=0), axis=1)
            ok = before > 0
            if np.any(ok):
                lips.append(float(np.max(after[ok] / before[ok])))
        keep = norm(nxt - center) <= bound_box
        discarded += int(np.sum(~keep))
        current = nxt[keep]
        if current.shape[0]:
            pts.append(current)
            labels.extend([f"forwardIterate {j}"] * current.shape[0])
    if not pts:
        return CloudResult(None, discarded, True, lips)
    return CloudResult(PointCloud(np.vstack(pts), tuple(labels)), discarded, False, lips)


# ---------------------------------------------------------------------------
# convergence study


@dataclass
class ConvergenceRow:
    h: float
    c0: float
    c1: float | None
    dist_fwd: float
    dist_bwd: float
    converged: bool
    iterations: int


@dataclass
class ConvergenceTable:
    rows: list
    fit_slope: float | None
    fit_slope_c1: float | None
    reference_report: TransformReport | None = None

    def __post_init__(self):
        hs = [r.h for r in self.rows]
        if any(b >= a for a, b in zip(hs, hs[1:])):
            raise ValueError("h must be strictly decreasing across rows")

    def to_dict(self):
        return {
            "fit_slope": self.fit_slope,
            "fit_slope_c1": self.fit_slope_c1,
            "rows": [r.__dict__ for r in self.rows],
        }


def fit_log_slope(h, values, h_max: float = 0.1) -> float | None:
    """Least-squares slope of ``log(value)`` against ``log(h)`` over rows with ``h <= h_max``."""
    h = np.asarray(h, dtype=float)
    v = np.asarray(values, dtype=float)
    ok = (h <= h_max) & (v > 0) & np.isfinite(v) & (h > 0)
    if np.sum(ok) < 2:
        return None
    return float(np.polyfit(np.log(h[ok]), np.log(v[ok]), 1)[0])


def convergence_study(base: TimeMap, chart: Chart, perturbations: Sequence[PerturbationSpec], section0: Section,
                      tol_c0: float = 1e-10, tol_c1: float = 1e-8, max_iter: int = 50,
                      cloud_density: int | None = None) -> ConvergenceTable:
    """Unperturbed manifold once, then one perturbed manifold per ``h`` in the same chart.

    Distances: C⁰/C¹ between sections and both Hausdorff semi-distances
    between the lifted local manifolds (``dist_fwd = dist(W, W_h)``).
    """
    model = base.model
    weights = model.operator.power_weights(model.gamma)
    ref, ref_report = iterate_to_fixed_point(section0, ChartMap(base, chart), tol_c0, tol_c1, max_iter)
    if not ref_report.converged:
        raise DivergenceError("unperturbed manifold did not converge", history=ref_report.c0_history)
    ref_cloud = lift_section(ref, chart, cloud_density)
    rows = []
    for spec in sorted(perturbations, key=lambda p: -p.h):
        gh = perturbed_map(base, spec)
        try:
            sec, rep = iterate_to_fixed_point(section0, ChartMap(gh, chart), tol_c0, tol_c1, max_iter)
        except (DivergenceError, RuntimeError):
            rows.append(ConvergenceRow(spec.h, math.nan, None, math.nan, math.nan, False, 0))
            continue
        d = section_distances(sec, ref, chart.EQ, weights)
        cloud = lift_section(sec, chart, cloud_density)
        rows.append(ConvergenceRow(
            spec.h, d.c0, d.c1,
            hausdorff_semidistance(ref_cloud, cloud, weights),
            hausdorff_semidistance(cloud, ref_cloud, weights),
            rep.converged, rep.iterations,
        ))
    good = [r for r in rows if r.converged]
    slope = fit_log_slope([r.h for r in good], [r.c0 for r in good])
    slope1 = fit_log_slope([r.h for r in good], [r.c1 if r.c1 is not None else math.nan for r in good])
    return ConvergenceTable(rows, slope, slope1, ref_report)


def nse_resolution_h(dt: float, N: int) -> float:
    """``max{Δt, λ_{N+1}^{-1/2}}`` for the torus Galerkin space with ``|k_i| <= N/2``.

    The first excluded Stokes eigenvalue is ``(N/2 + 1)^2``.
    """
    return max(dt, 1.0 / (N // 2 + 1))


# ---------------------------------------------------------------------------
# appendix example


@dataclass
class AppendixRow:
    h: float
    dist_fwd: float  # dist(W⁰, W^h)
    dist_bwd: float  # dist(W^h, W⁰)
    cloud: PointCloud
    converged: bool
    iterations: int


@dataclass
class AppendixReport:
    rows: list
    reference_cloud: PointCloud
    hyperbolic_point: LinearizationReport
    nonhyperbolic_point: LinearizationReport
    floor: float
    roundoff: float = 1e-12

    @property
    def forward_decreasing(self) -> bool:
        d = [r.dist_fwd for r in self.rows]
        return all(b < a for a, b in zip(d, d[1:]))

    @property
    def forward_halved(self) -> bool:
        return self.rows[-1].dist_fwd < 0.5 * self.rows[0].dist_fwd

    @property
    def backward_nondecreasing(self) -> bool:
        # the limit value is the same for every h, so allow round-off sized dips
        d = [r.dist_bwd for r in self.rows]
        return all(b >= a - self.roundoff * max(1.0, abs(a)) for a, b in zip(d, d[1:]))

    def to_dict(self):
        return {
            "rows": [{"h": r.h, "dist_fwd": r.dist_fwd, "dist_bwd": r.dist_bwd, "converged": r.converged,
                      "iterations": r.iterations, "points": len(r.cloud)} for r in self.rows],
            "floor": self.floor,
            "roundoff": self.roundoff,
            "forward_decreasing": self.forward_decreasing,
            "forward_halved": self.forward_halved,
            "backward_nondecreasing": self.backward_nondecreasing,
            "hyperbolic_point": {"state": self.hyperbolic_point.point.tolist(),
                                 "eigenvalues": [complex(e).real for e in self.hyperbolic_point.eigenvalues],
                                 "hyperbolic": self.hyperbolic_point.hyperbolic},
            "nonhyperbolic_point": {"state": self.nonhyperbolic_point.point.tolist(),
                                    "eigenvalues": [complex(e).real for e in self.nonhyperbolic_point.eigenvalues],
                                    "hyperbolic": self.nonhyperbolic_point.hyperbolic},
        }


@dataclass
class AppendixSettings:
    tau: float = 0.5
    dt: float = 0.01
    rho: float = 0.3
    g: int = 33
    density: int = 201
    iterations: int = 120
    bound_box: float = 3.0
    prepared: bool = True
    r_cap: float = 2.0
    margin: float = 1e-5
    newton_tol: float = 1e-14


def _appendix_map(h: float, s: AppendixSettings) -> TimeMap:
    model = build_model("AppendixPolar", {"h": h, "prepared": float(s.prepared), "r_cap": s.r_cap}, s.tau)
    return TimeMap(model, TimeStepScheme.for_tau("RK4", s.tau, s.dt))


def _appendix_manifold(tmap: TimeMap, chart: Chart, s: AppendixSettings):
    sec0 = Section.zeros(1, 1, s.rho, g=s.g, interpolation="cubic")
    return iterate_to_fixed_point(sec0, ChartMap(tmap, chart), 1e-12, 1e-10, 200)


def appendix_demo(h_values: Sequence[float], settings: AppendixSettings | None = None) -> AppendixReport:
    """Global unstable manifolds of ``(r, θ) = (1, 0)`` with and without the perturbation.

    The chart is the unperturbed one at (1, 0) (tangent: θ direction, fiber:
    radial); the point stays a hyperbolic equilibrium for every ``h``.
    """
    s = settings or AppendixSettings()
    hs = [float(h) for h in h_values]
    if any(h <= 0 for h in hs) or any(b >= a for a, b in zip(hs, hs[1:])):
        raise ValueError("h values must be positive and strictly decreasing")
    g0 = _appendix_map(0.0, s)
    fp = newton_fixed_point(g0, AppendixPolar.to_cartesian(1.0, 0.05) * 1.02, tol=s.newton_tol)
    hyper = linearize_map(g0, fp.state, "generator", s.margin)
    fp_pi = newton_fixed_point(g0, AppendixPolar.to_cartesian(1.02, math.pi - 0.05), tol=s.newton_tol)
    nonhyper = linearize_map(g0, fp_pi.state, "generator", s.margin)
    if not hyper.hyperbolic:
        raise HyperbolicityError("(1, 0) should be hyperbolic")
    chart = Chart(fp.state, np.array([[0.0], [1.0]]), np.array([[1.0], [0.0]]))
    ref_sec, ref_rep = _appendix_manifold(g0, chart, s)
    ref = global_unstable_cloud(ref_sec, chart, g0, s.iterations, s.bound_box, s.density, center=np.zeros(2))
    rows = []
    for h in hs:
        gh = _appendix_map(h, s)
        sec, rep = _appendix_manifold(gh, chart, s)
        res = global_unstable_cloud(sec, chart, gh, s.iterations, s.bound_box, s.density, center=np.zeros(2))
        rows.append(AppendixRow(
            h,
            hausdorff_semidistance(ref.cloud, res.cloud),
            hausdorff_semidistance(res.cloud, ref.cloud),
            res.cloud, rep.converged, rep.iterations,
        ))
    floor = min(r.dist_bwd for r in rows)
    return AppendixReport(rows, ref.cloud, hyper, nonhyper, floor)


# ---------------------------------------------------------------------------
# cross-resolution comparison (torus NSE)


def cross_resolution_distance(section: Section, chart: Chart, model, ref_section: Section, ref_chart: Chart,
                              ref_model) -> tuple[float, int]:
    """C⁰ distance of a coarse manifold to a reference computed in a larger Galerkin space.

    Coarse nodes are lifted, embedded mode by mode, read in the reference
    chart, and compared with the reference graph wherever their base
    coordinate falls inside the reference ball.  Returns the distance and the
    number of nodes compared.
    """
    pts = chart.lift(section.nodes, section.flat_values)
    big = model.transfer(pts, ref_model)
    x, y = ref_chart.coordinates(big)
    inside = np.max(np.abs(x), axis=1) <= ref_section.rho
    if not np.any(inside):
        raise EmptyCloudError("no coarse node falls inside the reference ball")
    diff = (y[inside] - ref_section.evaluate(x[inside])) @ ref_chart.EQ.T
    return float(np.max(ref_model.norm(diff))), int(np.sum(inside))


@dataclass
class ResolutionRun:
    N: int
    dt: float
    model: object
    chart: Chart
    section: Section
    report: TransformReport
    equilibrium_residual: float
    unstable: int


def nse_unstable_manifold(parameters: dict, N: int, dt: float, tau: float, rho: float, g: int,
                          manifold_kw: dict | None = None) -> ResolutionRun:
    """Equilibrium by forcing continuation plus Newton, Schur chart, graph transform."""
    from .hyperbolicity import spectral_split
    from .models import continuation_guess

    model = build_model("NSETorus", {**parameters, "N": N}, tau)
    tmap = TimeMap(model, TimeStepScheme.for_tau("IMEXEuler", tau, dt))
    fp = newton_fixed_point(tmap, continuation_guess(model), tol=1e-10, method="generator")
    lin = linearize_map(tmap, fp.state, "generator")
    split = spectral_split(lin)
    chart = split.chart(fp.state)
    sec0 = Section.zeros(split.m, model.dim - split.m, rho, g=g, interpolation="cubic")
    kw = {"tol_c0": 1e-10, "tol_c1": 1e-8, "max_iter": 60, **(manifold_kw or {})}
    sec, rep = iterate_to_fixed_point(sec0, ChartMap(tmap, chart), **kw)
    return ResolutionRun(N, dt, model, chart, sec, rep, fp.residual, lin.unstable_count)


def nse_resolution_study(parameters: dict, runs=((8, 1e-2), (12, 5e-3)), reference=(16, 2.5e-3),
                         tau: float = 10.0, rho: float = 0.2, g: int = 11) -> tuple[ConvergenceTable, list]:
    """Coarse runs against a finer reference; rows are labelled by ``max{Δt, λ_{N+1}^{-1/2}}``."""
    ref = nse_unstable_manifold(parameters, *reference, tau, rho, g)
    weights = ref.model.operator.power_weights(ref.model.gamma)
    ref_cloud = lift_section(ref.section, ref.chart)
    rows, done = [], []
    for N, dt in runs:
        run = nse_unstable_manifold(parameters, N, dt, tau, rho, g)
        c0, _ = cross_resolution_distance(run.section, run.chart, run.model, ref.section, ref.chart, ref.model)
        cloud = run.model.transfer(lift_section(run.section, run.chart), ref.model)
        rows.append(ConvergenceRow(
            nse_resolution_h(dt, N), c0, None,
            hausdorff_semidistance(ref_cloud, cloud, weights),
            hausdorff_semidistance(cloud, ref_cloud, weights),
            run.report.converged, run.report.iterations,
        ))
        done.append(run)
    good = [r for r in rows if r.converged]
    table = ConvergenceTable(rows, fit_log_slope([r.h for r in good], [r.c0 for r in good]), None, ref.report)
    return table, done + [ref]
