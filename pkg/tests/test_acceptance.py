"""End-to-end acceptance checks, one test (or a few) per criterion.

Each test records a PASS/FAIL line shown in the terminal summary.  Oracles
are closed forms or independent computations (see ``oracles.py``).
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from maniforge import io as mio
from maniforge.charts import Chart, ChartMap
from maniforge.cli import _inertial_maps, build_chart, build_time_map, cli_dispatch, initial_section, run_transform
from maniforge.config import load_config, parse_config, render
from maniforge.graph_transform import Section, c1_consistency, graph_transform_step, iterate_to_fixed_point
from maniforge.hyperbolicity import (
    check_conditions,
    choose_inertial_dimension,
    classify,
    projector_defects,
    spectral_gap_check,
    spectral_split,
)
from maniforge.models import (
    PerturbationSpec,
    TimeMap,
    TimeStepScheme,
    build_model,
    continuation_guess,
    imex_euler_step,
    newton_fixed_point,
)
from maniforge.persistence import (
    AppendixSettings,
    _appendix_manifold,
    _appendix_map,
    convergence_study,
    hausdorff_semidistance,
    nse_resolution_study,
)
from maniforge.spectral import Splitting, project
from oracles import brute_force_semidistance, perturbed_saddle_manifold

CONFIGS = Path(__file__).parent.parent / "configs"
LN2 = math.log(2.0)


def saddle_setup(tau=LN2):
    g = TimeMap(build_model("Saddle2", {}, tau), TimeStepScheme.for_tau("ExactDuhamel", tau))
    return ChartMap(g, Chart(np.zeros(2), np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])))


# ---------------------------------------------------------------------------
# expensive runs shared between criteria


@pytest.fixture(scope="session")
def saddle_run():
    cfg = load_config(CONFIGS / "saddle2.cfg")
    t0 = time.perf_counter()
    tmap = build_time_map(cfg)
    chart, _, _ = build_chart(cfg, tmap)
    sec, rep = run_transform(cfg, initial_section(cfg, chart), ChartMap(tmap, chart))
    return sec, rep, chart, time.perf_counter() - t0


@pytest.fixture(scope="session")
def ks_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("ks")
    t0 = time.perf_counter()
    code = cli_dispatch(["inertial", "--config", str(CONFIGS / "ks_inertial.cfg"), "--out", str(out)])
    elapsed = time.perf_counter() - t0
    report = json.loads((out / "inertial_report.json").read_text())
    return code, report, mio.read_section(out / "section.csv"), elapsed


@pytest.fixture(scope="session")
def appendix_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("appendix")
    t0 = time.perf_counter()
    code = cli_dispatch(["appendix-demo", "--config", str(CONFIGS / "appendix.cfg"), "--out", str(out)])
    elapsed = time.perf_counter() - t0
    return code, json.loads((out / "appendix.json").read_text()), elapsed


@pytest.fixture(scope="session")
def nse_run():
    cfg = load_config(CONFIGS / "nse_persistence.cfg")
    params = {k: v for k, v in cfg.model.parameters.items() if k != "N"}
    pb = cfg.perturbation
    t0 = time.perf_counter()
    table, runs = nse_resolution_study(params, list(zip(pb.modes, pb.dt)), (cfg.model.parameters["N"], cfg.model.dt),
                                       cfg.model.tau, cfg.manifold.rho, cfg.manifold.g)
    return table, runs, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# 1


@pytest.mark.criterion(1, "Saddle2 exactness")
def test_saddle2_exactness(criterion, saddle_run):
    sec, rep, chart, elapsed = saddle_run
    xi = sec.nodes[:, 0]
    e0 = float(np.max(np.abs(sec.flat_values[:, 0] - xi**2 / 3)))
    e1 = float(np.max(np.abs(sec.flat_derivative[:, 0, 0] - 2 * xi / 3)))
    criterion.check(
        {"converged": rep.converged, "value error": e0 <= 1e-8, "slope error": e1 <= 1e-8,
         "ratio": 0.115 <= rep.contraction_ratio <= 0.135, "g=65": sec.g == 65, "runtime": elapsed < 5},
        f"value err {e0:.1e}, slope err {e1:.1e}, ratio {rep.contraction_ratio:.4f}, {elapsed:.2f} s",
    )


# ---------------------------------------------------------------------------
# 2


@pytest.mark.criterion(2, "first-iterate oracle")
def test_first_iterates(criterion):
    cm = saddle_setup()
    sec = Section.zeros(1, 1, 1.0, g=65, interpolation="cubic", delta=1.0)
    xi = sec.nodes[:, 0]
    one, _ = graph_transform_step(sec, cm)
    two, _ = graph_transform_step(one, cm)
    e1 = float(np.max(np.abs(one.flat_values[:, 0] - 7 / 24 * xi**2)))
    e2 = float(np.max(np.abs(two.flat_values[:, 0] - 21 / 64 * xi**2)))
    criterion.check({"iterate 1": e1 <= 1e-10, "iterate 2": e2 <= 1e-10},
                    f"7/24 err {e1:.1e}, 21/64 err {e2:.1e}")


# ---------------------------------------------------------------------------
# 3


def _c1(sec):
    err, thr = c1_consistency(sec)
    return err, thr, err <= thr


@pytest.mark.criterion(3, "C1 witness on built-in runs")
def test_c1_witness_saddle_and_appendix(criterion, saddle_run):
    checks, parts = {}, []
    sec = saddle_run[0]
    err, thr, ok = _c1(sec)
    checks["saddle2"] = ok
    parts.append(f"saddle2 {err:.1e}/{thr:.1e}")
    s = AppendixSettings(**_appendix_kwargs())
    for h in (0.0, 0.2):
        gm = _appendix_map(h, s)
        chart = Chart(np.array([1.0, 0.0]), np.array([[0.0], [1.0]]), np.array([[1.0], [0.0]]))
        sec_h, rep = _appendix_manifold(gm, chart, s)
        err, thr, ok = _c1(sec_h)
        checks[f"appendix h={h}"] = ok and rep.converged
        parts.append(f"appendix h={h} {err:.1e}/{thr:.1e}")
    criterion.check(checks, ", ".join(parts))


def _appendix_kwargs():
    cfg = load_config(CONFIGS / "appendix.cfg")
    mb, mf, ex = cfg.model, cfg.manifold, cfg.experiment
    return dict(tau=mb.tau, dt=mb.dt, rho=mf.rho, g=mf.g, density=ex.density, iterations=ex.iterations,
                bound_box=4.0 * ex.R0, prepared=bool(mb.parameters["prepared"]), r_cap=mb.parameters["r_cap"],
                margin=ex.margin)


@pytest.mark.criterion(3, "C1 witness on built-in runs")
def test_c1_witness_ks(criterion, ks_run):
    err, thr, ok = _c1(ks_run[2])
    criterion.check({"ks": ok}, f"ks {err:.2e}/{thr:.2e}")


@pytest.mark.criterion(3, "C1 witness on built-in runs")
def test_c1_witness_nse(criterion, nse_run):
    checks, parts = {}, []
    for run in nse_run[1]:
        err, thr, ok = _c1(run.section)
        checks[f"nse N={run.N}"] = ok
        parts.append(f"nse N={run.N} {err:.1e}/{thr:.1e}")
    criterion.check(checks, ", ".join(parts))


# ---------------------------------------------------------------------------
# 4


@pytest.mark.criterion(4, "conditions gate")
def test_conditions_gate(criterion):
    cfg = load_config(CONFIGS / "saddle2_conditions.cfg")
    rho = cfg.manifold.rho
    samples = np.linspace(-rho, rho, cfg.experiment.samples)[:, None]
    cc = check_conditions(saddle_setup(), Section.zeros(1, 1, rho, g=cfg.manifold.g, delta=1.0), samples,
                          cfg.experiment.theta1)
    checks = {"stability": abs(cc.stability_lhs - 0.5) <= 0.02, "smoothing": abs(cc.smoothing_lhs - 0.25) <= 0.02}
    sweep = []
    for tau in (0.05, 0.1, LN2, 2.0):
        cm = saddle_setup(tau)
        gate = check_conditions(cm, Section.zeros(1, 1, rho, g=33, delta=1.0), samples, cfg.experiment.theta1).passed
        # default iteration budget and tolerances of a manifold run
        _, rep = iterate_to_fixed_point(Section.zeros(1, 1, 1.0, g=65, interpolation="cubic", delta=1.0), cm,
                                        cfg.manifold.tol_c0, cfg.manifold.tol_c1, cfg.manifold.max_iter)
        checks[f"tau={tau:.3g}"] = gate == rep.converged
        sweep.append(f"tau {tau:.3g}: gate {'pass' if gate else 'fail'}, "
                     f"{'converged' if rep.converged else 'not converged'}")
    criterion.check(checks, f"stability {cc.stability_lhs:.4f}, smoothing {cc.smoothing_lhs:.4f}; " + "; ".join(sweep))


# ---------------------------------------------------------------------------
# 5


@pytest.mark.criterion(5, "perturbation order")
def test_perturbation_order(criterion):
    cfg = load_config(CONFIGS / "saddle2_converge.cfg")
    t0 = time.perf_counter()
    tmap = build_time_map(cfg)
    chart, _, _ = build_chart(cfg, tmap)
    pb = cfg.perturbation
    specs = [PerturbationSpec(pb.kind, h, analytic_form=pb.analytic_form) for h in pb.h]
    mf = cfg.manifold
    table = convergence_study(tmap, chart, specs, initial_section(cfg, chart), mf.tol_c0, mf.tol_c1, mf.max_iter)
    elapsed = time.perf_counter() - t0
    # dense-grid oracle: the series solution on 4001 points
    dense = np.linspace(-mf.rho, mf.rho, 4001)
    base, dbase = perturbed_saddle_manifold(dense, 0.0)
    c0_or, c1_or = [], []
    for h in pb.h:
        phi, dphi = perturbed_saddle_manifold(dense, h)
        c0_or.append(np.max(np.abs(phi - base)))
        c1_or.append(np.max(np.abs(dphi - dbase)))
    c0 = np.array([r.c0 for r in table.rows])
    c1 = np.array([r.c1 for r in table.rows])
    oracle_slope = np.polyfit(np.log(pb.h), np.log(c0_or), 1)[0]
    checks = {
        "converged": all(r.converged for r in table.rows),
        "C0 slope": abs(table.fit_slope - 1.0) <= 0.2,
        "C1 slope": abs(table.fit_slope_c1 - 1.0) <= 0.2,
        "C0 vs oracle": np.allclose(c0, c0_or, rtol=1e-3),
        "C1 vs oracle": np.allclose(c1, c1_or, rtol=1e-2),
        "runtime": elapsed < 60,
    }
    criterion.check(checks, f"slopes C0 {table.fit_slope:.4f} C1 {table.fit_slope_c1:.4f} "
                            f"(oracle {oracle_slope:.4f}), max rel dev from oracle "
                            f"{np.max(np.abs(c0 / c0_or - 1)):.1e}, {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 6


@pytest.mark.criterion(6, "appendix demonstration")
def test_appendix(criterion, appendix_run):
    code, rep, elapsed = appendix_run
    fwd = [r["dist_fwd"] for r in rep["rows"]]
    bwd = [r["dist_bwd"] for r in rep["rows"]]
    hyp = sorted(rep["hyperbolic_point"]["eigenvalues"])
    non = sorted(rep["nonhyperbolic_point"]["eigenvalues"])
    checks = {
        "exit 0": code == 0,
        "fwd decreasing": rep["forward_decreasing"] and all(b < a for a, b in zip(fwd, fwd[1:])),
        "fwd halved": fwd[-1] < 0.5 * fwd[0],
        "bwd non-decreasing": rep["backward_nondecreasing"],
        "positive floor": rep["floor"] > 0 and min(bwd) >= rep["floor"],
        "(1,0) hyperbolic": rep["hyperbolic_point"]["hyperbolic"] and np.allclose(hyp, [-1, 1], atol=1e-6),
        "(1,pi) nonhyperbolic": (not rep["nonhyperbolic_point"]["hyperbolic"])
        and np.allclose(non, [-1, 0], atol=1e-6),
        "runtime": elapsed < 120,
    }
    criterion.check(checks, "fwd " + ", ".join(f"{d:.4f}" for d in fwd) + "; bwd " +
                    ", ".join(f"{d:.10f}" for d in bwd) + f"; floor {rep['floor']:.6f}; {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 7


@pytest.mark.criterion(7, "IMEX scheme")
def test_imex(criterion):
    tau = 1.0
    dts = [tau / 2**k for k in range(3, 9)]
    lam = np.array([0.5, 1.0, 3.0])
    errs = []
    for dt in dts:
        u = np.ones(3)
        for _ in range(round(tau / dt)):
            u = imex_euler_step(lam, 1.0, dt, np.zeros(3), lambda x: np.zeros_like(x), u)
        errs.append(np.max(np.abs(u - np.exp(-lam * tau))))
    slope = float(np.polyfit(np.log(dts), np.log(errs), 1)[0])
    worst = 0.0
    for name, params, guess in (
        ("KuramotoSivashinsky", {"L": 2 * math.pi * math.sqrt(2), "N": 32}, 2.0),
        ("NSETorus", {"nu": 0.05, "N": 8, "amplitude": 1.6}, 0.0),
    ):
        model = build_model(name, params, 0.5)
        g = TimeMap(model, TimeStepScheme.for_tau("IMEXEuler", 0.5, 0.005))
        u0 = np.zeros(model.dim)
        u0[0] = guess
        if name == "NSETorus":
            u0 = continuation_guess(model)
        fp = newton_fixed_point(g, u0, tol=1e-12, method="generator")
        worst = max(worst, float(np.max(np.abs(g(fp.state) - fp.state))))
    criterion.check({"order": abs(slope - 1.0) <= 0.1, "equilibria": worst <= 1e-12},
                    f"slope {slope:.4f}, equilibrium drift {worst:.1e}")


# ---------------------------------------------------------------------------
# 8


@pytest.mark.criterion(8, "inertial manifold property")
def test_inertial_manifold(criterion, ks_run):
    code, rep, sec, elapsed = ks_run
    cfg = load_config(CONFIGS / "ks_inertial.cfg")
    op = build_time_map(cfg).model.operator
    sp = cfg.splitting
    m_gap = choose_inertial_dimension(op, sp.K3, sp.K4, sp.beta)
    checks = {
        "exit 0": code == 0,
        "converged": rep["converged"],
        "m from gap": rep["chart"]["m"] == m_gap and spectral_gap_check(op, m_gap, sp.K3, sp.K4, sp.beta,
                                                                        shifted=True).passed,
        "inside ball": rep["all_inside_ball"],
        "within 5 eps": rep["within_5eps"] and rep["max_trajectory_distance"] <= 5 * rep["eps"],
        "runtime": elapsed < 600,
    }
    criterion.check(checks, f"m {rep['chart']['m']}, max distance {rep['max_trajectory_distance']:.2e} "
                            f"vs 5 eps {5 * rep['eps']:.2f}, trajectory time {rep['trajectory_time']:g}, "
                            f"{elapsed:.1f} s")


@pytest.mark.criterion(8, "inertial manifold property")
def test_truncated_map_is_bitwise_inside(criterion):
    cfg = load_config(CONFIGS / "ks_inertial.cfg")
    truncated, gh = _inertial_maps(cfg)
    R = cfg.experiment.cutoff_R
    rng = np.random.default_rng(0)
    v = rng.normal(size=(50, gh.dim))
    radii = math.sqrt(2) * R * rng.uniform(0, 1, 50) ** (1 / gh.dim)
    v *= (radii / gh.norm(v))[:, None]
    v[0] *= math.sqrt(2) * R / gh.norm(v[0])  # boundary |v|^2 = 2 R^2
    same = np.array_equal(truncated(v), gh(v))
    criterion.check({"bitwise": same}, f"truncated map equals G_h bitwise on {len(v)} points with |v|^2 <= 2R^2")


# ---------------------------------------------------------------------------
# 9


@pytest.mark.criterion(9, "NSETorus persistence smoke test")
def test_nse_persistence(criterion, nse_run):
    table, runs, elapsed = nse_run
    c0 = [r.c0 for r in table.rows]
    hs = [r.h for r in table.rows]
    checks = {
        "converged": all(r.converged for r in table.rows) and runs[-1].report.converged,
        "one unstable mode": all(r.unstable == 1 for r in runs),
        "C0 decreases": all(b < a for a, b in zip(c0, c0[1:])),
        "h decreases": all(b < a for a, b in zip(hs, hs[1:])),
        "runtime": elapsed < 600,
    }
    criterion.check(checks, ", ".join(f"N={run.N} h={r.h:.3f} C0={r.c0:.4f}" for run, r in zip(runs, table.rows))
                    + f" (reference N={runs[-1].N}); {elapsed:.0f} s")


# ---------------------------------------------------------------------------
# 10


@pytest.mark.criterion(10, "infrastructure")
def test_determinism(criterion, tmp_path):
    cfg = str(CONFIGS / "saddle2.cfg")
    dirs = [tmp_path / "a", tmp_path / "b"]
    codes = [cli_dispatch(["manifold", "--config", cfg, "--out", str(d)]) for d in dirs]

    def snapshot(d):
        files = {}
        for p in sorted(d.iterdir()):
            if p.name == "manifest.json":
                data = json.loads(p.read_text())
                data.pop("started"), data.pop("finished")
                files[p.name] = json.dumps(data, sort_keys=True)
            else:
                files[p.name] = p.read_bytes()
        return files

    criterion.check({"exit 0": codes == [0, 0], "identical": snapshot(dirs[0]) == snapshot(dirs[1])},
                    "two manifold runs bitwise identical (manifest timestamps excluded)")


@pytest.mark.criterion(10, "infrastructure")
def test_projector_algebra(criterion):
    rng = np.random.default_rng(1)
    worst = 0.0
    for n in (3, 6, 12):
        for kind in ("map", "generator"):
            S = rng.normal(size=(n, n)) + 3 * np.eye(n)
            ev = rng.uniform(1.5, 3, n) if kind == "map" else rng.uniform(0.5, 3, n)
            flip = rng.uniform(size=n) < 0.5
            ev = np.where(flip, 1 / ev, ev) if kind == "map" else np.where(flip, -ev, ev)
            A = S @ np.diag(ev) @ np.linalg.inv(S)
            worst = max(worst, max(projector_defects(spectral_split(classify(A, kind))).values()))
    split = Splitting.leading(10, 4)
    v = rng.normal(size=10)
    p, q = project(split, "P", v), project(split, "Q", v)
    idx = float(np.max(np.abs(p + q - v)) + np.max(np.abs(project(split, "P", p) - p))
                + np.max(np.abs(project(split, "Q", p))))
    criterion.check({"spectral": worst <= 1e-10, "index": idx <= 1e-10},
                    f"spectral defects {worst:.1e}, index defects {idx:.1e}")


@pytest.mark.criterion(10, "infrastructure")
def test_hausdorff_axioms_random(criterion):
    rng = np.random.default_rng(2)
    worst, ok = 0.0, True
    for _ in range(50):
        A, B, C = (rng.normal(size=(rng.integers(1, 40), 3)) for _ in range(3))
        d = hausdorff_semidistance(A, B)
        worst = max(worst, abs(d - brute_force_semidistance(A, B)))
        ok &= hausdorff_semidistance(A, A) == 0.0
        ok &= hausdorff_semidistance(A, np.vstack([A, B])) == 0.0
        ok &= hausdorff_semidistance(A, C) <= d + hausdorff_semidistance(B, C) + 1e-12
    criterion.check({"axioms": bool(ok), "brute force": worst <= 1e-12},
                    f"50 random triples, max deviation from brute force {worst:.1e}")


@pytest.mark.criterion(10, "infrastructure")
def test_config_round_trip(criterion):
    ok = True
    for path in sorted(CONFIGS.glob("*.cfg")):
        cfg = load_config(path)
        again = parse_config(render(cfg))
        ok &= again.to_dict() == cfg.to_dict() and again.hash() == cfg.hash()
    criterion.check({"round trip": ok}, f"{len(list(CONFIGS.glob('*.cfg')))} shipped configs render and re-parse")
