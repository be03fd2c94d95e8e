"""Command line: ``maniforge <subcommand> --config FILE [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 numerical non-convergence
(outputs are still written), 4 internal error.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import traceback
import warnings
from pathlib import Path

import numpy as np

from . import io as mio
from .charts import Chart, ChartMap
from .config import SUBCOMMANDS, ConfigError, RunConfig, load_config, render
from .graph_transform import (
    CutoffSpec,
    OverflowViolation,
    PreimageError,
    Section,
    SmoothingConditionError,
    c1_consistency,
    invariance_residual,
    iterate_to_fixed_point,
    truncate_map,
)
from .hyperbolicity import (
    InvertibilityError,
    check_conditions,
    choose_inertial_dimension,
    dichotomy_constants,
    linearize_map,
    lyapunov_type_numbers,
    spectral_split,
)
from .models import (
    DivergenceError,
    HyperbolicityError,
    LinearPart,
    ModelError,
    PerturbationSpec,
    TimeMap,
    TimeStepScheme,
    build_model,
    continuation_guess,
    newton_fixed_point,
)
from .persistence import AppendixSettings, appendix_demo, convergence_study, nse_resolution_study
from .spectral import Splitting

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_INTERNAL = 0, 2, 3, 4
NUMERICAL_ERRORS = (DivergenceError, HyperbolicityError, PreimageError, OverflowViolation, InvertibilityError,
                    SmoothingConditionError, np.linalg.LinAlgError)


# ---------------------------------------------------------------------------
# builders shared by the pipelines


def build_time_map(cfg: RunConfig, **overrides) -> TimeMap:
    mb = cfg.model
    params = {k: (float(v) if isinstance(v, bool) else v) for k, v in mb.parameters.items()}
    params.update(overrides)
    model = build_model(mb.name, params, mb.tau, mb.gamma)
    return TimeMap(model, TimeStepScheme.for_tau(mb.resolved_scheme, mb.tau, mb.dt))


def find_fixed_point(cfg: RunConfig, tmap: TimeMap):
    ex = cfg.experiment
    n = tmap.dim
    if ex.guess:
        if len(ex.guess) != n:
            raise ConfigError(f"guess has {len(ex.guess)} entries, the model has {n}", key="experiment.guess")
        guess = np.array(ex.guess, dtype=float)
    elif ex.continuation:
        guess = continuation_guess(tmap.model)
    else:
        guess = np.zeros(n)
    return newton_fixed_point(tmap, guess, tol=cfg.manifold.newton_tol, method=ex.fixed_point_method)


def build_chart(cfg: RunConfig, tmap: TimeMap):
    """Chart plus a small description; spectral mode also returns the split."""
    sp = cfg.splitting
    model = tmap.model
    if sp.mode == "index":
        m = sp.m
        if m is None:
            m = choose_inertial_dimension(model.operator, sp.K3, sp.K4, sp.beta)
        split = Splitting.leading(model.dim, m, model.operator.eigenvalues)
        return Chart.index(split), None, {"mode": "index", "m": m}
    fp = find_fixed_point(cfg, tmap)
    lin = linearize_map(tmap, fp.state, "map", cfg.experiment.margin)
    split = spectral_split(lin)
    if sp.m is not None and sp.m != split.m:
        raise ConfigError(f"splitting.m = {sp.m} but the fixed point has {split.m} unstable directions",
                          key="splitting.m")
    info = {"mode": "spectral", "m": split.m, "fixed_point": fp.state, "fixed_point_residual": fp.residual}
    return split.chart(fp.state), split, info


def initial_section(cfg: RunConfig, chart: Chart) -> Section:
    mf = cfg.manifold
    return Section.zeros(chart.m, chart.k, mf.rho, g=mf.g, interpolation=mf.interpolation, eps=mf.eps,
                         delta=mf.delta)


def run_transform(cfg: RunConfig, section: Section, chart_map: ChartMap):
    mf = cfg.manifold
    return iterate_to_fixed_point(section, chart_map, mf.tol_c0, mf.tol_c1, mf.max_iter, newton_tol=mf.newton_tol)


def _diagnostics(section: Section, chart_map: ChartMap) -> dict:
    err, thr = c1_consistency(section) if section.derivative is not None else (None, None)
    return {
        "c1_error": err,
        "c1_threshold": thr,
        "c1_pass": None if err is None else bool(err <= thr),
        "invariance_residual": invariance_residual(section, chart_map),
        "lipschitz": section.lipschitz_estimate(),
        "sup_fiber": section.max_fiber(),
    }


# ---------------------------------------------------------------------------
# pipelines: each writes its files into ``out`` and returns an exit code


def cmd_fixed_point(cfg, out: Path, manifest) -> int:
    tmap = build_time_map(cfg)
    fp = find_fixed_point(cfg, tmap)
    manifest.stage("newton", "ok", iterations=fp.iterations)
    rep_map = linearize_map(tmap, fp.state, "map", cfg.experiment.margin)
    rep_gen = linearize_map(tmap, fp.state, "generator", cfg.experiment.margin)
    data = {
        "state": fp.state,
        "iterations": fp.iterations,
        "residual": fp.residual,
        "residual_history": fp.residual_history,
        "method": fp.method,
        "map_eigenvalues": [[e.real, e.imag] for e in np.asarray(rep_map.eigenvalues, dtype=complex)],
        "generator_eigenvalues": [[e.real, e.imag] for e in np.asarray(rep_gen.eigenvalues, dtype=complex)],
        "hyperbolic": rep_map.hyperbolic,
        "unstable_count": rep_map.unstable_count,
        "distance_to_unit_circle": rep_map.distance,
    }
    manifest.add(mio.write_json(out / "fixed_point.json", data))
    manifest.add(mio.write_trajectory(out / "fixed_point.csv", [0.0], fp.state[None]))
    return EXIT_OK


def cmd_manifold(cfg, out: Path, manifest) -> int:
    tmap = build_time_map(cfg)
    chart, _, info = build_chart(cfg, tmap)
    cm = ChartMap(tmap, chart)
    sec, rep = run_transform(cfg, initial_section(cfg, chart), cm)
    manifest.stage("graph_transform", "converged" if rep.converged else "not converged", iterations=rep.iterations)
    report = {**rep.to_dict(), **_diagnostics(sec, cm), "chart": info}
    manifest.add(*mio.write_section(out / "section.csv", sec, {"chart": info}))
    manifest.add(mio.write_json(out / "transform_report.json", report))
    return EXIT_OK if rep.converged else EXIT_NUMERICAL


def cmd_check_conditions(cfg, out: Path, manifest) -> int:
    tmap = build_time_map(cfg)
    chart, split, info = build_chart(cfg, tmap)
    cm = ChartMap(tmap, chart)
    sec = initial_section(cfg, chart)
    ns = cfg.experiment.samples
    if chart.m == 1:
        samples = np.linspace(-cfg.manifold.rho, cfg.manifold.rho, ns)[:, None]
    else:
        rng = np.random.default_rng(cfg.experiment.seed)
        samples = rng.uniform(-cfg.manifold.rho, cfg.manifold.rho, size=(ns, chart.m))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        cc = check_conditions(cm, sec, samples, cfg.experiment.theta1)
        data = cc.to_dict()
        lyap = lyapunov_type_numbers(cm)
        data.update({"nu": lyap.nu, "theta": lyap.theta, "lyapunov_horizon": lyap.horizon})
        if split is not None:
            dich = dichotomy_constants(split, cfg.model.tau, map_tau=cfg.model.tau, seed=cfg.experiment.seed)
            data["a"] = dich.a
            data["dichotomy"] = dich.to_dict()
    data["chart"] = info
    manifest.stage("conditions", "pass" if cc.passed else "fail")
    manifest.add(mio.write_json(out / "conditions.json", data))
    return EXIT_OK


def _inertial_maps(cfg):
    tmap = build_time_map(cfg)
    R = cfg.experiment.cutoff_R
    if R is None:
        return tmap, tmap
    lin = TimeMap(LinearPart(tmap.model), tmap.scheme)
    return truncate_map(lin, tmap, CutoffSpec(R)), tmap


def cmd_inertial(cfg, out: Path, manifest) -> int:
    cfg.splitting.mode = "index"  # the inertial chart is always the leading-mode splitting
    gmap, full = _inertial_maps(cfg)
    chart, _, info = build_chart(cfg, full)
    cm = ChartMap(gmap, chart)
    sec, rep = run_transform(cfg, initial_section(cfg, chart), cm)
    manifest.stage("graph_transform", "converged" if rep.converged else "not converged", iterations=rep.iterations)
    ex = cfg.experiment
    rng = np.random.default_rng(ex.seed)
    n = full.dim
    starts = rng.normal(scale=ex.initial_amplitude / math.sqrt(n), size=(ex.trajectories, n))
    steps = int(math.ceil(ex.transient / cfg.model.tau))
    state = starts.copy()
    first = [state[0].copy()]
    for _ in range(steps):
        state = full(state)
        first.append(state[0].copy())
    x, y = chart.coordinates(state)
    inside = np.max(np.abs(x), axis=1) <= sec.rho
    dist = np.full(state.shape[0], np.nan)
    if np.any(inside):
        dist[inside] = cm.fiber_norm(y[inside] - sec.evaluate(x[inside]))
    tube = cfg.eps
    report = {
        **rep.to_dict(),
        **_diagnostics(sec, cm),
        "chart": info,
        "cutoff_R": ex.cutoff_R,
        "eps": tube,
        "trajectory_time": steps * cfg.model.tau,
        "trajectory_distances": dist,
        "max_trajectory_distance": float(np.nanmax(dist)) if np.any(inside) else None,
        "all_inside_ball": bool(np.all(inside)),
        "within_5eps": bool(np.all(inside) and np.nanmax(dist) <= 5 * tube),
    }
    manifest.add(*mio.write_section(out / "section.csv", sec, {"chart": info}))
    manifest.add(mio.write_json(out / "inertial_report.json", report))
    times = np.arange(steps + 1) * cfg.model.tau
    manifest.add(mio.write_trajectory(out / "trajectory.csv", times, np.array(first)))
    from .persistence import PointCloud

    manifest.add(mio.write_cloud(out / "final_states.csv", PointCloud.of(state, "trajectorySample")))
    return EXIT_OK if rep.converged else EXIT_NUMERICAL


def cmd_converge(cfg, out: Path, manifest) -> int:
    pb = cfg.perturbation
    if pb.kind is None:
        raise ConfigError("converge needs perturbation.kind", key="perturbation.kind")
    if cfg.model.name == "NSETorus" and pb.kind == "ModeTruncation":
        params = {k: v for k, v in cfg.model.parameters.items() if k != "N"}
        dts = pb.dt or [cfg.model.dt] * len(pb.modes)
        table, _ = nse_resolution_study(
            params, list(zip(pb.modes, dts)), (cfg.model.parameters["N"], cfg.model.dt), cfg.model.tau,
            cfg.manifold.rho, cfg.manifold.g,
        )
    else:
        tmap = build_time_map(cfg)
        chart, _, _ = build_chart(cfg, tmap)
        specs = []
        for i, h in enumerate(pb.h):
            specs.append(PerturbationSpec(
                pb.kind, h,
                truncation_modes=pb.modes[i] if pb.modes else None,
                dt=pb.dt[i] if pb.dt else None,
                analytic_form=pb.analytic_form,
            ))
        mf = cfg.manifold
        table = convergence_study(tmap, chart, specs, initial_section(cfg, chart), mf.tol_c0, mf.tol_c1,
                                  mf.max_iter)
    ok = all(r.converged for r in table.rows)
    manifest.stage("convergence", "ok" if ok else "rows flagged", rows=len(table.rows))
    manifest.add(*mio.write_convergence(out / "convergence.csv", out / "convergence.json", table))
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_appendix(cfg, out: Path, manifest) -> int:
    ex, mf, mb = cfg.experiment, cfg.manifold, cfg.model
    if mb.name != "AppendixPolar":
        raise ConfigError("appendix-demo needs model.name = AppendixPolar", key="model.name")
    settings = AppendixSettings(
        tau=mb.tau, dt=mb.dt, rho=mf.rho, g=mf.g, density=ex.density, iterations=ex.iterations,
        bound_box=ex.bound_box if ex.bound_box is not None else 4.0 * ex.R0,
        prepared=bool(mb.parameters.get("prepared", True)), r_cap=float(mb.parameters.get("r_cap", 2.0)),
        margin=ex.margin,
    )
    rep = appendix_demo(ex.h_values, settings)
    ok = all(r.converged for r in rep.rows)
    manifest.stage("appendix", "ok" if ok else "not converged")
    rows = [(r.h, None, None, r.dist_fwd, r.dist_bwd) for r in rep.rows]
    manifest.add(mio.write_csv(out / "appendix.csv", ["h", "c0", "c1", "dist_fwd", "dist_bwd"], rows))
    manifest.add(mio.write_json(out / "appendix.json", rep.to_dict()))
    for r in rep.rows:
        tag = f"{r.h:g}"
        manifest.add(mio.write_cloud(out / f"cloud_h{tag}_unperturbed.csv", rep.reference_cloud))
        manifest.add(mio.write_cloud(out / f"cloud_h{tag}_perturbed.csv", r.cloud))
    return EXIT_OK if ok else EXIT_NUMERICAL


PIPELINES = {
    "fixed-point": cmd_fixed_point,
    "manifold": cmd_manifold,
    "inertial": cmd_inertial,
    "converge": cmd_converge,
    "appendix-demo": cmd_appendix,
    "check-conditions": cmd_check_conditions,
}
assert set(PIPELINES) == set(SUBCOMMANDS)


# ---------------------------------------------------------------------------
# dispatch


def output_directory(arg_out: str | None, cfg: RunConfig | None, subcommand: str) -> Path:
    """``--out`` beats the config, which beats ``MANIFORGE_OUT``; the fallback is ``./maniforge-runs``."""
    if arg_out:
        return Path(arg_out)
    if cfg is not None and cfg.output.directory:
        return Path(cfg.output.directory)
    env = os.environ.get("MANIFORGE_OUT")
    base = Path(env) if env else Path("maniforge-runs")
    tag = cfg.hash()[:12] if cfg is not None else "invalid-config"
    return base / f"{subcommand}-{tag}"


def _write_error(out: Path | None, error_file: str | None, code: int, exc: BaseException):
    payload = {
        "exit_code": code,
        "type": type(exc).__name__,
        "message": str(exc),
        "line": getattr(exc, "line", None),
        "key": getattr(exc, "key", None),
    }
    if code == EXIT_INTERNAL:
        payload["traceback"] = traceback.format_exception(type(exc), exc, exc.__traceback__)
    target = Path(error_file) if error_file else (out / "error.json" if out is not None else None)
    if target is not None:
        try:
            mio.write_json(target, payload)
        except OSError:
            pass
    print(f"maniforge: error ({payload['type']}): {payload['message']}", file=sys.stderr)


def cli_dispatch(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="maniforge", description="Invariant manifold computations.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="run configuration file")
    parser.add_argument("--out", help="output directory (overrides the config and MANIFORGE_OUT)")
    parser.add_argument("--error-file", help="where to write the JSON error record (default: OUT/error.json)")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK

    cfg, out = None, None
    try:
        cfg = load_config(args.config)
        out = output_directory(args.out, cfg, args.subcommand)
        out.mkdir(parents=True, exist_ok=True)
    except (ConfigError, ModelError) as exc:
        out = Path(args.out) if args.out else None
        _write_error(out, args.error_file, EXIT_CONFIG, exc)
        return EXIT_CONFIG
    except OSError as exc:
        _write_error(None, args.error_file, EXIT_CONFIG, exc)
        return EXIT_CONFIG

    manifest = mio.RunManifest(args.subcommand, cfg.hash(), cfg.to_dict())
    (out / "error.json").unlink(missing_ok=True)
    mio._atomic_write(out / "config.resolved.cfg", render(cfg))
    manifest.add(out / "config.resolved.cfg")
    try:
        code = PIPELINES[args.subcommand](cfg, out, manifest)
    except (ConfigError, ModelError) as exc:
        code = EXIT_CONFIG
        _write_error(out, args.error_file, code, exc)
    except NUMERICAL_ERRORS as exc:
        code = EXIT_NUMERICAL
        _write_error(out, args.error_file, code, exc)
    except Exception as exc:  # noqa: BLE001 - mapped to the internal-error exit code
        code = EXIT_INTERNAL
        _write_error(out, args.error_file, code, exc)
    manifest.exit_code = code
    manifest.write(out)
    return code


def main(argv=None):
    sys.exit(cli_dispatch(argv))


if __name__ == "__main__":
    main()
