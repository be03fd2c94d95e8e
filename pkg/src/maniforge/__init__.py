"""Numerical invariant manifolds of time-τ maps and their persistence under perturbation."""

from .charts import Chart, ChartMap
from .config import ConfigError, RunConfig, parse_config, render
from .graph_transform import CutoffSpec, Section, iterate_to_fixed_point, truncate_map
from .hyperbolicity import check_conditions, linearize_map, spectral_split
from .models import PerturbationSpec, TimeMap, TimeStepScheme, build_model, newton_fixed_point
from .persistence import PointCloud, appendix_demo, convergence_study, hausdorff_semidistance, section_distances
from .spectral import SpectralOperator, Splitting, StateVector

__version__ = "0.1.0"

__all__ = [
    "Chart", "ChartMap", "ConfigError", "CutoffSpec", "PerturbationSpec", "PointCloud", "RunConfig", "Section",
    "SpectralOperator", "Splitting", "StateVector", "TimeMap", "TimeStepScheme", "appendix_demo",
    "build_model", "check_conditions", "convergence_study", "hausdorff_semidistance", "iterate_to_fixed_point",
    "linearize_map", "newton_fixed_point", "parse_config", "render", "section_distances", "spectral_split",
    "truncate_map",
]
