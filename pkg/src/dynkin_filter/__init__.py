"""Perpetual game call option on an asset with an unobserved dividend indicator.

Modules
-------
model_core
    Parameters, payoffs and the (x, y) <-> (z, y) transform.
closed_form
    Complete-information benchmarks on the edges y = 0 and y = 1.
vi_solver
    Double-obstacle solver in (z, y) and free-boundary extraction.
path_engine
    Filtered and raw price simulation, exact filter, hitting times.
game_eval
    Monte Carlo game functional and equilibrium checks.
checks
    Named verification checks shared by the CLI and the tests.
cli_io
    Configuration, orchestration and artifacts.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .closed_form import CompleteInfoSolution, classify_case, edge_value, perpetual_call
from .errors import DynkinError
from .model_core import ModelParams, StatePoint, TransformedPoint, validate_params
from .path_engine import PathBatch, SimConfig, simulate_filtered
from .vi_solver import FreeBoundaries, GridSpec, ValueSurface, default_grid, extract_boundaries, solve

__all__ = [
    "CompleteInfoSolution",
    "DynkinError",
    "FreeBoundaries",
    "GridSpec",
    "ModelParams",
    "PathBatch",
    "SimConfig",
    "StatePoint",
    "TransformedPoint",
    "ValueSurface",
    "classify_case",
    "default_grid",
    "edge_value",
    "extract_boundaries",
    "perpetual_call",
    "simulate_filtered",
    "solve",
    "validate_params",
    "__version__",
]
