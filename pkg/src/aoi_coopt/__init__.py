"""Scheduling remote-inference updates under feature-length and freshness trade-offs."""
from .core import Action, SourceConfig, SystemState, TransmissionModel, parse_transmission, validate_action
from .errmodel import InferenceErrorTable, JakesParams, jakes_error_table, load_csv, save_csv, synthetic_table
from .index import GammaTable, gamma, gamma_table
from .tifl import TiflPolicy, solve_tifl
from .tvfl import TvflPolicy, solve_tvfl

__version__ = "0.1.0"
