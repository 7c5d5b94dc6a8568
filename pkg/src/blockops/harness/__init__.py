from .config import ExperimentConfig, ConfigError, config_hash, parse_override
from .training import run_trial, evaluate_accuracy, build_model
from .grid import GridSpec, grid_search
