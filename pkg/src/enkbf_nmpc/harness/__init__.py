"""Configuration, experiment runners and the command-line interface."""
from .config import (ConfigError, ExperimentConfig, apply_overrides, config_from_string, config_to_string,
                     default_config, load_config, save_config)
from .experiments import (ExperimentResult, build_problem, run_experiment, run_fixed_horizon_experiment,
                          run_linear_consistency_check, run_mpc_experiment)
