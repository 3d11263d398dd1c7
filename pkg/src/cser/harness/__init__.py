from .config import ConfigError, ProblemConfig, RunConfig, load_config, dump_config
from .runner import Record, RunMetrics, emit_plot_data, run, run_seed, sweep, ratio_table_configs, RATIO_TABLE

__all__ = [
    "ConfigError",
    "ProblemConfig",
    "Record",
    "RunConfig",
    "RunMetrics",
    "RATIO_TABLE",
    "dump_config",
    "emit_plot_data",
    "load_config",
    "run",
    "run_seed",
    "sweep",
    "ratio_table_configs",
]
