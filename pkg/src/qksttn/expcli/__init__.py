"""Experiment harness: configuration, pipelines, persistence, plots and CLI."""

from qksttn.expcli.config import RunConfig, TaskConfig, dump_config, load_config
from qksttn.expcli.fit import PowerLawFit, fit_power_law
from qksttn.expcli.pipelines import (
    StageError,
    benchmark_matrix,
    grid_search,
    prepare_data,
    replay,
    run,
    scaling_study,
    streams,
)
from qksttn.expcli.plots import band_stats, emit_plots, heatmap_svg, line_chart_svg
from qksttn.expcli.store import (
    ExperimentRecord,
    load_model,
    read_csv,
    read_record,
    save_model,
    write_csv,
    write_record,
)

__all__ = [
    "ExperimentRecord", "PowerLawFit", "RunConfig", "StageError", "TaskConfig", "band_stats",
    "benchmark_matrix", "dump_config", "emit_plots", "fit_power_law", "grid_search",
    "heatmap_svg", "line_chart_svg", "load_config", "load_model", "prepare_data", "read_csv",
    "read_record", "replay", "run", "save_model", "scaling_study", "streams", "write_csv",
    "write_record",
]
