"""Benchmark harness: experiment grids, deterministic reports, and the CLI."""

from .experiments import (
    DEFAULT_KEEP_RATES,
    DEFAULT_LOCATION_SETS,
    BenchInputs,
    ExperimentSpec,
    ResultRow,
    VariantInputs,
    run_arch_ablation,
    run_cross_dataset,
    run_keep_rate_sweep,
    run_location_ablation,
    run_tuning_grid,
)
from .report import (
    REPORT_COLUMNS,
    emit_report,
    plot_series,
    read_rows,
    split_grid_id,
    write_rows,
)

__all__ = [
    "DEFAULT_KEEP_RATES",
    "DEFAULT_LOCATION_SETS",
    "BenchInputs",
    "ExperimentSpec",
    "ResultRow",
    "VariantInputs",
    "run_arch_ablation",
    "run_cross_dataset",
    "run_keep_rate_sweep",
    "run_location_ablation",
    "run_tuning_grid",
    "REPORT_COLUMNS",
    "emit_report",
    "plot_series",
    "read_rows",
    "split_grid_id",
    "write_rows",
]
