"""Deterministic report files for experiment rows.

Everything written here is a pure function of the rows: columns are
fixed, rows are sorted by (grid id, seed), floats are serialized with
repr so they survive a read/write cycle bit for bit, and lines end in
a bare newline on every platform. Re-emitting the same rows therefore
reproduces every file byte for byte. Wall time is deliberately absent
from all of it; that field exists for operators watching a run, not
for files that must compare equal across reruns.

Alongside the delimited tables the report renders one line figure per
table that has a keep-rate axis (accuracy against keep rate, one line
per strategy or series), plus a small plot-data file holding exactly
the numbers each figure draws.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

from ..errors import ParseError
from .experiments import ResultRow

__all__ = [
    "REPORT_COLUMNS",
    "write_rows",
    "read_rows",
    "split_grid_id",
    "plot_series",
    "emit_report",
]

REPORT_COLUMNS = (
    "grid_id",
    "seed",
    "accuracy",
    "matching_rate",
    "total_macs",
    "relative_macs",
)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_rows(path: str | Path, rows: Sequence[ResultRow]) -> Path:
    """Write rows as a delimited table; empty input leaves just the header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(rows, key=lambda r: (r.grid_id, r.seed))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for r in ordered:
            writer.writerow(
                [
                    r.grid_id,
                    r.seed,
                    _fmt(r.accuracy),
                    _fmt(r.matching_rate),
                    r.total_macs,
                    _fmt(r.relative_macs),
                ]
            )
    return path


def read_rows(path: str | Path) -> list[ResultRow]:
    """Parse a table written by write_rows; wall time comes back as zero."""
    path = Path(path)
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path} is empty, expected a header row") from None
        if tuple(header) != REPORT_COLUMNS:
            raise ParseError(
                f"{path} header {header} does not match {list(REPORT_COLUMNS)}"
            )
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(REPORT_COLUMNS):
                raise ParseError(
                    f"{path}:{lineno} has {len(rec)} fields, expected "
                    f"{len(REPORT_COLUMNS)}"
                )
            try:
                rows.append(
                    ResultRow(
                        grid_id=rec[0],
                        seed=int(rec[1]),
                        accuracy=float(rec[2]),
                        matching_rate=float(rec[3]),
                        total_macs=int(rec[4]),
                        relative_macs=float(rec[5]),
                    )
                )
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno} bad field: {exc}") from exc
    return rows


def split_grid_id(grid_id: str) -> tuple[float | None, str]:
    """Pull the keep rate out of a grid id; the rest becomes the series name."""
    keep = None
    series = []
    for part in grid_id.split("/"):
        if keep is None and part.startswith("keep"):
            try:
                keep = float(part[4:])
                continue
            except ValueError:
                pass
        series.append(part)
    return keep, "/".join(series) if series else grid_id


def plot_series(rows: Sequence[ResultRow]) -> dict[str, list[tuple[float, float]]]:
    """Mean accuracy over seeds per (series, keep rate), keyed by series.

    Rows whose grid id carries no keep rate are skipped; a table needs at
    least two distinct keep values before a line is worth drawing.
    """
    sums: dict[tuple[str, float], list[float]] = {}
    for r in rows:
        keep, series = split_grid_id(r.grid_id)
        if keep is None:
            continue
        sums.setdefault((series, keep), []).append(r.accuracy)
    out: dict[str, list[tuple[float, float]]] = {}
    for (series, keep), accs in sorted(sums.items()):
        out.setdefault(series, []).append((keep, sum(accs) / len(accs)))
    return out


def _write_plot_data(
    path: Path, series: Mapping[str, list[tuple[float, float]]]
) -> Path:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(("series", "keep_rate", "accuracy"))
        for name in sorted(series):
            for keep, acc in series[name]:
                writer.writerow((name, _fmt(keep), _fmt(acc)))
    return path


def _render_figure(
    path: Path, title: str, series: Mapping[str, list[tuple[float, float]]]
) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for name in sorted(series):
        pts = series[name]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("keep rate")
    ax.set_ylabel("accuracy (%)")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    # Stripping the writer's name tag keeps the bytes stable across
    # environments; nothing else in the PNG depends on when it was made.
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path


def _summary_lines(tables: Mapping[str, Sequence[ResultRow]]) -> list[str]:
    lines = ["experiment summary", "=" * len("experiment summary"), ""]
    for name in sorted(tables):
        rows = tables[name]
        lines.append(f"[{name}]")
        lines.append(f"rows: {len(rows)}")
        if not rows:
            lines.append("")
            continue
        by_grid: dict[str, list[ResultRow]] = {}
        for r in rows:
            by_grid.setdefault(r.grid_id, []).append(r)
        lines.append(f"grid points: {len(by_grid)}")
        means = {
            gid: sum(r.accuracy for r in rs) / len(rs) for gid, rs in by_grid.items()
        }
        best = min(sorted(means), key=lambda g: -means[g])
        worst = min(sorted(means), key=lambda g: means[g])
        lines.append(f"best accuracy: {_fmt(means[best])} at {best}")
        lines.append(f"worst accuracy: {_fmt(means[worst])} at {worst}")
        lo = min(r.relative_macs for r in rows)
        lines.append(f"deepest compute cut: {_fmt(lo)} of the unpruned forward")
        lines.append("")
    return lines


def emit_report(
    out_dir: str | Path,
    tables: Mapping[str, Sequence[ResultRow]],
    *,
    figures: bool = True,
) -> list[Path]:
    """Write every table, a text summary, and per-table plot data.

    Tables with a keep-rate axis additionally get a rendered line figure;
    pass figures=False to skip the image files (the plot-data files that
    feed them are always written). Returns the paths written, sorted.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(tables):
        rows = tables[name]
        written.append(write_rows(out / f"{name}.csv", rows))
        series = plot_series(rows)
        drawable = {
            s: pts for s, pts in series.items() if len(pts) >= 2
        }
        if drawable:
            written.append(_write_plot_data(out / f"{name}_plot.csv", drawable))
            if figures:
                written.append(_render_figure(out / f"{name}.png", name, drawable))
    summary = out / "summary.txt"
    summary.write_text("\n".join(_summary_lines(tables)) + "\n")
    written.append(summary)
    return sorted(written)
