"""CSV emission and figure rendering for simulation reports."""

from __future__ import annotations

import csv
import io
from pathlib import Path

from .errors import StorageIOError
from .sim import CSV_COLUMNS, MetricsReport


def report_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in report.rows:
        writer.writerow(row.csv_values())
    return buf.getvalue()


def emit_report(report: MetricsReport, path) -> Path:
    path = Path(path)
    try:
        path.write_text(report_csv(report))
    except OSError as exc:
        raise StorageIOError(f"cannot write report {path}: {exc.strerror or exc}") from None
    return path


def _series(report: MetricsReport):
    by_name: dict[str, list] = {}
    for row in report.rows:
        by_name.setdefault(row.scenario, []).append(row)
    for rows in by_name.values():
        rows.sort(key=lambda r: r.send_rate_tps)
    return by_name


_PANELS = (
    ("throughput_tps", "create throughput (TPS)"),
    ("total_time_s", "time to record all creates (s)"),
    ("query_throughput_tps", "catch-up read rate (tx/s)"),
    ("catchup_read_s", "new-miner catch-up read (s)"),
    ("cpu_rate", "CPU units per simulated s"),
    ("energy_units", "total energy units"),
    ("ram_mib_model", "modeled peak RAM (MiB)"),
    ("avg_latency_s", "mean commit latency (s)"),
)


def render_figures(report: MetricsReport, path) -> Path:
    """One PNG with a panel per metric, x axis = send rate."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    series = _series(report)
    fig, axes = plt.subplots(2, 4, figsize=(16, 7), constrained_layout=True)
    for ax, (attr, label) in zip(axes.flat, _PANELS):
        for name, rows in series.items():
            ax.plot([r.send_rate_tps for r in rows], [getattr(r, attr) for r in rows],
                    marker="o", label=name)
        ax.set_xlabel("send rate (TPS)")
        ax.set_title(label, fontsize=10)
        ax.grid(alpha=0.3)
    axes.flat[0].legend(fontsize=8)
    try:
        fig.savefig(path, dpi=110)
    except OSError as exc:
        raise StorageIOError(f"cannot write figure {path}: {exc.strerror or exc}") from None
    finally:
        plt.close(fig)
    return path
