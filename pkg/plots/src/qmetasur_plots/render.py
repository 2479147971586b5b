"""Figure rendering from the text artifacts of a completed run.

Three figure kinds, one image file per task or per figure:

- ``pf_overlay``: for every task, the analytic reference front of the
  normalized benchmark families (f2 = 1 - sqrt(f1) on [0, 1]) overlaid
  with the true-evaluated final fronts of every optimization mode found
  under ``fronts/`` (lowest run id per mode).
- ``train_curves``: loss components and validation error per epoch for
  the supervised and offline-RL stages, read from
  ``metrics/train_sft.txt`` / ``metrics/train_rl.txt``.
- ``metric_bars``: mean standardized score per method with the
  significance verdicts, read from ``metrics/report.txt`` of the first
  run directory (that is where the aggregate report is written).

Every input is parsed and validated before the first byte of output
exists, so a malformed or empty artifact never leaves partial figures
behind. Styling, ordering and dpi are fixed and no timestamps are
embedded: the same inputs render byte-identical images.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import PlotError
from .tables import Table, load_table, require_rows

KINDS = ("pf_overlay", "train_curves", "metric_bars")

_FRONT_FILE = re.compile(r"^([a-z0-9]+)_run(\d+)_task(\d+)\.txt$")
_MODE_STYLE = {"real": "tab:blue", "qmetasur": "tab:orange", "rbfn": "tab:green"}
_EXTRA_COLORS = ("tab:red", "tab:purple", "tab:brown", "tab:pink", "tab:gray")
_SAVE = {"dpi": 150, "metadata": {"Software": None}}


@dataclass(frozen=True)
class PlotJob:
    """What to render: run directories, figure kind, output directory."""

    run_dirs: tuple[Path, ...]
    kind: str
    out_dir: Path

    def __post_init__(self):
        if self.kind not in KINDS:
            raise PlotError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.run_dirs:
            raise PlotError("need at least one run directory")


# ---------------------------------------------------------------------------
# collection (validates, no output)


def collect_pf_series(run_dir: Path) -> dict[int, list[tuple[str, list[float], list[float]]]]:
    """Per task: labeled (f1, f2) series, the reference front first."""
    fronts_dir = Path(run_dir) / "fronts"
    if not fronts_dir.is_dir():
        raise PlotError(f"{fronts_dir}: no fronts directory")
    chosen: dict[tuple[str, int], tuple[int, Path]] = {}
    for p in sorted(fronts_dir.iterdir()):
        m = _FRONT_FILE.match(p.name)
        if m is None:
            continue
        mode, run, task = m.group(1), int(m.group(2)), int(m.group(3))
        if (mode, task) not in chosen or run < chosen[(mode, task)][0]:
            chosen[(mode, task)] = (run, p)
    if not chosen:
        raise PlotError(
            f"{fronts_dir}: no front tables named <mode>_runNN_taskT.txt"
        )
    grid = np.linspace(0.0, 1.0, 256)
    reference = ("reference", list(grid), list(1.0 - np.sqrt(grid)))
    series: dict[int, list[tuple[str, list[float], list[float]]]] = {}
    for (mode, task), (_, path) in sorted(chosen.items()):
        table = require_rows(load_table(path, "front"))
        f1, f2 = table.floats("f1_true"), table.floats("f2_true")
        order = np.argsort(f1, kind="stable")
        pts = (mode, [f1[i] for i in order], [f2[i] for i in order])
        series.setdefault(task, [reference]).append(pts)
    return series


def collect_train_curves(run_dir: Path) -> list[tuple[str, Table]]:
    """The training reports present, as (stage, table) pairs in order."""
    out = []
    for stage in ("sft", "rl"):
        path = Path(run_dir) / "metrics" / f"train_{stage}.txt"
        if path.exists():
            out.append((stage, require_rows(load_table(path, "train_report"))))
    if not out:
        raise PlotError(
            f"{Path(run_dir) / 'metrics'}: neither train_sft.txt nor train_rl.txt"
        )
    return out


def collect_metric_bars(run_dir: Path) -> Table:
    return require_rows(load_table(Path(run_dir) / "metrics" / "report.txt", "report"))


# ---------------------------------------------------------------------------
# drawing


def _mode_color(mode: str, n_extra: int) -> str:
    if mode in _MODE_STYLE:
        return _MODE_STYLE[mode]
    return _EXTRA_COLORS[n_extra % len(_EXTRA_COLORS)]


def _draw_pf(prefix, series, out_dir) -> list[Path]:
    written = []
    for task in sorted(series):
        fig, ax = plt.subplots(figsize=(5.0, 4.0))
        n_extra = 0
        for label, f1, f2 in series[task]:
            if label == "reference":
                ax.plot(f1, f2, color="black", linestyle="--", linewidth=1.0,
                        label="reference front")
                continue
            color = _mode_color(label, n_extra)
            n_extra += label not in _MODE_STYLE
            ax.plot(f1, f2, color=color, marker="o", markersize=4.0,
                    linewidth=1.0, alpha=0.85, label=label)
        ax.set_xlabel("objective 1")
        ax.set_ylabel("objective 2")
        ax.set_title(f"final fronts, task {task}")
        ax.legend(loc="upper right", fontsize=8)
        fig.tight_layout()
        path = out_dir / f"{prefix}pf_overlay_task{task}.png"
        fig.savefig(path, **_SAVE)
        plt.close(fig)
        written.append(path)
    return written


def _draw_train(prefix, stages, out_dir) -> list[Path]:
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6.0, 5.0), sharex=True)
    offset = 0
    for stage, table in stages:
        epochs = [e + offset for e in table.floats("epoch")]
        for col in table.columns[1:-3]:  # loss columns sit before val_smae
            top.plot(epochs, table.floats(col), marker=".", linewidth=1.0,
                     label=f"{stage} {col}")
        bottom.plot(epochs, table.floats("val_smae"), marker=".",
                    linewidth=1.0, label=f"{stage} validation")
        offset = max(epochs)
    top.set_ylabel("training loss")
    top.set_yscale("log")
    top.legend(fontsize=8)
    bottom.set_ylabel("validation sMAE")
    bottom.set_xlabel("epoch (stages concatenated)")
    bottom.legend(fontsize=8)
    fig.tight_layout()
    path = out_dir / f"{prefix}train_curves.png"
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return [path]


def _draw_bars(prefix, table, out_dir) -> list[Path]:
    methods = table.column("method")
    values = table.floats("mss")
    verdicts = table.column("verdict_vs_qmetasur")
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    colors = [_mode_color(m, i) for i, m in enumerate(methods)]
    bars = ax.bar(range(len(methods)), values, color=colors, width=0.6)
    for bar, verdict in zip(bars, verdicts):
        if verdict != "na":
            ax.annotate(verdict, (bar.get_x() + bar.get_width() / 2.0,
                                  bar.get_height()),
                        ha="center", va="bottom", fontsize=10)
    ax.set_xticks(range(len(methods)), methods)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_ylabel("mean standardized score (lower is better)")
    ax.set_title("method comparison")
    fig.tight_layout()
    path = out_dir / f"{prefix}metric_bars.png"
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return [path]


# ---------------------------------------------------------------------------
# entry point


def render(job: PlotJob) -> list[Path]:
    """Render one figure kind; returns the image paths written."""
    if job.kind == "metric_bars":
        prepared = [("", collect_metric_bars(job.run_dirs[0]))]
    else:
        collect = collect_pf_series if job.kind == "pf_overlay" else collect_train_curves
        prefix = lambda d: f"{Path(d).name}_" if len(job.run_dirs) > 1 else ""
        prepared = [(prefix(d), collect(d)) for d in job.run_dirs]

    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    draw = {"pf_overlay": _draw_pf, "train_curves": _draw_train,
            "metric_bars": _draw_bars}[job.kind]
    written: list[Path] = []
    for pre, data in prepared:
        written.extend(draw(pre, data, out_dir))
    return written
