"""Contract tests against real artifacts of a completed toy run.

The fixture fabricates the run by driving the ``qmetasur`` console
script in subprocesses; this package never imports the toolkit, and
one test pins that the toolkit never imports this package either.
"""

import hashlib
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from qmetasur_plots import PlotError, PlotJob, render
from qmetasur_plots.render import collect_pf_series, collect_train_curves

_MAKE_CONFIG = """
import sys
from dataclasses import replace
from pathlib import Path
from qmetasur.cli import ModelSpec, load_run_config, render_config
from qmetasur.decoding import DecodeConfig
from qmetasur.evo import MaTdeParams
from qmetasur.training import RlConfig, SftConfig

out, path = sys.argv[1], sys.argv[2]
cfg = replace(
    load_run_config(),
    name="toy",
    out=out,
    seed=0,
    runs=2,
    budget=12,
    families=("Sphere", "MeanScale"),
    n_tasks=1,
    n_dim=2,
    n_per_task=8,
    split=(3, 1),
    augment=(1, 0, 0),
    model=ModelSpec(d_model=16, n_enc_layers=1, n_dec_layers=1, n_heads=2, d_ff=32),
    sft=SftConfig(epochs=2, batch_size=4),
    rl=RlConfig(epochs=1, batch_size=8),
    decode=DecodeConfig(mode="advantage", beta=3.0, max_len=24),
    evo=MaTdeParams(pop_size=4, a_cap=20),
)
Path(path).write_text(render_config(cfg))
"""


def _run(args):
    proc = subprocess.run(args, capture_output=True, text=True)
    assert proc.returncode == 0, f"{args}: {proc.stderr}"
    return proc


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    ini = out / "toy.ini"
    _run([sys.executable, "-c", _MAKE_CONFIG, str(out), str(ini)])
    for command in (
        ["gen-data"],
        ["train"],
        ["eval-surrogate", "--mode", "qmetasur"],
        ["eval-surrogate", "--mode", "rbfn"],
        ["optimize", "--mode", "real"],
        ["optimize", "--mode", "qmetasur"],
        ["optimize", "--mode", "rbfn"],
    ):
        _run(["qmetasur", *command, "--config", str(ini)])
    _run(["qmetasur", "report", str(out / "toy")])
    return out / "toy"


def _broken_copy(toy_run, tmp_path):
    copy = tmp_path / "run"
    shutil.copytree(toy_run, copy)
    return copy


def _hashes(paths):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in paths}


# ---------------------------------------------------------------------------
# rendering


def test_pf_overlay_has_labeled_series_per_task(toy_run, tmp_path):
    series = collect_pf_series(toy_run)
    assert sorted(series) == [1, 2]
    for task, rows in series.items():
        labels = [label for label, _, _ in rows]
        assert labels[0] == "reference"
        assert {"real", "qmetasur", "rbfn"} <= set(labels)
        assert len(labels) >= 3
    written = render(PlotJob((toy_run,), "pf_overlay", tmp_path / "figs"))
    assert [p.name for p in written] == ["pf_overlay_task1.png", "pf_overlay_task2.png"]
    assert all(p.stat().st_size > 0 for p in written)


def test_train_curves_and_metric_bars_render(toy_run, tmp_path):
    stages = [stage for stage, _ in collect_train_curves(toy_run)]
    assert stages == ["sft", "rl"]
    curves = render(PlotJob((toy_run,), "train_curves", tmp_path / "a"))
    assert [p.name for p in curves] == ["train_curves.png"]
    bars = render(PlotJob((toy_run,), "metric_bars", tmp_path / "b"))
    assert [p.name for p in bars] == ["metric_bars.png"]


def test_same_inputs_render_identical_bytes(toy_run, tmp_path):
    for kind in ("pf_overlay", "train_curves", "metric_bars"):
        first = render(PlotJob((toy_run,), kind, tmp_path / f"{kind}_a"))
        second = render(PlotJob((toy_run,), kind, tmp_path / f"{kind}_b"))
        assert _hashes(first) == _hashes(second)


def test_multiple_run_dirs_prefix_outputs(toy_run, tmp_path):
    twin = tmp_path / "twin"
    shutil.copytree(toy_run, twin)
    written = render(PlotJob((toy_run, twin), "pf_overlay", tmp_path / "figs"))
    names = {p.name for p in written}
    assert names == {
        f"{d.name}_pf_overlay_task{t}.png" for d in (toy_run, twin) for t in (1, 2)
    }


# ---------------------------------------------------------------------------
# failure modes


def test_schema_mismatch_names_file_and_line(toy_run, tmp_path):
    copy = _broken_copy(toy_run, tmp_path)
    target = copy / "fronts" / "real_run00_task1.txt"
    lines = target.read_text().splitlines()
    lines[0] = "# qmetasur.optimize.v1"
    target.write_text("\n".join(lines) + "\n")
    with pytest.raises(PlotError, match=r"real_run00_task1\.txt:1: expected qmetasur\.front"):
        render(PlotJob((copy,), "pf_overlay", tmp_path / "figs"))
    assert not (tmp_path / "figs").exists()


def test_ragged_row_names_file_and_line(toy_run, tmp_path):
    copy = _broken_copy(toy_run, tmp_path)
    target = copy / "fronts" / "real_run00_task1.txt"
    n_lines = len(target.read_text().splitlines())
    with target.open("a") as fh:
        fh.write("0.5,0.5\n")
    with pytest.raises(PlotError, match=rf"real_run00_task1\.txt:{n_lines + 1}: row has 2 cells"):
        render(PlotJob((copy,), "pf_overlay", tmp_path / "figs"))


def test_empty_front_errors_without_partial_output(toy_run, tmp_path):
    copy = _broken_copy(toy_run, tmp_path)
    target = copy / "fronts" / "qmetasur_run00_task2.txt"
    target.write_text("\n".join(target.read_text().splitlines()[:2]) + "\n")
    out_dir = tmp_path / "figs"
    with pytest.raises(PlotError, match=r"qmetasur_run00_task2\.txt: table has no data rows"):
        render(PlotJob((copy,), "pf_overlay", out_dir))
    assert not out_dir.exists()


def test_missing_report_names_the_file(toy_run, tmp_path):
    copy = _broken_copy(toy_run, tmp_path)
    (copy / "metrics" / "report.txt").unlink()
    with pytest.raises(PlotError, match=r"report\.txt"):
        render(PlotJob((copy,), "metric_bars", tmp_path / "figs"))


def test_unknown_kind_rejected(toy_run, tmp_path):
    with pytest.raises(PlotError, match="kind must be one of"):
        PlotJob((toy_run,), "sparklines", tmp_path / "figs")


# ---------------------------------------------------------------------------
# command line


def test_cli_renders_and_is_deterministic(toy_run, tmp_path):
    cmd = ["qmetasur-plots", str(toy_run), "--kind", "pf_overlay"]
    first = _run(cmd + ["--out", str(tmp_path / "a")])
    second = _run(cmd + ["--out", str(tmp_path / "b")])
    assert first.stdout.count("wrote ") == 2
    assert _hashes((tmp_path / "a").iterdir()) == _hashes((tmp_path / "b").iterdir())


def test_cli_reports_errors_as_json(toy_run, tmp_path):
    copy = _broken_copy(toy_run, tmp_path)
    shutil.rmtree(copy / "fronts")
    proc = subprocess.run(
        ["qmetasur-plots", str(copy), "--kind", "pf_overlay", "--out", str(tmp_path / "f")],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 1
    payload = json.loads(proc.stderr.strip().splitlines()[-1])
    assert payload["error"] == "PlotError"
    assert "fronts" in payload["detail"]


# ---------------------------------------------------------------------------
# separation between the packages


def test_toolkit_never_imports_this_package():
    probe = (
        "import sys, qmetasur, qmetasur.cli, qmetasur.metrics;"
        "print(any(m.startswith('qmetasur_plots') for m in sys.modules))"
    )
    proc = _run([sys.executable, "-c", probe])
    assert proc.stdout.strip() == "False"


def test_this_package_never_imports_the_toolkit():
    probe = (
        "import sys, qmetasur_plots, qmetasur_plots.cli;"
        "print(any(m == 'qmetasur' or m.startswith('qmetasur.') for m in sys.modules))"
    )
    proc = _run([sys.executable, "-c", probe])
    assert proc.stdout.strip() == "False"
