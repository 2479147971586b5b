"""Batch orchestration: data generation, training, evaluation and reports.

One run lives in one directory, `<out>/<name>/`, laid out as::

    config              resolved-configuration snapshot (reproduces the run)
    seeds_<command>.txt seed ledger, one table per command, overwritten
    data/               suite, train/test splits, augmentation, vocabulary,
                        and a sha256 manifest of all of them
    ckpt/               per-epoch and final model checkpoints
    metrics/            evaluation, optimization, audit and report tables
    fronts/             final Pareto set of every (mode, run, task)
    trace/              evolution trace of every (mode, run)

Configuration is a single INI-style text file of `[section]` blocks with
`key = value` lines; every key has a default, so an empty or absent file
is a complete desk-scale experiment (2 families x 4 tasks). Environment
variables override the top-level `[run]` keys and command-line flags
override both:

    QMETASUR_NAME    [run] name      QMETASUR_SEED    [run] seed
    QMETASUR_OUT     [run] out       QMETASUR_RUNS    [run] runs
    QMETASUR_BUDGET  [run] budget

Every emitted table is delimiter-separated text with a one-line schema
header. Re-running a command with the same configuration and seeds
rewrites byte-identical tables; the only exception is the training log,
whose wall-time column measures the actual run.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .dataset import (
    RewardConfig,
    augment_dataset,
    build_offline,
    load_augmented,
    load_dataset,
    save_augmented,
    save_dataset,
    split,
)
from .decoding import DecodeConfig, SurrogateOracle, predict_objectives_batch
from .errors import ConfigError, DomainError, ToolkitError
from .evo import MaTdeParams, TrueOracle, run_mo_matde
from .metrics import igd, mss, mss_per_run, r2, read_table, smae, wilcoxon_signed_rank, write_table
from .rbfn import fit_rbfn_oracle
from .seqmodel import ModelConfig, SeqModel, load_checkpoint, save_checkpoint
from .sne import SneCodec, SneConfig, Vocab, build_vocab
from .tasks import FAMILIES, MtmooSuite, load_suite, make_suite, merge_suites, save_suite, true_pf
from .training import (
    RlConfig,
    SftConfig,
    TrainReport,
    build_episodes,
    save_report,
    train_rl,
    train_sft,
)

OPTIMIZE_MODES = ("real", "qmetasur", "rbfn")
SURROGATE_MODES = ("qmetasur", "rbfn")

ENV_OVERRIDES: dict[str, tuple[str, str]] = {
    "QMETASUR_NAME": ("run", "name"),
    "QMETASUR_OUT": ("run", "out"),
    "QMETASUR_SEED": ("run", "seed"),
    "QMETASUR_RUNS": ("run", "runs"),
    "QMETASUR_BUDGET": ("run", "budget"),
}


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ModelSpec:
    """The architecture knobs that are free; data-dependent sizes (vocabulary,
    action count, sequence horizons) are derived from the run artifacts."""

    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("d_model", "n_enc_layers", "n_dec_layers", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")


@dataclass(frozen=True)
class RunConfig:
    name: str
    out: str
    seed: int
    runs: int
    budget: int
    families: tuple[str, ...]
    n_tasks: int
    n_dim: int
    suite_seed: int
    bounds: tuple[float, float]
    n_per_task: int
    split: tuple[int, int]
    augment: tuple[int, int, int]
    sne: SneConfig
    reward: RewardConfig
    model: ModelSpec
    sft: SftConfig
    rl: RlConfig
    decode: DecodeConfig
    evo: MaTdeParams

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / self.name


def _conv_int(raw) -> int:
    if isinstance(raw, bool):
        raise ValueError(f"not an integer: {raw!r}")
    if isinstance(raw, int):
        return raw
    return int(str(raw).strip())


def _conv_float(raw) -> float:
    return float(str(raw).strip())


def _conv_bool(raw) -> bool:
    if isinstance(raw, bool):
        return raw
    table = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}
    key = str(raw).strip().lower()
    if key not in table:
        raise ValueError(f"not a boolean: {raw!r}")
    return table[key]


def _conv_str(raw) -> str:
    s = str(raw).strip()
    if not s:
        raise ValueError("empty value")
    return s


def _conv_names(raw) -> tuple[str, ...]:
    if isinstance(raw, tuple):
        return raw
    names = tuple(w.strip() for w in str(raw).split(",") if w.strip())
    if not names:
        raise ValueError("empty list")
    return names


# section -> key -> (converter, default); also the canonical rendering order.
_SCHEMA: dict[str, dict[str, tuple[Callable, object]]] = {
    "run": {
        "name": (_conv_str, "desk"),
        "out": (_conv_str, "runs"),
        "seed": (_conv_int, 0),
        "runs": (_conv_int, 20),
        "budget": (_conv_int, 200),
    },
    "suite": {
        "families": (_conv_names, ("Sphere", "Rosenbrock")),
        "n_tasks": (_conv_int, 4),
        "n_dim": (_conv_int, 3),
        "seed": (_conv_int, 0),
        "bounds_lo": (_conv_float, 0.0),
        "bounds_hi": (_conv_float, 1.0),
    },
    "dataset": {
        "n_per_task": (_conv_int, 200),
        "train_split": (_conv_int, 5),
        "test_split": (_conv_int, 3),
        "aug_low": (_conv_int, 8),
        "aug_med": (_conv_int, 8),
        "aug_high": (_conv_int, 8),
    },
    "sne": {
        "n_digit": (_conv_int, 8),
        "exp_min": (_conv_int, -16),
        "exp_max": (_conv_int, 16),
    },
    "reward": {
        "scale": (_conv_float, 0.03),
        "w_exp": (_conv_float, 0.2),
        "w_sgn": (_conv_float, 0.05),
        "r_min": (_conv_float, 0.0),
        "r_max": (_conv_float, 5.0),
    },
    "model": {
        "d_model": (_conv_int, 64),
        "n_enc_layers": (_conv_int, 2),
        "n_dec_layers": (_conv_int, 2),
        "n_heads": (_conv_int, 4),
        "d_ff": (_conv_int, 256),
        "seed": (_conv_int, 0),
    },
    "sft": {
        "epochs": (_conv_int, 65),
        "batch_size": (_conv_int, 16),
        "lr": (_conv_float, 1e-3),
        "warmup_ratio": (_conv_float, 0.06),
        "plain_ce": (_conv_bool, False),
    },
    "rl": {
        "epochs": (_conv_int, 5),
        "batch_size": (_conv_int, 64),
        "lr": (_conv_float, 1e-3),
        "warmup_ratio": (_conv_float, 0.06),
        "gamma": (_conv_float, 0.99),
        "lambda_cql": (_conv_float, 0.1),
        "tau": (_conv_float, 0.7),
        "polyak": (_conv_float, 0.01),
    },
    "decode": {
        "mode": (_conv_str, "advantage"),
        "beta": (_conv_float, 3.0),
        "max_len": (_conv_int, 50),
    },
    "evo": {
        "im": (_conv_float, 0.3),
        "a_up": (_conv_float, 0.2),
        "shk": (_conv_float, 0.8),
        "pop_size": (_conv_int, 20),
        "a_cap": (_conv_int, 300),
    },
}


def _build_run_config(values: Mapping[str, Mapping[str, object]], errors: list[str]) -> RunConfig:
    """Assemble and validate; every violated invariant lands in the error."""

    def build(label: str, fn: Callable):
        try:
            return fn()
        except (ToolkitError, ValueError, TypeError) as e:
            errors.append(f"{label}: {e}")
            return None

    run, suite, ds = values["run"], values["suite"], values["dataset"]
    name = str(run["name"])
    if not name or name in (".", "..") or "/" in name or os.sep in name:
        errors.append(f"run.name: {name!r} is not a single path component")
    if int(run["runs"]) < 1:
        errors.append(f"run.runs: must be >= 1, got {run['runs']}")
    if int(run["budget"]) < 1:
        errors.append(f"run.budget: must be >= 1, got {run['budget']}")
    unknown = [f for f in suite["families"] if f not in FAMILIES]
    if unknown:
        errors.append(f"suite.families: unknown {unknown}, valid: {sorted(FAMILIES)}")
    if int(suite["n_tasks"]) < 1:
        errors.append(f"suite.n_tasks: must be >= 1, got {suite['n_tasks']}")
    if int(suite["n_dim"]) < 1:
        errors.append(f"suite.n_dim: must be >= 1, got {suite['n_dim']}")
    bounds = (float(suite["bounds_lo"]), float(suite["bounds_hi"]))
    if not bounds[0] < bounds[1]:
        errors.append(f"suite.bounds_lo/bounds_hi: need lo < hi, got {bounds}")
    if int(ds["n_per_task"]) < 2:
        errors.append(f"dataset.n_per_task: must be >= 2, got {ds['n_per_task']}")
    if int(ds["train_split"]) < 1 or int(ds["test_split"]) < 1:
        errors.append("dataset.train_split/test_split: both parts must be >= 1")
    aug = (int(ds["aug_low"]), int(ds["aug_med"]), int(ds["aug_high"]))
    if any(c < 0 for c in aug):
        errors.append(f"dataset.aug_*: counts must be >= 0, got {aug}")

    sne = build("sne", lambda: SneConfig(**values["sne"]))
    reward = build("reward", lambda: RewardConfig(**values["reward"]))
    model = build("model", lambda: ModelSpec(**values["model"]))
    sft = build("sft", lambda: SftConfig(**values["sft"]))
    rl = build("rl", lambda: RlConfig(**values["rl"]))
    decode = build("decode", lambda: DecodeConfig(**values["decode"]))
    evo = build("evo", lambda: MaTdeParams(**values["evo"]))
    if errors:
        raise ConfigError("invalid configuration:\n" + "\n".join(f"  - {e}" for e in errors))
    return RunConfig(
        name=name,
        out=str(run["out"]),
        seed=int(run["seed"]),
        runs=int(run["runs"]),
        budget=int(run["budget"]),
        families=tuple(suite["families"]),
        n_tasks=int(suite["n_tasks"]),
        n_dim=int(suite["n_dim"]),
        suite_seed=int(suite["seed"]),
        bounds=bounds,
        n_per_task=int(ds["n_per_task"]),
        split=(int(ds["train_split"]), int(ds["test_split"])),
        augment=aug,
        sne=sne,
        reward=reward,
        model=model,
        sft=sft,
        rl=rl,
        decode=decode,
        evo=evo,
    )


def load_run_config(
    path=None, *, seed: int | None = None, out: str | None = None, runs: int | None = None
) -> RunConfig:
    """Defaults, then config file, then environment, then explicit flags."""
    values = {s: {k: d for k, (_, d) in ks.items()} for s, ks in _SCHEMA.items()}
    errors: list[str] = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(p.read_text(encoding="utf-8"), source=str(p))
        except configparser.Error as e:
            raise ConfigError(f"unparseable config file {p}: {e}")
        for sec in parser.sections():
            if sec not in _SCHEMA:
                errors.append(f"unknown section [{sec}]")
                continue
            for key, raw in parser.items(sec):
                if key not in _SCHEMA[sec]:
                    errors.append(f"unknown key {sec}.{key}")
                    continue
                try:
                    values[sec][key] = _SCHEMA[sec][key][0](raw)
                except ValueError as e:
                    errors.append(f"{sec}.{key}: {e}")
    for env, (sec, key) in ENV_OVERRIDES.items():
        raw = os.environ.get(env)
        if raw is not None:
            try:
                values[sec][key] = _SCHEMA[sec][key][0](raw)
            except ValueError as e:
                errors.append(f"{env}: {e}")
    if seed is not None:
        values["run"]["seed"] = seed
    if out is not None:
        values["run"]["out"] = out
    if runs is not None:
        values["run"]["runs"] = runs
    return _build_run_config(values, errors)


def _config_values(cfg: RunConfig) -> dict[str, dict[str, object]]:
    return {
        "run": {
            "name": cfg.name,
            "out": cfg.out,
            "seed": cfg.seed,
            "runs": cfg.runs,
            "budget": cfg.budget,
        },
        "suite": {
            "families": ", ".join(cfg.families),
            "n_tasks": cfg.n_tasks,
            "n_dim": cfg.n_dim,
            "seed": cfg.suite_seed,
            "bounds_lo": cfg.bounds[0],
            "bounds_hi": cfg.bounds[1],
        },
        "dataset": {
            "n_per_task": cfg.n_per_task,
            "train_split": cfg.split[0],
            "test_split": cfg.split[1],
            "aug_low": cfg.augment[0],
            "aug_med": cfg.augment[1],
            "aug_high": cfg.augment[2],
        },
        "sne": {"n_digit": cfg.sne.n_digit, "exp_min": cfg.sne.exp_min, "exp_max": cfg.sne.exp_max},
        "reward": {
            "scale": cfg.reward.scale,
            "w_exp": cfg.reward.w_exp,
            "w_sgn": cfg.reward.w_sgn,
            "r_min": cfg.reward.r_min,
            "r_max": cfg.reward.r_max,
        },
        "model": {
            "d_model": cfg.model.d_model,
            "n_enc_layers": cfg.model.n_enc_layers,
            "n_dec_layers": cfg.model.n_dec_layers,
            "n_heads": cfg.model.n_heads,
            "d_ff": cfg.model.d_ff,
            "seed": cfg.model.seed,
        },
        "sft": {
            "epochs": cfg.sft.epochs,
            "batch_size": cfg.sft.batch_size,
            "lr": cfg.sft.lr,
            "warmup_ratio": cfg.sft.warmup_ratio,
            "plain_ce": cfg.sft.plain_ce,
        },
        "rl": {
            "epochs": cfg.rl.epochs,
            "batch_size": cfg.rl.batch_size,
            "lr": cfg.rl.lr,
            "warmup_ratio": cfg.rl.warmup_ratio,
            "gamma": cfg.rl.gamma,
            "lambda_cql": cfg.rl.lambda_cql,
            "tau": cfg.rl.tau,
            "polyak": cfg.rl.polyak,
        },
        "decode": {"mode": cfg.decode.mode, "beta": cfg.decode.beta, "max_len": cfg.decode.max_len},
        "evo": {
            "im": cfg.evo.im,
            "a_up": cfg.evo.a_up,
            "shk": cfg.evo.shk,
            "pop_size": cfg.evo.pop_size,
            "a_cap": cfg.evo.a_cap,
        },
    }


def render_config(cfg: RunConfig) -> str:
    """Canonical text form; load_run_config round-trips it exactly."""
    vals = _config_values(cfg)
    lines: list[str] = []
    for sec, keys in _SCHEMA.items():
        lines.append(f"[{sec}]")
        for key in keys:
            v = vals[sec][key]
            lines.append(f"{key} = {v!r}" if isinstance(v, float) else f"{key} = {v}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# run-directory plumbing


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @classmethod
    def of(cls, cfg: RunConfig) -> "RunPaths":
        return cls(root=cfg.run_dir)

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def ckpt(self) -> Path:
        return self.root / "ckpt"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics"

    @property
    def fronts(self) -> Path:
        return self.root / "fronts"

    @property
    def trace(self) -> Path:
        return self.root / "trace"

    @property
    def snapshot(self) -> Path:
        return self.root / "config"

    @property
    def suite(self) -> Path:
        return self.data / "suite.txt"

    @property
    def train_file(self) -> Path:
        return self.data / "train.txt"

    @property
    def test_file(self) -> Path:
        return self.data / "test.txt"

    @property
    def augmented_file(self) -> Path:
        return self.data / "augmented.txt"

    @property
    def vocab_file(self) -> Path:
        return self.data / "vocab.txt"

    @property
    def hashes(self) -> Path:
        return self.data / "hashes.txt"

    @property
    def final_ckpt(self) -> Path:
        return self.ckpt / "final.ckpt"

    def seeds(self, command: str) -> Path:
        return self.root / f"seeds_{command}.txt"


def _require(path: Path, command: str) -> None:
    if not path.exists():
        raise ConfigError(f"missing artifact {path}; run `qmetasur {command}` first")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _child_seed(*parts: int) -> int:
    """Deterministic derived seed, recorded verbatim in the seed ledger."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def _write_snapshot(cfg: RunConfig, paths: RunPaths) -> None:
    paths.root.mkdir(parents=True, exist_ok=True)
    paths.snapshot.write_text(render_config(cfg), encoding="utf-8")


def _build_suite(cfg: RunConfig) -> MtmooSuite:
    parts = [
        make_suite(fam, cfg.n_tasks, cfg.n_dim, cfg.suite_seed + i, bounds=cfg.bounds, name=fam)
        for i, fam in enumerate(cfg.families)
    ]
    return merge_suites(cfg.name, parts)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig) -> RunPaths:
    """Suite, LHS dataset, split, augmentation, vocabulary, hashes, seeds."""
    paths = RunPaths.of(cfg)
    paths.data.mkdir(parents=True, exist_ok=True)
    suite = _build_suite(cfg)
    full = build_offline(suite, cfg.n_per_task, seed=cfg.seed)
    train, test = split(full, cfg.split, seed=cfg.seed)
    augmented = augment_dataset(train, cfg.augment, cfg.seed, cfg.reward, cfg.sne)
    vocab = build_vocab([t.metadata_text for t in suite.tasks], cfg.sne)

    save_suite(suite, paths.suite)
    save_dataset(train, paths.train_file, kind="train")
    save_dataset(test, paths.test_file, kind="test")
    save_augmented(augmented, paths.augmented_file)
    vocab.save(paths.vocab_file)
    files = [paths.suite, paths.train_file, paths.test_file, paths.augmented_file, paths.vocab_file]
    write_table(
        paths.hashes,
        "hashes",
        ["file", "sha256"],
        [(p.name, _sha256(p)) for p in sorted(files, key=lambda p: p.name)],
    )
    seed_rows = [(f"suite:{fam}", cfg.suite_seed + i) for i, fam in enumerate(cfg.families)]
    seed_rows += [("dataset", cfg.seed), ("split", cfg.seed), ("augment", cfg.seed)]
    write_table(paths.seeds("gen_data"), "seeds", ["purpose", "seed"], seed_rows)
    _write_snapshot(cfg, paths)
    return paths


def _load_codec(cfg: RunConfig, paths: RunPaths) -> SneCodec:
    return SneCodec(Vocab.load(paths.vocab_file), cfg.sne)


def cmd_train(cfg: RunConfig) -> tuple[TrainReport, TrainReport]:
    """Supervised stage then offline-RL stage; final checkpoint at the end."""
    paths = RunPaths.of(cfg)
    for p in (paths.train_file, paths.test_file, paths.augmented_file, paths.vocab_file):
        _require(p, "gen-data")
    train = load_dataset(paths.train_file)
    test = load_dataset(paths.test_file)
    augmented = load_augmented(paths.augmented_file)
    codec = _load_codec(cfg, paths)

    rows = train.samples + test.samples
    max_src_len = max(len(codec.encode_source(s.metadata, s.x)) for s in rows) + 2
    k_max = max(len(s.y) for s in rows)
    model_cfg = ModelConfig(
        vocab_size=len(codec.vocab),
        n_actions=len(codec.numeric_ids),
        max_src_len=max_src_len,
        pad_id=codec.pad_id,
        d_model=cfg.model.d_model,
        n_enc_layers=cfg.model.n_enc_layers,
        n_dec_layers=cfg.model.n_dec_layers,
        n_heads=cfg.model.n_heads,
        d_ff=cfg.model.d_ff,
        max_tgt_len=max(cfg.decode.max_len, codec.target_len(k_max)),
        seed=cfg.model.seed,
    )
    model = SeqModel(model_cfg)
    paths.metrics.mkdir(parents=True, exist_ok=True)
    (paths.ckpt / "sft").mkdir(parents=True, exist_ok=True)
    (paths.ckpt / "rl").mkdir(parents=True, exist_ok=True)

    sft_report = train_sft(
        model, train, test, codec, cfg.sft, seed=cfg.seed, ckpt_dir=paths.ckpt / "sft"
    )
    save_report(sft_report, paths.metrics / "train_sft.txt")
    episodes = build_episodes(train, augmented, codec, cfg.reward)
    rl_report = train_rl(
        model,
        episodes,
        test,
        train.ranges,
        codec,
        cfg.rl,
        seed=cfg.seed,
        ckpt_dir=paths.ckpt / "rl",
    )
    save_report(rl_report, paths.metrics / "train_rl.txt")
    save_checkpoint(model, paths.final_ckpt)
    write_table(
        paths.seeds("train"),
        "seeds",
        ["purpose", "seed"],
        [("model_init", cfg.model.seed), ("sft", cfg.seed), ("rl", cfg.seed)],
    )
    _write_snapshot(cfg, paths)
    return sft_report, rl_report


def cmd_eval_surrogate(cfg: RunConfig, mode: str = "qmetasur") -> Path:
    """Held-out accuracy table: one row per (task, objective)."""
    if mode not in SURROGATE_MODES:
        raise ConfigError(f"mode must be one of {SURROGATE_MODES} for eval, got {mode!r}")
    paths = RunPaths.of(cfg)
    for p in (paths.train_file, paths.test_file):
        _require(p, "gen-data")
    train = load_dataset(paths.train_file)
    test = load_dataset(paths.test_file)

    preds: list[float] = []
    trues: list[float] = []
    keys: list[tuple[int, int]] = []
    parse_rate: dict[int, float] = {}
    task_ids = sorted(test.task_ids)
    if mode == "qmetasur":
        _require(paths.vocab_file, "gen-data")
        _require(paths.final_ckpt, "train")
        model = load_checkpoint(paths.final_ckpt)
        codec = _load_codec(cfg, paths)
        for t in task_ids:
            rows = test.by_task(t)
            x = np.stack([s.x for s in rows])
            y_hat, flags = predict_objectives_batch(
                model, codec, rows[0].metadata, x, train.ranges[t], cfg.decode
            )
            parse_rate[t] = 1.0 - float(flags.sum()) / len(rows)
            _collect(preds, trues, keys, rows, y_hat, t)
    else:
        _require(paths.suite, "gen-data")
        suite = load_suite(paths.suite)
        oracle = fit_rbfn_oracle(train, suite, seed=cfg.seed)
        for t in task_ids:
            rows = test.by_task(t)
            x = np.stack([s.x for s in rows])
            y_hat = oracle.evaluate(suite.task(t), x)
            parse_rate[t] = 1.0
            _collect(preds, trues, keys, rows, y_hat, t)

    per_group, _ = smae(preds, trues, keys)
    table_rows = []
    for t, j in sorted(set(keys)):
        group_p = [p for p, k in zip(preds, keys) if k == (t, j)]
        group_t = [y for y, k in zip(trues, keys) if k == (t, j)]
        try:
            r2_val = r2(group_p, group_t)
        except DomainError:
            r2_val = float("nan")
        table_rows.append(
            (t, j, float(per_group.get((t, j), float("nan"))), r2_val, parse_rate[t])
        )
    paths.metrics.mkdir(parents=True, exist_ok=True)
    out = paths.metrics / f"eval_{mode}.txt"
    write_table(out, "eval", ["task", "objective", "smae", "r2", "parse_rate"], table_rows)
    seed_rows = [("rbfn_fit", cfg.seed)] if mode == "rbfn" else []
    write_table(paths.seeds(f"eval_{mode}"), "seeds", ["purpose", "seed"], seed_rows)
    _write_snapshot(cfg, paths)
    return out


def _collect(preds, trues, keys, rows, y_hat, task_id) -> None:
    for s, yh in zip(rows, y_hat):
        for j in range(len(s.y)):
            preds.append(float(yh[j]))
            trues.append(float(s.y[j]))
            keys.append((task_id, j))


def cmd_optimize(cfg: RunConfig, mode: str = "qmetasur", runs: int | None = None) -> Path:
    """Seeded repetitions of the evolutionary run under one fitness mode.

    REAL spends the whole true-evaluation budget searching; the surrogate
    modes search for the equivalent generation count without any true
    call and then true-evaluate only the final front, which the audit
    table accounts for run by run.
    """
    if mode not in OPTIMIZE_MODES:
        raise ConfigError(f"mode must be one of {OPTIMIZE_MODES}, got {mode!r}")
    errors = []
    if cfg.budget % cfg.evo.pop_size != 0:
        errors.append(
            f"budget {cfg.budget} must be a multiple of evo.pop_size {cfg.evo.pop_size} "
            "for an exact audit"
        )
    gens = cfg.budget // cfg.evo.pop_size - 1
    if gens < 1:
        errors.append(f"budget {cfg.budget} must cover at least two generations of evaluations")
    if errors:
        raise ConfigError("invalid configuration:\n" + "\n".join(f"  - {e}" for e in errors))
    n_runs = cfg.runs if runs is None else runs
    if n_runs < 1:
        raise ConfigError(f"runs must be >= 1, got {n_runs}")

    paths = RunPaths.of(cfg)
    _require(paths.suite, "gen-data")
    suite = load_suite(paths.suite)
    dataset_evals: dict[int, int] = {t.task_id: 0 for t in suite.tasks}
    oracle = None
    if mode in SURROGATE_MODES:
        for p in (paths.train_file, paths.test_file):
            _require(p, "gen-data")
        train = load_dataset(paths.train_file)
        test = load_dataset(paths.test_file)
        dataset_evals = {
            t: len(train.by_task(t)) + len(test.by_task(t)) for t in sorted(train.task_ids)
        }
        if mode == "qmetasur":
            _require(paths.vocab_file, "gen-data")
            _require(paths.final_ckpt, "train")
            model = load_checkpoint(paths.final_ckpt)
            codec = _load_codec(cfg, paths)
            oracle = SurrogateOracle(model, codec, train.ranges, cfg.decode)
        else:
            oracle = fit_rbfn_oracle(train, suite, seed=cfg.seed)

    paths.metrics.mkdir(parents=True, exist_ok=True)
    paths.fronts.mkdir(parents=True, exist_ok=True)
    paths.trace.mkdir(parents=True, exist_ok=True)
    refs = {t.task_id: true_pf(t, 1000) for t in suite.tasks}
    metric_rows = []
    audit_rows = []
    seed_rows = []
    for r in range(n_runs):
        seed_r = _child_seed(cfg.seed, r)
        seed_rows.append((r, seed_r))
        if mode == "real":
            counter = TrueOracle()
            result = run_mo_matde(
                suite, counter, cfg.evo, max_evals_per_task=cfg.budget, seed=seed_r
            )
            search_evals = dict(counter.counts)
            final_counter = TrueOracle()
        else:
            result = run_mo_matde(suite, oracle, cfg.evo, n_generations=gens, seed=seed_r)
            search_evals = {t: 0 for t in result.task_ids}
            final_counter = TrueOracle()
        write_table(
            paths.trace / f"{mode}_run{r:02d}.txt",
            "trace",
            ["generation", "task", "mode", "source", "rew_hash"],
            [
                (rec.generation, rec.task_id, rec.mode,
                 "-" if rec.source is None else rec.source, rec.rew_hash)
                for rec in result.trace
            ],
        )
        for t in result.task_ids:
            dec = result.pareto_dec[t]
            sur_obj = result.pareto_obj[t]
            if mode == "real":
                true_obj = sur_obj
            else:
                true_obj = final_counter.evaluate(suite.task(t), dec)
            flags = result.pareto_flagged[t].astype(int)
            cols = [f"x{j}" for j in range(dec.shape[1])]
            cols += ["f1_sur", "f2_sur", "f1_true", "f2_true", "flagged"]
            front_rows = [
                [float(v) for v in dec[i]]
                + [float(sur_obj[i, 0]), float(sur_obj[i, 1])]
                + [float(true_obj[i, 0]), float(true_obj[i, 1]), int(flags[i])]
                for i in range(len(dec))
            ]
            write_table(paths.fronts / f"{mode}_run{r:02d}_task{t}.txt", "front", cols, front_rows)
            metric_rows.append((r, t, float(igd(refs[t], true_obj)), len(dec)))
            finals = final_counter.counts.get(t, 0)
            audit_rows.append(
                (r, t, dataset_evals[t], search_evals.get(t, 0), finals,
                 dataset_evals[t] + search_evals.get(t, 0) + finals)
            )
    out = paths.metrics / f"optimize_{mode}.txt"
    write_table(out, "optimize", ["run", "task", "igd", "front_size"], metric_rows)
    write_table(
        paths.metrics / f"audit_{mode}.txt",
        "audit",
        ["run", "task", "dataset_evals", "search_evals", "final_evals", "total"],
        audit_rows,
    )
    write_table(paths.seeds(f"optimize_{mode}"), "seeds", ["run", "seed"], seed_rows)
    _write_snapshot(cfg, paths)
    return out


def cmd_report(run_dirs: Sequence[Path]) -> Path:
    """Aggregate optimization tables into MSS per method plus verdicts.

    Runs from several directories pool along the run axis; every table
    must cover the same tasks and every method the same number of runs so
    the signed-rank pairing stays aligned. Verdicts read: "+" the method
    beats the advantage-guided surrogate, "-" it loses, "≈" no call.
    """
    dirs = [Path(d) for d in run_dirs]
    if not dirs:
        raise ConfigError("no run directories given")
    for d in dirs:
        if not d.is_dir():
            raise ConfigError(f"missing artifact {d}; not a run directory")
    matrices: dict[str, list[np.ndarray]] = {}
    task_sets: dict[str, tuple[int, ...]] = {}
    for mode in OPTIMIZE_MODES:
        for d in dirs:
            path = d / "metrics" / f"optimize_{mode}.txt"
            if not path.exists():
                continue
            _, _, rows = read_table(path, "optimize")
            by_run: dict[int, dict[int, float]] = {}
            for run_s, task_s, igd_s, _ in rows:
                by_run.setdefault(int(run_s), {})[int(task_s)] = float(igd_s)
            tasks = tuple(sorted({t for m in by_run.values() for t in m}))
            prev = task_sets.setdefault(mode, tasks)
            if tasks != prev or any(tuple(sorted(m)) != tasks for m in by_run.values()):
                raise ConfigError(f"task sets disagree across optimize tables ({path})")
            mat = np.array([[by_run[r][t] for t in tasks] for r in sorted(by_run)])
            matrices.setdefault(mode, []).append(mat)
    if "qmetasur" not in matrices:
        raise ConfigError(
            "missing artifact metrics/optimize_qmetasur.txt in the given run directories; "
            "run `qmetasur optimize --mode qmetasur` first"
        )
    if len(set(task_sets.values())) != 1:
        raise ConfigError(f"task sets disagree across modes: {task_sets}")
    scores = {m: np.concatenate(parts, axis=0) for m, parts in matrices.items()}
    n_runs = {m: len(v) for m, v in scores.items()}
    if len(set(n_runs.values())) != 1:
        raise ConfigError(f"run counts disagree across methods: {n_runs}")

    rows = []
    for m in sorted(scores):
        if m == "qmetasur":
            verdict, p = "na", float("nan")
        else:
            res = wilcoxon_signed_rank(mss_per_run(scores, m), mss_per_run(scores, "qmetasur"))
            verdict, p = res.verdict, res.p_value
        rows.append((m, n_runs[m], mss(scores, m), verdict, p))
    out_dir = dirs[0] / "metrics"
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / "report.txt"
    write_table(out, "report", ["method", "n_runs", "mss", "verdict_vs_qmetasur", "p_value"], rows)
    return out


# ---------------------------------------------------------------------------
# entry point


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="configuration file (defaults apply if absent)")
    p.add_argument("--seed", type=int, default=None, help="override [run] seed")
    p.add_argument("--out", default=None, help="override [run] out directory")


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="qmetasur",
        description="Offline surrogate-assisted multi-task multi-objective optimization.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_common(sub.add_parser("gen-data", help="draw the suite, dataset, splits and vocabulary"))
    _add_common(sub.add_parser("train", help="supervised then offline-RL surrogate training"))
    p = sub.add_parser("eval-surrogate", help="held-out accuracy per task and objective")
    _add_common(p)
    p.add_argument("--mode", choices=SURROGATE_MODES, default="qmetasur")
    p = sub.add_parser("optimize", help="seeded evolutionary runs under one fitness mode")
    _add_common(p)
    p.add_argument("--mode", choices=OPTIMIZE_MODES, default="qmetasur")
    p.add_argument("--runs", type=int, default=None, help="override [run] runs")
    p = sub.add_parser("report", help="aggregate MSS and significance over run directories")
    p.add_argument("run_dirs", nargs="+", help="run directories holding optimize tables")
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            print(f"wrote {cmd_report(args.run_dirs)}")
            return 0
        cfg = load_run_config(
            args.config, seed=args.seed, out=args.out, runs=getattr(args, "runs", None)
        )
        if args.command == "gen-data":
            print(f"wrote {cmd_gen_data(cfg).data}")
        elif args.command == "train":
            cmd_train(cfg)
            print(f"wrote {RunPaths.of(cfg).final_ckpt}")
        elif args.command == "eval-surrogate":
            print(f"wrote {cmd_eval_surrogate(cfg, args.mode)}")
        elif args.command == "optimize":
            print(f"wrote {cmd_optimize(cfg, args.mode, args.runs)}")
        return 0
    except ToolkitError as e:
        print(json.dumps({"error": type(e).__name__, "detail": str(e)}), file=sys.stderr)
        return 1
    except OSError as e:
        print(json.dumps({"error": type(e).__name__, "detail": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
