"""Two-stage training: position-weighted supervised loss, then offline RL.

Stage one fits the language-model head with a cross entropy whose weights
front-load the sign, decade and leading mantissa digits of every encoded
objective. Stage two fits the value heads on reward-annotated episodes:
a twin-Q temporal-difference regression with terminal-only reward, an
expectile value regression against the frozen target heads, a conservative
cross-entropy pulling softmax(Q) toward the data action, and an auxiliary
sequence likelihood on the unperturbed episodes only.

All losses are exact float64 expressions of the model outputs, so every
component is checkable against finite differences.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .dataset import (
    AugmentedSample,
    ObjectiveRanges,
    OfflineDataset,
    RewardConfig,
    Sample,
    compute_reward,
)
from .decoding import DecodeConfig, predict_objectives_batch
from .errors import ConfigError, DomainError, ParseError, TrainingError
from .metrics import smae, write_table, read_table
from .seqmodel import SeqModel, save_checkpoint
from .sne import SneCodec, target_layout


def pwce_weights(position: int) -> int:
    """Weight of the token at 1-based position inside one objective segment.

    Sign, decade and first mantissa digit carry weight 20; from the fourth
    position the weight decays linearly from 10 down to a floor of 1.
    """
    if position < 1:
        raise DomainError(f"segment position must be >= 1, got {position}")
    if position <= 3:
        return 20
    return max(1, 10 - (position - 4))


# ---------------------------------------------------------------------------
# batches


@dataclass(frozen=True)
class TokenBatch:
    """Padded prompt/target id tensors plus per-target-token loss weights."""

    src: torch.Tensor
    tgt: torch.Tensor
    weights: torch.Tensor


def _pad_rows(rows: Sequence[Sequence[int]], pad_id: int) -> torch.Tensor:
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), pad_id, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    return out


def _target_weights(n_obj: int, length: int, codec: SneCodec, plain: bool) -> list[float]:
    layout = target_layout(n_obj, codec.cfg)
    if len(layout) != length:
        raise ParseError(
            f"target length {length} does not match the {n_obj}-objective "
            f"layout of {len(layout)} tokens"
        )
    if plain:
        return [1.0] * length
    return [float(pwce_weights(p)) if p > 0 else 1.0 for p in layout]


def make_sft_batch(
    samples: Sequence[Sample], codec: SneCodec, plain_ce: bool = False
) -> TokenBatch:
    """Encode samples into one padded batch; padding gets zero weight."""
    if not samples:
        raise DomainError("empty batch")
    src_rows = [codec.encode_source(s.metadata, s.x) for s in samples]
    tgt_rows = [codec.encode_objectives(s.y) for s in samples]
    width = max(len(r) for r in tgt_rows)
    weights = torch.zeros((len(samples), width), dtype=torch.float64)
    for i, (s, row) in enumerate(zip(samples, tgt_rows)):
        w = _target_weights(len(s.y), len(row), codec, plain_ce)
        weights[i, : len(row)] = torch.tensor(w, dtype=torch.float64)
    return TokenBatch(
        src=_pad_rows(src_rows, codec.pad_id),
        tgt=_pad_rows(tgt_rows, codec.pad_id),
        weights=weights,
    )


def sft_loss(model: SeqModel, batch: TokenBatch) -> torch.Tensor:
    """Weighted token cross entropy, summed per sequence, averaged over batch."""
    logits, _ = model.forward_teacher_forced(batch.src, batch.tgt)
    logp = torch.log_softmax(logits, dim=-1)
    gold = logp.gather(2, batch.tgt.unsqueeze(-1)).squeeze(-1)
    return -(batch.weights * gold).sum(dim=1).mean()


# ---------------------------------------------------------------------------
# offline RL


@dataclass(frozen=True)
class Episode:
    """One prompt/target pair with its terminal reward.

    gold marks unperturbed records, the only ones the auxiliary sequence
    likelihood imitates.
    """

    src_ids: tuple[int, ...]
    tgt_ids: tuple[int, ...]
    reward: float | None
    gold: bool


@dataclass(frozen=True)
class RlConfig:
    gamma: float = 0.99
    lambda_cql: float = 0.1
    tau: float = 0.7
    polyak: float = 0.01
    epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    warmup_ratio: float = 0.06

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma {self.gamma} outside (0, 1]")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau {self.tau} outside (0, 1)")
        if self.lambda_cql < 0.0:
            raise ConfigError(f"lambda_cql must be >= 0, got {self.lambda_cql}")
        if not 0.0 < self.polyak <= 1.0:
            raise ConfigError(f"polyak {self.polyak} outside (0, 1]")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError(f"warmup_ratio {self.warmup_ratio} outside [0, 1]")


def build_episodes(
    train: OfflineDataset,
    augmented: Sequence[AugmentedSample],
    codec: SneCodec,
    reward_cfg: RewardConfig = RewardConfig(),
) -> list[Episode]:
    """Gold episodes from the training split plus perturbed-label episodes.

    A gold episode earns the reward of an exact reproduction of its own
    label; augmented episodes keep the reward stored when they were built.
    """
    out: list[Episode] = []
    for s in train.samples:
        delta = train.ranges[s.task_id].delta
        r = compute_reward(s.y, s.y, delta, reward_cfg, codec.cfg)
        out.append(
            Episode(
                src_ids=tuple(codec.encode_source(s.metadata, s.x)),
                tgt_ids=tuple(codec.encode_objectives(s.y)),
                reward=r,
                gold=True,
            )
        )
    for a in augmented:
        out.append(
            Episode(
                src_ids=tuple(codec.encode_source(a.metadata, a.x)),
                tgt_ids=tuple(codec.encode_objectives(a.y_tilde)),
                reward=float(a.reward),
                gold=False,
            )
        )
    return out


def expectile_loss(u, tau: float) -> torch.Tensor:
    """Asymmetric squared loss |tau - 1[u < 0]| * u^2, elementwise."""
    u = torch.as_tensor(u, dtype=torch.float64)
    t = torch.as_tensor(tau, dtype=torch.float64)
    w = torch.where(u < 0.0, 1.0 - t, t)
    return w * u * u


def cql_cross_entropy(q: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
    """Cross entropy of softmax over the action axis against the data action."""
    logp = torch.log_softmax(q, dim=-1)
    return -logp.gather(-1, actions.unsqueeze(-1)).squeeze(-1)


def _support_lookup(model: SeqModel, codec: SneCodec) -> torch.Tensor:
    lut = torch.full((model.cfg.vocab_size,), -1, dtype=torch.long)
    lut[torch.tensor(codec.numeric_ids, dtype=torch.long)] = torch.arange(
        len(codec.numeric_ids), dtype=torch.long
    )
    return lut


def rl_loss(
    model: SeqModel,
    episodes: Sequence[Episode],
    cfg: RlConfig,
    codec: SneCodec,
    bootstrap: dict | None = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Combined offline objective and its components, each a scalar tensor.

    Per episode and target position i (terminal position L):
      TD term      mean over the two Q heads of (r_i + gamma*V(h_{i+1}) - Q)^2
                   with r_i = 0 for i < L, r_L = reward, V(h_{L+1}) = 0 and
                   the bootstrap V detached;
      value term   expectile loss of (min target Q - V), target heads frozen;
      CQL term     cross entropy of softmax(Q) at the data action, summed
                   over both heads;
      likelihood   token NLL, gold episodes only.
    Sums run over positions, means over episodes (likelihood: over gold
    episodes); total = qv + lambda_cql * cql + nll.

    The gradient treats the TD bootstrap values and the frozen-target Q
    values as constants. Passing the same dict as bootstrap across calls
    stores both on first use and replays them afterwards, which lets
    finite differencing observe the same objective the gradient belongs
    to; training passes None and refreshes them every step.
    """
    if not episodes:
        raise DomainError("no episodes")
    if len(codec.numeric_ids) != model.cfg.n_actions:
        raise ConfigError(
            f"codec numeric support {len(codec.numeric_ids)} != model actions "
            f"{model.cfg.n_actions}"
        )
    for ep in episodes:
        if ep.reward is None or not math.isfinite(ep.reward):
            raise DomainError(f"episode without usable reward: {ep.reward!r}")
        if not ep.tgt_ids:
            raise DomainError("episode with empty target")
    lut = _support_lookup(model, codec)

    groups: dict[tuple, list[Episode]] = {}
    for ep in episodes:
        groups.setdefault((ep.src_ids, len(ep.tgt_ids)), []).append(ep)

    qv_terms: list[torch.Tensor] = []
    cql_terms: list[torch.Tensor] = []
    nll_terms: list[torch.Tensor] = []
    for key, eps in groups.items():
        src = key[0]
        g = len(eps)
        memory, blocked = model.encode(torch.tensor([src], dtype=torch.long))
        memory = memory.expand(g, -1, -1)
        blocked = blocked.expand(g, -1, -1, -1)
        tgt = torch.tensor([ep.tgt_ids for ep in eps], dtype=torch.long)
        hidden = model.decode_hidden(memory, blocked, tgt)

        actions = lut[tgt]
        if (actions < 0).any():
            raise DomainError("target token outside the numeric support")
        q1, q2 = model.q_values(hidden)
        q1_a = q1.gather(2, actions.unsqueeze(-1)).squeeze(-1)
        q2_a = q2.gather(2, actions.unsqueeze(-1)).squeeze(-1)
        v = model.v_value(hidden)

        r = torch.zeros_like(v)
        r[:, -1] = torch.tensor([ep.reward for ep in eps], dtype=torch.float64)
        if bootstrap is not None and key in bootstrap:
            v_next, q_bar = bootstrap[key]
        else:
            v_next = torch.cat(
                [v[:, 1:], torch.zeros(g, 1, dtype=torch.float64)], dim=1
            ).detach()
            q_bar = model.target_q(hidden).gather(2, actions.unsqueeze(-1)).squeeze(-1)
            if bootstrap is not None:
                bootstrap[key] = (v_next, q_bar)
        td_target = r + cfg.gamma * v_next
        td = 0.5 * ((td_target - q1_a) ** 2 + (td_target - q2_a) ** 2)
        qv_terms.extend((td + expectile_loss(q_bar - v, cfg.tau)).sum(dim=1))

        cql = cql_cross_entropy(q1, actions) + cql_cross_entropy(q2, actions)
        cql_terms.extend(cql.sum(dim=1))

        gold_rows = [i for i, ep in enumerate(eps) if ep.gold]
        if gold_rows:
            logp = torch.log_softmax(model.lm_head(hidden[gold_rows]), dim=-1)
            picked = logp.gather(2, tgt[gold_rows].unsqueeze(-1)).squeeze(-1)
            nll_terms.extend(-picked.sum(dim=1))

    l_qv = torch.stack(qv_terms).mean()
    l_cql = torch.stack(cql_terms).mean()
    l_nll = (
        torch.stack(nll_terms).mean()
        if nll_terms
        else torch.zeros((), dtype=torch.float64)
    )
    total = l_qv + cfg.lambda_cql * l_cql + l_nll
    return total, {"l_qv": l_qv, "l_cql": l_cql, "l_nll": l_nll, "total": total}


# ---------------------------------------------------------------------------
# training loops


@dataclass(frozen=True)
class SftConfig:
    epochs: int = 65
    batch_size: int = 16
    lr: float = 1e-3
    warmup_ratio: float = 0.06
    plain_ce: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0.0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ConfigError(f"warmup_ratio {self.warmup_ratio} outside [0, 1]")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    losses: dict[str, float]
    val_smae: float
    wall_time: float
    ckpt_path: str

    def __post_init__(self):
        for k, x in self.losses.items():
            if not math.isfinite(x):
                raise TrainingError(f"non-finite loss {k}={x} in epoch record")


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise TrainingError(
                f"epoch {rec.epoch} not after {self.records[-1].epoch}"
            )
        self.records.append(rec)

    def final_val_smae(self) -> float:
        if not self.records:
            raise DomainError("empty report")
        return self.records[-1].val_smae


def save_report(report: TrainReport, path) -> None:
    """One record per line under the usual schema-headed table format."""
    loss_keys = list(report.records[0].losses) if report.records else ["loss"]
    cols = ["epoch", *loss_keys, "val_smae", "wall_time", "ckpt"]
    rows = [
        [r.epoch, *[r.losses[k] for k in loss_keys], r.val_smae, r.wall_time,
         r.ckpt_path or "-"]
        for r in report.records
    ]
    write_table(path, "train_report", cols, rows)


def load_report(path) -> TrainReport:
    _, cols, rows = read_table(path, "train_report")
    loss_keys = cols[1:-3]
    report = TrainReport()
    for row in rows:
        rec = dict(zip(cols, row))
        report.append(
            EpochRecord(
                epoch=int(rec["epoch"]),
                losses={k: float(rec[k]) for k in loss_keys},
                val_smae=float(rec["val_smae"]),
                wall_time=float(rec["wall_time"]),
                ckpt_path="" if rec["ckpt"] == "-" else rec["ckpt"],
            )
        )
    return report


def _dump_bad_batch(ckpt_dir, payload: dict) -> str:
    directory = Path(ckpt_dir) if ckpt_dir is not None else Path.cwd()
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "bad_batch.json"
    path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return str(path)


def _abort_non_finite(loss: torch.Tensor, ckpt_dir, payload: dict) -> None:
    if torch.isfinite(loss).all():
        return
    payload["loss"] = repr(float(loss.detach()))
    path = _dump_bad_batch(ckpt_dir, payload)
    raise TrainingError(f"non-finite loss; offending batch dumped to {path}")


def _save_epoch_checkpoint(model: SeqModel, ckpt_dir, epoch: int) -> str:
    if ckpt_dir is None:
        return ""
    directory = Path(ckpt_dir)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"epoch_{epoch:03d}.ckpt"
    tmp = path.with_suffix(".ckpt.tmp")
    save_checkpoint(model, tmp)
    tmp.replace(path)
    return str(path)


def _warmup_lr(base_lr: float, step: int, total_steps: int, ratio: float) -> float:
    warmup = max(1, math.ceil(ratio * total_steps))
    return base_lr * min(1.0, step / warmup)


def validation_smae(
    model: SeqModel,
    val: OfflineDataset,
    train_ranges: Mapping[int, ObjectiveRanges],
    codec: SneCodec,
    decode_cfg: DecodeConfig,
) -> tuple[float, float]:
    """Mean scaled absolute error over (task, objective) groups on val data.

    Returns (smae, parse_rate); fallback rows still score, against the
    midpoint they return. Groups whose true values do not spread are
    skipped by the metric.
    """
    preds: list[float] = []
    trues: list[float] = []
    keys: list[tuple] = []
    n_flagged = 0
    n_rows = 0
    for t in val.task_ids:
        rows = val.by_task(t)
        x = np.stack([s.x for s in rows])
        y_hat, flags = predict_objectives_batch(
            model, codec, rows[0].metadata, x, train_ranges[t], decode_cfg
        )
        n_flagged += int(flags.sum())
        n_rows += len(rows)
        for s, yh in zip(rows, y_hat):
            for j in range(len(s.y)):
                preds.append(float(yh[j]))
                trues.append(float(s.y[j]))
                keys.append((t, j))
    _, overall = smae(preds, trues, keys)
    return overall, 1.0 - n_flagged / n_rows


def train_sft(
    model: SeqModel,
    train: OfflineDataset,
    val: OfflineDataset,
    codec: SneCodec,
    cfg: SftConfig = SftConfig(),
    seed: int = 0,
    ckpt_dir=None,
) -> TrainReport:
    """Supervised stage: Adam at a constant rate after linear warmup.

    Order is reshuffled every epoch from a stream keyed by (seed, epoch);
    a checkpoint lands after every epoch; validation decodes greedily.
    Zero epochs leave the model untouched and the report empty.
    """
    report = TrainReport()
    if cfg.epochs == 0:
        return report
    samples = list(train.samples)
    if not samples:
        raise DomainError("empty training split")
    n_batches = math.ceil(len(samples) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    decode_cfg = DecodeConfig(mode="greedy", max_len=model.cfg.max_tgt_len)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng((seed, epoch)).permutation(len(samples))
        epoch_losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = make_sft_batch([samples[i] for i in idx], codec, cfg.plain_ce)
            loss = sft_loss(model, batch)
            _abort_non_finite(
                loss,
                ckpt_dir,
                {
                    "stage": "sft",
                    "epoch": epoch,
                    "batch": b,
                    "src": batch.src.tolist(),
                    "tgt": batch.tgt.tolist(),
                },
            )
            step += 1
            for grp in opt.param_groups:
                grp["lr"] = _warmup_lr(cfg.lr, step, total_steps, cfg.warmup_ratio)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
        ckpt = _save_epoch_checkpoint(model, ckpt_dir, epoch)
        val_smae, _ = validation_smae(model, val, train.ranges, codec, decode_cfg)
        key = "ce" if cfg.plain_ce else "pwce"
        report.append(
            EpochRecord(
                epoch=epoch,
                losses={key: float(np.mean(epoch_losses))},
                val_smae=val_smae,
                wall_time=time.perf_counter() - t0,
                ckpt_path=ckpt,
            )
        )
    return report


def train_rl(
    model: SeqModel,
    episodes: Sequence[Episode],
    val: OfflineDataset,
    train_ranges: Mapping[int, ObjectiveRanges],
    codec: SneCodec,
    cfg: RlConfig = RlConfig(),
    seed: int = 0,
    ckpt_dir=None,
) -> TrainReport:
    """Offline RL stage over reward-annotated episodes.

    Episodes sharing a prompt stay together so each prompt is encoded
    once; batches pack whole groups up to the configured episode count.
    The frozen target heads drift toward the online heads after every
    optimizer step, and validation decodes with advantage guidance.
    """
    report = TrainReport()
    if cfg.epochs == 0:
        return report
    if not episodes:
        raise DomainError("no episodes")
    groups: dict[tuple, list[Episode]] = {}
    for ep in episodes:
        groups.setdefault((ep.src_ids, len(ep.tgt_ids)), []).append(ep)
    group_list = list(groups.values())

    def batches_of(order: np.ndarray) -> list[list[Episode]]:
        out: list[list[Episode]] = []
        cur: list[Episode] = []
        for gi in order:
            cur.extend(group_list[gi])
            if len(cur) >= cfg.batch_size:
                out.append(cur)
                cur = []
        if cur:
            out.append(cur)
        return out

    n_batches = len(batches_of(np.arange(len(group_list))))
    total_steps = cfg.epochs * n_batches
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    decode_cfg = DecodeConfig(mode="advantage", max_len=model.cfg.max_tgt_len)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng((seed, epoch)).permutation(len(group_list))
        sums = {"l_qv": 0.0, "l_cql": 0.0, "l_nll": 0.0, "total": 0.0}
        batches = batches_of(order)
        for b, batch in enumerate(batches):
            total, parts = rl_loss(model, batch, cfg, codec)
            _abort_non_finite(
                total,
                ckpt_dir,
                {
                    "stage": "rl",
                    "epoch": epoch,
                    "batch": b,
                    "src": [list(ep.src_ids) for ep in batch],
                    "tgt": [list(ep.tgt_ids) for ep in batch],
                    "reward": [ep.reward for ep in batch],
                },
            )
            step += 1
            for grp in opt.param_groups:
                grp["lr"] = _warmup_lr(cfg.lr, step, total_steps, cfg.warmup_ratio)
            opt.zero_grad()
            total.backward()
            opt.step()
            model.polyak_update(cfg.polyak)
            for k in sums:
                sums[k] += float(parts[k].detach())
        ckpt = _save_epoch_checkpoint(model, ckpt_dir, epoch)
        val_smae, _ = validation_smae(model, val, train_ranges, codec, decode_cfg)
        report.append(
            EpochRecord(
                epoch=epoch,
                losses={k: s / len(batches) for k, s in sums.items()},
                val_smae=val_smae,
                wall_time=time.perf_counter() - t0,
                ckpt_path=ckpt,
            )
        )
    return report
