"""Turn a trained sequence model into a surrogate oracle.

Generation is deterministic argmax, optionally shifted by the value heads:
adjusted logits = LM logits + beta * (target_q - v) on the numeric-support
tokens only, so the guidance can never push probability onto metadata
words. Malformed generations never escape: prediction falls back to the
per-objective range midpoint with a flag.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .dataset import ObjectiveRanges
from .errors import ArityError, ConfigError, ParseError
from .seqmodel import SeqModel
from .sne import SneCodec
from .tasks import TaskSpec

MODES = ("greedy", "advantage")


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"
    beta: float = 3.0
    max_len: int = 50

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (np.isfinite(self.beta) and self.beta >= 0.0):
            raise ConfigError(f"beta must be finite and >= 0, got {self.beta}")
        if self.max_len < 1:
            raise ConfigError(f"max_len must be >= 1, got {self.max_len}")


def _pad_rows(rows: Sequence[Sequence[int]], pad_id: int) -> torch.Tensor:
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), pad_id, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, : len(r)] = torch.tensor(r, dtype=torch.long)
    return out


def decode_batch(
    model: SeqModel, codec: SneCodec, src_rows: Sequence[Sequence[int]], cfg: DecodeConfig
) -> list[list[int]]:
    """Autoregressive argmax generation for a batch of prompts.

    Each output stops with its first EOS (included) or runs to max_len.
    Ties pick the lowest token id, so output depends only on the model
    state and the prompt, never on batch composition.
    """
    if cfg.max_len > model.cfg.max_tgt_len:
        raise ConfigError(
            f"max_len {cfg.max_len} exceeds model horizon {model.cfg.max_tgt_len}"
        )
    if len(codec.numeric_ids) != model.cfg.n_actions:
        raise ConfigError(
            f"codec numeric support {len(codec.numeric_ids)} != model actions "
            f"{model.cfg.n_actions}"
        )
    if not src_rows:
        return []
    guided = cfg.mode == "advantage" and cfg.beta > 0.0
    support = torch.tensor(codec.numeric_ids, dtype=torch.long)
    n = len(src_rows)
    outs: list[list[int]] = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    with torch.no_grad():
        memory, blocked = model.encode(_pad_rows(src_rows, codec.pad_id))
        prefix = torch.full((n, 0), codec.pad_id, dtype=torch.long)
        pad_col = torch.full((n, 1), codec.pad_id, dtype=torch.long)
        for _ in range(cfg.max_len):
            probe = torch.cat([prefix, pad_col], dim=1)
            h_last = model.decode_hidden(memory, blocked, probe)[:, -1]
            logits = model.lm_head(h_last)
            if guided:
                adv = model.target_q(h_last) - model.v_value(h_last).unsqueeze(-1)
                logits = logits.clone()
                logits[:, support] += cfg.beta * adv
            picks = np.argmax(logits.numpy(), axis=1)  # first max = lowest id
            for i, tok in enumerate(picks):
                if not done[i]:
                    outs[i].append(int(tok))
                    done[i] = tok == codec.eos_id
            if done.all():
                break
            next_col = torch.where(
                torch.from_numpy(done),
                torch.full((n,), codec.pad_id, dtype=torch.long),
                torch.from_numpy(picks).long(),
            )
            prefix = torch.cat([prefix, next_col[:, None]], dim=1)
    return outs


def decode(
    model: SeqModel, codec: SneCodec, src_ids: Sequence[int], cfg: DecodeConfig
) -> list[int]:
    return decode_batch(model, codec, [list(src_ids)], cfg)[0]


def predict_objectives_batch(
    model: SeqModel,
    codec: SneCodec,
    metadata_text: str,
    x: np.ndarray,
    ranges: ObjectiveRanges,
    cfg: DecodeConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Predicted objectives for each row of x, in row order.

    Returns (y_hat of shape (m, k), flagged of shape (m,)); rows whose
    generation fails to parse carry the range midpoint and a raised flag.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    k = len(ranges.y_min)
    rows = [codec.encode_source(metadata_text, xi) for xi in x]
    seqs = decode_batch(model, codec, rows, cfg)
    y_hat = np.empty((len(rows), k), dtype=float)
    flagged = np.zeros(len(rows), dtype=bool)
    for i, seq in enumerate(seqs):
        try:
            y_hat[i] = codec.parse_prediction(seq, k)
        except (ParseError, ArityError):
            y_hat[i] = ranges.midpoint
            flagged[i] = True
    return y_hat, flagged


def predict_objectives(
    model: SeqModel,
    codec: SneCodec,
    metadata_text: str,
    x: Sequence[float],
    ranges: ObjectiveRanges,
    cfg: DecodeConfig,
) -> tuple[np.ndarray, bool]:
    y, flags = predict_objectives_batch(
        model, codec, metadata_text, np.asarray(x)[None, :], ranges, cfg
    )
    return y[0], bool(flags[0])


class SurrogateOracle:
    """Model-backed objective evaluations for the evolutionary loop.

    Satisfies the optimizer's oracle protocol; last_flags exposes which
    rows of the most recent call fell back to the midpoint.
    """

    def __init__(
        self,
        model: SeqModel,
        codec: SneCodec,
        ranges: Mapping[int, ObjectiveRanges],
        cfg: DecodeConfig,
    ):
        self.model = model
        self.codec = codec
        self.ranges = dict(ranges)
        self.cfg = cfg
        self.last_flags: np.ndarray | None = None

    def evaluate(self, task: TaskSpec, x: np.ndarray) -> np.ndarray:
        r = self.ranges.get(task.task_id)
        if r is None:
            raise ConfigError(f"no objective ranges for task {task.task_id}")
        y, flags = predict_objectives_batch(
            self.model, self.codec, task.metadata_text, x, r, self.cfg
        )
        self.last_flags = flags
        return y
