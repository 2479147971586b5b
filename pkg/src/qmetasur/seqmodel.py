"""Toy encoder-decoder sequence model with value heads, in double precision.

The backbone is a pre-norm transformer with shared input embeddings and
sinusoidal positions. On top of the decoder's last hidden layer sit a
language-model head over the full vocabulary, twin Q-heads and a V-head
(two-layer MLPs, hidden width twice the embedding width) over the numeric
action set, and Polyak-averaged target copies of the Q-heads. Everything
runs in float64 so finite-difference gradient checks are meaningful.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, fields

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DomainError, ParseError

_CKPT_SCHEMA = "qmetasur.ckpt.v1"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_actions: int
    max_src_len: int
    pad_id: int = 0
    d_model: int = 64
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_tgt_len: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        for name in ("vocab_size", "n_actions", "max_src_len", "max_tgt_len",
                     "d_model", "n_enc_layers", "n_dec_layers", "n_heads", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not 0 <= self.pad_id < self.vocab_size:
            raise ConfigError(f"pad_id {self.pad_id} outside vocabulary")


def _sinusoidal(n_pos: int, d: int) -> torch.Tensor:
    pos = torch.arange(n_pos, dtype=torch.float64)[:, None]
    i = torch.arange(0, d, 2, dtype=torch.float64)[None, :]
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(n_pos, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe


class _Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.wq = nn.Linear(d_model, d_model)
        self.wk = nn.Linear(d_model, d_model)
        self.wv = nn.Linear(d_model, d_model)
        self.wo = nn.Linear(d_model, d_model)

    def forward(self, q_in, kv_in, blocked=None):
        """blocked: bool tensor broadcastable to (B, heads, Lq, Lk), True = no look."""
        b, lq, _ = q_in.shape
        lk = kv_in.shape[1]

        def split(x, n):
            return x.view(b, n, self.n_heads, self.d_head).transpose(1, 2)

        q = split(self.wq(q_in), lq)
        k = split(self.wk(kv_in), lk)
        v = split(self.wv(kv_in), lk)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.d_head)
        if blocked is not None:
            scores = scores.masked_fill(blocked, float("-inf"))
        att = torch.softmax(scores, dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, lq, -1)
        return self.wo(out)


def _ffn(d_model: int, d_ff: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_model, d_ff), nn.GELU(), nn.Linear(d_ff, d_model))


class _EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.attn = _Attention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = _ffn(cfg.d_model, cfg.d_ff)

    def forward(self, x, blocked):
        h = self.norm1(x)
        x = x + self.attn(h, h, blocked)
        return x + self.ffn(self.norm2(x))


class _DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = _Attention(cfg.d_model, cfg.n_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = _Attention(cfg.d_model, cfg.n_heads)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.ffn = _ffn(cfg.d_model, cfg.d_ff)

    def forward(self, x, memory, causal, src_blocked):
        h = self.norm1(x)
        x = x + self.self_attn(h, h, causal)
        x = x + self.cross_attn(self.norm2(x), memory, src_blocked)
        return x + self.ffn(self.norm3(x))


def _head(d_model: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(d_model, 2 * d_model), nn.GELU(), nn.Linear(2 * d_model, d_out)
    )


class SeqModel(nn.Module):
    """Encoder-decoder with LM, twin-Q, V, and frozen target-Q heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        self.enc_layers = nn.ModuleList(_EncoderLayer(cfg) for _ in range(cfg.n_enc_layers))
        self.enc_norm = nn.LayerNorm(cfg.d_model)
        self.dec_layers = nn.ModuleList(_DecoderLayer(cfg) for _ in range(cfg.n_dec_layers))
        self.dec_norm = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size)
        self.q1 = _head(cfg.d_model, cfg.n_actions)
        self.q2 = _head(cfg.d_model, cfg.n_actions)
        self.v = _head(cfg.d_model, 1)
        self.target_q1 = _head(cfg.d_model, cfg.n_actions)
        self.target_q2 = _head(cfg.d_model, cfg.n_actions)
        for p in self.target_q1.parameters():
            p.requires_grad_(False)
        for p in self.target_q2.parameters():
            p.requires_grad_(False)
        n_pos = max(cfg.max_src_len, cfg.max_tgt_len + 1)
        self.register_buffer("pe", _sinusoidal(n_pos, cfg.d_model))
        self.to(torch.float64)
        self._reset_parameters(cfg.seed)

    # -- initialization ----------------------------------------------------

    def _reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if p.dim() >= 2:
                nn.init.xavier_uniform_(p, generator=gen)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
            else:  # layer-norm scales
                nn.init.ones_(p)
        self._copy_targets()

    def _copy_targets(self) -> None:
        with torch.no_grad():
            for online, target in ((self.q1, self.target_q1), (self.q2, self.target_q2)):
                for po, pt in zip(online.parameters(), target.parameters()):
                    pt.copy_(po)

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- forward passes ------------------------------------------------------

    def _check_ids(self, ids: torch.Tensor, limit: int, what: str) -> torch.Tensor:
        if ids.dim() != 2:
            raise DomainError(f"{what} ids must be (batch, length), got {tuple(ids.shape)}")
        if ids.shape[1] < 1 or ids.shape[1] > limit:
            raise DomainError(f"{what} length {ids.shape[1]} outside [1, {limit}]")
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise DomainError(f"{what} token id outside vocabulary")
        return ids.to(torch.long)

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.embed[ids] * math.sqrt(self.cfg.d_model)
        return x + self.pe[: ids.shape[1]]

    def encode(self, src_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (memory, src_blocked) where src_blocked marks PAD keys."""
        src_ids = self._check_ids(src_ids, self.cfg.max_src_len, "source")
        blocked = (src_ids == self.cfg.pad_id)[:, None, None, :]
        x = self._embed(src_ids)
        for layer in self.enc_layers:
            x = layer(x, blocked)
        return self.enc_norm(x), blocked

    def decode_hidden(
        self, memory: torch.Tensor, src_blocked: torch.Tensor, tgt_ids: torch.Tensor
    ) -> torch.Tensor:
        """Hidden state h_i for each target position, teacher-forced.

        The decoder input is the gold sequence shifted right behind a PAD
        start token, so h_i conditions on o_{<i} only.
        """
        tgt_ids = self._check_ids(tgt_ids, self.cfg.max_tgt_len, "target")
        start = torch.full_like(tgt_ids[:, :1], self.cfg.pad_id)
        dec_in = torch.cat([start, tgt_ids[:, :-1]], dim=1)
        n = dec_in.shape[1]
        causal = torch.triu(
            torch.ones(n, n, dtype=torch.bool, device=dec_in.device), diagonal=1
        )
        x = self._embed(dec_in)
        for layer in self.dec_layers:
            x = layer(x, memory, causal, src_blocked)
        return self.dec_norm(x)

    def forward_teacher_forced(
        self, src_ids: torch.Tensor, tgt_ids: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Logits (B, L, vocab) and hidden states (B, L, d) for gold targets."""
        memory, src_blocked = self.encode(src_ids)
        hidden = self.decode_hidden(memory, src_blocked, tgt_ids)
        return self.lm_head(hidden), hidden

    # -- value heads ---------------------------------------------------------

    def q_values(self, h: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.q1(h), self.q2(h)

    def v_value(self, h: torch.Tensor) -> torch.Tensor:
        return self.v(h).squeeze(-1)

    def target_q(self, h: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return torch.minimum(self.target_q1(h), self.target_q2(h))

    def polyak_update(self, alpha: float) -> None:
        """Target heads drift toward the online heads: t <- (1-a) t + a q."""
        if not 0.0 < alpha <= 1.0:
            raise ConfigError(f"polyak rate {alpha} outside (0, 1]")
        with torch.no_grad():
            for online, target in ((self.q1, self.target_q1), (self.q2, self.target_q2)):
                for po, pt in zip(online.parameters(), target.parameters()):
                    pt.mul_(1.0 - alpha).add_(po, alpha=alpha)

    def assert_finite(self) -> None:
        for name, p in self.named_parameters():
            if not torch.isfinite(p).all():
                raise DomainError(f"non-finite values in parameter {name}")


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(model: SeqModel, loss_fn, n_probes: int = 25, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes n_probes randomly chosen trainable parameter entries with step
    1e-4. The denominator is floored at 1e-3 so entries whose true gradient
    is essentially zero compare absolutely at that scale.
    """
    step = 1e-4
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    model.zero_grad(set_to_none=True)
    loss = loss_fn(model)
    if not torch.isfinite(loss):
        raise DomainError(f"non-finite loss {float(loss)}")
    if loss.requires_grad:  # a constant loss legitimately has no graph
        loss.backward()
    grads = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
             for n, p in params}
    rng = np.random.default_rng(seed)
    worst = 0.0
    sizes = np.array([p.numel() for _, p in params])
    for _ in range(n_probes):
        which = int(rng.choice(len(params), p=sizes / sizes.sum()))
        name, p = params[which]
        flat = int(rng.integers(p.numel()))
        analytic = float(grads[name].view(-1)[flat])
        with torch.no_grad():
            original = float(p.view(-1)[flat])
            p.view(-1)[flat] = original + step
            up = float(loss_fn(model))
            p.view(-1)[flat] = original - step
            down = float(loss_fn(model))
            p.view(-1)[flat] = original
        fd = (up - down) / (2.0 * step)
        err = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-3)
        worst = max(worst, err)
    model.zero_grad(set_to_none=True)
    return worst


# ---------------------------------------------------------------------------
# checkpoints: text manifest plus one little-endian float64 blob


def save_checkpoint(model: SeqModel, path) -> None:
    cfg = model.cfg
    header = io.StringIO()
    header.write(f"{_CKPT_SCHEMA}\n")
    for f in fields(ModelConfig):
        header.write(f"{f.name}={getattr(cfg, f.name)}\n")
    blobs = []
    total = 0
    for n, p in model.named_parameters():
        shape = ",".join(str(s) for s in p.shape) or "1"
        header.write(f"tensor {n} {shape} float64\n")
        arr = p.detach().cpu().numpy().astype("<f8")
        blobs.append(arr.tobytes())
        total += arr.size
    header.write(f"blob {total}\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("utf-8"))
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> SeqModel:
    with open(path, "rb") as fh:
        first = fh.readline().decode("utf-8").strip()
        if first != _CKPT_SCHEMA:
            raise ParseError(f"unknown checkpoint header {first!r} in {path}")
        kwargs: dict = {}
        tensors: list[tuple[str, tuple[int, ...]]] = []
        while True:
            line = fh.readline().decode("utf-8").strip()
            if not line:
                raise ParseError(f"truncated checkpoint manifest in {path}")
            if line.startswith("blob "):
                total = int(line.split()[1])
                break
            if line.startswith("tensor "):
                _, name, shape, dtype = line.split()
                if dtype != "float64":
                    raise ParseError(f"unsupported dtype {dtype} in {path}")
                tensors.append((name, tuple(int(s) for s in shape.split(","))))
            else:
                key, _, value = line.partition("=")
                kwargs[key] = int(value)
        raw = fh.read(total * 8)
    if len(raw) != total * 8:
        raise ParseError(f"checkpoint blob truncated in {path}")
    model = SeqModel(ModelConfig(**kwargs))
    flat = np.frombuffer(raw, dtype="<f8")
    offset = 0
    named = dict(model.named_parameters())
    with torch.no_grad():
        for name, shape in tensors:
            if name not in named:
                raise ParseError(f"unknown tensor {name} in {path}")
            n = int(np.prod(shape)) if shape else 1
            chunk = flat[offset : offset + n].reshape(shape)
            named[name].copy_(torch.from_numpy(chunk.copy()))
            offset += n
    if offset != total:
        raise ParseError(f"checkpoint blob size mismatch in {path}")
    return model
