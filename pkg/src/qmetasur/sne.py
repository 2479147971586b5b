"""Scientific-notation token codec.

Scalars are rendered as a sign token, a decade token and a fixed number of
mantissa digit tokens, e.g. 3.1415 with five digits becomes

    + <10^0> 3 1 4 1 5

Vectors wrap their components in brackets with comma separators; objective
tuples additionally end with EOS. The same module owns the vocabulary
(numeric tokens at fixed low ids, metadata words appended alphabetically)
and the word-level metadata prompt.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import ArityError, ConfigError, DomainError, ParseError, RangeError

PAD = "<pad>"
EOS = "</s>"
UNK = "<unk>"

_DIGITS = tuple(str(d) for d in range(10))


def exp_token(k: int) -> str:
    return f"<10^{k}>"


@dataclass(frozen=True)
class SneConfig:
    """Mantissa width and representable decade range of the codec."""

    n_digit: int = 8
    exp_min: int = -16
    exp_max: int = 16

    def __post_init__(self):
        if self.n_digit < 1:
            raise ConfigError(f"n_digit must be >= 1, got {self.n_digit}")
        if self.exp_min > self.exp_max:
            raise ConfigError(f"empty exponent range [{self.exp_min}, {self.exp_max}]")

    @property
    def segment_len(self) -> int:
        # sign + decade + mantissa digits
        return 2 + self.n_digit


def _round_sci(a: float, n_digit: int) -> tuple[str, int]:
    """Round a positive float to n_digit significant digits.

    Returns the digit string and the decade. Relies on the decimal
    formatter, which rounds half to even on the exact binary value and
    carries the decade when the mantissa rounds up to 10.
    """
    text = f"{a:.{n_digit - 1}e}"
    mant, _, exp = text.partition("e")
    return mant.replace(".", ""), int(exp)


def scalar_tokens(z: float, cfg: SneConfig) -> list[str]:
    """Encode one scalar as sign/decade/digit token strings."""
    if isinstance(z, bool) or not isinstance(z, (int, float)):
        raise DomainError(f"not a real scalar: {z!r}")
    z = float(z)
    if not math.isfinite(z):
        raise DomainError(f"cannot encode non-finite value {z!r}")
    if z == 0.0:
        return ["0", exp_token(0)] + ["0"] * cfg.n_digit
    digits, kappa = _round_sci(abs(z), cfg.n_digit)
    if not cfg.exp_min <= kappa <= cfg.exp_max:
        raise RangeError(
            f"decade {kappa} of {z!r} outside [{cfg.exp_min}, {cfg.exp_max}]"
        )
    sign = "+" if z > 0 else "-"
    return [sign, exp_token(kappa), *digits]


def _parse_exp_token(tok: str, cfg: SneConfig) -> int:
    if tok.startswith("<10^") and tok.endswith(">"):
        try:
            k = int(tok[4:-1])
        except ValueError:
            raise ParseError(f"bad decade token {tok!r}") from None
        if cfg.exp_min <= k <= cfg.exp_max:
            return k
    raise ParseError(f"bad decade token {tok!r}")


def tokens_to_scalar(tokens: Sequence[str], cfg: SneConfig) -> float:
    """Decode one scalar segment.

    Accepts any digit values (a leading 0 simply decodes to a mantissa
    below one); a "0" sign token decodes to exact zero regardless of the
    mantissa, mirroring the zero encoding.
    """
    if len(tokens) != cfg.segment_len:
        raise ParseError(
            f"segment length {len(tokens)}, expected {cfg.segment_len}"
        )
    sign, exp, *digits = tokens
    if sign not in ("+", "-", "0"):
        raise ParseError(f"bad sign token {sign!r}")
    kappa = _parse_exp_token(exp, cfg)
    if any(d not in _DIGITS for d in digits):
        bad = next(d for d in digits if d not in _DIGITS)
        raise ParseError(f"bad digit token {bad!r}")
    if sign == "0":
        return 0.0
    mant = digits[0] + "." + "".join(digits[1:]) if len(digits) > 1 else digits[0]
    return float(f"{sign}{mant}e{kappa}")


def vector_tokens(x: Sequence[float], cfg: SneConfig) -> list[str]:
    """Encode a decision vector: [ seg , seg , ... ]."""
    if len(x) == 0:
        raise ParseError("cannot encode an empty vector")
    out = ["["]
    for i, z in enumerate(x):
        if i:
            out.append(",")
        out.extend(scalar_tokens(z, cfg))
    out.append("]")
    return out


def objective_tokens(y: Sequence[float], cfg: SneConfig) -> list[str]:
    """Encode an objective tuple; same bracket form, EOS-terminated."""
    return vector_tokens(y, cfg) + [EOS]


def parse_objective_tokens(tokens: Sequence[str], k: int, cfg: SneConfig) -> list[float]:
    """Parse a bracketed list of exactly k scalar segments.

    The trailing EOS is optional, anything after it is a parse error.
    Raises ArityError when the bracket content holds the wrong number of
    segments and ParseError for any structural damage.
    """
    toks = list(tokens)
    if toks and toks[-1] == EOS:
        toks = toks[:-1]
    if EOS in toks:
        raise ParseError("tokens continue past EOS")
    if not toks or toks[0] != "[" or toks[-1] != "]":
        raise ParseError("missing enclosing brackets")
    body = toks[1:-1]
    segments: list[list[str]] = [[]]
    for t in body:
        if t == ",":
            segments.append([])
        else:
            segments[-1].append(t)
    if len(segments) != k:
        raise ArityError(f"expected {k} segments, found {len(segments)}")
    return [tokens_to_scalar(seg, cfg) for seg in segments]


def target_layout(k: int, cfg: SneConfig) -> list[int]:
    """Within-segment position of every token of an encoded objective tuple.

    Returns one entry per token of objective_tokens output: 0 for
    structural tokens (brackets, commas, EOS), otherwise the 1-based
    position inside the scalar segment (1 = sign, 2 = decade, 3 = first
    mantissa digit, ...). Training uses this to place its position
    weights.
    """
    if k < 1:
        raise DomainError(f"need at least one objective, got {k}")
    layout = [0]
    for i in range(k):
        if i:
            layout.append(0)
        layout.extend(range(1, cfg.segment_len + 1))
    layout.extend([0, 0])  # "]" and EOS
    return layout


# ---------------------------------------------------------------------------
# metadata prompt


@dataclass(frozen=True)
class Metadata:
    """Task descriptor rendered into the source prompt."""

    f_name: str
    f_id: str
    key_features: tuple[str, ...] = ()
    dim: int = 1

    def __post_init__(self):
        for text in (self.f_name, self.f_id, *self.key_features):
            if "\n" in text or text != text.strip() or not text:
                raise DomainError(f"bad metadata field {text!r}")
        if self.dim < 1:
            raise DomainError(f"dim must be >= 1, got {self.dim}")


def render_metadata(md: Metadata) -> str:
    """Render the fixed prompt template for one task.

    Key feature clauses and the dimensionality clause are joined with
    " | "; with no key features only the dimensionality clause remains.
    """
    clauses = [f"key feature {i + 1} is {k}" for i, k in enumerate(md.key_features)]
    clauses.append(f"the dimensionality is dim={md.dim}.")
    return (
        "You are a multi-objective multi-task surrogate model, "
        "predict fitness given m and pop; "
        f"function name is {md.f_name}, function ID is {md.f_id}, "
        + " | ".join(clauses)
    )


# ---------------------------------------------------------------------------
# vocabulary


def base_tokens(cfg: SneConfig) -> list[str]:
    """Numeric and special tokens, in their fixed id order."""
    toks = [PAD, EOS, UNK, "+", "-", *_DIGITS]
    toks.extend(exp_token(k) for k in range(cfg.exp_min, cfg.exp_max + 1))
    toks.extend(["[", "]", ","])
    return toks


@dataclass(frozen=True)
class Vocab:
    """Token table: base block at fixed ids, corpus words sorted after it.

    Word ids therefore depend only on the codec config and the corpus
    word set, never on corpus order.
    """

    tokens: tuple[str, ...]
    index: dict[str, int] = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocabulary")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, tok: str) -> int:
        i = self.index.get(tok)
        return self.index[UNK] if i is None else i

    def ids(self, toks: Iterable[str]) -> list[int]:
        return [self.id(t) for t in toks]

    def tok(self, i: int) -> str:
        return self.tokens[i]

    def words(self, text: str) -> list[int]:
        """Whitespace tokenization of metadata text; unknown words map to UNK."""
        return self.ids(text.split())

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.tokens) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            toks = fh.read().splitlines()
        if not toks:
            raise ParseError(f"empty vocabulary file {path}")
        return cls(tokens=tuple(toks))


def build_vocab(corpus: Iterable[str], cfg: SneConfig) -> Vocab:
    """Base block plus every whitespace word of the corpus, sorted."""
    base = base_tokens(cfg)
    seen = set(base)
    words = sorted({w for line in corpus for w in line.split()} - seen)
    return Vocab(tokens=tuple(base + words))


def numeric_support(vocab: Vocab, cfg: SneConfig) -> list[int]:
    """Ids of every token a well-formed prediction may contain.

    Signs, digits, all decade tokens, brackets, comma, EOS and PAD. UNK
    and metadata words are excluded.
    """
    toks = [t for t in base_tokens(cfg) if t != UNK]
    return [vocab.index[t] for t in toks]


# ---------------------------------------------------------------------------
# id-level codec


class SneCodec:
    """Binds a vocabulary to the token-string codec and works in ids."""

    def __init__(self, vocab: Vocab, cfg: SneConfig):
        self.vocab = vocab
        self.cfg = cfg
        self.pad_id = vocab.index[PAD]
        self.eos_id = vocab.index[EOS]
        self.numeric_ids = numeric_support(vocab, cfg)

    def encode_scalar(self, z: float) -> list[int]:
        return self.vocab.ids(scalar_tokens(z, self.cfg))

    def decode_scalar(self, ids: Sequence[int]) -> float:
        return tokens_to_scalar([self.vocab.tok(i) for i in ids], self.cfg)

    def encode_vector(self, x: Sequence[float]) -> list[int]:
        return self.vocab.ids(vector_tokens(x, self.cfg))

    def encode_objectives(self, y: Sequence[float]) -> list[int]:
        return self.vocab.ids(objective_tokens(y, self.cfg))

    def encode_source(self, metadata_text: str, x: Sequence[float]) -> list[int]:
        """Prompt ids: metadata words followed by the encoded decision vector."""
        return self.vocab.words(metadata_text) + self.encode_vector(x)

    def parse_prediction(self, ids: Sequence[int], k: int) -> list[float]:
        toks = [self.vocab.tok(i) for i in ids]
        return parse_objective_tokens(toks, k, self.cfg)

    def target_len(self, k: int) -> int:
        return len(target_layout(k, self.cfg))
