"""Prompt embeddings, caption synthesis and embedding-space edit directions.

A :class:`PromptEmbedding` has two branches. ``sentence`` is a padded
``L x D_s`` matrix of per-token vectors and ``sequence`` is a fixed-size
``K x D_g`` matrix produced by a small mixer that reads the sentence branch
and a pooled summary vector. The denoiser attends over both.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import ConfigurationError, ParameterError, ShapeError, VocabularyError

PROMPT_TEMPLATE = "A {mood} {genre} music with {timbre} performance."

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return [tok.lower() for tok in _TOKEN_RE.findall(text)]


def _as_tokens(prompt) -> list[str]:
    if isinstance(prompt, str):
        return tokenize(prompt)
    return [str(t).lower() for t in prompt]


@dataclass(frozen=True)
class PromptEmbedding:
    sentence: np.ndarray
    sequence: np.ndarray
    pooled: np.ndarray
    valid_mask: np.ndarray
    tokens: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("sentence", "sequence", "pooled"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(arr)):
                raise ParameterError(f"{name} branch contains non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        mask = np.asarray(self.valid_mask, dtype=bool)
        mask.setflags(write=False)
        object.__setattr__(self, "valid_mask", mask)
        if self.sentence.ndim != 2 or self.sequence.ndim != 2 or self.pooled.ndim != 1:
            raise ShapeError("sentence/sequence must be matrices and pooled a vector")
        if mask.shape != (self.sentence.shape[0],):
            raise ShapeError("valid_mask length must equal the sentence length")

    @property
    def max_length(self) -> int:
        return self.sentence.shape[0]

    @property
    def num_sequence_tokens(self) -> int:
        return self.sequence.shape[0]

    @property
    def num_condition_tokens(self) -> int:
        return self.sentence.shape[0] + self.sequence.shape[0]

    def pooled_sentence(self) -> np.ndarray:
        """Mean of the sentence branch over valid positions (zeros when empty)."""
        if not self.valid_mask.any():
            return np.zeros(self.sentence.shape[1])
        return self.sentence[self.valid_mask].mean(axis=0)

    def equals(self, other: "PromptEmbedding") -> bool:
        return (
            np.array_equal(self.sentence, other.sentence)
            and np.array_equal(self.sequence, other.sequence)
            and np.array_equal(self.pooled, other.pooled)
            and np.array_equal(self.valid_mask, other.valid_mask)
        )


class TextEncoder(Protocol):
    """Anything that maps a token list to a :class:`PromptEmbedding`.

    Adapters for pretrained encoders implement this and nothing else changes.
    """

    max_length: int
    num_sequence_tokens: int

    def encode(self, tokens: Sequence[str]) -> PromptEmbedding: ...


def _softmax(x, axis=-1):
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


class ToyTextEncoder:
    """Seeded linear stand-in for the two-branch text encoder.

    Sentence rows are ``token_embedding + context_weight * mean(token
    embeddings) + position_embedding``; the context term plays the role of a
    contextual encoder. The pooled vector is a projection of the valid-position
    mean, and the sequence branch is produced by ``K`` query rows attending
    once over the projected sentence rows plus the projected pooled vector.
    """

    def __init__(
        self,
        vocab: Iterable[str],
        max_length: int = 16,
        sentence_dim: int = 32,
        sequence_dim: int = 32,
        pooled_dim: int = 16,
        num_sequence_tokens: int = 8,
        context_weight: float = 8.0,
        position_scale: float = 0.1,
        seed: int = 0,
    ):
        words = []
        for w in vocab:
            w = w.lower()
            if w not in words:
                words.append(w)
        if not words:
            raise ConfigurationError("encoder vocabulary is empty")
        self.vocab = tuple(words)
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.max_length = int(max_length)
        self.sentence_dim = int(sentence_dim)
        self.sequence_dim = int(sequence_dim)
        self.pooled_dim = int(pooled_dim)
        self.num_sequence_tokens = int(num_sequence_tokens)
        self.context_weight = float(context_weight)
        self.position_scale = float(position_scale)
        self.seed = int(seed)

        rng = np.random.default_rng(seed)
        ds, dg, dc = self.sentence_dim, self.sequence_dim, self.pooled_dim
        self.token_table = rng.standard_normal((len(self.vocab), ds))
        self.position_table = position_scale * rng.standard_normal((self.max_length, ds))
        self.pool_proj = rng.standard_normal((ds, dc)) / np.sqrt(ds)
        self.sentence_to_seq = rng.standard_normal((ds, dg)) / np.sqrt(ds)
        self.pooled_to_seq = rng.standard_normal((dc, dg)) / np.sqrt(dc)
        self.seq_queries = rng.standard_normal((self.num_sequence_tokens, dg))

    def config(self) -> dict:
        return {
            "vocab": list(self.vocab),
            "max_length": self.max_length,
            "sentence_dim": self.sentence_dim,
            "sequence_dim": self.sequence_dim,
            "pooled_dim": self.pooled_dim,
            "num_sequence_tokens": self.num_sequence_tokens,
            "context_weight": self.context_weight,
            "position_scale": self.position_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "ToyTextEncoder":
        return cls(**cfg)

    def token_ids(self, tokens: Sequence[str]) -> list[int]:
        unknown = [t for t in tokens if t not in self.index]
        if unknown:
            raise VocabularyError(unknown)
        return [self.index[t] for t in tokens]

    def encode(self, tokens: Sequence[str]) -> PromptEmbedding:
        tokens = [t.lower() for t in tokens]
        if len(tokens) > self.max_length:
            raise ParameterError(f"prompt has {len(tokens)} tokens, limit is {self.max_length}")
        ids = self.token_ids(tokens)
        n = len(ids)
        L, ds = self.max_length, self.sentence_dim
        sentence = np.zeros((L, ds))
        mask = np.zeros(L, dtype=bool)
        mask[:n] = True
        if n:
            raw = self.token_table[ids]
            sentence[:n] = raw + self.context_weight * raw.mean(axis=0) + self.position_table[:n]
            pooled_in = sentence[:n].mean(axis=0)
        else:
            pooled_in = np.zeros(ds)
        pooled = pooled_in @ self.pool_proj

        keys = np.vstack([sentence[:n] @ self.sentence_to_seq, (pooled @ self.pooled_to_seq)[None, :]])
        attn = _softmax(self.seq_queries @ keys.T / np.sqrt(self.sequence_dim), axis=-1)
        sequence = self.seq_queries + attn @ keys
        return PromptEmbedding(sentence, sequence, pooled, mask, tuple(tokens))


def embed_prompt(prompt, encoder: TextEncoder) -> PromptEmbedding:
    return encoder.encode(_as_tokens(prompt))


# --------------------------------------------------------------------------- captions


@dataclass(frozen=True)
class CaptionBank:
    """Caption templates with one ``{KEY}`` slot plus optional attribute slots."""

    templates: tuple[str, ...]
    moods: tuple[str, ...] = ()
    genres: tuple[str, ...] = ()
    timbres: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "templates", tuple(self.templates))
        for name in ("moods", "genres", "timbres"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for tpl in self.templates:
            fields = _template_fields(tpl)
            if fields.count("KEY") != 1:
                raise ConfigurationError(f"template must contain exactly one {{KEY}} slot: {tpl!r}")
            for f in fields:
                if f != "KEY" and f not in _SLOT_VOCAB:
                    raise ConfigurationError(f"unknown slot {{{f}}} in template {tpl!r}")

    def vocabulary(self, slot: str) -> tuple[str, ...]:
        return getattr(self, _SLOT_VOCAB[slot])

    def words(self) -> list[str]:
        out = []
        for tpl in self.templates:
            out.extend(tokenize(re.sub(r"\{[^}]*\}", " ", tpl)))
        for vocab in (self.moods, self.genres, self.timbres):
            for w in vocab:
                out.extend(tokenize(w))
        return out

    def to_dict(self) -> dict:
        return {
            "templates": list(self.templates),
            "moods": list(self.moods),
            "genres": list(self.genres),
            "timbres": list(self.timbres),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CaptionBank":
        try:
            return cls(
                templates=data["templates"],
                moods=data.get("moods", ()),
                genres=data.get("genres", ()),
                timbres=data.get("timbres", ()),
            )
        except KeyError as exc:
            raise ConfigurationError(f"caption bank is missing {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CaptionBank":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


_SLOT_VOCAB = {"mood": "moods", "genre": "genres", "timbre": "timbres"}


def _template_fields(tpl: str) -> list[str]:
    return [f for _, f, _, _ in string.Formatter().parse(tpl) if f is not None]


DEFAULT_MOODS = ("upbeat", "relaxing", "peaceful")
DEFAULT_GENRES = ("jazz", "rock", "classical")
DEFAULT_TIMBRES = ("timbreA", "timbreB", "timbreC")


def default_caption_bank() -> CaptionBank:
    return CaptionBank(
        templates=(
            "A {mood} {genre} music with {KEY} performance.",
            "A {mood} {genre} song featuring {KEY}.",
            "{KEY} plays a {mood} {genre} tune.",
            "This {genre} piece is {mood} and led by {KEY}.",
            "A {mood} track in {genre} style with {KEY}.",
            "Listen to {KEY} in this {mood} {genre} music.",
        ),
        moods=DEFAULT_MOODS,
        genres=DEFAULT_GENRES,
        timbres=DEFAULT_TIMBRES,
    )


def default_vocabulary(bank: CaptionBank | None = None) -> list[str]:
    bank = bank or default_caption_bank()
    words = tokenize(PROMPT_TEMPLATE.replace("{mood}", "").replace("{genre}", "").replace("{timbre}", ""))
    words += bank.words()
    return words


def synthesize_captions(keyword: str, bank: CaptionBank, n: int, seed: int) -> list[str]:
    """Fill bank templates with ``keyword`` and random slot values.

    Combinations are drawn without replacement while enough exist, so the
    captions are distinct whenever possible. Slot vocabularies never offer the
    keyword itself, keeping it present exactly once.
    """
    if n < 1:
        raise ParameterError("n must be at least 1")
    if not bank.templates:
        raise ConfigurationError("caption bank has no templates")
    combos: list[tuple[str, dict]] = []
    for tpl in bank.templates:
        slots = [f for f in dict.fromkeys(_template_fields(tpl)) if f != "KEY"]
        pools = []
        for slot in slots:
            values = [v for v in bank.vocabulary(slot) if v.lower() != keyword.lower()]
            if not values:
                raise ConfigurationError(f"caption bank has no values for slot {{{slot}}}")
            pools.append(values)
        for values in _product(pools):
            combos.append((tpl, dict(zip(slots, values))))
    rng = np.random.default_rng(seed)
    if n <= len(combos):
        picks = rng.choice(len(combos), size=n, replace=False)
    else:
        picks = rng.integers(0, len(combos), size=n)
    return [combos[i][0].format(KEY=keyword, **combos[i][1]) for i in picks]


def _product(pools):
    if not pools:
        yield ()
        return
    head, *rest = pools
    for v in head:
        for tail in _product(rest):
            yield (v, *tail)


def write_captions(path, captions: Sequence[str]) -> None:
    Path(path).write_text("".join(c.replace("\n", " ") + "\n" for c in captions), encoding="utf-8")


def read_captions(path) -> list[str]:
    return [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


# --------------------------------------------------------------------------- edit direction


@dataclass(frozen=True)
class EditDirection:
    delta: np.ndarray
    source_keyword: str
    target_keyword: str
    num_captions: int = 1
    position_mask: np.ndarray | None = field(default=None)

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=np.float64)
        if delta.ndim != 1 or not np.all(np.isfinite(delta)):
            raise ParameterError("delta must be a finite vector")
        delta.setflags(write=False)
        object.__setattr__(self, "delta", delta)
        if not self.source_keyword or not self.target_keyword:
            raise ParameterError("keywords must be non-empty")
        if self.source_keyword == self.target_keyword:
            raise ParameterError("source and target keywords must differ")
        if self.num_captions < 1:
            raise ParameterError("num_captions must be positive")

    @classmethod
    def zero(cls, dim: int, source_keyword="source", target_keyword="target") -> "EditDirection":
        return cls(np.zeros(dim), source_keyword, target_keyword, 1)


def _mean_pooled(captions: Sequence[str], encoder: TextEncoder) -> np.ndarray:
    return np.mean([embed_prompt(c, encoder).pooled_sentence() for c in captions], axis=0)


def compute_delta(
    captions_src: Sequence[str],
    captions_tgt: Sequence[str],
    encoder: TextEncoder,
    source_keyword: str = "source",
    target_keyword: str = "target",
) -> EditDirection:
    """Difference of set-mean sentence embeddings (target minus source)."""
    if not captions_src or not captions_tgt:
        raise ParameterError("both caption sets must be non-empty")
    delta = _mean_pooled(captions_tgt, encoder) - _mean_pooled(captions_src, encoder)
    return EditDirection(delta, source_keyword, target_keyword, min(len(captions_src), len(captions_tgt)))


def direction_for_keywords(
    source_keyword: str,
    target_keyword: str,
    encoder: TextEncoder,
    bank: CaptionBank | None = None,
    n: int = 64,
    seed: int = 0,
) -> EditDirection:
    """Synthesize both caption sets with a shared seed and return their delta."""
    bank = bank or default_caption_bank()
    src = synthesize_captions(source_keyword, bank, n, seed)
    tgt = synthesize_captions(target_keyword, bank, n, seed)
    return compute_delta(src, tgt, encoder, source_keyword, target_keyword)


def apply_edit(E: PromptEmbedding, direction: EditDirection, E_target: PromptEmbedding) -> PromptEmbedding:
    """Shift the sentence branch by ``delta`` and take the target's sequence branch."""
    delta = direction.delta
    if delta.shape != (E.sentence.shape[1],):
        raise ShapeError(f"delta has length {delta.shape[0]}, sentence dim is {E.sentence.shape[1]}")
    if E_target.sequence.shape != E.sequence.shape:
        raise ShapeError("target sequence branch shape differs from the source's")
    positions = E.valid_mask if direction.position_mask is None else np.asarray(direction.position_mask, bool)
    if positions.shape != E.valid_mask.shape:
        raise ShapeError("position mask length must equal the sentence length")
    sentence = np.array(E.sentence)
    sentence[positions] += delta
    return PromptEmbedding(sentence, E_target.sequence, E.pooled, E.valid_mask, E.tokens)
