"""Chromagram similarity, pluggable semantic scoring and batch evaluation reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.signal import stft

from .errors import ConfigurationError, ParameterError, ShapeError

REPORT_SCHEMA = "deltaedit.eval_report/1"
TOY_PITCH_CLASSES = 8
AUDIO_FRAME = 2048
AUDIO_HOP = 512
_A0_HZ = 27.5


def _data(clip):
    return np.asarray(getattr(clip, "data", clip), dtype=np.float64)


def chromagram(clip, pitch_classes: int = TOY_PITCH_CLASSES, bin_frequencies=None) -> np.ndarray:
    """Fold a ``(channels, bins, frames)`` clip into ``(classes, frames)``.

    Energies are magnitudes summed over channels. Without ``bin_frequencies``
    bin ``b`` lands in class ``b mod pitch_classes``. With them, each bin is
    assigned the semitone class of its centre frequency (12 classes, C = 0);
    bins below A0 share A0's class so no energy is dropped.
    """
    x = _data(clip)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.size == 0:
        raise ParameterError(f"chromagram needs a non-empty (channels, bins, frames) clip, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ParameterError("clip contains non-finite values")
    energy = np.abs(x).sum(axis=0)
    n_bins = energy.shape[0]
    if bin_frequencies is None:
        classes = np.arange(n_bins) % pitch_classes
        n_classes = pitch_classes
    else:
        freqs = np.asarray(bin_frequencies, dtype=np.float64)
        if freqs.shape != (n_bins,):
            raise ShapeError(f"{freqs.size} bin frequencies for {n_bins} bins")
        classes = semitone_class(freqs)
        n_classes = 12
    out = np.zeros((n_classes, energy.shape[1]))
    np.add.at(out, classes, energy)
    return out


def semitone_class(freqs) -> np.ndarray:
    f = np.maximum(np.asarray(freqs, dtype=np.float64), _A0_HZ)
    midi = np.rint(69 + 12 * np.log2(f / 440.0)).astype(np.int64)
    return midi % 12


def chromagram_audio(waveform, sample_rate: int = 16000, frame: int = AUDIO_FRAME, hop: int = AUDIO_HOP) -> np.ndarray:
    """12-class chromagram of a mono waveform from its magnitude STFT."""
    y = np.asarray(waveform, dtype=np.float64)
    if y.ndim != 1 or y.size == 0:
        raise ParameterError("waveform must be a non-empty mono signal")
    freqs, _, Z = stft(y, fs=sample_rate, nperseg=frame, noverlap=frame - hop, boundary="even", padded=True)
    return chromagram(np.abs(Z)[None], bin_frequencies=freqs)


def chroma_similarity(a, b) -> float:
    """Cosine similarity of flattened chromagrams, floored at 0; two silent inputs score 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"chromagram shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    cos = float(np.dot(a.ravel(), b.ravel()) / (na * nb))
    return min(max(cos, 0.0), 1.0)


def clip_chroma_similarity(a, b, pitch_classes: int = TOY_PITCH_CLASSES) -> float:
    return chroma_similarity(chromagram(a, pitch_classes), chromagram(b, pitch_classes))


class SemanticScorerInterface(Protocol):
    def score(self, clip, text: str) -> float: ...


def semantic_similarity(clip, text: str, scorer: SemanticScorerInterface | None) -> float:
    if scorer is None:
        raise ConfigurationError("no semantic scorer registered")
    value = float(scorer.score(clip, text))
    if not 0.0 <= value <= 1.0 or math.isnan(value):
        raise ParameterError(f"scorer returned {value}, expected a value in [0, 1]")
    return value


@dataclass
class EvalReport:
    rows: list
    means: dict
    task_means: dict
    failures: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "avg_definition": "per-row mean of semantic and chroma, averaged over rows",
            "rows": self.rows,
            "means": self.means,
            "task_means": self.task_means,
            "failures": self.failures,
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["rows"], d["means"], d["task_means"], d.get("failures", 0), d.get("config", {}))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["index", "task", "semantic", "chroma", "avg", "error"])
        for r in self.rows:
            writer.writerow([r["index"], r.get("task", ""), _fmt(r["semantic"]), _fmt(r["chroma"]),
                             _fmt(r["avg"]), r.get("error") or ""])
        return buf.getvalue()


def _fmt(v):
    return "" if v is None else repr(float(v))


def _column_means(rows) -> dict:
    good = [r for r in rows if r.get("error") is None]
    if not good:
        return {"semantic": None, "chroma": None, "avg": None, "count": 0}
    return {
        "semantic": float(np.mean([r["semantic"] for r in good])),
        "chroma": float(np.mean([r["chroma"] for r in good])),
        "avg": float(np.mean([r["avg"] for r in good])),
        "count": len(good),
    }


def evaluate_batch(pairs: Sequence, scorer: SemanticScorerInterface | None,
                   pitch_classes: int = TOY_PITCH_CLASSES, config: dict | None = None) -> EvalReport:
    """Score ``(original, edited, target_text[, task])`` rows.

    A row whose scoring raises is kept with its error message and left out of
    every mean.
    """
    if not pairs:
        raise ParameterError("nothing to evaluate")
    rows = []
    for i, pair in enumerate(pairs):
        original, edited, text = pair[:3]
        task = pair[3] if len(pair) > 3 else "default"
        row = {"index": i, "task": task, "semantic": None, "chroma": None, "avg": None, "error": None}
        try:
            chroma = clip_chroma_similarity(original, edited, pitch_classes)
            sem = semantic_similarity(edited, text, scorer)
            row.update(semantic=sem, chroma=chroma, avg=(sem + chroma) / 2)
        except Exception as exc:  # noqa: BLE001 - failures are reported per row
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    tasks = sorted({r["task"] for r in rows})
    return EvalReport(
        rows=rows,
        means=_column_means(rows),
        task_means={t: _column_means([r for r in rows if r["task"] == t]) for t in tasks},
        failures=sum(r["error"] is not None for r in rows),
        config=dict(config or {}),
    )
