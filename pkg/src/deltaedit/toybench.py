"""Procedural attribute-conditioned spectrograms, an oracle probe, and the benchmark.

Clips are ``1 x 32 x 32`` (channel, frequency bin, frame). A melody is a
random walk over 8 pitch classes, one class per 4-frame segment, drawn as
fundamentals in bins 0-7. Timbres add overtones at offsets that are multiples
of 8, so they fold onto the fundamental's pitch class and never touch the
fundamental rows. Genre shapes the envelope inside each segment; mood shapes
it across segments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .condition import PROMPT_TEMPLATE, tokenize
from .errors import ParameterError, ShapeError
from .tensorio import atomic_write_text, load_tensor, save_tensor


class Attributes(NamedTuple):
    mood: str
    genre: str
    timbre: str

    def prompt(self) -> str:
        return PROMPT_TEMPLATE.format(mood=self.mood, genre=self.genre, timbre=self.timbre)


@dataclass(frozen=True)
class AttributeSpace:
    mood_patterns: dict = field(default_factory=lambda: {
        "upbeat": (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0),
        "relaxing": (1.0, 0.5, 1.0, 0.5, 1.0, 0.5, 1.0, 0.5),
        "peaceful": (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.45, 0.4),
    })
    genre_shapes: dict = field(default_factory=lambda: {
        "jazz": (1.0, 0.7, 0.45, 0.3),
        "rock": (1.0, 1.0, 1.0, 1.0),
        "classical": (0.45, 0.8, 1.0, 0.8),
    })
    timbre_templates: dict = field(default_factory=lambda: {
        "timbreA": {8: 0.8, 16: 0.6},
        "timbreB": {8: 0.9, 24: 0.5},
        "timbreC": {16: 0.7, 24: 0.7},
    })
    pitch_classes: int = 8
    freq_bins: int = 32
    frames: int = 32
    segment: int = 4
    walk_steps: tuple = (-2, -1, 1, 2)

    @property
    def moods(self) -> tuple[str, ...]:
        return tuple(self.mood_patterns)

    @property
    def genres(self) -> tuple[str, ...]:
        return tuple(self.genre_shapes)

    @property
    def timbres(self) -> tuple[str, ...]:
        return tuple(self.timbre_templates)

    @property
    def num_segments(self) -> int:
        return self.frames // self.segment

    @property
    def overtone_offsets(self) -> tuple[int, ...]:
        return tuple(sorted({o for tpl in self.timbre_templates.values() for o in tpl}))

    def timbre_vector(self, timbre: str) -> np.ndarray:
        tpl = self.timbre_templates[timbre]
        return np.array([tpl.get(o, 0.0) for o in self.overtone_offsets])

    def all_attributes(self) -> list[Attributes]:
        return [Attributes(m, g, t) for m in self.moods for g in self.genres for t in self.timbres]

    def category_of(self, word: str) -> str | None:
        w = word.lower()
        for cat, names in (("mood", self.moods), ("genre", self.genres), ("timbre", self.timbres)):
            if w in (n.lower() for n in names):
                return cat
        return None

    def canonical(self, word: str) -> str:
        for names in (self.moods, self.genres, self.timbres):
            for n in names:
                if n.lower() == word.lower():
                    return n
        raise ParameterError(f"unknown attribute {word!r}")

    def validate(self, attrs: Attributes) -> Attributes:
        attrs = Attributes(*attrs)
        if attrs.mood not in self.mood_patterns:
            raise ParameterError(f"unknown mood {attrs.mood!r}")
        if attrs.genre not in self.genre_shapes:
            raise ParameterError(f"unknown genre {attrs.genre!r}")
        if attrs.timbre not in self.timbre_templates:
            raise ParameterError(f"unknown timbre {attrs.timbre!r}")
        return attrs

    def parse_prompt(self, text: str) -> dict[str, str]:
        """Attribute words named in ``text``, keyed by category."""
        found = {}
        for tok in tokenize(text):
            cat = self.category_of(tok)
            if cat is not None:
                found[cat] = self.canonical(tok)
        return found

    def envelope(self, mood: str, genre: str) -> np.ndarray:
        seg = np.asarray(self.mood_patterns[mood], dtype=np.float64)
        shape = np.asarray(self.genre_shapes[genre], dtype=np.float64)
        return np.outer(seg, shape).reshape(-1)


DEFAULT_SPACE = AttributeSpace()


def melody_walk(melody_seed: int, space: AttributeSpace = DEFAULT_SPACE) -> np.ndarray:
    rng = np.random.default_rng(melody_seed)
    notes = np.empty(space.num_segments, dtype=np.int64)
    notes[0] = rng.integers(space.pitch_classes)
    steps = rng.choice(np.asarray(space.walk_steps), size=space.num_segments - 1)
    for i, step in enumerate(steps, start=1):
        notes[i] = (notes[i - 1] + step) % space.pitch_classes
    return notes


def generate_clip(attributes, melody_seed: int, space: AttributeSpace = DEFAULT_SPACE):
    """Render ``(spectrogram (1, F, T), melody (num_segments,))``."""
    attrs = space.validate(attributes)
    melody = melody_walk(melody_seed, space)
    env = space.envelope(attrs.mood, attrs.genre)
    spec = np.zeros((1, space.freq_bins, space.frames))
    frames = np.arange(space.frames)
    pitch = np.repeat(melody, space.segment)
    spec[0, pitch, frames] = env
    for offset, amp in space.timbre_templates[attrs.timbre].items():
        spec[0, pitch + offset, frames] = amp * env
    return spec, melody


@dataclass(frozen=True)
class ProbeResult:
    attributes: Attributes | None
    confidence: dict
    silence: bool = False

    @property
    def label(self) -> str:
        return "silence" if self.silence else "/".join(self.attributes)


def _nearest(vec: np.ndarray, candidates: dict) -> tuple[str, float]:
    names = list(candidates)
    dists = np.array([np.linalg.norm(vec - np.asarray(candidates[n])) for n in names])
    order = np.argsort(dists, kind="stable")
    best = names[order[0]]
    if len(names) == 1:
        return best, 1.0
    d0, d1 = dists[order[0]], dists[order[1]]
    conf = 1.0 if d1 <= 0 else float(np.clip(1.0 - d0 / d1, 0.0, 1.0))
    return best, conf


def _unit_max(v):
    m = np.max(v)
    return v / m if m > 0 else v


def attribute_probe(spectrogram, space: AttributeSpace = DEFAULT_SPACE) -> ProbeResult:
    """Oracle reading of mood, genre and timbre from a spectrogram."""
    x = np.asarray(spectrogram, dtype=np.float64)
    if x.ndim == 3:
        x = x.sum(axis=0)
    if x.shape != (space.freq_bins, space.frames):
        raise ShapeError(f"probe expects ({space.freq_bins}, {space.frames}) bins x frames, got {x.shape}")
    x = np.clip(x, 0.0, None)
    if x.max() <= 1e-8:
        return ProbeResult(None, {"mood": 0.0, "genre": 0.0, "timbre": 0.0}, silence=True)

    frames = np.arange(space.frames)
    pitch = np.argmax(x[: space.pitch_classes], axis=0)
    fund = x[pitch, frames]
    offsets = space.overtone_offsets
    over = np.stack([x[pitch + o, frames] for o in offsets])
    ratios = over.sum(axis=1) / max(fund.sum(), 1e-12)
    timbre, t_conf = _nearest(ratios, {t: space.timbre_vector(t) for t in space.timbres})

    stack = fund + over.sum(axis=0)
    seg = stack.reshape(space.num_segments, space.segment)
    within = np.mean([_unit_max(row) for row in seg], axis=0)
    genre, g_conf = _nearest(_unit_max(within), {g: _unit_max(np.asarray(s)) for g, s in space.genre_shapes.items()})
    across = _unit_max(seg.mean(axis=1))
    mood, m_conf = _nearest(across, {m: _unit_max(np.asarray(p)) for m, p in space.mood_patterns.items()})
    return ProbeResult(Attributes(mood, genre, timbre), {"mood": m_conf, "genre": g_conf, "timbre": t_conf})


def oracle_caption(clip, space: AttributeSpace = DEFAULT_SPACE) -> str:
    result = attribute_probe(getattr(clip, "data", clip), space)
    if result.silence:
        raise ParameterError("cannot caption a silent clip")
    return result.attributes.prompt()


class OracleScorer:
    """Semantic scorer: fraction of attributes named in the text that the probe confirms."""

    def __init__(self, space: AttributeSpace = DEFAULT_SPACE):
        self.space = space

    def score(self, clip, text: str) -> float:
        named = self.space.parse_prompt(text)
        if not named:
            return 0.0
        result = attribute_probe(getattr(clip, "data", clip), self.space)
        if result.silence:
            return 0.0
        predicted = result.attributes._asdict()
        return sum(predicted[cat] == value for cat, value in named.items()) / len(named)


class OracleCaptioner:
    def __init__(self, space: AttributeSpace = DEFAULT_SPACE):
        self.space = space

    def caption(self, clip) -> str:
        return oracle_caption(clip, self.space)


# --------------------------------------------------------------------------- dataset


@dataclass
class ToyDataset:
    spectrograms: np.ndarray
    labels: list[Attributes]
    melodies: np.ndarray
    melody_seeds: list[int]
    seed: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def prompts(self) -> list[str]:
        return [a.prompt() for a in self.labels]

    def prompt_tokens(self, i: int) -> list[str]:
        return tokenize(self.labels[i].prompt())

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_tensor(directory / "spectrograms.f32t", self.spectrograms)
        manifest = {
            "schema": "deltaedit.dataset/1",
            "seed": self.seed,
            "shape": list(self.spectrograms.shape),
            "items": [
                {"mood": a.mood, "genre": a.genre, "timbre": a.timbre, "melody_seed": int(s),
                 "melody": [int(v) for v in m], "prompt": a.prompt()}
                for a, s, m in zip(self.labels, self.melody_seeds, self.melodies)
            ],
        }
        atomic_write_text(directory / "manifest.json", json.dumps(manifest, indent=1) + "\n")

    @classmethod
    def load(cls, directory) -> "ToyDataset":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        items = manifest["items"]
        return cls(
            spectrograms=load_tensor(directory / "spectrograms.f32t"),
            labels=[Attributes(i["mood"], i["genre"], i["timbre"]) for i in items],
            melodies=np.array([i["melody"] for i in items], dtype=np.int64),
            melody_seeds=[i["melody_seed"] for i in items],
            seed=manifest["seed"],
        )


def build_dataset(n: int, seed: int = 0, space: AttributeSpace = DEFAULT_SPACE) -> ToyDataset:
    if n < 1:
        raise ParameterError("dataset size must be positive")
    rng = np.random.default_rng(seed)
    combos = space.all_attributes()
    picks = rng.integers(0, len(combos), size=n)
    melody_seeds = rng.integers(0, 2**31 - 1, size=n)
    specs, melodies, labels = [], [], []
    for k, ms in zip(picks, melody_seeds):
        spec, mel = generate_clip(combos[k], int(ms), space)
        specs.append(spec)
        melodies.append(mel)
        labels.append(combos[k])
    return ToyDataset(
        spectrograms=np.stack(specs).astype(np.float32),
        labels=labels,
        melodies=np.stack(melodies),
        melody_seeds=[int(s) for s in melody_seeds],
        seed=seed,
    )


def timbre_pairs(spec: Sequence[str]) -> list[tuple[str, str]]:
    """Parse ``["timbreA:timbreB", ...]`` into keyword pairs."""
    pairs = []
    for item in spec:
        src, sep, tgt = item.partition(":")
        if not sep or not src or not tgt:
            raise ParameterError(f"pair must look like source:target, got {item!r}")
        pairs.append((src, tgt))
    return pairs


# --------------------------------------------------------------------------- benchmark

BENCH_ARMS = ("full", "no_l2", "no_l2_no_delta")
DEFAULT_PAIRS = (("timbreA", "timbreB"), ("timbreB", "timbreA"), ("timbreB", "timbreC"))
BENCH_SCHEMA = "deltaedit.benchmark/1"


@dataclass(frozen=True)
class BenchmarkConfig:
    alpha: float = 0.04
    num_inference_steps: int = 100
    guidance_scale: float = 1.0
    num_captions: int = 64
    caption_seed: int = 0
    quality_threshold: float = 0.8
    arms: tuple = BENCH_ARMS
    first_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "arms", tuple(self.arms))
        unknown = [a for a in self.arms if a not in BENCH_ARMS]
        if unknown:
            raise ParameterError(f"unknown benchmark arms {unknown}; choose from {BENCH_ARMS}")
        if not 0 <= self.quality_threshold <= 1:
            raise ParameterError("quality_threshold must lie in [0, 1]")


@dataclass
class BenchmarkResult:
    reports: dict
    summary: dict
    comparison: dict
    quality: float
    config: dict

    def to_dict(self) -> dict:
        return {
            "schema": BENCH_SCHEMA,
            "config": self.config,
            "reconstruction_probe_accuracy": self.quality,
            "summary": self.summary,
            "comparison": self.comparison,
            "arms": {arm: rep.to_dict() for arm, rep in self.reports.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _seed_context(seed: int, pair_index: int, space: AttributeSpace) -> tuple[str, str]:
    rng = np.random.default_rng([int(seed), int(pair_index), 7])
    return space.moods[rng.integers(len(space.moods))], space.genres[rng.integers(len(space.genres))]


def _arm_request(arm, source, target, direction, config):
    from .editor import EditRequest

    kwargs = dict(num_inference_steps=config.num_inference_steps, guidance_scale=config.guidance_scale)
    if arm == "full":
        return EditRequest(source, target, direction=direction, alpha=config.alpha, **kwargs)
    if arm == "no_l2":
        return EditRequest(source, target, direction=direction, constraint_enabled=False, **kwargs)
    return EditRequest(source, target, use_delta=False, constraint_enabled=False, **kwargs)


def run_benchmark(denoiser, schedule, encoder, pairs=DEFAULT_PAIRS, n_seeds: int = 20,
                  config: BenchmarkConfig | None = None, bank=None, space: AttributeSpace = DEFAULT_SPACE,
                  log=None) -> BenchmarkResult:
    """Generate, edit under every ablation arm, and score with the oracle probe and chroma.

    Each seed gets a mood and genre drawn from ``(seed, pair)``; all arms
    share the seed's starting noise and source generation. Raises
    :class:`ModelQualityError` when fewer than ``quality_threshold`` of the
    source generations probe back to their prompt.
    """
    import torch
    from scipy import stats

    from .condition import direction_for_keywords, embed_prompt
    from .denoiser import Condition
    from .editor import _null_like, edit_batch, initial_noise, reconstruct_batch
    from .errors import ModelQualityError
    from .metrics import evaluate_batch

    config = config or BenchmarkConfig()
    if n_seeds < 1:
        raise ParameterError("n_seeds must be positive")
    pairs = [tuple(p) for p in pairs]
    for src, tgt in pairs:
        if space.category_of(src) != "timbre" or space.category_of(tgt) != "timbre":
            raise ParameterError(f"benchmark pairs swap timbres, got {src}:{tgt}")
    sched = schedule.with_inference_steps(config.num_inference_steps)
    dtype = denoiser.dtype
    seeds = [config.first_seed + i for i in range(n_seeds)]
    rows = {arm: [] for arm in config.arms}
    hits_source = []

    for p_idx, (src_kw, tgt_kw) in enumerate(pairs):
        src_kw, tgt_kw = space.canonical(src_kw), space.canonical(tgt_kw)
        direction = direction_for_keywords(src_kw, tgt_kw, encoder, bank=bank, n=config.num_captions,
                                           seed=config.caption_seed)
        groups: dict = {}
        for s in seeds:
            groups.setdefault(_seed_context(s, p_idx, space), []).append(s)
        for (mood, genre), group in sorted(groups.items()):
            src_attrs = Attributes(mood, genre, src_kw)
            tgt_attrs = Attributes(mood, genre, tgt_kw)
            source, target = src_attrs.prompt(), tgt_attrs.prompt()
            z_T = torch.stack([initial_noise(s, denoiser.config.latent_shape, dtype) for s in group])
            cond = Condition.from_embeddings(embed_prompt(source, encoder), batch=len(group), dtype=dtype)
            null = _null_like(encoder, len(group), dtype) if config.guidance_scale != 1 else None
            source_pass = reconstruct_batch(z_T, cond, sched, denoiser, config.guidance_scale, null)
            originals = source_pass[0].detach().numpy()
            for clip in originals:
                probe = attribute_probe(clip, space)
                hits_source.append(not probe.silence and probe.attributes == src_attrs)
            for arm in config.arms:
                request = _arm_request(arm, source, target, direction, config)
                _, edited, _, _, _ = edit_batch(request, group, denoiser, sched, encoder, z_T=z_T,
                                                source_pass=source_pass)
                for seed, orig, ed in zip(group, originals, edited.detach().numpy()):
                    probe = attribute_probe(ed, space)
                    rows[arm].append((seed, f"{src_kw}->{tgt_kw}", orig, ed, target,
                                      bool(not probe.silence and probe.attributes.timbre == tgt_kw)))
            if log is not None:
                log(f"{src_kw}->{tgt_kw} {mood}/{genre}: {len(group)} seeds")

    quality = float(np.mean(hits_source))
    if quality < config.quality_threshold:
        raise ModelQualityError(
            f"only {quality:.0%} of source generations match their prompt "
            f"(threshold {config.quality_threshold:.0%}); train the model longer"
        )

    scorer = OracleScorer(space)
    reports, summary = {}, {}
    for arm in config.arms:
        ordered = sorted(rows[arm], key=lambda r: (r[1], r[0]))
        report = evaluate_batch([(o, e, text, task) for _, task, o, e, text, _ in ordered], scorer,
                                config={"arm": arm})
        for row, (seed, _, _, _, _, hit) in zip(report.rows, ordered):
            row["seed"] = seed
            row["target_timbre_hit"] = hit
        reports[arm] = report
        summary[arm] = {
            "chroma": report.means["chroma"],
            "semantic": report.means["semantic"],
            "target_accuracy": float(np.mean([r[5] for r in ordered])),
            "count": len(ordered),
        }
    comparison = {}
    if "full" in reports and "no_l2" in reports:
        a = np.array([r["chroma"] for r in reports["full"].rows])
        b = np.array([r["chroma"] for r in reports["no_l2"].rows])
        diff = a - b
        test = stats.ttest_rel(a, b, alternative="greater") if np.any(diff != 0) else None
        comparison = {
            "metric": "chroma",
            "arms": ["full", "no_l2"],
            "mean_difference": float(diff.mean()),
            "paired_t_pvalue_one_sided": None if test is None else float(test.pvalue),
            "accuracy_gap": summary["full"]["target_accuracy"] - summary["no_l2"]["target_accuracy"],
        }
    cfg = {"pairs": [list(p) for p in pairs], "n_seeds": n_seeds, **{k: getattr(config, k) for k in
           ("alpha", "num_inference_steps", "guidance_scale", "num_captions", "caption_seed",
            "quality_threshold", "first_seed")}, "arms": list(config.arms)}
    return BenchmarkResult(reports, summary, comparison, quality, cfg)


def run_inversion_benchmark(denoiser, schedule, encoder, pairs=DEFAULT_PAIRS, n_seeds: int = 20,
                            config: BenchmarkConfig | None = None, inversion=None, bank=None,
                            space: AttributeSpace = DEFAULT_SPACE) -> dict:
    """Edit generator clips (not model samples) through caption, inversion and the full arm.

    Returns per-pair and overall target-timbre accuracy and mean chroma, plus
    one row per edited clip.
    """
    from .condition import direction_for_keywords
    from .inversion import InversionConfig, edit_real
    from .metrics import clip_chroma_similarity
    from .schedule import LatentClip

    config = config or BenchmarkConfig()
    inversion = inversion or InversionConfig(num_inference_steps=config.num_inference_steps)
    out = {"pairs": {}, "config": {"n_seeds": n_seeds, "alpha": config.alpha,
                                   "num_inference_steps": inversion.num_inference_steps}, "rows": []}
    hits, chromas = [], []
    for p_idx, (src_kw, tgt_kw) in enumerate(pairs):
        src_kw, tgt_kw = space.canonical(src_kw), space.canonical(tgt_kw)
        direction = direction_for_keywords(src_kw, tgt_kw, encoder, bank=bank, n=config.num_captions,
                                           seed=config.caption_seed)
        pair_hits, pair_chroma = [], []
        for i in range(n_seeds):
            seed = config.first_seed + i
            mood, genre = _seed_context(seed, p_idx, space)
            spec, _ = generate_clip(Attributes(mood, genre, src_kw), seed, space)
            clip = LatentClip(spec.astype(np.float32))
            res = edit_real(clip, None, direction, inversion, denoiser, schedule, encoder, captioner="oracle",
                            alpha=config.alpha).result
            probe = attribute_probe(res.edited.data, space)
            pair_hits.append(bool(not probe.silence and probe.attributes.timbre == tgt_kw))
            pair_chroma.append(clip_chroma_similarity(clip, res.edited))
            out["rows"].append({"seed": seed, "task": f"{src_kw}->{tgt_kw}", "chroma": pair_chroma[-1],
                                "target_timbre_hit": pair_hits[-1]})
        out["pairs"][f"{src_kw}->{tgt_kw}"] = {"target_accuracy": float(np.mean(pair_hits)),
                                              "chroma": float(np.mean(pair_chroma))}
        hits += pair_hits
        chromas += pair_chroma
    out["target_accuracy"] = float(np.mean(hits))
    out["chroma"] = float(np.mean(chromas))
    return out
