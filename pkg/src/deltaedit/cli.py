"""Command-line interface.

Every subcommand resolves its parameters from built-in defaults, then an
optional INI file (section named after the subcommand, or a previous run's
``manifest.json``), then explicit flags. The resolved parameters are echoed
into the run directory as ``config.ini`` and inside ``manifest.json``, so
``deltaedit <command> --config <run>/config.ini`` repeats a run exactly.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import configparser
import difflib
import hashlib
import json
import os
import re
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .errors import DeltaEditError

RUN_ROOT_ENV = "DELTAEDIT_RUN_ROOT"
MANIFEST_SCHEMA = "deltaedit.run/1"


class UsageError(Exception):
    pass


def _bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _path(value) -> str:
    return str(Path(value).expanduser().resolve())


@dataclass(frozen=True)
class Param:
    name: str
    type: Callable
    default: Any
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


MODEL = Param("model", _path, None, "denoiser checkpoint (.f32k) written by train-toy")
STEPS = Param("steps", int, 100, "DDIM inference steps")
GUIDANCE = Param("guidance", float, 1.0, "classifier-free guidance scale (1 = conditional only)")
ALPHA = Param("alpha", float, 0.04, "gradient step on z_t against attention drift")
CAPTIONS = Param("captions", int, 64, "captions per keyword when building an edit direction")
CAPTION_SEED = Param("caption_seed", int, 0, "seed for caption synthesis")
BANK = Param("bank", str, "", "caption bank JSON (default: built-in bank)")

PARAMS: dict[str, list[Param]] = {
    "train-toy": [
        Param("dataset_size", int, 8192, "number of generated training clips"),
        Param("dataset_seed", int, 0, "seed for the training set"),
        Param("epochs", int, 24, "training epochs"),
        Param("seed", int, 0, "initialisation and batching seed"),
        Param("channels", str, "16,32", "U-Net stage widths, comma separated"),
        Param("attn_dim", int, 32, "cross-attention width"),
        Param("heads", int, 4, "attention heads"),
        Param("batch_size", int, 32, "minibatch size"),
        Param("lr", float, 2e-3, "peak learning rate"),
        Param("p_uncond", float, 0.1, "condition dropout probability"),
        Param("latent_scale", float, 6.0, "clips are multiplied by this before diffusion"),
        Param("encoder_seed", int, 0, "toy text encoder seed"),
    ],
    "generate": [
        MODEL,
        Param("prompt", str, None, "text prompt"),
        Param("seed", int, 0, "first noise seed"),
        Param("count", int, 1, "number of clips (seeds seed .. seed+count-1)"),
        STEPS,
        GUIDANCE,
    ],
    "edit": [
        MODEL,
        Param("source", str, None, "source prompt"),
        Param("target", str, "", "target prompt (default: source with the keyword swapped)"),
        Param("target_keyword", str, "", "keyword to swap in"),
        Param("source_keyword", str, "", "keyword to swap out (default: same attribute category in the source)"),
        ALPHA,
        STEPS,
        GUIDANCE,
        Param("seed", int, 0, "first noise seed"),
        Param("count", int, 1, "number of seeds"),
        Param("constraint", _bool, True, "apply the attention constraint"),
        Param("delta", _bool, True, "edit with the caption-derived direction instead of the raw target prompt"),
        Param("loss_reduction", str, "stacked", "combine sites as stacked, sum or mean"),
        CAPTIONS,
        CAPTION_SEED,
        BANK,
    ],
    "invert-edit": [
        MODEL,
        Param("input", _path, None, "clip to edit (.f32t, 1x32x32)"),
        Param("caption", str, "", "caption of the input (default: built-in captioner)"),
        Param("captioner", str, "oracle", "registered captioner name"),
        Param("target", str, "", "target prompt (default: caption with the keyword swapped)"),
        Param("target_keyword", str, "", "keyword to swap in"),
        Param("source_keyword", str, "", "keyword to swap out"),
        ALPHA,
        STEPS,
        Param("inversion_guidance", float, 1.0, "guidance during inversion"),
        Param("autocorr_weight", float, 0.0, "autocorrelation regulariser weight"),
        Param("autocorr_iters", int, 0, "regulariser iterations per inversion step"),
        Param("autocorr_step", float, 0.1, "regulariser step size"),
        Param("constraint", _bool, True, "apply the attention constraint"),
        Param("delta", _bool, True, "edit with the caption-derived direction"),
        CAPTIONS,
        CAPTION_SEED,
        BANK,
    ],
    "delta": [
        Param("model", _path, "", "checkpoint whose text encoder to use (default: fresh toy encoder)"),
        Param("source_keyword", str, None, "keyword removed by the edit"),
        Param("target_keyword", str, None, "keyword added by the edit"),
        CAPTIONS,
        CAPTION_SEED,
        BANK,
        Param("encoder_seed", int, 0, "toy encoder seed when no model is given"),
    ],
    "bench": [
        MODEL,
        Param("pairs", str, "timbreA:timbreB,timbreB:timbreA,timbreB:timbreC", "comma separated source:target pairs"),
        Param("seeds", int, 20, "seeds per pair"),
        Param("first_seed", int, 0, "first seed"),
        Param("arms", str, "full,no_l2,no_l2_no_delta", "ablation arms"),
        ALPHA,
        STEPS,
        GUIDANCE,
        CAPTIONS,
        CAPTION_SEED,
        Param("quality_threshold", float, 0.8, "minimum reconstruction probe accuracy"),
        Param("inversion", _bool, False, "also edit generator clips through inversion"),
    ],
    "eval": [
        Param("original", _path, None, "original clips (.f32t)"),
        Param("edited", _path, None, "edited clips (.f32t), same shape"),
        Param("text", str, None, "target text for the semantic score"),
        Param("task", str, "default", "task label for grouping"),
    ],
}

HELP = {
    "train-toy": "train the toy denoiser on generated clips",
    "generate": "sample clips from a prompt",
    "edit": "generate a clip and its edited counterpart from the same noise",
    "invert-edit": "caption and invert an existing clip, then edit it",
    "delta": "compute a keyword edit direction from synthesized captions",
    "bench": "run the ablation benchmark on timbre pairs",
    "eval": "score original/edited clip pairs",
}


# --------------------------------------------------------------------------- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="deltaedit", description=__doc__.split("\n\n")[0], allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"deltaedit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, params in PARAMS.items():
        p = sub.add_parser(name, help=HELP[name], description=HELP[name], allow_abbrev=False)
        p.add_argument("--config", help="INI file or manifest.json supplying parameters")
        p.add_argument("--run-dir", help=f"output directory (default: ${RUN_ROOT_ENV}/<command>-<hash>)")
        for prm in params:
            if prm.type is _bool:
                p.add_argument(prm.flag, dest=prm.name, action=argparse.BooleanOptionalAction, default=None,
                               help=f"{prm.help} (default {prm.default})")
            else:
                default = "" if prm.default in (None, "") else f" (default {prm.default})"
                p.add_argument(prm.flag, dest=prm.name, default=None, help=prm.help + default)
    return parser


def _suggest(message: str, argv: list[str]) -> str:
    command = next((a for a in argv if a in PARAMS), None)
    if "invalid choice" in message or command is None:
        bad = next((a for a in argv if not a.startswith("-")), None)
        if bad is not None:
            close = difflib.get_close_matches(bad, list(PARAMS), n=1)
            if close:
                return f"did you mean '{close[0]}'?"
        return "commands: " + ", ".join(PARAMS)
    known = [p.flag for p in PARAMS[command]] + ["--config", "--run-dir", "--help"]
    known += ["--no-" + p.flag[2:] for p in PARAMS[command] if p.type is _bool]
    for token in argv:
        if token.startswith("--") and token.split("=")[0] not in known:
            close = difflib.get_close_matches(token.split("=")[0], known, n=1)
            if close:
                return f"did you mean '{close[0]}'?"
    return ""


def read_config_file(path, command: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} does not exist")
    if path.suffix == ".json":
        manifest = json.loads(path.read_text())
        if manifest.get("command") != command:
            raise UsageError(f"{path} records a '{manifest.get('command')}' run, not '{command}'")
        return dict(manifest["config"])
    parser = configparser.ConfigParser(interpolation=None)
    parser.read(path)
    if not parser.has_section(command):
        return {}
    return {k.replace("-", "_"): v for k, v in parser.items(command)}


def resolve(command: str, file_values: dict, flag_values: dict) -> dict:
    """Defaults < config file < flags. Unknown file keys are usage errors."""
    params = {p.name: p for p in PARAMS[command]}
    unknown = sorted(set(file_values) - set(params))
    if unknown:
        hint = difflib.get_close_matches(unknown[0], list(params), n=1)
        raise UsageError(f"unknown key(s) {unknown} in [{command}]" + (f"; did you mean '{hint[0]}'?" if hint else ""))
    out = {}
    for name, prm in params.items():
        raw = flag_values.get(name)
        if raw is None:
            raw = file_values.get(name, prm.default)
        if raw is None:
            raise UsageError(f"{command}: {prm.flag} is required")
        try:
            out[name] = prm.type(raw) if not (prm.type is _path and raw == "") else ""
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{command}: bad value for {prm.flag}: {exc}") from None
    return out


def config_ini(command: str, config: dict) -> str:
    lines = [f"[{command}]"]
    for key, value in config.items():
        text = str(value).lower() if isinstance(value, bool) else repr(value) if isinstance(value, float) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- run directory


class RunDir:
    """Collects outputs and writes them atomically, then a manifest with their hashes."""

    def __init__(self, path: Path, command: str, config: dict):
        self.path = path
        self.command = command
        self.config = config
        self.outputs: dict[str, str] = {}
        path.mkdir(parents=True, exist_ok=True)

    def _record(self, name: str, data: bytes) -> Path:
        from .tensorio import atomic_write_bytes

        target = self.path / name
        atomic_write_bytes(target, data)
        self.outputs[name] = hashlib.sha256(data).hexdigest()
        return target

    def tensor(self, name: str, array) -> None:
        from .tensorio import encode_tensor

        self._record(name, encode_tensor(np.asarray(array, dtype=np.float32)))

    def text(self, name: str, text: str) -> None:
        self._record(name, text.encode("utf-8"))

    def json(self, name: str, obj) -> None:
        self.text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def wav(self, name: str, waveform, sample_rate: int) -> None:
        import io
        import wave

        pcm = np.clip(np.rint(np.asarray(waveform, dtype=np.float64) * 32767.0), -32768, 32767).astype("<i2")
        buf = io.BytesIO()
        with wave.open(buf, "wb") as fh:
            fh.setnchannels(1)
            fh.setsampwidth(2)
            fh.setframerate(int(sample_rate))
            fh.writeframes(pcm.tobytes())
        self._record(name, buf.getvalue())

    def file(self, name: str, writer: Callable[[Path], None]) -> None:
        """For outputs produced by another writer (e.g. checkpoints)."""
        target = self.path / name
        writer(target)
        self.outputs[name] = hashlib.sha256(target.read_bytes()).hexdigest()

    def finish(self) -> dict:
        from .tensorio import atomic_write_text

        atomic_write_text(self.path / "config.ini", config_ini(self.command, self.config))
        manifest = {
            "schema": MANIFEST_SCHEMA,
            "command": self.command,
            "version": __version__,
            "config": self.config,
            "outputs": dict(sorted(self.outputs.items())),
        }
        atomic_write_text(self.path / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return manifest


def default_run_dir(command: str, config: dict) -> Path:
    root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
    digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:10]
    return root / f"{command}-{digest}"


# --------------------------------------------------------------------------- helpers


def load_model(path):
    from .condition import ToyTextEncoder
    from .denoiser import Denoiser
    from .errors import StateError

    model, cfg = Denoiser.load(path)
    if "encoder" not in cfg:
        raise StateError(f"{path} does not record its text encoder")
    return model, ToyTextEncoder.from_config(cfg["encoder"])


def _bank(path: str):
    from .condition import CaptionBank, default_caption_bank

    return CaptionBank.load(path) if path else default_caption_bank()


def _keyword_pair(source_tokens: list[str], target_keyword: str, source_keyword: str) -> tuple[str, str]:
    from .toybench import DEFAULT_SPACE

    if source_keyword:
        if source_keyword.lower() not in source_tokens:
            raise UsageError(f"source keyword {source_keyword!r} does not occur in the source prompt")
        return source_keyword, target_keyword
    category = DEFAULT_SPACE.category_of(target_keyword)
    if category is None:
        raise UsageError(f"cannot infer the source keyword for {target_keyword!r}; pass --source-keyword")
    matches = [t for t in source_tokens if DEFAULT_SPACE.category_of(t) == category]
    if len(matches) != 1:
        raise UsageError(f"the source prompt names {len(matches)} {category} words; pass --source-keyword")
    return DEFAULT_SPACE.canonical(matches[0]), DEFAULT_SPACE.canonical(target_keyword)


def _diff_keywords(source_tokens, target_tokens):
    if len(source_tokens) != len(target_tokens):
        return None
    diff = [(a, b) for a, b in zip(source_tokens, target_tokens) if a != b]
    return diff[0] if len(diff) == 1 else ([] if not diff else None)


def _edit_plan(source: str, cfg: dict, encoder):
    """Return ``(target_prompt, EditDirection | None)`` for edit-like commands."""
    from .condition import EditDirection, direction_for_keywords, tokenize

    src_tokens = tokenize(source)
    if cfg["target_keyword"]:
        src_kw, tgt_kw = _keyword_pair(src_tokens, cfg["target_keyword"], cfg["source_keyword"])
        target = cfg["target"] or re.sub(rf"(?<!\w){re.escape(src_kw)}(?!\w)", tgt_kw, source, flags=re.IGNORECASE)
    elif cfg["target"]:
        target = cfg["target"]
        pair = _diff_keywords(src_tokens, tokenize(target))
        if pair == []:
            src_kw = tgt_kw = None
        elif pair is None:
            if cfg["delta"]:
                raise UsageError("source and target differ in more than one word; pass --target-keyword "
                                 "or use --no-delta")
            src_kw = tgt_kw = None
        else:
            src_kw, tgt_kw = pair
    else:
        raise UsageError("give --target or --target-keyword")
    if not cfg["delta"]:
        return target, None
    if src_kw is None or src_kw.lower() == tgt_kw.lower():
        return target, EditDirection.zero(encoder.sentence_dim)
    bank = _bank(cfg["bank"])
    return target, direction_for_keywords(src_kw, tgt_kw, encoder, bank=bank, n=cfg["captions"],
                                          seed=cfg["caption_seed"])


def _audition(run: RunDir, prefix: str, clips) -> None:
    from .codec import DEFAULT_SAMPLE_RATE, spectrogram_to_audio

    for i, clip in enumerate(clips):
        run.wav(f"{prefix}_{i}.wav", spectrogram_to_audio(clip, duration=2.0), DEFAULT_SAMPLE_RATE)


def _probe_labels(clips) -> list[str]:
    from .toybench import attribute_probe

    return [attribute_probe(c).label for c in clips]


# --------------------------------------------------------------------------- commands


def cmd_train_toy(cfg: dict, run: RunDir, log) -> None:
    from .condition import ToyTextEncoder, default_vocabulary
    from .denoiser import DenoiserConfig, train_toy_denoiser
    from .schedule import build_schedule
    from .toybench import build_dataset

    try:
        channels = tuple(int(c) for c in cfg["channels"].split(","))
    except ValueError:
        raise UsageError(f"--channels must be comma separated integers, got {cfg['channels']!r}") from None
    encoder = ToyTextEncoder(default_vocabulary(), seed=cfg["encoder_seed"])
    data = build_dataset(cfg["dataset_size"], seed=cfg["dataset_seed"])
    config = DenoiserConfig.for_encoder(encoder, channels=channels, attn_dim=cfg["attn_dim"], heads=cfg["heads"],
                                        p_uncond=cfg["p_uncond"], latent_scale=cfg["latent_scale"])
    result = train_toy_denoiser(data, build_schedule(), config, cfg["epochs"], cfg["seed"], encoder,
                                batch_size=cfg["batch_size"], lr=cfg["lr"],
                                log=lambda e, loss: log(f"epoch {e}: loss {loss:.5f}"))
    run.file("model.f32k", lambda p: result.denoiser.save(p, {"encoder": encoder.config()}))
    rows = ["epoch,mean,median"] + [f"{i},{m!r},{d!r}" for i, (m, d) in
                                    enumerate(zip(result.epoch_losses, result.epoch_medians))]
    run.text("loss.csv", "\n".join(rows) + "\n")


def cmd_generate(cfg: dict, run: RunDir, log) -> None:
    import torch

    from .condition import embed_prompt
    from .denoiser import Condition
    from .editor import _null_like, initial_noise, reconstruct_batch
    from .schedule import build_schedule

    model, encoder = load_model(cfg["model"])
    sched = build_schedule(num_inference_steps=cfg["steps"])
    seeds = [cfg["seed"] + i for i in range(cfg["count"])]
    z_T = torch.stack([initial_noise(s, model.config.latent_shape, model.dtype) for s in seeds])
    cond = Condition.from_embeddings(embed_prompt(cfg["prompt"], encoder), batch=len(seeds), dtype=model.dtype)
    null = _null_like(encoder, len(seeds), model.dtype) if cfg["guidance"] != 1 else None
    clips, _ = reconstruct_batch(z_T, cond, sched, model, cfg["guidance"], null, record=False)
    clips = clips.detach().numpy()
    run.tensor("clips.f32t", clips)
    _audition(run, "clip", clips)
    run.json("report.json", {"seeds": seeds, "probe": _probe_labels(clips)})


def cmd_edit(cfg: dict, run: RunDir, log) -> None:
    from .editor import EditRequest, edit_batch
    from .metrics import clip_chroma_similarity
    from .schedule import build_schedule

    model, encoder = load_model(cfg["model"])
    target, direction = _edit_plan(cfg["source"], cfg, encoder)
    request = EditRequest(cfg["source"], target, direction=direction, alpha=cfg["alpha"],
                          guidance_scale=cfg["guidance"], seed=cfg["seed"], num_inference_steps=cfg["steps"],
                          constraint_enabled=cfg["constraint"], use_delta=cfg["delta"],
                          loss_reduction=cfg["loss_reduction"])
    seeds = [cfg["seed"] + i for i in range(cfg["count"])]
    original, edited, losses, report, _ = edit_batch(request, seeds, model, build_schedule(), encoder)
    original, edited = original.detach().numpy(), edited.detach().numpy()
    run.tensor("original.f32t", original)
    run.tensor("edited.f32t", edited)
    if direction is not None:
        run.tensor("delta.f32t", direction.delta)
    _audition(run, "original", original)
    _audition(run, "edited", edited)
    report["per_step_loss"] = [None if l is None else [float(v) for v in l] for l in losses]
    report["probe"] = {"original": _probe_labels(original), "edited": _probe_labels(edited)}
    report["chroma"] = [clip_chroma_similarity(a, b) for a, b in zip(original, edited)]
    run.json("report.json", report)


def cmd_invert_edit(cfg: dict, run: RunDir, log) -> None:
    from .inversion import InversionConfig, _detokenize, caption_for_clip, edit_real
    from .metrics import clip_chroma_similarity
    from .schedule import LatentClip, build_schedule
    from .tensorio import load_tensor

    model, encoder = load_model(cfg["model"])
    data = load_tensor(cfg["input"])
    if data.ndim == 4 and data.shape[0] == 1:
        data = data[0]
    clip = LatentClip(data)
    caption = cfg["caption"] or _detokenize(caption_for_clip(clip, cfg["captioner"], encoder))
    target, direction = _edit_plan(caption, cfg, encoder)
    inversion = InversionConfig(num_inference_steps=cfg["steps"], guidance_scale=cfg["inversion_guidance"],
                                autocorr_weight=cfg["autocorr_weight"], autocorr_iters=cfg["autocorr_iters"],
                                autocorr_step=cfg["autocorr_step"])
    out = edit_real(clip, target, direction, inversion, model, build_schedule(), encoder, captioner=None,
                    alpha=cfg["alpha"], constraint_enabled=cfg["constraint"], use_delta=cfg["delta"],
                    caption=caption)
    res = out.result
    run.tensor("inverted.f32t", out.z_T_hat.data)
    run.tensor("reconstruction.f32t", res.original.data)
    run.tensor("edited.f32t", res.edited.data)
    _audition(run, "input", [clip.data])
    _audition(run, "edited", [res.edited.data])
    report = dict(res.report)
    report["probe"] = {"input": _probe_labels([clip.data])[0], "edited": _probe_labels([res.edited.data])[0]}
    report["chroma"] = {"input_vs_edited": clip_chroma_similarity(clip, res.edited),
                        "input_vs_reconstruction": clip_chroma_similarity(clip, res.original)}
    report["inversion"]["final_norm"] = out.trace.norms[-1][0] if out.trace.norms else None
    run.json("report.json", report)


def cmd_delta(cfg: dict, run: RunDir, log) -> None:
    from .condition import (
        ToyTextEncoder,
        compute_delta,
        default_vocabulary,
        synthesize_captions,
    )

    if cfg["model"]:
        _, encoder = load_model(cfg["model"])
    else:
        encoder = ToyTextEncoder(default_vocabulary(), seed=cfg["encoder_seed"])
    bank = _bank(cfg["bank"])
    src = synthesize_captions(cfg["source_keyword"], bank, cfg["captions"], cfg["caption_seed"])
    tgt = synthesize_captions(cfg["target_keyword"], bank, cfg["captions"], cfg["caption_seed"])
    direction = compute_delta(src, tgt, encoder, cfg["source_keyword"], cfg["target_keyword"])
    run.tensor("delta.f32t", direction.delta)
    run.text("captions_source.txt", "\n".join(src) + "\n")
    run.text("captions_target.txt", "\n".join(tgt) + "\n")
    run.json("report.json", {"source_keyword": cfg["source_keyword"], "target_keyword": cfg["target_keyword"],
                             "num_captions": direction.num_captions,
                             "delta_norm": float(np.linalg.norm(direction.delta))})


def cmd_bench(cfg: dict, run: RunDir, log) -> None:
    from .schedule import build_schedule
    from .toybench import BenchmarkConfig, run_benchmark, run_inversion_benchmark, timbre_pairs

    model, encoder = load_model(cfg["model"])
    pairs = timbre_pairs([p for p in cfg["pairs"].split(",") if p])
    config = BenchmarkConfig(alpha=cfg["alpha"], num_inference_steps=cfg["steps"], guidance_scale=cfg["guidance"],
                             num_captions=cfg["captions"], caption_seed=cfg["caption_seed"],
                             quality_threshold=cfg["quality_threshold"],
                             arms=tuple(a for a in cfg["arms"].split(",") if a), first_seed=cfg["first_seed"])
    result = run_benchmark(model, build_schedule(), encoder, pairs, cfg["seeds"], config, log=log)
    out = result.to_dict()
    if cfg["inversion"]:
        out["inversion"] = run_inversion_benchmark(model, build_schedule(), encoder, pairs, cfg["seeds"], config)
    run.json("benchmark.json", out)
    for arm, report in result.reports.items():
        run.text(f"{arm}.csv", report.to_csv())


def cmd_eval(cfg: dict, run: RunDir, log) -> None:
    from .errors import ShapeError
    from .metrics import evaluate_batch
    from .tensorio import load_tensor
    from .toybench import OracleScorer

    a, b = load_tensor(cfg["original"]), load_tensor(cfg["edited"])
    if a.shape != b.shape:
        raise ShapeError(f"original {a.shape} and edited {b.shape} differ in shape")
    if a.ndim == 3:
        a, b = a[None], b[None]
    report = evaluate_batch([(x, y, cfg["text"], cfg["task"]) for x, y in zip(a, b)], OracleScorer(),
                            config={"original": cfg["original"], "edited": cfg["edited"]})
    run.text("eval_report.json", report.to_json())
    run.text("eval_report.csv", report.to_csv())


HANDLERS = {
    "train-toy": cmd_train_toy,
    "generate": cmd_generate,
    "edit": cmd_edit,
    "invert-edit": cmd_invert_edit,
    "delta": cmd_delta,
    "bench": cmd_bench,
    "eval": cmd_eval,
}


# --------------------------------------------------------------------------- entry point


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        command = args.command
        file_values = read_config_file(args.config, command) if args.config else {}
        flags = {p.name: getattr(args, p.name) for p in PARAMS[command]}
        config = resolve(command, file_values, flags)
    except UsageError as exc:
        hint = _suggest(str(exc), argv)
        print(f"error: {exc}" + (f"\n{hint}" if hint else ""), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    run_dir = Path(args.run_dir) if args.run_dir else default_run_dir(command, config)
    log = lambda msg: print(msg, file=sys.stderr, flush=True)
    try:
        run = RunDir(run_dir, command, config)
        HANDLERS[command](config, run, log)
        run.finish()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DeltaEditError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(run_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
