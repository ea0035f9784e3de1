"""Acceptance gate. Each test records one PASS/FAIL line per criterion.

The trained-model criteria use the cached reference model from ``conftest``;
the first run trains it (about 20 minutes on one CPU core).
"""

import hashlib
import json
import math

import numpy as np
import pytest
import torch

from conftest import record_criterion
from deltaedit.cli import main
from deltaedit.condition import EditDirection, ToyTextEncoder, default_vocabulary, embed_prompt
from deltaedit.denoiser import Condition, Denoiser, DenoiserConfig
from deltaedit.editor import EditRequest, attention_loss, attention_loss_grad, edit_batch, reconstruct_batch
from deltaedit.inversion import InversionConfig, invert_batch, replay_inversion
from deltaedit.metrics import chroma_similarity, chromagram, clip_chroma_similarity
from deltaedit.schedule import NoiseSchedule, build_schedule, ddim_step, ddpm_step, forward_diffuse
from deltaedit.tensorio import save_tensor
from deltaedit.toybench import (
    DEFAULT_PAIRS,
    DEFAULT_SPACE,
    BenchmarkConfig,
    generate_clip,
    oracle_caption,
    run_benchmark,
    run_inversion_benchmark,
)

SEEDS = 20
SOURCE = "A relaxing jazz music with timbreA performance."
# alpha calibrated for the toy model on held-out seeds 1000-1019; the source-quality
# gate is reported in the criterion 4 line instead of aborting the run
BENCH = BenchmarkConfig(alpha=2.0, quality_threshold=0.0)


@pytest.fixture(scope="module")
def trained(acceptance_model):
    torch.set_num_threads(1)
    model, extra = Denoiser.load(acceptance_model)
    return model, ToyTextEncoder.from_config(extra["encoder"])


@pytest.fixture(scope="module")
def benchmark(trained):
    model, encoder = trained
    return run_benchmark(model, build_schedule(), encoder, DEFAULT_PAIRS, SEEDS, BENCH)


def _float64_copy(model):
    copy = Denoiser(model.config, seed=None)
    copy.load_state_dict(model.state_dict())
    copy._ready = True
    return copy.double()


# --------------------------------------------------------------------------- 1 and 5


def test_null_edit_identity_and_row_sums(trained):
    model, encoder = trained
    seeds = list(range(10))
    direction = EditDirection.zero(encoder.sentence_dim)
    request = EditRequest(SOURCE, SOURCE, direction=direction, num_inference_steps=100)
    original, edited, losses, _, traj = edit_batch(request, seeds, model, build_schedule(), encoder,
                                                   keep_trajectory=True)
    identical = torch.equal(original, edited) and all(float(np.max(l)) == 0.0 for l in losses)
    record_criterion(1, identical, f"null edit bit-identical over {len(seeds)} seeds")

    row_error = traj.max_row_error()
    ok = len(traj) == 100 and row_error < 1e-5 and traj.min_entry() >= 0
    record_criterion(5, ok, f"max |row sum - 1| = {row_error:.2e} over {len(traj)} steps, "
                            f"{len(traj.maps[0])} sites, {len(seeds)} clips")
    assert identical and ok


# --------------------------------------------------------------------------- 2


def test_gradient_matches_finite_differences():
    encoder = ToyTextEncoder(default_vocabulary())
    cfg = DenoiserConfig.for_encoder(encoder, channels=(4, 8), heads=2, attn_dim=8, time_embed_dim=8,
                                     freq_bins=8, time_frames=8)
    model = Denoiser(cfg, seed=3).double()
    cond = Condition.from_embeddings(embed_prompt("upbeat jazz music with timbreA", encoder), dtype=torch.float64)
    origin_cond = Condition.from_embeddings(embed_prompt("upbeat jazz music with timbreB", encoder),
                                            dtype=torch.float64)
    rng = np.random.default_rng(2024)
    worst, h = 0.0, 1e-6
    for t in rng.choice(np.arange(1, 1001), size=5, replace=False):
        t = int(t)
        z = torch.as_tensor(rng.standard_normal((1, 1, 8, 8)))
        with torch.no_grad():
            origin = model(z, t, origin_cond, capture=True)[1]
        _, grad, _ = attention_loss_grad(model, z, t, cond, origin)

        def loss(x):
            with torch.no_grad():
                maps = model(x, t, cond, capture=True)[1]
            return attention_loss([m[0].numpy() for m in maps], [m[0].numpy() for m in origin])

        fd = torch.zeros_like(z)
        for idx in np.ndindex(*z.shape):
            e = torch.zeros_like(z)
            e[idx] = h
            fd[idx] = (loss(z + e) - loss(z - e)) / (2 * h)
        worst = max(worst, float((fd - grad).norm() / grad.norm()))
    ok = worst < 1e-3
    record_criterion(2, ok, f"worst relative error {worst:.2e} over 5 timesteps (float64, 1x8x8, d=8)")
    assert ok


# --------------------------------------------------------------------------- 3


def test_ddim_inverse_round_trip(trained):
    model, encoder = trained
    sched = build_schedule(num_inference_steps=50)
    model64 = _float64_copy(model)
    attrs = DEFAULT_SPACE.all_attributes()
    clips = [generate_clip(attrs[(7 * i) % len(attrs)], 100 + i)[0] for i in range(10)]
    config = InversionConfig(num_inference_steps=50, guidance_scale=1.0)

    replay_error, chromas = 0.0, []
    for clip in clips:
        caption = oracle_caption(clip)
        cond64 = Condition.from_embeddings(embed_prompt(caption, encoder), dtype=torch.float64)
        x0 = torch.as_tensor(clip, dtype=torch.float64)[None]
        z_T, trace = invert_batch(x0, cond64, config, model64, sched, keep_eps=True)
        # replay: sampling with the recorded predictions lands back on the clip's latent
        z0 = x0 * model.config.latent_scale
        z = z_T
        for (t, t_prev), eps in zip(sched.steps(), reversed(trace.eps)):
            z = ddim_step(z, eps, t, t_prev, sched)
        replay_error = max(replay_error, float((z - z0).abs().max()))
        # the same predictions inverted by the replay helper recover z_T
        recovered = replay_inversion(z0, list(reversed(trace.eps)), sched)
        replay_error = max(replay_error, float((recovered - z_T).abs().max()))
        # free-running sample from the inverted latent
        cond = Condition.from_embeddings(embed_prompt(caption, encoder), dtype=model.dtype)
        sample, _ = reconstruct_batch(z_T.to(model.dtype), cond, sched, model, record=False)
        chromas.append(clip_chroma_similarity(clip, sample[0].numpy()))
    worst_chroma = min(chromas)
    ok = replay_error < 1e-5 and worst_chroma >= 0.99
    record_criterion(3, ok, f"replay error {replay_error:.2e}; trained round-trip chroma min {worst_chroma:.4f} "
                            f"mean {np.mean(chromas):.4f} on 10 clips")
    assert ok


# --------------------------------------------------------------------------- 4 and 8


def test_constraint_preserves_melody(benchmark):
    cmp, summary = benchmark.comparison, benchmark.summary
    p = cmp["paired_t_pvalue_one_sided"]
    gap = cmp["accuracy_gap"]
    ok = p is not None and p < 0.05 and cmp["mean_difference"] > 0 and abs(gap) <= 0.10
    record_criterion(4, ok, f"chroma full {summary['full']['chroma']:.4f} vs no-L2 {summary['no_l2']['chroma']:.4f} "
                            f"(one-sided p={p if p is None else f'{p:.2e}'}); accuracy full "
                            f"{summary['full']['target_accuracy']:.2f} vs no-L2 "
                            f"{summary['no_l2']['target_accuracy']:.2f} ({benchmark.summary['full']['count']} "
                            f"paired seeds, source probe accuracy {benchmark.quality:.2f})")
    assert ok


def _success_rate(rows):
    return float(np.mean([r["target_timbre_hit"] and r["chroma"] >= 0.8 for r in rows]))


def test_end_to_end_timbre_transfer(trained, benchmark):
    model, encoder = trained
    generated = _success_rate(benchmark.reports["full"].rows)
    inverted = run_inversion_benchmark(model, build_schedule(), encoder, DEFAULT_PAIRS, SEEDS, BENCH)
    via_inversion = _success_rate(inverted["rows"])
    ok = generated >= 0.80 and via_inversion >= 0.70 and generated >= via_inversion
    record_criterion(8, ok, f"target timbre with chroma >= 0.8: generated {generated:.2f}, via inversion "
                            f"{via_inversion:.2f} ({SEEDS} seeds x {len(DEFAULT_PAIRS)} pairs)")
    assert ok


# --------------------------------------------------------------------------- 6


def test_metric_contracts():
    rng = np.random.default_rng(6)
    a = rng.random((8, 32))
    checks = [chroma_similarity(a, a) == 1.0]
    left = np.zeros((8, 32))
    right = np.zeros((8, 32))
    left[:4], right[4:] = 1.0, 1.0
    checks.append(chroma_similarity(left, right) == 0.0)
    checks.append(chroma_similarity(a, 4.0 * a) == 1.0)
    b = rng.random((8, 32))
    checks.append(chroma_similarity(0.5 * a, 8.0 * b) == chroma_similarity(a, b))
    checks.append(chroma_similarity(np.zeros((8, 32)), np.zeros((8, 32))) == 1.0)
    checks.append(chroma_similarity(np.zeros((8, 32)), a) == 0.0)
    worst = 0.0
    for _ in range(100):
        clip = rng.standard_normal((int(rng.integers(1, 4)), 32, 32))
        worst = max(worst, abs(chromagram(clip).sum() - np.abs(clip).sum()))
    ok = all(checks) and worst < 1e-6
    record_criterion(6, ok, f"{sum(checks)}/{len(checks)} similarity contracts exact; "
                            f"worst energy drift {worst:.1e} on 100 clips")
    assert ok


# --------------------------------------------------------------------------- 7


def _two_step(alpha_bar_1, alpha_bar_2):
    return NoiseSchedule.from_alphas([alpha_bar_1, alpha_bar_2 / alpha_bar_1])


def test_schedule_oracles():
    forward = forward_diffuse(2.0, 2, 1.0, _two_step(0.5, 0.25))
    ddim = ddim_step(1.0, 0.5, 2, 1, _two_step(0.64, 0.25))
    ddpm = ddpm_step(1.0, 0.5, 2, _two_step(0.25 / 0.96, 0.25), sigma=0.0)
    got = {"forward": forward, "ddim": ddim, "ddpm": ddpm}
    want = {"forward": 0.5 * 2.0 + math.sqrt(0.75),
            "ddim": 0.8 * (1.0 - math.sqrt(0.75) * 0.5) / 0.5 + 0.6 * 0.5,
            "ddpm": (1.0 - 0.04 / math.sqrt(0.75) * 0.5) / math.sqrt(0.96)}
    printed = {"forward": 1.8660, "ddim": 1.2072, "ddpm": 0.99702}
    worst = max(max(abs(got[k] - want[k]), abs(got[k] - printed[k])) for k in got)
    ok = worst < 1e-4
    record_criterion(7, ok, ", ".join(f"{k} {float(v):.5f}" for k, v in got.items()) + f" (worst error {worst:.1e})")
    assert ok


# --------------------------------------------------------------------------- 9


TINY = ["--dataset-size", "64", "--epochs", "1", "--channels", "8,16", "--attn-dim", "8", "--heads", "2",
        "--batch-size", "32"]


def _hashes(run):
    manifest = json.loads((run / "manifest.json").read_text())
    for name, digest in manifest["outputs"].items():
        assert hashlib.sha256((run / name).read_bytes()).hexdigest() == digest
    return manifest["outputs"]


def test_cli_reruns_are_bit_identical(tmp_path):
    first = tmp_path / "train"
    assert main(["train-toy", *TINY, "--run-dir", str(first)]) == 0
    model = str(first / "model.f32k")
    clip, _ = generate_clip(DEFAULT_SPACE.all_attributes()[5], 9)
    save_tensor(tmp_path / "clip.f32t", clip.astype(np.float32))
    runs = {
        "train-toy": None,
        "generate": ["--model", model, "--prompt", SOURCE, "--count", "2", "--steps", "5"],
        "edit": ["--model", model, "--source", SOURCE, "--target-keyword", "timbreC", "--steps", "5",
                 "--count", "2", "--captions", "8"],
        "invert-edit": ["--model", model, "--input", str(tmp_path / "clip.f32t"), "--target-keyword", "timbreB",
                        "--steps", "5", "--captions", "8"],
        "delta": ["--source-keyword", "jazz", "--target-keyword", "rock", "--captions", "8"],
        "bench": ["--model", model, "--pairs", "timbreA:timbreB", "--seeds", "2", "--steps", "3",
                  "--captions", "6", "--quality-threshold", "0"],
        "eval": ["--original", str(tmp_path / "clip.f32t"), "--edited", str(tmp_path / "clip.f32t"),
                 "--text", SOURCE],
    }
    mismatched = []
    for command, argv in runs.items():
        a = first if argv is None else tmp_path / f"{command}-a"
        if argv is not None:
            assert main([command, *argv, "--run-dir", str(a)]) == 0
        b = tmp_path / f"{command}-b"
        assert main([command, "--config", str(a / "manifest.json"), "--run-dir", str(b)]) == 0
        if _hashes(a) != _hashes(b):
            mismatched.append(command)
    ok = not mismatched
    record_criterion(9, ok, f"{len(runs) - len(mismatched)}/{len(runs)} commands reproduced bit-for-bit "
                            "from their manifests" + (f"; differing: {mismatched}" if mismatched else ""))
    assert ok
