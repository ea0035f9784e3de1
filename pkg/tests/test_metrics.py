import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from deltaedit.errors import ConfigurationError, ParameterError, ShapeError
from deltaedit.metrics import (
    EvalReport,
    chroma_similarity,
    chromagram,
    chromagram_audio,
    clip_chroma_similarity,
    evaluate_batch,
    semantic_similarity,
    semitone_class,
)
from deltaedit.toybench import DEFAULT_SPACE, Attributes, OracleScorer, generate_clip


def test_single_active_row_is_one_hot():
    x = np.zeros((1, 32, 10))
    x[0, 13, 2:7] = 1.0
    c = chromagram(x)
    assert c.shape == (8, 10)
    for f in range(2, 7):
        assert c[:, f].tolist() == [0, 0, 0, 0, 0, 1, 0, 0]
    assert np.all(c[:, :2] == 0) and np.all(c[:, 7:] == 0)


def test_zero_clip_zero_chroma():
    assert np.all(chromagram(np.zeros((1, 32, 4))) == 0)


def test_empty_clip_rejected():
    with pytest.raises(ParameterError):
        chromagram(np.zeros((1, 0, 4)))


def test_energy_conservation_random_clips():
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.random((1, 32, 32))
        np.testing.assert_allclose(chromagram(x).sum(axis=0), x[0].sum(axis=0), atol=1e-6)


def test_chroma_similarity_contracts():
    rng = np.random.default_rng(1)
    x = rng.random((8, 16))
    assert chroma_similarity(x, x) == pytest.approx(1.0, abs=1e-12)
    assert chroma_similarity(x, 2 * x) == pytest.approx(1.0, abs=1e-12)
    a = np.zeros((8, 4)); a[0] = 1
    b = np.zeros((8, 4)); b[3] = 1
    assert chroma_similarity(a, b) == 0.0
    assert chroma_similarity(np.zeros((8, 4)), np.zeros((8, 4))) == 1.0
    with pytest.raises(ShapeError):
        chroma_similarity(a, np.zeros((8, 5)))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (8, 6), elements=st.floats(0, 10)), arrays(np.float64, (8, 6), elements=st.floats(0, 10)))
def test_chroma_similarity_symmetric_and_bounded(a, b):
    s = chroma_similarity(a, b)
    assert abs(s - chroma_similarity(b, a)) <= 1e-12
    assert 0.0 <= s <= 1.0


def test_transposition_lowers_similarity():
    _, melody = generate_clip(Attributes("upbeat", "rock", "timbreA"), 4)
    frames = np.repeat(melody, 4)
    a = np.zeros((8, 32)); a[frames, np.arange(32)] = 1
    b = np.zeros((8, 32)); b[(frames + 1) % 8, np.arange(32)] = 1
    assert chroma_similarity(a, b) < chroma_similarity(a, a)


def test_semitone_mapping():
    assert semitone_class([440.0, 261.63, 880.0, 0.0]).tolist() == [9, 0, 9, 9]
    freqs = np.array([0.0, 440.0, 261.63])
    x = np.ones((1, 3, 2))
    c = chromagram(x, bin_frequencies=freqs)
    assert c.shape == (12, 2) and c[9, 0] == 2 and c[0, 0] == 1


def test_audio_chroma_of_a_tone():
    sr = 16000
    t = np.arange(sr) / sr
    c = chromagram_audio(np.sin(2 * np.pi * 440 * t), sr)
    assert np.argmax(c.sum(axis=1)) == 9


def test_semantic_similarity_requires_scorer():
    with pytest.raises(ConfigurationError):
        semantic_similarity(np.zeros((1, 32, 32)), "x", None)


def test_semantic_scores_in_range_over_random_pairs():
    rng = np.random.default_rng(2)
    scorer = OracleScorer()
    all_attrs = DEFAULT_SPACE.all_attributes()
    for _ in range(100):
        a = all_attrs[rng.integers(len(all_attrs))]
        b = all_attrs[rng.integers(len(all_attrs))]
        spec, _ = generate_clip(a, int(rng.integers(1000)))
        noisy = spec + 0.2 * rng.standard_normal(spec.shape)
        s = semantic_similarity(noisy, b.prompt(), scorer)
        assert 0.0 <= s <= 1.0


class _Flaky:
    def score(self, clip, text):
        if "boom" in text:
            raise RuntimeError("scorer failed")
        return 0.5


def test_evaluate_batch_identity_pair():
    spec, _ = generate_clip(Attributes("relaxing", "jazz", "timbreA"), 0)
    rep = evaluate_batch([(spec, spec, "A relaxing jazz music with timbreA performance.")], OracleScorer())
    assert rep.rows[0]["chroma"] == pytest.approx(1.0)
    assert rep.rows[0]["semantic"] == 1.0
    assert rep.means["avg"] == pytest.approx(1.0)


def test_evaluate_batch_means_recomputed_independently(tmp_path):
    rng = np.random.default_rng(3)
    pairs = []
    for i in range(12):
        a = rng.random((1, 32, 32))
        b = rng.random((1, 32, 32))
        pairs.append((a, b, "boom" if i == 5 else "text", "timbre" if i % 2 else "style"))
    rep = evaluate_batch(pairs, _Flaky())
    assert rep.failures == 1 and rep.rows[5]["error"].startswith("RuntimeError")
    good = [r for r in rep.rows if r["error"] is None]
    sem = sum(r["semantic"] for r in good) / len(good)
    chroma = sum(r["chroma"] for r in good) / len(good)
    avg = sum((r["semantic"] + r["chroma"]) / 2 for r in good) / len(good)
    assert abs(rep.means["semantic"] - sem) <= 1e-9
    assert abs(rep.means["chroma"] - chroma) <= 1e-9
    assert abs(rep.means["avg"] - avg) <= 1e-9
    assert rep.means["count"] == 11
    assert set(rep.task_means) == {"timbre", "style"}
    back = EvalReport.from_dict(json.loads(rep.to_json()))
    assert back.means == rep.means
    lines = rep.to_csv().strip().splitlines()
    assert lines[0] == "index,task,semantic,chroma,avg,error" and len(lines) == 13


def test_evaluate_batch_empty():
    with pytest.raises(ParameterError):
        evaluate_batch([], OracleScorer())


def test_clip_similarity_of_identical_clips():
    spec, _ = generate_clip(Attributes("peaceful", "classical", "timbreC"), 9)
    assert clip_chroma_similarity(spec, spec) == pytest.approx(1.0)
