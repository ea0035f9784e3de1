import numpy as np
import pytest

from deltaedit.codec import (
    MelConfig,
    identity_codec,
    mel_codec,
    read_wav,
    render_melody,
    spectrogram_to_audio,
    write_wav,
)
from deltaedit.errors import ShapeError
from deltaedit.metrics import chroma_similarity, chromagram_audio
from deltaedit.schedule import LatentClip
from deltaedit.toybench import Attributes, generate_clip


def test_identity_round_trip_exact():
    codec = identity_codec()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        x = rng.standard_normal((1, 32, 32)).astype(np.float32)
        latent = codec.encode(x)
        assert latent.shape == x.shape
        worst = max(worst, float(np.max(np.abs(codec.decode(latent) - x))))
    assert worst == 0.0


def test_mel_default_sample_rate():
    assert mel_codec().sample_rate == 16000
    assert MelConfig().n_mels == 64


def test_mel_tone_lands_in_its_band():
    codec = mel_codec()
    sr = 16000
    y = np.sin(2 * np.pi * 440 * np.arange(sr) / sr)
    mel = codec.encode(y).data[0]
    band = int(np.argmax(mel.mean(axis=1)))
    assert band == int(np.argmin(np.abs(codec.band_centres - 440)))


@pytest.mark.parametrize("seed", [5, 21])
def test_mel_round_trip_preserves_chroma(seed):
    _, melody = generate_clip(Attributes("upbeat", "rock", "timbreA"), seed)
    y = render_melody(melody, duration=2.0)
    codec = mel_codec()
    back = codec.decode(codec.encode(y))
    assert back.shape == y.shape
    assert chroma_similarity(chromagram_audio(y), chromagram_audio(back)) >= 0.9


def test_mel_rejects_non_audio():
    codec = mel_codec()
    with pytest.raises(ShapeError):
        codec.encode(np.zeros((2, 2000)))
    with pytest.raises(ShapeError):
        codec.decode(LatentClip(np.zeros((1, 10, 5))))


def test_wav_round_trip(tmp_path):
    y = 0.5 * np.sin(np.linspace(0, 100, 4000))
    write_wav(tmp_path / "a.wav", y, 16000)
    back, sr = read_wav(tmp_path / "a.wav")
    assert sr == 16000
    np.testing.assert_allclose(back, y, atol=1 / 32767 + 1e-9)
    raw = (tmp_path / "a.wav").read_bytes()
    assert raw[:4] == b"RIFF" and raw[22:24] == b"\x01\x00"


def test_spectrogram_audition_is_bounded():
    spec, _ = generate_clip(Attributes("relaxing", "jazz", "timbreB"), 1)
    y = spectrogram_to_audio(spec, duration=0.5)
    assert y.shape == (8000,) and np.max(np.abs(y)) <= 0.9 + 1e-12
