import math

import numpy as np
import pytest
import torch

from deltaedit.condition import ToyTextEncoder, default_vocabulary, embed_prompt
from deltaedit.denoiser import (
    Condition,
    CrossAttentionWeights,
    Denoiser,
    DenoiserConfig,
    cross_attention,
    predict_noise,
    train_toy_denoiser,
)
from deltaedit.errors import ParameterError, ShapeError, StateError
from deltaedit.schedule import build_schedule
from deltaedit.toybench import build_dataset

SMALL = dict(channels=(8, 16), heads=2, attn_dim=8, time_embed_dim=16)


@pytest.fixture(scope="module")
def encoder():
    return ToyTextEncoder(default_vocabulary())


@pytest.fixture(scope="module")
def model(encoder):
    return Denoiser(DenoiserConfig.for_encoder(encoder, **SMALL), seed=3)


def _scalar_weights(heads=1):
    one = torch.ones(1, 1, dtype=torch.float64)
    return CrossAttentionWeights(one, one, one, one, one, heads)


def _cond(sentence, mask, sequence):
    t = lambda v: torch.tensor(v, dtype=torch.float64).reshape(1, -1, 1)
    return Condition(t(sentence), t(sequence), torch.tensor([mask]))


def test_cross_attention_log3_gap():
    # valid sentence token with key ln 3, padded token, sequence token with key 0
    cond = _cond([math.log(3), 100.0], [True, False], [0.0])
    _, maps = cross_attention(torch.ones(1, 1, dtype=torch.float64), cond, _scalar_weights())
    np.testing.assert_allclose(maps[0].numpy(), [0.75, 0.0, 0.25], atol=1e-12)


def test_cross_attention_uniform_and_single_key():
    cond = _cond([0.0, 0.0, 5.0], [True, True, False], [0.0])
    _, maps = cross_attention(torch.ones(3, 1, dtype=torch.float64), cond, _scalar_weights())
    np.testing.assert_allclose(maps.numpy(), np.tile([1 / 3, 1 / 3, 0, 1 / 3], (3, 1)), atol=1e-12)

    one_key = Condition(torch.zeros(1, 2, 1, dtype=torch.float64), torch.zeros(1, 0, 1, dtype=torch.float64),
                        torch.tensor([[True, False]]))
    out, maps = cross_attention(torch.randn(4, 1, dtype=torch.float64), one_key, _scalar_weights())
    np.testing.assert_allclose(maps.numpy(), np.tile([1.0, 0.0], (4, 1)), atol=1e-12)


def test_cross_attention_matches_manual_softmax(encoder):
    rng = torch.Generator().manual_seed(0)
    d, heads = 8, 2
    w = CrossAttentionWeights(*(torch.randn(a, d, generator=rng, dtype=torch.float64) for a in (d, 32, 32, 32, 32)),
                              heads=heads)
    E = embed_prompt("upbeat jazz with timbreA", encoder)
    feats = torch.randn(5, d, generator=rng, dtype=torch.float64)
    out, maps = cross_attention(feats, E, w)

    keys = np.vstack([E.sentence[E.valid_mask] @ w.W_k_sentence.numpy(), E.sequence @ w.W_k_sequence.numpy()])
    vals = np.vstack([E.sentence[E.valid_mask] @ w.W_v_sentence.numpy(), E.sequence @ w.W_v_sequence.numpy()])
    q = feats.numpy() @ w.W_q.numpy()
    dh = d // heads
    probs, outs = [], []
    for h in range(heads):
        s = slice(h * dh, (h + 1) * dh)
        logits = q[:, s] @ keys[:, s].T / math.sqrt(dh)
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        probs.append(p)
        outs.append(p @ vals[:, s])
    expected_map = np.mean(probs, axis=0)
    n = int(E.valid_mask.sum())
    got = maps.numpy()
    np.testing.assert_allclose(got[:, :n], expected_map[:, :n], atol=1e-12)
    np.testing.assert_allclose(got[:, E.max_length:], expected_map[:, n:], atol=1e-12)
    assert np.all(got[:, n:E.max_length] == 0)
    np.testing.assert_allclose(out.numpy(), np.hstack(outs), atol=1e-12)


def test_cross_attention_rejects_width_mismatch(encoder):
    w = CrossAttentionWeights(*(torch.zeros(a, 4) for a in (4, 32, 32, 32, 32)))
    with pytest.raises(ShapeError):
        cross_attention(torch.zeros(3, 5), embed_prompt("jazz", encoder), w)


def test_forward_exposes_every_site(model, encoder):
    cfg = model.config
    assert cfg.num_sites == 5
    z = torch.randn(2, *cfg.latent_shape)
    cond = Condition.from_embeddings(embed_prompt("relaxing rock music", encoder), batch=2)
    with torch.no_grad():
        eps, maps = model(z, 500, cond, capture=True)
    assert eps.shape == z.shape and len(maps) == 5
    n = int(cond.mask[0].sum())
    for m in maps:
        assert m.shape[0] == 2 and m.shape[-1] == cfg.num_condition_tokens
        assert float((m.sum(-1) - 1).abs().max()) < 1e-5
        assert torch.all(m[..., n:cfg.max_length] == 0)


def test_capture_does_not_change_prediction(model, encoder):
    z = torch.randn(1, *model.config.latent_shape)
    cond = Condition.from_embeddings(embed_prompt("peaceful classical", encoder))
    with torch.no_grad():
        a, _ = model(z, 10, cond, capture=False)
        b, _ = model(z, 10, cond, capture=True)
    assert torch.equal(a, b)


def test_seeded_init_is_deterministic(encoder):
    cfg = DenoiserConfig.for_encoder(encoder, **SMALL)
    a, b, c = Denoiser(cfg, seed=1), Denoiser(cfg, seed=1), Denoiser(cfg, seed=2)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)


def test_zero_initialised_output_predicts_zero(encoder):
    model = Denoiser(DenoiserConfig.for_encoder(encoder, **SMALL), seed=0)
    eps, _ = predict_noise(model, np.random.default_rng(0).standard_normal((1, 32, 32)), 100,
                           embed_prompt("jazz", encoder))
    assert np.all(eps == 0)


def test_unloaded_denoiser_refuses(encoder):
    model = Denoiser.unloaded(DenoiserConfig.for_encoder(encoder, **SMALL))
    with pytest.raises(StateError):
        model(torch.zeros(1, 1, 32, 32), 1, Condition.from_embeddings(embed_prompt("jazz", encoder)))


def test_shape_checks(model, encoder):
    cond = Condition.from_embeddings(embed_prompt("jazz", encoder))
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 1, 16, 32), 1, cond)
    with pytest.raises(ShapeError):
        model(torch.zeros(2, 1, 32, 32), 1, cond)
    with pytest.raises(ParameterError):
        DenoiserConfig(heads=3, attn_dim=64)


def test_save_load_round_trip(model, encoder, tmp_path):
    model.save(tmp_path / "m.f32k", {"encoder": encoder.config()})
    back, cfg = Denoiser.load(tmp_path / "m.f32k")
    assert back.config == model.config and cfg["encoder"] == encoder.config()
    z = torch.randn(1, *model.config.latent_shape)
    cond = Condition.from_embeddings(embed_prompt("upbeat rock", encoder))
    with torch.no_grad():
        assert torch.equal(model(z, 77, cond)[0], back(z, 77, cond)[0])


def test_load_rejects_foreign_checkpoint(tmp_path):
    from deltaedit.tensorio import save_checkpoint

    save_checkpoint(tmp_path / "x.f32k", {"w": np.zeros(2)}, {"format": "other"})
    with pytest.raises(StateError):
        Denoiser.load(tmp_path / "x.f32k")


def test_short_training_beats_zero_predictor(encoder):
    # a zero prediction scores E||eps||^2 = 1 per element
    data = build_dataset(256, seed=1)
    cfg = DenoiserConfig.for_encoder(encoder, **SMALL)
    res = train_toy_denoiser(data, build_schedule(), cfg, epochs=6, seed=0, encoder=encoder, batch_size=32)
    assert len(res.epoch_losses) == 6 and len(res.step_losses) == 48
    assert all(math.isfinite(x) for x in res.step_losses)
    assert res.epoch_losses[-1] < 0.7
    assert res.epoch_losses[-1] < res.epoch_losses[0]
