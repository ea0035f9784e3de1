"""Noise predictor with observable cross-attention, plus its toy training loop.

The network is a small conv U-Net. Every encoder stage, the bottleneck and
every decoder stage end in a cross-attention block that attends from spatial
features to the condition tokens (valid sentence rows followed by the
sequence rows). Each block can hand back its head-averaged attention map.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .condition import PromptEmbedding, TextEncoder
from .errors import ParameterError, ShapeError, StateError, TrainingError
from .schedule import LatentClip, NoiseSchedule
from .tensorio import load_checkpoint, save_checkpoint


@dataclass(frozen=True)
class DenoiserConfig:
    in_channels: int = 1
    freq_bins: int = 32
    time_frames: int = 32
    channels: tuple = (32, 64)
    heads: int = 4
    attn_dim: int = 64
    time_embed_dim: int = 64
    sentence_dim: int = 32
    sequence_dim: int = 32
    max_length: int = 16
    num_sequence_tokens: int = 8
    p_uncond: float = 0.1
    # sin/cos coordinate channels appended to the input; () disables them
    position_periods: tuple = (4, 8, 16, 32, 64)
    # spatial self-attention before the bottleneck cross-attention
    mid_self_attention: bool = True
    # diffusion runs on latent_scale * clip so the data has roughly unit variance
    latent_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "position_periods", tuple(float(p) for p in self.position_periods))
        if not self.latent_scale > 0:
            raise ParameterError("latent_scale must be positive")
        if self.attn_dim % self.heads:
            raise ParameterError("attn_dim must be divisible by heads")
        if not self.channels:
            raise ParameterError("need at least one stage")
        down = 2 ** (len(self.channels) - 1)
        if self.freq_bins % down or self.time_frames % down:
            raise ParameterError(f"latent sides must be divisible by {down}")

    @property
    def num_sites(self) -> int:
        return 2 * len(self.channels) + 1

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.freq_bins, self.time_frames)

    @property
    def num_condition_tokens(self) -> int:
        return self.max_length + self.num_sequence_tokens

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["position_periods"] = list(self.position_periods)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**{k: (tuple(v) if k in ("channels", "position_periods") else v) for k, v in d.items()})

    @property
    def num_position_channels(self) -> int:
        return 4 * len(self.position_periods)

    @classmethod
    def for_encoder(cls, encoder, **overrides) -> "DenoiserConfig":
        base = dict(
            sentence_dim=encoder.sentence_dim,
            sequence_dim=encoder.sequence_dim,
            max_length=encoder.max_length,
            num_sequence_tokens=encoder.num_sequence_tokens,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class AttentionMaps:
    """Head-averaged cross-attention maps, one ``(queries, tokens)`` matrix per site."""

    maps: list

    def __len__(self) -> int:
        return len(self.maps)

    def __getitem__(self, i):
        return self.maps[i]

    def max_row_error(self) -> float:
        return max(float(np.max(np.abs(np.asarray(m).sum(axis=-1) - 1.0))) for m in self.maps)


@dataclass
class Condition:
    """Batched condition tensors fed to the network."""

    sentence: torch.Tensor  # (B, L, D_s)
    sequence: torch.Tensor  # (B, K, D_g)
    mask: torch.Tensor  # (B, L) bool

    @classmethod
    def from_embeddings(cls, embeddings: Sequence[PromptEmbedding] | PromptEmbedding, batch: int | None = None,
                        dtype=torch.float32) -> "Condition":
        if isinstance(embeddings, PromptEmbedding):
            embeddings = [embeddings] * (batch or 1)
        elif batch is not None and len(embeddings) != batch:
            raise ShapeError(f"{len(embeddings)} embeddings for a batch of {batch}")
        return cls(
            torch.as_tensor(np.stack([e.sentence for e in embeddings]), dtype=dtype),
            torch.as_tensor(np.stack([e.sequence for e in embeddings]), dtype=dtype),
            torch.as_tensor(np.stack([e.valid_mask for e in embeddings]), dtype=torch.bool),
        )

    def __len__(self) -> int:
        return self.sentence.shape[0]

    def select(self, keep: torch.Tensor, null: "Condition") -> "Condition":
        k = keep[:, None, None]
        return Condition(
            torch.where(k, self.sentence, null.sentence),
            torch.where(k, self.sequence, null.sequence),
            torch.where(keep[:, None], self.mask, null.mask),
        )

    def to(self, dtype) -> "Condition":
        return Condition(self.sentence.to(dtype), self.sequence.to(dtype), self.mask)


@dataclass
class CrossAttentionWeights:
    """Projection set for one attention site. ``W_q: d x d``, key/value maps per branch."""

    W_q: torch.Tensor
    W_k_sentence: torch.Tensor
    W_k_sequence: torch.Tensor
    W_v_sentence: torch.Tensor
    W_v_sequence: torch.Tensor
    heads: int = 1


def cross_attention(features: torch.Tensor, cond: Condition | PromptEmbedding, weights: CrossAttentionWeights):
    """``softmax(Q K^T / sqrt(d_head)) V`` over condition tokens with padding masked out.

    ``features`` is ``(N, d)`` or ``(B, N, d)``. Returns the attended output of
    the same shape and the head-averaged map ``(B?, N, L + K)``.
    """
    squeeze = features.dim() == 2
    if squeeze:
        features = features[None]
    if isinstance(cond, PromptEmbedding):
        cond = Condition.from_embeddings(cond, batch=features.shape[0], dtype=features.dtype)
    B, N, d = features.shape
    if weights.W_q.shape[0] != d:
        raise ShapeError(f"features have width {d}, W_q expects {weights.W_q.shape[0]}")
    if cond.sentence.shape[-1] != weights.W_k_sentence.shape[0] or cond.sequence.shape[-1] != weights.W_k_sequence.shape[0]:
        raise ShapeError("condition widths do not match the key projections")
    h = weights.heads
    dh = weights.W_q.shape[1] // h
    q = features @ weights.W_q
    k = torch.cat([cond.sentence @ weights.W_k_sentence, cond.sequence @ weights.W_k_sequence], dim=1)
    v = torch.cat([cond.sentence @ weights.W_v_sentence, cond.sequence @ weights.W_v_sequence], dim=1)
    M = k.shape[1]
    q = q.view(B, N, h, dh).transpose(1, 2)
    k = k.view(B, M, h, dh).transpose(1, 2)
    v = v.view(B, M, h, dh).transpose(1, 2)
    logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
    valid = torch.cat([cond.mask, torch.ones(B, cond.sequence.shape[1], dtype=torch.bool)], dim=1)
    logits = logits.masked_fill(~valid[:, None, None, :], float("-inf"))
    probs = torch.softmax(logits, dim=-1)
    out = (probs @ v).transpose(1, 2).reshape(B, N, h * dh)
    maps = probs.mean(dim=1)
    if squeeze:
        return out[0], maps[0]
    return out, maps


# --------------------------------------------------------------------------- network


def _groups(c: int) -> int:
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1


def coordinate_features(height: int, width: int, periods) -> torch.Tensor:
    """``(4 * len(periods), height, width)`` sin/cos of row and column index.

    Convolutions are translation-equivariant; these channels tell the network
    where along each axis it is, which the toy attributes depend on.
    """
    rows = torch.arange(height, dtype=torch.float64)[:, None].expand(height, width)
    cols = torch.arange(width, dtype=torch.float64)[None, :].expand(height, width)
    feats = []
    for p in periods:
        for grid in (rows, cols):
            ang = 2 * math.pi * grid / p
            feats += [torch.sin(ang), torch.cos(ang)]
    if not feats:
        return torch.zeros(0, height, width, dtype=torch.float64)
    return torch.stack(feats)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttentionBlock(nn.Module):
    def __init__(self, channels: int, cfg: DenoiserConfig):
        super().__init__()
        d = cfg.attn_dim
        self.heads = cfg.heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.proj_in = nn.Linear(channels, d)
        self.W_q = nn.Parameter(torch.empty(d, d))
        self.W_k_sentence = nn.Parameter(torch.empty(cfg.sentence_dim, d))
        self.W_k_sequence = nn.Parameter(torch.empty(cfg.sequence_dim, d))
        self.W_v_sentence = nn.Parameter(torch.empty(cfg.sentence_dim, d))
        self.W_v_sequence = nn.Parameter(torch.empty(cfg.sequence_dim, d))
        self.proj_out = nn.Linear(d, channels)
        for p in (self.W_q, self.W_k_sentence, self.W_k_sequence, self.W_v_sentence, self.W_v_sequence):
            bound = 1.0 / math.sqrt(p.shape[0])
            nn.init.uniform_(p, -bound, bound)

    def weights(self) -> CrossAttentionWeights:
        return CrossAttentionWeights(self.W_q, self.W_k_sentence, self.W_k_sequence,
                                     self.W_v_sentence, self.W_v_sequence, self.heads)

    def forward(self, x, cond: Condition):
        B, C, H, W = x.shape
        feats = self.proj_in(self.norm(x).flatten(2).transpose(1, 2))
        out, maps = cross_attention(feats, cond, self.weights())
        out = self.proj_out(out).transpose(1, 2).reshape(B, C, H, W)
        return x + out, maps


class SelfAttentionBlock(nn.Module):
    def __init__(self, channels: int, cfg: DenoiserConfig):
        super().__init__()
        self.heads = cfg.heads
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Linear(channels, 3 * cfg.attn_dim)
        self.proj_out = nn.Linear(cfg.attn_dim, channels)

    def forward(self, x):
        B, C, H, W = x.shape
        q, k, v = self.qkv(self.norm(x).flatten(2).transpose(1, 2)).chunk(3, dim=-1)
        q, k, v = (u.reshape(B, H * W, self.heads, -1).transpose(1, 2) for u in (q, k, v))
        out = F.scaled_dot_product_attention(q, k, v).transpose(1, 2).reshape(B, H * W, -1)
        return x + self.proj_out(out).transpose(1, 2).reshape(B, C, H, W)


class Denoiser(nn.Module):
    """``eps_theta(z_t, E, t)`` with ``2 * stages + 1`` cross-attention sites."""

    def __init__(self, config: DenoiserConfig = DenoiserConfig(), seed: int | None = 0):
        super().__init__()
        self.config = config
        cfg = config
        chans = cfg.channels
        t_dim = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(t_dim, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        self.register_buffer(
            "coords", coordinate_features(cfg.freq_bins, cfg.time_frames, cfg.position_periods).float(), persistent=False
        )
        self.stem = nn.Conv2d(cfg.in_channels + cfg.num_position_channels, chans[0], 3, padding=1)
        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chans[0]
        for i, c in enumerate(chans):
            self.down_res.append(ResBlock(prev, c, t_dim))
            self.down_attn.append(CrossAttentionBlock(c, cfg))
            if i < len(chans) - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
            prev = c
        self.mid_res = ResBlock(prev, prev, t_dim)
        self.mid_self = SelfAttentionBlock(prev, cfg) if cfg.mid_self_attention else nn.Identity()
        self.mid_attn = CrossAttentionBlock(prev, cfg)
        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, c in reversed(list(enumerate(chans))):
            self.up_res.append(ResBlock(prev + c, c, t_dim))
            self.up_attn.append(CrossAttentionBlock(c, cfg))
            if i > 0:
                self.upsample.append(nn.Conv2d(c, chans[i - 1], 3, padding=1))
                prev = chans[i - 1]
            else:
                prev = c
        self.out_norm = nn.GroupNorm(_groups(prev), prev)
        self.out_conv = nn.Conv2d(prev, cfg.in_channels, 3, padding=1)
        self._ready = seed is not None
        if seed is not None:
            self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.startswith("out_conv"):
                    p.zero_()
                elif p.dim() == 1:
                    if "norm" in name:
                        p.fill_(1.0 if name.endswith("weight") else 0.0)
                    else:
                        p.zero_()
                else:
                    fan_in = p[0].numel() if p.dim() > 2 else p.shape[0] if name.split(".")[-1].startswith("W_") else p.shape[1]
                    bound = 1.0 / math.sqrt(max(fan_in, 1))
                    p.uniform_(-bound, bound, generator=gen)
        self._ready = True

    @classmethod
    def unloaded(cls, config: DenoiserConfig = DenoiserConfig()) -> "Denoiser":
        return cls(config, seed=None)

    @property
    def ready(self) -> bool:
        return self._ready

    @property
    def dtype(self):
        return self.stem.weight.dtype

    def forward(self, z: torch.Tensor, t, cond: Condition, capture: bool = False):
        if not self._ready:
            raise StateError("denoiser weights are not loaded")
        cfg = self.config
        if tuple(z.shape[1:]) != cfg.latent_shape:
            raise ShapeError(f"latent shape {tuple(z.shape[1:])} does not match config {cfg.latent_shape}")
        B = z.shape[0]
        if len(cond) != B:
            raise ShapeError(f"condition batch {len(cond)} does not match latent batch {B}")
        if cond.sentence.shape[1] != cfg.max_length or cond.sequence.shape[1] != cfg.num_sequence_tokens:
            raise ShapeError("condition token counts do not match the denoiser config")
        t = torch.as_tensor(t).reshape(-1).expand(B) if torch.as_tensor(t).numel() == 1 else torch.as_tensor(t)
        temb = self.time_mlp(timestep_embedding(t, cfg.time_embed_dim).to(z.dtype))
        maps = []
        if self.coords.shape[0]:
            z = torch.cat([z, self.coords.to(z.dtype).expand(B, -1, -1, -1)], dim=1)
        h = self.stem(z)
        skips = []
        for i, (res, attn) in enumerate(zip(self.down_res, self.down_attn)):
            h = res(h, temb)
            h, m = attn(h, cond)
            maps.append(m)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid_self(self.mid_res(h, temb))
        h, m = self.mid_attn(h, cond)
        maps.append(m)
        for j, (res, attn) in enumerate(zip(self.up_res, self.up_attn)):
            h = res(torch.cat([h, skips.pop()], dim=1), temb)
            h, m = attn(h, cond)
            maps.append(m)
            if j < len(self.upsample):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[j](h)
        eps = self.out_conv(F.silu(self.out_norm(h)))
        return (eps, maps) if capture else (eps, None)

    # ------------------------------------------------------------------ persistence

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def save(self, path, extra: dict | None = None) -> None:
        config = {"format": "deltaedit.denoiser", "version": 1, "denoiser": self.config.to_dict()}
        if extra:
            config.update(extra)
        save_checkpoint(path, self.state_arrays(), config)

    @classmethod
    def load(cls, path) -> tuple["Denoiser", dict]:
        tensors, config = load_checkpoint(path)
        if config.get("format") != "deltaedit.denoiser":
            raise StateError(f"{path} is not a denoiser checkpoint")
        if config.get("version") != 1:
            raise StateError(f"unsupported denoiser checkpoint version {config.get('version')}")
        model = cls(DenoiserConfig.from_dict(config["denoiser"]), seed=None)
        model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        model._ready = True
        model.eval()
        return model, config


def predict_noise(denoiser: Denoiser, z_t, t: int, E: PromptEmbedding, capture: bool = False):
    """Single-clip convenience wrapper returning numpy arrays.

    Returns ``(eps_hat, AttentionMaps | None)``.
    """
    data = z_t.data if isinstance(z_t, LatentClip) else np.asarray(z_t)
    dtype = denoiser.dtype
    z = torch.as_tensor(np.array(data), dtype=dtype)[None]
    cond = Condition.from_embeddings(E, batch=1, dtype=dtype)
    with torch.no_grad():
        eps, maps = denoiser(z, int(t), cond, capture=capture)
    eps_np = eps[0].numpy().astype(data.dtype if data.dtype.kind == "f" else np.float64)
    if capture:
        return eps_np, AttentionMaps([m[0].numpy() for m in maps])
    return eps_np, None


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    denoiser: Denoiser
    epoch_losses: list = field(default_factory=list)
    epoch_medians: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


def null_embedding(encoder: TextEncoder) -> PromptEmbedding:
    return encoder.encode([])


def train_toy_denoiser(
    dataset,
    schedule: NoiseSchedule,
    config: DenoiserConfig,
    epochs: int,
    seed: int,
    encoder: TextEncoder,
    batch_size: int = 64,
    lr: float = 2e-3,
    ema_decay: float = 0.995,
    log=None,
) -> TrainResult:
    """Epsilon-prediction training with condition dropout at ``config.p_uncond``.

    The returned model carries the EMA weights.
    """
    n = len(dataset)
    if n == 0:
        raise ParameterError("dataset is empty")
    gen = torch.Generator().manual_seed(int(seed))
    model = Denoiser(config, seed=seed)
    model.train()
    ema = {k: v.detach().clone() for k, v in model.state_dict().items()}

    x0 = config.latent_scale * torch.as_tensor(np.asarray(dataset.spectrograms), dtype=torch.float32)
    prompts = dataset.prompts
    unique = sorted(set(prompts))
    lookup = {p: i for i, p in enumerate(unique)}
    table = Condition.from_embeddings([encoder.encode(dataset.prompt_tokens(prompts.index(p))) for p in unique])
    prompt_idx = torch.tensor([lookup[p] for p in prompts])
    null = Condition.from_embeddings(null_embedding(encoder))
    alpha_bars = torch.as_tensor(schedule.alpha_bars, dtype=torch.float32)
    T = schedule.num_train_steps

    steps_per_epoch = max(1, n // batch_size)
    total = epochs * steps_per_epoch
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=max(total, 1), pct_start=0.05)
    result = TrainResult(model)
    last_finite = None
    for epoch in range(epochs):
        perm = torch.randperm(n, generator=gen)
        losses = []
        for s in range(steps_per_epoch):
            idx = perm[s * batch_size : (s + 1) * batch_size]
            b = idx.numel()
            t = torch.randint(1, T + 1, (b,), generator=gen)
            noise = torch.randn((b, *x0.shape[1:]), generator=gen)
            ab = alpha_bars[t - 1][:, None, None, None]
            z_t = ab.sqrt() * x0[idx] + (1 - ab).sqrt() * noise
            pi = prompt_idx[idx]
            cond = Condition(table.sentence[pi], table.sequence[pi], table.mask[pi])
            keep = torch.rand(b, generator=gen) >= config.p_uncond
            cond = cond.select(keep, Condition(null.sentence.expand(b, -1, -1), null.sequence.expand(b, -1, -1),
                                               null.mask.expand(b, -1)))
            eps, _ = model(z_t, t, cond)
            loss = F.mse_loss(eps, noise)
            if not torch.isfinite(loss):
                raise TrainingError(f"loss became non-finite in epoch {epoch}", last_finite_epoch=last_finite)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            sched.step()
            with torch.no_grad():
                for k, v in model.state_dict().items():
                    if v.dtype.is_floating_point:
                        ema[k].mul_(ema_decay).add_(v, alpha=1 - ema_decay)
                    else:
                        ema[k].copy_(v)
            losses.append(loss.item())
        result.step_losses.extend(losses)
        result.epoch_losses.append(float(np.mean(losses)))
        result.epoch_medians.append(float(np.median(losses)))
        last_finite = epoch
        if log is not None:
            log(epoch, result.epoch_losses[-1])
    model.load_state_dict(ema)
    model.eval()
    return result
