"""Editing existing clips: caption, DDIM-invert to a starting latent, then edit."""

from __future__ import annotations

import concurrent.futures
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np
import torch

from .condition import EditDirection, TextEncoder, embed_prompt, tokenize
from .denoiser import Condition, Denoiser, null_embedding
from .editor import DEFAULT_ALPHA, EditRequest, EditResult, _null_like, _to_clip, cfg_combine, edit
from .errors import ConfigurationError, InversionError, ParameterError
from .schedule import LatentClip, NoiseSchedule, ddim_invert_step

AUTOCORR_LAGS = (1, 2, 4, 8)
DIVERGENCE_FACTOR = 1e3


@dataclass(frozen=True)
class InversionConfig:
    num_inference_steps: int = 100
    guidance_scale: float = 1.0
    autocorr_weight: float = 0.0
    autocorr_iters: int = 0
    autocorr_step: float = 0.1
    lags: tuple = AUTOCORR_LAGS

    def __post_init__(self):
        if self.guidance_scale < 0:
            raise ParameterError("guidance_scale must be non-negative")
        if self.autocorr_iters < 0 or int(self.autocorr_iters) != self.autocorr_iters:
            raise ParameterError("autocorr_iters must be a non-negative integer")
        for name in ("autocorr_weight", "autocorr_step"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ParameterError(f"{name} must be finite")
        if self.autocorr_weight < 0:
            raise ParameterError("autocorr_weight must be non-negative")
        if self.autocorr_step <= 0:
            raise ParameterError("autocorr_step must be positive")

    @property
    def regularize(self) -> bool:
        return self.autocorr_iters > 0 and self.autocorr_weight > 0


def autocorr_penalty(z: torch.Tensor, lags: Sequence[int] = AUTOCORR_LAGS) -> torch.Tensor:
    """Squared normalized circular autocorrelations plus moment matching.

    ``z`` is ``(channels, bins, frames)``; lags run along both spatial axes and
    are skipped when they are not shorter than the axis.
    """
    mu = z.mean()
    c = z - mu
    var = (c * c).mean()
    denom = var + 1e-12
    total = mu**2 + (var - 1.0) ** 2
    for axis in (-2, -1):
        size = z.shape[axis]
        for lag in lags:
            if lag >= size:
                continue
            ac = (c * torch.roll(c, shifts=lag, dims=axis)).mean() / denom
            total = total + ac**2
    return total


def autocorr_regularize(z, config: InversionConfig):
    """Gradient steps that push ``z`` toward iid unit-Gaussian statistics.

    Each step moves by ``autocorr_step * autocorr_weight * N * grad R`` (``N``
    elements), i.e. the step is per element. Returns an object of the same
    kind as ``z``; non-finite steps are skipped and counted in
    ``autocorr_regularize.last_skipped``.
    """
    like = z if isinstance(z, LatentClip) else None
    is_tensor = torch.is_tensor(z)
    if not config.regularize:
        return z
    x = torch.as_tensor(np.array(z.data) if like is not None else z, dtype=torch.float64).detach().clone()
    n = x.numel()
    skipped = 0
    for _ in range(config.autocorr_iters):
        x.requires_grad_(True)
        with torch.enable_grad():
            (g,) = torch.autograd.grad(autocorr_penalty(x, config.lags), x)
        x = x.detach()
        step = config.autocorr_step * config.autocorr_weight * n * g
        if not torch.all(torch.isfinite(step)):
            skipped += 1
            continue
        x = x - step
    autocorr_regularize.last_skipped = skipped
    if like is not None:
        return LatentClip(x.numpy().astype(like.data.dtype), like.sample_rate, like.duration)
    if is_tensor:
        return x.to(z.dtype)
    return x.numpy().astype(np.asarray(z).dtype)


autocorr_regularize.last_skipped = 0


@dataclass
class InversionTrace:
    timesteps: list = field(default_factory=list)
    norms: list = field(default_factory=list)
    eps: list = field(default_factory=list)


def _regularize_batch(z: torch.Tensor, config: InversionConfig) -> torch.Tensor:
    return torch.stack([autocorr_regularize(z[i], config) for i in range(z.shape[0])])


def invert_batch(z0: torch.Tensor, cond: Condition, config: InversionConfig, denoiser: Denoiser,
                 schedule: NoiseSchedule, null: Condition | None = None, keep_eps: bool = False):
    """DDIM inversion of clips ``z0 -> z_T`` for a batch; noise is predicted at ``(z_prev, t)``.

    Clips are multiplied by ``denoiser.config.latent_scale`` before inverting.
    """
    sched = schedule.with_inference_steps(config.num_inference_steps)
    if config.guidance_scale != 1 and null is None:
        raise ParameterError("guidance other than 1 needs an unconditional embedding")
    steps = list(reversed(sched.steps()))
    z = z0 * denoiser.config.latent_scale
    expected = math.sqrt(z0[0].numel())
    trace = InversionTrace()
    for t, t_prev in steps:
        with torch.no_grad():
            eps, _ = denoiser(z, t, cond)
            if config.guidance_scale != 1:
                eps_u, _ = denoiser(z, t, null)
                eps = cfg_combine(eps_u, eps, config.guidance_scale)
        z = ddim_invert_step(z, eps, t_prev, t, sched)
        if config.regularize:
            z = _regularize_batch(z, config)
        norms = z.flatten(1).norm(dim=1)
        if not torch.all(torch.isfinite(norms)) or float(norms.max()) > DIVERGENCE_FACTOR * expected:
            raise InversionError(f"inversion diverged at timestep {t} (norm {float(norms.max()):.3g})", timestep=t)
        trace.timesteps.append(t)
        trace.norms.append(norms.tolist())
        if keep_eps:
            trace.eps.append(eps.detach().clone())
    return z, trace


def invert(z0, caption, config: InversionConfig, denoiser: Denoiser, schedule: NoiseSchedule,
           encoder: TextEncoder):
    """Estimate the starting latent of ``z0`` under ``caption``. Returns ``(z_T_hat, trace)``."""
    like = z0 if isinstance(z0, LatentClip) else None
    dtype = denoiser.dtype
    data = z0.data if like is not None else z0
    z = torch.as_tensor(np.array(data), dtype=dtype)[None]
    E = embed_prompt(caption, encoder)
    cond = Condition.from_embeddings(E, batch=1, dtype=dtype)
    null = _null_like(encoder, 1, dtype) if config.guidance_scale != 1 else None
    zT, trace = invert_batch(z, cond, config, denoiser, schedule, null)
    return _to_clip(zT[0], like), trace


def replay_inversion(z0, eps_values: Sequence, schedule: NoiseSchedule):
    """Invert with externally supplied noise predictions, listed in sampling order."""
    steps = schedule.steps()
    if len(eps_values) != len(steps):
        raise ParameterError(f"need {len(steps)} noise predictions, got {len(eps_values)}")
    z = z0
    for (t, t_prev), eps in zip(reversed(steps), reversed(list(eps_values))):
        z = ddim_invert_step(z, eps, t_prev, t, schedule)
    return z


# --------------------------------------------------------------------------- captioning


class CaptionerInterface(Protocol):
    def caption(self, clip) -> str: ...


_CAPTIONERS: dict[str, CaptionerInterface] = {}


def register_captioner(name: str, captioner: CaptionerInterface) -> None:
    _CAPTIONERS[name] = captioner


def get_captioner(name: str) -> CaptionerInterface:
    try:
        return _CAPTIONERS[name]
    except KeyError:
        raise ConfigurationError(f"no captioner registered as {name!r}") from None


def caption_for_clip(clip, captioner: CaptionerInterface | str | None, encoder: TextEncoder | None = None,
                     timeout: float | None = 30.0) -> list[str]:
    """Caption ``clip`` synchronously, optionally checking the caption is encodable."""
    if captioner is None:
        raise ConfigurationError("no captioner configured")
    if isinstance(captioner, str):
        captioner = get_captioner(captioner)
    if timeout is None:
        text = captioner.caption(clip)
    else:
        pool = concurrent.futures.ThreadPoolExecutor(max_workers=1)
        try:
            text = pool.submit(captioner.caption, clip).result(timeout=timeout)
        except concurrent.futures.TimeoutError:
            raise ConfigurationError(f"captioner did not answer within {timeout} s") from None
        finally:
            pool.shutdown(wait=False)
    tokens = tokenize(text)
    if encoder is not None:
        encoder.encode(tokens)
    return tokens


def _register_defaults():
    from .toybench import OracleCaptioner

    register_captioner("oracle", OracleCaptioner())


_register_defaults()


# --------------------------------------------------------------------------- full pipeline


@dataclass
class RealEditResult:
    caption: str
    z_T_hat: LatentClip
    result: EditResult
    trace: InversionTrace


def swap_keyword(caption_tokens: Sequence[str], source_keyword: str, target_keyword: str) -> str:
    out = [target_keyword if t == source_keyword.lower() else t for t in caption_tokens]
    return _detokenize(out)


def _detokenize(tokens: Sequence[str]) -> str:
    text = ""
    for tok in tokens:
        if text and tok.isalnum():
            text += " "
        text += tok
    return text


def edit_real(clip: LatentClip, target_prompt: str | None, direction: EditDirection | None,
              config: InversionConfig, denoiser: Denoiser, schedule: NoiseSchedule, encoder: TextEncoder,
              captioner: CaptionerInterface | str | None = "oracle", alpha: float = DEFAULT_ALPHA,
              constraint_enabled: bool = True, use_delta: bool = True, caption: str | None = None,
              edit_guidance: float = 1.0) -> RealEditResult:
    """Caption, invert, then edit from the inverted latent.

    With ``target_prompt=None`` the target is the caption with the direction's
    source keyword swapped for its target keyword.
    """
    tokens = tokenize(caption) if caption is not None else caption_for_clip(clip, captioner, encoder)
    caption_text = _detokenize(tokens)
    if target_prompt is None:
        if direction is None:
            raise ParameterError("need a target prompt or an edit direction")
        target_prompt = swap_keyword(tokens, direction.source_keyword, direction.target_keyword)
    z_T, trace = invert(clip, tokens, config, denoiser, schedule, encoder)
    request = EditRequest(
        source_prompt=caption_text,
        target_prompt=target_prompt,
        direction=direction,
        alpha=alpha,
        guidance_scale=edit_guidance,
        num_inference_steps=config.num_inference_steps,
        constraint_enabled=constraint_enabled,
        use_delta=use_delta and direction is not None,
    )
    result = edit(request, denoiser, schedule, encoder, z_T=z_T)
    result.report["inversion"] = {
        "caption": caption_text,
        "guidance_scale": config.guidance_scale,
        "autocorr_weight": config.autocorr_weight,
        "autocorr_iters": config.autocorr_iters,
        "autocorr_step": config.autocorr_step,
        "final_norm": trace.norms[-1][0] if trace.norms else None,
    }
    if config.guidance_scale > 1:
        result.report["inversion"]["warning"] = "guidance above 1 during inversion lowers reconstruction fidelity"
    return RealEditResult(caption_text, z_T, result, trace)
