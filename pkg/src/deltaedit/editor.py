"""Attention-constrained editing.

An edit is two DDIM passes from the same starting noise. The first pass
denoises under the source prompt and records every cross-attention map. The
second pass denoises under the edited embedding; at each step it measures how
far its own maps drift from the recorded ones, nudges ``z_t`` one gradient
step against that drift, and predicts noise at the nudged latent before
stepping on from the original ``z_t``.

The public functions take single clips. The ``*_batch`` helpers run many
seeds at once and are what the benchmark uses.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .condition import EditDirection, PromptEmbedding, TextEncoder, apply_edit, embed_prompt
from .denoiser import AttentionMaps, Condition, Denoiser, null_embedding
from .errors import NumericError, ParameterError, ShapeError
from .schedule import LatentClip, NoiseSchedule, ddim_step

DEFAULT_ALPHA = 0.04
DEFAULT_STEPS = 100
REPORT_SCHEMA = "deltaedit.edit_report/1"
LOSS_REDUCTIONS = ("stacked", "sum", "mean")


def cfg_combine(eps_uncond, eps_cond, w: float):
    """Classifier-free guidance blend. ``w == 1`` returns ``eps_cond`` untouched."""
    if tuple(getattr(eps_uncond, "shape", ())) != tuple(getattr(eps_cond, "shape", ())):
        raise ShapeError("conditional and unconditional predictions differ in shape")
    if w == 1:
        return eps_cond
    if w == 0:
        return eps_uncond
    return eps_uncond + w * (eps_cond - eps_uncond)


@dataclass
class AttentionTrajectory:
    """Recorded maps, one :class:`AttentionMaps`-like entry per inference step.

    Internally each entry is a list of per-site tensors with a leading batch
    axis; :meth:`step` exposes a single item as numpy.
    """

    timesteps: list
    maps: list

    def __len__(self) -> int:
        return len(self.maps)

    def step(self, i: int, item: int = 0) -> AttentionMaps:
        return AttentionMaps([m[item].detach().cpu().numpy() for m in self.maps[i]])

    def item(self, item: int) -> "AttentionTrajectory":
        return AttentionTrajectory(self.timesteps, [[m[item : item + 1] for m in step] for step in self.maps])

    def max_row_error(self) -> float:
        worst = 0.0
        for step in self.maps:
            for m in step:
                worst = max(worst, float((m.sum(dim=-1) - 1).abs().max()))
        return worst

    def min_entry(self) -> float:
        return min(float(m.min()) for step in self.maps for m in step)

    def max_entry(self) -> float:
        return max(float(m.max()) for step in self.maps for m in step)

    def arrays(self, item: int = 0) -> dict[str, np.ndarray]:
        """``{"site{s}": (steps, queries, tokens)}`` for tensor-container export."""
        out = {}
        for s in range(len(self.maps[0]) if self.maps else 0):
            out[f"site{s}"] = np.stack([step[s][item].detach().cpu().numpy() for step in self.maps])
        return out


# --------------------------------------------------------------------------- losses


def _select_sites(maps, sites):
    return list(maps) if sites is None else [maps[s] for s in sites]


def attention_loss(M_edit, M_origin, reduction: str = "stacked", sites: Sequence[int] | None = None) -> float:
    """L2 distance between two sets of attention maps.

    ``stacked`` is the Frobenius norm over all selected sites concatenated;
    ``sum`` and ``mean`` combine per-site norms.
    """
    a = _select_sites(M_edit.maps if isinstance(M_edit, AttentionMaps) else M_edit, sites)
    b = _select_sites(M_origin.maps if isinstance(M_origin, AttentionMaps) else M_origin, sites)
    if len(a) != len(b):
        raise ShapeError(f"{len(a)} edited sites vs {len(b)} recorded sites")
    sq = []
    for x, y in zip(a, b):
        x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
        if x.shape != y.shape:
            raise ShapeError(
                f"attention map shapes differ ({x.shape} vs {y.shape}); the edit changed the token layout, "
                "use a delta edit instead of a raw word swap"
            )
        sq.append(float(np.sum((x - y) ** 2)))
    return _reduce(np.array(sq), reduction)


def _reduce(sq, reduction):
    if reduction == "stacked":
        return float(np.sqrt(np.sum(sq)))
    if reduction == "sum":
        return float(np.sum(np.sqrt(sq)))
    if reduction == "mean":
        return float(np.mean(np.sqrt(sq)))
    raise ParameterError(f"unknown loss reduction {reduction!r}")


def _site_sq(maps_edit, maps_origin, sites):
    """Per-item, per-site squared distances as a ``(B, S)`` tensor."""
    a = _select_sites(maps_edit, sites)
    b = _select_sites(maps_origin, sites)
    cols = []
    for x, y in zip(a, b):
        if x.shape != y.shape:
            raise ShapeError("attention map shapes differ; use a delta edit instead of a raw word swap")
        cols.append(((x - y.to(x.dtype)) ** 2).flatten(1).sum(dim=1))
    return torch.stack(cols, dim=1)


def _reduce_torch(sq, reduction):
    if reduction == "stacked":
        return sq.sum(dim=1).sqrt()
    if reduction in ("sum", "mean"):
        per = sq.sqrt()
        return per.sum(dim=1) if reduction == "sum" else per.mean(dim=1)
    raise ParameterError(f"unknown loss reduction {reduction!r}")


def attention_loss_grad(denoiser: Denoiser, z_t: torch.Tensor, t: int, cond: Condition, maps_origin,
                        reduction: str = "stacked", sites=None):
    """Loss per item and its gradient with respect to ``z_t``.

    Items whose loss is exactly zero get an exactly-zero gradient (the norm is
    not differentiable there).
    """
    if reduction not in LOSS_REDUCTIONS:
        raise ParameterError(f"unknown loss reduction {reduction!r}")
    z = z_t.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        eps, maps = denoiser(z, t, cond, capture=True)
        sq = _site_sq(maps, maps_origin, sites)
        if reduction == "stacked":
            # d||x|| = d(||x||^2) / (2 ||x||), evaluated without sqrt at zero
            total = sq.sum(dim=1)
            (g_sq,) = torch.autograd.grad(total.sum(), z)
            loss = total.detach().sqrt()
            scale = torch.where(loss > 0, 0.5 / loss.clamp_min(torch.finfo(loss.dtype).tiny), torch.zeros_like(loss))
            grad = g_sq * scale[:, None, None, None]
        else:
            safe = torch.where(sq > 0, sq, torch.ones_like(sq)).sqrt()
            per = torch.where(sq > 0, safe, torch.zeros_like(sq))
            loss_t = per.sum(dim=1) if reduction == "sum" else per.mean(dim=1)
            (grad,) = torch.autograd.grad(loss_t.sum(), z)
            loss = loss_t.detach()
    return loss, grad, eps.detach()


# --------------------------------------------------------------------------- sampling kernels


def _as_batch(z, dtype) -> torch.Tensor:
    if isinstance(z, LatentClip):
        return torch.as_tensor(np.array(z.data), dtype=dtype)[None]
    z = torch.as_tensor(np.asarray(z) if not torch.is_tensor(z) else z, dtype=dtype)
    return z if z.dim() == 4 else z[None]


def _predict(denoiser, z, t, cond, null, guidance, capture=False):
    with torch.no_grad():
        eps_c, maps = denoiser(z, t, cond, capture=capture)
        if guidance != 1:
            eps_u, _ = denoiser(z, t, null)
            eps_c = cfg_combine(eps_u, eps_c, guidance)
    return eps_c, maps


def _null_like(encoder_or_null, batch: int, dtype) -> Condition | None:
    if encoder_or_null is None:
        return None
    null = encoder_or_null if isinstance(encoder_or_null, PromptEmbedding) else null_embedding(encoder_or_null)
    return Condition.from_embeddings(null, batch=batch, dtype=dtype)


def reconstruct_batch(z_T: torch.Tensor, cond: Condition, schedule: NoiseSchedule, denoiser: Denoiser,
                      guidance_scale: float = 1.0, null: Condition | None = None, record: bool = True):
    """DDIM (eta = 0) from ``z_T`` to a clip; records the conditional maps per step.

    The final latent is divided by ``denoiser.config.latent_scale``.
    """
    if guidance_scale != 1 and null is None:
        raise ParameterError("guidance other than 1 needs an unconditional embedding")
    z = z_T
    timesteps, maps_per_step = [], []
    for t, t_prev in schedule.steps():
        eps, maps = _predict(denoiser, z, t, cond, null, guidance_scale, capture=record)
        if record:
            maps_per_step.append([m.detach() for m in maps])
        timesteps.append(t)
        z = ddim_step(z, eps, t, t_prev, schedule)
    return z / denoiser.config.latent_scale, AttentionTrajectory(timesteps, maps_per_step)


def constrained_step_batch(z_t, cond_edit, maps_origin_t, t, t_prev, alpha, schedule, denoiser,
                           guidance_scale=1.0, null=None, constraint_enabled=True,
                           reduction="stacked", sites=None):
    """One edited step for a batch. Returns ``(z_prev, loss or None, evaluations)``."""
    if alpha < 0:
        raise ParameterError("alpha must be non-negative")
    if not constraint_enabled or alpha == 0:
        eps, _ = _predict(denoiser, z_t, t, cond_edit, null, guidance_scale)
        return ddim_step(z_t, eps, t, t_prev, schedule), None, 1 + (guidance_scale != 1)
    loss, grad, _ = attention_loss_grad(denoiser, z_t, t, cond_edit, maps_origin_t, reduction, sites)
    if not torch.all(torch.isfinite(grad)):
        raise NumericError(f"non-finite attention-loss gradient at timestep {t}", timestep=t)
    shifted = z_t - alpha * grad
    eps, _ = _predict(denoiser, shifted, t, cond_edit, null, guidance_scale)
    return ddim_step(z_t, eps, t, t_prev, schedule), loss, 2 + (guidance_scale != 1)


# --------------------------------------------------------------------------- single-clip API


def reconstruct_and_record(z_T, E: PromptEmbedding, schedule: NoiseSchedule, denoiser: Denoiser,
                           guidance_scale: float = 1.0, null: PromptEmbedding | None = None):
    """Return ``(z_0 as LatentClip, AttentionTrajectory)``."""
    like = z_T if isinstance(z_T, LatentClip) else None
    z = _as_batch(z_T, denoiser.dtype)
    cond = Condition.from_embeddings(E, batch=1, dtype=denoiser.dtype)
    z0, traj = reconstruct_batch(z, cond, schedule, denoiser, guidance_scale,
                                 _null_like(null, 1, denoiser.dtype))
    return _to_clip(z0[0], like), traj


def constrained_edit_step(z_t, E_edit: PromptEmbedding, M_origin_t, t: int, t_prev: int, alpha: float,
                          schedule: NoiseSchedule, denoiser: Denoiser, guidance_scale: float = 1.0,
                          null: PromptEmbedding | None = None, constraint_enabled: bool = True,
                          reduction: str = "stacked", sites=None):
    """Single-clip edited step. ``M_origin_t`` is an :class:`AttentionMaps` or a list of tensors."""
    like = z_t if isinstance(z_t, LatentClip) else None
    dtype = denoiser.dtype
    z = _as_batch(z_t, dtype)
    if isinstance(M_origin_t, AttentionMaps):
        M_origin_t = [torch.as_tensor(np.asarray(m), dtype=dtype)[None] for m in M_origin_t.maps]
    cond = Condition.from_embeddings(E_edit, batch=1, dtype=dtype)
    z_prev, loss, _ = constrained_step_batch(
        z, cond, M_origin_t, t, t_prev, alpha, schedule, denoiser, guidance_scale,
        _null_like(null, 1, dtype), constraint_enabled, reduction, sites,
    )
    return _to_clip(z_prev[0], like), (None if loss is None else float(loss[0]))


def _to_clip(z: torch.Tensor, like: LatentClip | None) -> LatentClip:
    data = z.detach().cpu().numpy()
    if like is not None:
        return LatentClip(data.astype(like.data.dtype, copy=False), like.sample_rate, like.duration)
    return LatentClip(data)


def initial_noise(seed: int, shape: Sequence[int], dtype=torch.float32) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn(tuple(shape), generator=gen, dtype=torch.float64).to(dtype)


@dataclass
class EditRequest:
    source_prompt: str
    target_prompt: str
    direction: EditDirection | None = None
    alpha: float = DEFAULT_ALPHA
    guidance_scale: float = 1.0
    seed: int = 0
    num_inference_steps: int = DEFAULT_STEPS
    constraint_enabled: bool = True
    use_delta: bool = True
    loss_reduction: str = "stacked"
    sites: tuple | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ParameterError("alpha must be non-negative")
        if self.guidance_scale < 0:
            raise ParameterError("guidance_scale must be non-negative")
        if self.loss_reduction not in LOSS_REDUCTIONS:
            raise ParameterError(f"loss_reduction must be one of {LOSS_REDUCTIONS}")
        if self.use_delta and self.direction is None:
            raise ParameterError("a delta edit needs an EditDirection")

    def echo(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "direction"}
        if self.direction is not None:
            out["direction"] = {
                "source_keyword": self.direction.source_keyword,
                "target_keyword": self.direction.target_keyword,
                "num_captions": self.direction.num_captions,
                "delta_norm": float(np.linalg.norm(self.direction.delta)),
            }
        out["sites"] = None if self.sites is None else list(self.sites)
        return out


@dataclass
class EditResult:
    original: LatentClip
    edited: LatentClip
    report: dict
    trajectory: AttentionTrajectory | None = None

    def report_json(self) -> str:
        return json.dumps(self.report, indent=2, sort_keys=True) + "\n"


def edited_embedding(request: EditRequest, E_source: PromptEmbedding, encoder: TextEncoder) -> PromptEmbedding:
    E_target = embed_prompt(request.target_prompt, encoder)
    if not request.use_delta:
        return E_target
    return apply_edit(E_source, request.direction, E_target)


def edit_batch(request: EditRequest, seeds: Sequence[int], denoiser: Denoiser, schedule: NoiseSchedule,
               encoder: TextEncoder, z_T: torch.Tensor | None = None, keep_trajectory: bool = False,
               source_pass: tuple | None = None):
    """Run ``request`` for several starting latents at once.

    ``z_T`` overrides the seeded noise (used by the inversion path).
    ``source_pass`` is a ``(original, trajectory)`` pair from
    :func:`reconstruct_batch` on the same ``z_T`` and source prompt; passing it
    skips the reconstruction. Returns ``(original (B, ...), edited (B, ...),
    per-step losses, report, trajectory)``.
    """
    dtype = denoiser.dtype
    sched = schedule.with_inference_steps(request.num_inference_steps)
    E_src = embed_prompt(request.source_prompt, encoder)
    E_edit = edited_embedding(request, E_src, encoder)
    if request.constraint_enabled and request.alpha > 0 and not np.array_equal(E_src.valid_mask, E_edit.valid_mask):
        raise ShapeError(
            "source and edited prompts have different token layouts, so their attention maps cannot be "
            "compared; use a delta edit (use_delta=True) instead of a raw word swap"
        )
    if z_T is None:
        z_T = torch.stack([initial_noise(s, denoiser.config.latent_shape, dtype) for s in seeds])
    B = z_T.shape[0]
    cond_src = Condition.from_embeddings(E_src, batch=B, dtype=dtype)
    cond_edit = Condition.from_embeddings(E_edit, batch=B, dtype=dtype)
    null = _null_like(encoder, B, dtype) if request.guidance_scale != 1 else None

    if source_pass is None:
        original, traj = reconstruct_batch(z_T, cond_src, sched, denoiser, request.guidance_scale, null)
    else:
        original, traj = source_pass
        constrained = request.constraint_enabled and request.alpha > 0
        if original.shape != z_T.shape or (constrained and len(traj) != len(sched.steps())):
            raise ShapeError("the supplied source pass does not match this request")
    z = z_T
    losses, evals = [], []
    for i, (t, t_prev) in enumerate(sched.steps()):
        z, loss, n_eval = constrained_step_batch(
            z, cond_edit, traj.maps[i], t, t_prev, request.alpha, sched, denoiser,
            request.guidance_scale, null, request.constraint_enabled, request.loss_reduction, request.sites,
        )
        losses.append(None if loss is None else loss.detach().cpu().numpy())
        evals.append(n_eval)
    report = {
        "schema": REPORT_SCHEMA,
        "request": request.echo(),
        "seeds": [int(s) for s in seeds],
        "timesteps": [int(t) for t, _ in sched.steps()],
        "loss_reduction": request.loss_reduction,
        "loss_sites": "all" if request.sites is None else list(request.sites),
        "denoiser_evaluations_per_step": {"reconstruction": 1 + (request.guidance_scale != 1),
                                          "edit": evals[0] if evals else 0},
        "attention_row_error": traj.max_row_error() if len(traj) else 0.0,
    }
    if not keep_trajectory:
        traj = None
    return original, z / denoiser.config.latent_scale, losses, report, traj


def edit(request: EditRequest, denoiser: Denoiser, schedule: NoiseSchedule, encoder: TextEncoder,
         z_T=None, keep_trajectory: bool = False) -> EditResult:
    """Generate the source clip, then its edited counterpart from the same noise."""
    zT = None if z_T is None else _as_batch(z_T, denoiser.dtype)
    original, edited, losses, report, traj = edit_batch(
        request, [request.seed], denoiser, schedule, encoder, z_T=zT, keep_trajectory=keep_trajectory,
    )
    report["per_step_loss"] = [None if l is None else float(l[0]) for l in losses]
    report["metrics"] = {}
    like = z_T if isinstance(z_T, LatentClip) else None
    return EditResult(_to_clip(original[0], like), _to_clip(edited[0], like), report, traj)


def generate(prompt, seed: int, denoiser: Denoiser, schedule: NoiseSchedule, encoder: TextEncoder,
             num_inference_steps: int = DEFAULT_STEPS, guidance_scale: float = 1.0) -> LatentClip:
    sched = schedule.with_inference_steps(num_inference_steps)
    E = embed_prompt(prompt, encoder)
    z_T = initial_noise(seed, denoiser.config.latent_shape, denoiser.dtype)
    clip, _ = reconstruct_and_record(LatentClip(z_T.numpy()), E, sched, denoiser, guidance_scale,
                                     null_embedding(encoder) if guidance_scale != 1 else None)
    return clip
