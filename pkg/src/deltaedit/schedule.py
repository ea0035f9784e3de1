"""Noise schedule and the sampling kernels built on it.

Every kernel is a pure function of its inputs. Randomness is always passed in
by the caller, so the module never owns a generator. Kernels accept either a
:class:`LatentClip`, a numpy array, a torch tensor or a plain float, and hand
back the same kind of object they were given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ParameterError, ShapeError


@dataclass(frozen=True)
class LatentClip:
    """A latent (or spectrogram) tensor of shape ``(channels, freq_bins, time_frames)``."""

    data: np.ndarray
    sample_rate: float = 16000.0
    duration: float = 5.0

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"LatentClip expects a rank-3 tensor, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ParameterError("LatentClip contains non-finite entries")
        data = np.array(data, copy=True)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def replace(self, data) -> "LatentClip":
        data = np.asarray(data)
        if data.shape != self.data.shape:
            raise ShapeError(f"shape changed from {self.data.shape} to {data.shape}")
        return LatentClip(data, self.sample_rate, self.duration)


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step coefficients of the diffusion chain.

    Arrays are stored 0-based (``alphas[t - 1]`` is the coefficient of step
    ``t``); use the accessors, which also honour the ``alpha_bar(0) == 1``
    convention.
    """

    num_train_steps: int
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    inference_timesteps: np.ndarray
    eta: float = 0.0
    spacing: str = "linear"
    beta_min: float = field(default=float("nan"))
    beta_max: float = field(default=float("nan"))

    @classmethod
    def from_alphas(cls, alphas, num_inference_steps: int | None = None, eta: float = 0.0) -> "NoiseSchedule":
        alphas = np.asarray(alphas, dtype=np.float64)
        if alphas.ndim != 1 or alphas.size == 0:
            raise ParameterError("alphas must be a non-empty vector")
        if np.any(alphas <= 0) or np.any(alphas > 1):
            raise ParameterError("every alpha must lie in (0, 1]")
        T = alphas.size
        n = T if num_inference_steps is None else int(num_inference_steps)
        if not 1 <= n <= T:
            raise ParameterError(f"num_inference_steps must be in [1, {T}], got {n}")
        stride = T // n
        timesteps = T - stride * np.arange(n, dtype=np.int64)
        alpha_bars = np.cumprod(alphas)
        sigmas = np.zeros(T)
        if eta > 0:
            for t in range(1, T + 1):
                prev = max(t - stride, 0)
                ab_t = alpha_bars[t - 1]
                ab_prev = 1.0 if prev == 0 else alpha_bars[prev - 1]
                sigmas[t - 1] = _ddim_sigma(ab_t, ab_prev, eta)
        return cls(
            num_train_steps=T,
            alphas=alphas,
            alpha_bars=alpha_bars,
            sigmas=sigmas,
            inference_timesteps=timesteps,
            eta=float(eta),
        )

    def alpha(self, t: int) -> float:
        self._check_t(t, allow_zero=False)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check_t(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def beta(self, t: int) -> float:
        return 1.0 - self.alpha(t)

    @property
    def num_inference_steps(self) -> int:
        return len(self.inference_timesteps)

    def steps(self) -> list[tuple[int, int]]:
        """``(t, t_prev)`` pairs of the inference grid, ending at ``t_prev == 0``."""
        ts = [int(t) for t in self.inference_timesteps]
        return list(zip(ts, ts[1:] + [0]))

    def with_inference_steps(self, num_inference_steps: int) -> "NoiseSchedule":
        sched = NoiseSchedule.from_alphas(self.alphas, num_inference_steps, self.eta)
        return NoiseSchedule(
            sched.num_train_steps, sched.alphas, sched.alpha_bars, sched.sigmas,
            sched.inference_timesteps, sched.eta, self.spacing, self.beta_min, self.beta_max,
        )

    def _check_t(self, t, allow_zero):
        lo = 0 if allow_zero else 1
        if not (lo <= int(t) <= self.num_train_steps) or int(t) != t:
            raise ParameterError(f"timestep {t} outside [{lo}, {self.num_train_steps}]")


def build_schedule(
    T: int = 1000,
    beta_min: float = 1e-4,
    beta_max: float = 0.02,
    spacing: str = "linear",
    num_inference_steps: int = 100,
    eta: float = 0.0,
) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ParameterError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if not 1 <= num_inference_steps <= T:
        raise ParameterError(f"num_inference_steps must be in [1, {T}]")
    if not 0 <= eta <= 1:
        raise ParameterError("eta must lie in [0, 1]")
    if spacing == "linear":
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    elif spacing == "scaled_linear":
        betas = np.linspace(math.sqrt(beta_min), math.sqrt(beta_max), T, dtype=np.float64) ** 2
    else:
        raise ParameterError(f"unknown spacing {spacing!r}")
    base = NoiseSchedule.from_alphas(1.0 - betas, num_inference_steps, eta)
    return NoiseSchedule(
        base.num_train_steps, base.alphas, base.alpha_bars, base.sigmas,
        base.inference_timesteps, base.eta, spacing, float(beta_min), float(beta_max),
    )


def _ddim_sigma(ab_t: float, ab_prev: float, eta: float) -> float:
    if eta == 0:
        return 0.0
    return eta * math.sqrt((1 - ab_prev) / (1 - ab_t)) * math.sqrt(1 - ab_t / ab_prev)


def _unwrap(x):
    if isinstance(x, LatentClip):
        return x.data, x
    return x, None


def _wrap(value, like: LatentClip | None):
    if like is None:
        return value
    return like.replace(value)


def _shape(x) -> tuple:
    return tuple(getattr(x, "shape", ()))


def _check_same_shape(a, b, what: str):
    if _shape(a) != _shape(b):
        raise ShapeError(f"{what} shape {_shape(b)} does not match latent shape {_shape(a)}")


def forward_diffuse(z0, t: int, noise, schedule: NoiseSchedule) -> Any:
    """Closed-form marginal ``sqrt(ab_t) * z0 + sqrt(1 - ab_t) * noise``."""
    x, like = _unwrap(z0)
    _check_same_shape(x, noise, "noise")
    if not 1 <= t <= schedule.num_train_steps:
        raise ParameterError(f"timestep {t} outside [1, {schedule.num_train_steps}]")
    ab = schedule.alpha_bar(t)
    return _wrap(math.sqrt(ab) * x + math.sqrt(1.0 - ab) * noise, like)


def ddpm_step(z_t, eps_hat, t: int, schedule: NoiseSchedule, noise=None, sigma: float | None = None):
    """One ancestral step ``z_t -> z_{t-1}``.

    ``sigma`` defaults to ``sqrt(beta_t)``. Passing ``noise=None`` is the same
    as zero noise.
    """
    x, like = _unwrap(z_t)
    _check_same_shape(x, eps_hat, "eps_hat")
    if not 1 <= t <= schedule.num_train_steps:
        raise ParameterError(f"timestep {t} outside [1, {schedule.num_train_steps}]")
    a = schedule.alpha(t)
    ab = schedule.alpha_bar(t)
    if sigma is None:
        sigma = math.sqrt(1.0 - a)
    coef = (1.0 - a) / math.sqrt(1.0 - ab) if ab < 1.0 else 0.0
    out = (x - coef * eps_hat) / math.sqrt(a)
    if noise is not None and sigma != 0:
        _check_same_shape(x, noise, "noise")
        out = out + sigma * noise
    return _wrap(out, like)


def ddim_step(z_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule, eta: float = 0.0, noise=None):
    """DDIM update ``z_t -> z_{t_prev}``; deterministic when ``eta == 0``."""
    x, like = _unwrap(z_t)
    _check_same_shape(x, eps_hat, "eps_hat")
    if not t > t_prev >= 0:
        raise ParameterError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    if not 0 <= eta <= 1:
        raise ParameterError("eta must lie in [0, 1]")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    sigma = _ddim_sigma(ab_t, ab_prev, eta)
    z0_pred = (x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    direction = math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
    out = math.sqrt(ab_prev) * z0_pred + direction * eps_hat
    if sigma > 0:
        if noise is None:
            raise ParameterError("eta > 0 requires an explicit noise tensor")
        _check_same_shape(x, noise, "noise")
        out = out + sigma * noise
    return _wrap(out, like)


def ddim_invert_step(z_prev, eps_hat, t_prev: int, t: int, schedule: NoiseSchedule):
    """Exact inverse of the eta=0 :func:`ddim_step` for the same ``eps_hat``."""
    x, like = _unwrap(z_prev)
    _check_same_shape(x, eps_hat, "eps_hat")
    if not t > t_prev >= 0:
        raise ParameterError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    z0_pred = (x - math.sqrt(1.0 - ab_prev) * eps_hat) / math.sqrt(ab_prev)
    return _wrap(math.sqrt(ab_t) * z0_pred + math.sqrt(1.0 - ab_t) * eps_hat, like)
