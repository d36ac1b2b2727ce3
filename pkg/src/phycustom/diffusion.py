"""Forward noising, training batches and the guided ancestral sampler."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .denoiser import DenoiserConfig, predict_noise
from .errors import DataError, PhyCustomError
from .tensorcore import ParamStore
from .textencoder import MAX_LEN, encode, pad_mask

log = logging.getLogger(__name__)

CFG_DROPOUT = 0.1


class DiffusionError(PhyCustomError):
    code = "E_DIFFUSION"


@dataclass(frozen=True)
class DiffusionSchedule:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02

    @cached_property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)

    @cached_property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @cached_property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t < 0 else float(self.alpha_bars[t])


@dataclass
class NoisySample:
    """A batch of noised training images. ``tokens`` conditions the denoiser."""
    z_t: np.ndarray
    t: np.ndarray
    eps: np.ndarray
    tokens: np.ndarray

    def __len__(self) -> int:
        return len(self.t)


def noise_image(z0: np.ndarray, eps: np.ndarray, alpha_bar) -> np.ndarray:
    """sqrt(abar) * z0 + sqrt(1 - abar) * eps, broadcasting abar per batch item."""
    ab = np.asarray(alpha_bar, dtype=np.float64).reshape(-1, *([1] * (np.ndim(z0) - 1))) \
        if np.ndim(alpha_bar) else np.float64(alpha_bar)
    out = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    return out.astype(np.float32)


def q_sample(z0: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule,
             tokens: np.ndarray | None = None) -> NoisySample:
    z0, eps = np.asarray(z0), np.asarray(eps)
    if z0.shape != eps.shape:
        raise tc.ShapeError(f"noise shape {eps.shape} != image shape {z0.shape}")
    t = np.asarray(t, dtype=np.int64)
    if (t < 0).any() or (t >= schedule.T).any():
        raise DiffusionError(f"timestep out of range [0, {schedule.T})")
    z_t = noise_image(z0, eps, schedule.alpha_bars[t])
    if tokens is None:
        tokens = np.zeros((*np.shape(t), MAX_LEN), dtype=np.int64)
    return NoisySample(z_t, t, eps.astype(np.float32), tokens)


def make_training_batch(images: np.ndarray, tokens: np.ndarray, rng: np.random.Generator,
                        schedule: DiffusionSchedule, batch: int = 4,
                        dropout: float = CFG_DROPOUT) -> NoisySample:
    """Draw ``batch`` items with replacement, each with its own t and noise.

    With probability ``dropout`` an item's prompt becomes all-PAD so the model
    also learns the unconditional prediction used by guidance.
    """
    n = len(images)
    if n == 0:
        raise DataError("cannot build a training batch from an empty dataset")
    idx = rng.integers(0, n, size=batch)
    t = rng.integers(0, schedule.T, size=batch)
    eps = rng.standard_normal((batch, *images.shape[1:]))
    drop = rng.random(batch) < dropout
    toks = np.where(drop[:, None], 0, tokens[idx])
    return q_sample(images[idx], t, eps, schedule, toks)


def sample(params: ParamStore, cfg: DenoiserConfig, schedule: DiffusionSchedule,
           tokens: np.ndarray, seeds: Sequence[int], active=("object", "physics"),
           n_steps: int = 50, guidance: float = 7.5, return_attention: bool = False):
    """Guided DDPM ancestral sampling over an evenly strided timestep subset.

    One image per seed; each image draws its noise from its own generator so
    results do not depend on how seeds are batched. Returns (n, H, W) in
    [-1, 1], plus the step-averaged conditional cross-attention maps when
    ``return_attention`` is set.
    """
    if n_steps > schedule.T or n_steps < 1:
        raise DiffusionError(f"n_steps must be in [1, {schedule.T}], got {n_steps}")
    if not np.any(params["den.out.weight"].data) and not np.any(params["den.out.bias"].data):
        log.warning("sampling from an untrained denoiser: output head is all zeros")
    seeds = list(seeds)
    n = len(seeds)
    rngs = [np.random.default_rng(s) for s in seeds]
    x = np.stack([r.standard_normal((cfg.size, cfg.size)) for r in rngs]).astype(np.float32)

    tokens = np.broadcast_to(np.asarray(tokens).reshape(-1, MAX_LEN), (n, MAX_LEN))
    uncond = np.zeros_like(tokens)
    with tc.no_grad():
        c = encode(np.concatenate([tokens, uncond]), params)
    mask = pad_mask(np.concatenate([tokens, uncond]))

    steps = np.linspace(0, schedule.T - 1, n_steps).round().astype(np.int64)[::-1]
    attn_sum = None
    for i, t in enumerate(steps):
        t_prev = int(steps[i + 1]) if i + 1 < len(steps) else -1
        ab_t = float(schedule.alpha_bars[t])
        ab_prev = schedule.alpha_bar_prev(t_prev)
        with tc.no_grad():
            out = predict_noise(np.concatenate([x, x]), np.full(2 * n, t), c, params, cfg,
                                active, mask, return_attention=return_attention)
        if return_attention:
            out, maps = out
            cond_maps = [m[:n].astype(np.float64) for m in maps]
            attn_sum = cond_maps if attn_sum is None else [a + m for a, m in zip(attn_sum, cond_maps)]
        eps_c, eps_u = out.data[:n].astype(np.float64), out.data[n:].astype(np.float64)
        eps_hat = guided_eps(eps_c, eps_u, guidance)
        beta = 1.0 - ab_t / ab_prev
        mean = (x - beta / np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(1.0 - beta)
        if t_prev >= 0:
            var = beta * (1.0 - ab_prev) / (1.0 - ab_t)
            z = np.stack([r.standard_normal((cfg.size, cfg.size)) for r in rngs])
            x = mean + np.sqrt(var) * z
        else:
            x = mean
        x = x.astype(np.float32)
    x = np.clip(x, -1.0, 1.0)
    if return_attention:
        return x, [a / len(steps) for a in attn_sum]
    return x


def guided_eps(eps_cond: np.ndarray, eps_uncond: np.ndarray, guidance: float) -> np.ndarray:
    return eps_uncond + guidance * (eps_cond - eps_uncond)


def to_uint8(images: np.ndarray) -> np.ndarray:
    """Affine map [-1, 1] -> [0, 255] with rounding."""
    return np.round((np.clip(images, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)
