"""Patch-transformer noise predictor with text cross-attention."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import tensorcore as tc
from .errors import PhyCustomError
from .lora import effective_weight, set_active
from .tensorcore import ParamStore, Tensor
from .textencoder import D_TEXT, MAX_LEN


class DenoiserError(PhyCustomError):
    code = "E_DENOISER"


@dataclass(frozen=True)
class DenoiserConfig:
    size: int = 16
    patch_size: int = 4
    d_model: int = 64
    n_blocks: int = 2
    mlp_hidden: int = 128
    heads: int = 1
    activation: str = "tanh"
    timesteps: int = 200

    def __post_init__(self):
        if self.size % self.patch_size:
            raise DenoiserError(f"image size {self.size} not divisible by patch {self.patch_size}")
        if self.heads != 1:
            raise DenoiserError("only single-head attention is supported")
        if self.activation not in ("tanh", "silu"):
            raise DenoiserError(f"activation must be tanh or silu, not {self.activation!r}")

    @property
    def grid(self) -> int:
        return self.size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size


def init_params(cfg: DenoiserConfig, rng: np.random.Generator) -> ParamStore:
    d, hid = cfg.d_model, cfg.mlp_hidden

    def w(*shape, std=None):
        std = shape[0] ** -0.5 if std is None else std
        return tc.tensor(rng.normal(0.0, std, size=shape))

    def zeros(*shape):
        return tc.tensor(np.zeros(shape))

    p = ParamStore({
        "den.patch_in.weight": w(cfg.patch_dim, d),
        "den.patch_in.bias": zeros(d),
        "den.pos_emb": w(cfg.n_tokens, d, std=0.1),
        "den.time.fc1.weight": w(d, d),
        "den.time.fc1.bias": zeros(d),
        "den.time.fc2.weight": w(d, d),
        "den.time.fc2.bias": zeros(d),
        # zero head: a fresh model predicts zero noise
        "den.out.weight": zeros(d, cfg.patch_dim),
        "den.out.bias": zeros(cfg.patch_dim),
    })
    for i in range(cfg.n_blocks):
        pre = f"den.block{i}"
        for proj in ("q", "k", "v", "o"):
            p[f"{pre}.self.{proj}"] = w(d, d)
        p[f"{pre}.cross.q"] = w(d, d)
        p[f"{pre}.cross.k"] = w(D_TEXT, d)
        p[f"{pre}.cross.v"] = w(D_TEXT, d)
        p[f"{pre}.cross.o"] = w(d, d)
        p[f"{pre}.mlp.fc1.weight"] = w(d, hid)
        p[f"{pre}.mlp.fc1.bias"] = zeros(hid)
        p[f"{pre}.mlp.fc2.weight"] = w(hid, d)
        p[f"{pre}.mlp.fc2.bias"] = zeros(d)
    return p


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def patchify(z: Tensor, cfg: DenoiserConfig) -> Tensor:
    b, g, p = z.shape[0], cfg.grid, cfg.patch_size
    x = tc.reshape(z, (b, g, p, g, p))
    x = tc.transpose(x, (0, 1, 3, 2, 4))
    return tc.reshape(x, (b, g * g, p * p))


def unpatchify(x: Tensor, cfg: DenoiserConfig) -> Tensor:
    b, g, p = x.shape[0], cfg.grid, cfg.patch_size
    x = tc.reshape(x, (b, g, g, p, p))
    x = tc.transpose(x, (0, 1, 3, 2, 4))
    return tc.reshape(x, (b, g * p, g * p))


def _act(cfg: DenoiserConfig):
    return tc.tanh if cfg.activation == "tanh" else tc.silu


def _attend(q: Tensor, k: Tensor, v: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    scores = tc.scale(q @ tc.transpose(k, (0, 2, 1)), q.shape[-1] ** -0.5)
    probs = tc.softmax(scores, mask)
    return probs @ v, probs


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return tc.tensor(np.asarray(x), dtype=dtype)


def predict_noise(z_t, t, c, params: ParamStore, cfg: DenoiserConfig,
                  active: Iterable[str] = (), mask: np.ndarray | None = None,
                  return_attention: bool = False):
    """Predict the injected noise for a batch.

    ``z_t`` is (B, H, W) or (H, W); ``c`` the text embeddings (B, L, D_TEXT);
    ``mask`` (B, L) marks attendable text positions (see ``textencoder.pad_mask``).
    With ``return_attention`` the per-block cross-attention weights
    (B, tokens, L) come back as numpy arrays alongside the prediction.
    """
    active = set_active(active, params)
    dtype = params["den.out.weight"].dtype
    z = _as_tensor(z_t, dtype)
    squeeze = z.ndim == 2
    if squeeze:
        z = tc.reshape(z, (1, *z.shape))
    if z.shape[1:] != (cfg.size, cfg.size):
        raise tc.ShapeError(f"expected {cfg.size}x{cfg.size} images, got {z.shape[1:]}")
    b = z.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64).reshape(-1), (b,))
    if (t < 0).any() or (t >= cfg.timesteps).any():
        raise DenoiserError(f"timestep out of range [0, {cfg.timesteps})")
    c = _as_tensor(c, dtype)
    if c.ndim == 2:
        c = tc.reshape(c, (1, *c.shape))
    if c.shape[0] != b:
        c = tc.broadcast_to(c, (b, *c.shape[1:]))
    if c.shape[1:] != (MAX_LEN, D_TEXT):
        raise tc.ShapeError(f"text condition must be ({MAX_LEN}, {D_TEXT}), got {c.shape[1:]}")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool).reshape(-1, 1, MAX_LEN), (b, 1, MAX_LEN))

    act = _act(cfg)
    P = params

    def w(name):
        return effective_weight(P, name, active)

    temb = tc.tensor(timestep_embedding(t, cfg.d_model), dtype=dtype)
    temb = act(temb @ P["den.time.fc1.weight"] + P["den.time.fc1.bias"])
    temb = temb @ P["den.time.fc2.weight"] + P["den.time.fc2.bias"]

    h = patchify(z, cfg) @ P["den.patch_in.weight"] + P["den.patch_in.bias"]
    h = h + P["den.pos_emb"] + tc.reshape(temb, (b, 1, cfg.d_model))

    maps = []
    for i in range(cfg.n_blocks):
        pre = f"den.block{i}"
        x = tc.layer_norm(h)
        out, _ = _attend(x @ P[f"{pre}.self.q"], x @ P[f"{pre}.self.k"], x @ P[f"{pre}.self.v"])
        h = h + out @ P[f"{pre}.self.o"]

        x = tc.layer_norm(h)
        out, probs = _attend(x @ w(f"{pre}.cross.q"), c @ w(f"{pre}.cross.k"),
                             c @ w(f"{pre}.cross.v"), mask)
        h = h + out @ w(f"{pre}.cross.o")
        if return_attention:
            maps.append(probs.data.copy())

        x = tc.layer_norm(h)
        hidden = act(x @ w(f"{pre}.mlp.fc1.weight") + P[f"{pre}.mlp.fc1.bias"])
        h = h + hidden @ w(f"{pre}.mlp.fc2.weight") + P[f"{pre}.mlp.fc2.bias"]

    y = tc.layer_norm(h) @ P["den.out.weight"] + P["den.out.bias"]
    y = unpatchify(y, cfg)
    if squeeze:
        y = tc.reshape(y, y.shape[1:])
    return (y, maps) if return_attention else y


def export_attention_maps(z_t, t, c, params: ParamStore, cfg: DenoiserConfig,
                          active: Iterable[str] = (), mask=None) -> list[np.ndarray]:
    """Cross-attention weights per block, each (B, image tokens, text tokens)."""
    with tc.no_grad():
        _, maps = predict_noise(z_t, t, c, params, cfg, active, mask, return_attention=True)
    return maps


def token_grid(maps: np.ndarray, position: int, cfg: DenoiserConfig) -> np.ndarray:
    """Attention column for one text position reshaped to the patch grid."""
    return maps[..., position].reshape(*maps.shape[:-2], cfg.grid, cfg.grid)


def overlap_score(map_a: np.ndarray, map_b: np.ndarray) -> float:
    """Sum of elementwise minima of the two maps after normalizing each to unit mass."""
    a = np.asarray(map_a, dtype=np.float64).ravel()
    b = np.asarray(map_b, dtype=np.float64).ravel()
    sa, sb = a.sum(), b.sum()
    if sa <= 0 or sb <= 0:
        raise tc.DegenerateInputError("attention map has zero mass")
    return float(np.minimum(a / sa, b / sb).sum())
