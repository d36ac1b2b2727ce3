"""Denoising MSE, isometric, decouple, and the combined objective."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .denoiser import DenoiserConfig, predict_noise
from .diffusion import NoisySample
from .errors import PhyCustomError, TrainingError
from .tensorcore import ParamStore, Tensor
from .textencoder import embedding_distance, encode, pad_mask

DECOUPLE_FORMS = ("cos", "cos_sq", "cos_abs")


class LossError(PhyCustomError):
    code = "E_LOSS"


@dataclass(frozen=True)
class LossWeights:
    lambda_iso: float = 1.0
    lambda_dec: float = 1.0
    decouple_form: str = "cos_sq"

    def __post_init__(self):
        if self.lambda_iso < 0 or self.lambda_dec < 0:
            raise LossError("loss weights must be non-negative")
        if self.decouple_form not in DECOUPLE_FORMS:
            raise LossError(f"decouple_form must be one of {DECOUPLE_FORMS}")


@dataclass
class LossReport:
    L_o: float
    L_p: float
    L_isometric: float
    L_decouple: float
    cos_raw: float
    total: float
    decouple_skipped: bool = False

    def row(self, step: int) -> list:
        return [step, self.total, self.L_o, self.L_p, self.L_isometric, self.L_decouple, self.cos_raw]

    def as_dict(self) -> dict:
        return asdict(self)


def loss_mse(batch: NoisySample, params: ParamStore, cfg: DenoiserConfig, active=()) -> Tensor:
    """Mean over batch and pixels of (eps - prediction)^2.

    Text embeddings are computed without recording, so the denoising loss
    never reaches the text encoder.
    """
    if len(batch) == 0:
        raise LossError("empty batch")
    with tc.no_grad():
        c = encode(batch.tokens, params)
    pred = predict_noise(batch.z_t, batch.t, c, params, cfg, active, pad_mask(batch.tokens))
    return mse_against(pred, batch.eps)


def mse_against(pred: Tensor, target: np.ndarray) -> Tensor:
    return tc.mean(tc.square(pred - tc.tensor(target, dtype=pred.dtype)))


def distance_variance(distances: Sequence[Tensor]) -> Tensor:
    """Population variance of scalar tensors: (1/d) sum (D_i - mean D)^2."""
    d = len(distances)
    if d == 0:
        raise LossError("isometric loss needs at least one prompt")
    stacked = tc.concat([tc.reshape(x, (1,)) for x in distances])
    centered = stacked - tc.mean(stacked)
    return tc.mean(tc.square(centered))


def loss_isometric(anchor: np.ndarray, prompts: np.ndarray, params: ParamStore) -> Tensor:
    """Variance of anchor-to-prompt embedding distances; grads reach both sides."""
    prompts = np.atleast_2d(prompts)
    if len(prompts) == 0:
        raise LossError("isometric loss needs at least one prompt")
    emb = encode(np.concatenate([np.atleast_2d(anchor), prompts]), params)
    a = emb[0]
    return distance_variance([embedding_distance(a, emb[i + 1]) for i in range(len(prompts))])


def decouple_value(cos: float, form: str) -> float:
    if form == "cos":
        return cos
    if form == "cos_sq":
        return cos * cos
    if form == "cos_abs":
        return abs(cos)
    raise LossError(f"unknown decouple form {form!r}")


def loss_decouple(g_o: np.ndarray, g_p: np.ndarray, form: str = "cos_sq") -> tuple[float, float]:
    """Returns ``(value, cos_raw)``; raises DegenerateInputError on near-zero norms."""
    cos = tc.cosine_similarity(g_o, g_p)
    return decouple_value(cos, form), cos


def decouple_direction(g_o: np.ndarray, g_p: np.ndarray, form: str) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form derivative of the decouple value w.r.t. each gradient vector."""
    u = np.asarray(g_o, dtype=np.float64)
    v = np.asarray(g_p, dtype=np.float64)
    cos = tc.cosine_similarity(u, v)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    d_u = v / (nu * nv) - cos * u / nu ** 2
    d_v = u / (nu * nv) - cos * v / nv ** 2
    if form == "cos_sq":
        factor = 2.0 * cos
    elif form == "cos_abs":
        factor = float(np.sign(cos))
    elif form == "cos":
        factor = 1.0
    else:
        raise LossError(f"unknown decouple form {form!r}")
    return factor * d_u, factor * d_v


def total_objective(L_o: float, L_p: float, L_iso: float, L_dec: float, weights: LossWeights) -> float:
    for name, value in (("L_o", L_o), ("L_p", L_p), ("L_isometric", L_iso), ("L_decouple", L_dec)):
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss term {name} = {value}")
    return L_o + L_p + weights.lambda_iso * L_iso + weights.lambda_dec * L_dec
