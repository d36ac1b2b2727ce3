"""Base-model pretraining and the single-stage three-loss customization loop."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint
from . import tensorcore as tc
from .dataset import ConceptDataset, Manifest, build_concept_dataset, tokenize_all
from .denoiser import DenoiserConfig, predict_noise
from .denoiser import init_params as init_denoiser
from .diffusion import DiffusionSchedule, make_training_batch
from .errors import ConfigError, TrainingError
from .lora import BRANCHES, attach, branch_params, default_hosts
from .losses import (LossReport, LossWeights, decouple_direction, loss_decouple,
                     loss_isometric, loss_mse, mse_against, total_objective)
from .tensorcore import ParamStore
from .textencoder import Vocabulary, encode, pad_mask
from .textencoder import init_params as init_text

log = logging.getLogger(__name__)

CSV_HEADER = ["step", "L_total", "L_o", "L_p", "L_iso", "L_dec", "cos_raw"]


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 1e-4
    batch: int = 4
    rank: int = 8
    lambda_iso: float = 1.0
    lambda_dec: float = 1.0
    decouple_form: str = "cos_sq"
    seed: int = 0
    timesteps: int = 200
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    cfg_dropout: float = 0.1
    n_object: int = 4
    d: int = 3
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.batch < 1 or self.rank < 1:
            raise ConfigError("batch and rank must be >= 1")
        LossWeights(self.lambda_iso, self.lambda_dec, self.decouple_form)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_iso, self.lambda_dec, self.decouple_form)

    @property
    def schedule(self) -> DiffusionSchedule:
        return DiffusionSchedule(self.timesteps)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class PretrainConfig:
    """Full-model training of the frozen base that customization starts from."""
    steps: int = 4000
    lr: float = 3e-3
    batch: int = 64
    seed: int = 0
    timesteps: int = 200
    weight_decay: float = 0.0
    cfg_dropout: float = 0.1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class AdamW:
    """Decoupled weight decay Adam over named numpy arrays (float32 state)."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.eps, self.weight_decay = eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ParamStore, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        f32 = np.float32
        b1, b2 = f32(self.beta1), f32(self.beta2)
        bc1 = f32(1.0 - self.beta1 ** self.t)
        bc2_sqrt = f32(np.sqrt(1.0 - self.beta2 ** self.t))
        lr = f32(self.lr)
        decay = f32(1.0 - self.lr * self.weight_decay)
        for name in sorted(grads):
            p = params[name]
            g = np.asarray(grads[name], dtype=np.float32)
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (f32(1) - b1) * g
            v *= b2
            v += (f32(1) - b2) * g * g
            denom = np.sqrt(v) / bc2_sqrt + f32(self.eps)
            p.data = (p.data * decay - (lr / bc1) * m / denom).astype(np.float32)


@dataclass
class TrainState:
    params: ParamStore
    config: TrainConfig
    optimizer: AdamW
    step: int = 0
    target: str = ""
    physics: str = ""
    den_cfg: DenoiserConfig = field(default_factory=DenoiserConfig)

    @property
    def trainable(self) -> list[str]:
        return [n for n in self.params if n.startswith(("lora.", "text."))]


def _mark_trainable(params: ParamStore, prefixes: tuple[str, ...]) -> None:
    for name in params:
        params[name].requires_grad = name.startswith(prefixes)


# ---------------------------------------------------------------------------
# base model
# ---------------------------------------------------------------------------

def init_base(seed: int, den_cfg: DenoiserConfig | None = None,
              vocab: Vocabulary | None = None) -> ParamStore:
    den_cfg = den_cfg or DenoiserConfig()
    vocab = vocab or Vocabulary.default()
    rng = np.random.default_rng([seed, 7])
    params = init_denoiser(den_cfg, rng)
    for name, t in init_text(len(vocab), rng).items():
        params[name] = t
    return params


def pretrain_base(images: np.ndarray, prompts: list[str], config: PretrainConfig,
                  vocab: Vocabulary | None = None, den_cfg: DenoiserConfig | None = None,
                  on_step: Callable[[int, float], None] | None = None) -> ParamStore:
    """Train every denoiser and text-encoder weight on (image, prompt) pairs."""
    vocab = vocab or Vocabulary.default()
    den_cfg = den_cfg or DenoiserConfig(timesteps=config.timesteps)
    schedule = DiffusionSchedule(config.timesteps)
    params = init_base(config.seed, den_cfg, vocab)
    _mark_trainable(params, ("den.", "text."))
    tokens = tokenize_all(prompts, vocab)
    opt = AdamW(config.lr, weight_decay=config.weight_decay)
    names = list(params)
    for step in range(1, config.steps + 1):
        rng = np.random.default_rng([config.seed, step])
        batch = make_training_batch(images, tokens, rng, schedule, config.batch, config.cfg_dropout)
        # the base model learns its conditioning jointly, unlike customization
        c = encode(batch.tokens, params)
        pred = predict_noise(batch.z_t, batch.t, c, params, den_cfg, (), pad_mask(batch.tokens))
        loss = mse_against(pred, batch.eps)
        grads = tc.backward(loss, params.subset(names))
        opt.step(params, {n: g.data for n, g in grads.items()})
        if on_step is not None:
            on_step(step, loss.item())
    _mark_trainable(params, ())
    return params


def base_to_tensors(params: ParamStore, config: PretrainConfig) -> dict[str, np.ndarray]:
    out = {n: params[n].data for n in params}
    out["meta.kind"] = checkpoint.text_to_tensor("base")
    out["meta.config"] = checkpoint.text_to_tensor(config.to_json())
    return out


def load_base(path) -> ParamStore:
    tensors = checkpoint.load(path)
    return ParamStore({n: tc.Tensor(a) for n, a in tensors.items()
                       if n.startswith(("den.", "text."))})


# ---------------------------------------------------------------------------
# customization
# ---------------------------------------------------------------------------

def init_state(base: ParamStore, config: TrainConfig, target: str, physics: str,
               den_cfg: DenoiserConfig | None = None) -> TrainState:
    den_cfg = den_cfg or DenoiserConfig(timesteps=config.timesteps)
    params = ParamStore({n: tc.Tensor(base[n].data.copy()) for n in base
                         if n.startswith(("den.", "text."))})
    hosts = default_hosts(params)
    for branch in BRANCHES:
        # both branches start from the same A draw: any decorrelation is learned
        attach(params, hosts, config.rank, branch, seed=config.seed)
    _mark_trainable(params, ("lora.", "text."))
    opt = AdamW(config.lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    return TrainState(params, config, opt, 0, target, physics, den_cfg)


@dataclass
class ConceptTensors:
    object_images: np.ndarray
    object_tokens: np.ndarray
    physics_images: np.ndarray
    physics_tokens: np.ndarray
    anchor_tokens: np.ndarray

    @classmethod
    def from_dataset(cls, ds: ConceptDataset, vocab: Vocabulary | None = None) -> "ConceptTensors":
        vocab = vocab or Vocabulary.default()
        o, p, a = ds.tokens(vocab)
        return cls(ds.object_images, o, ds.physics_images, p, a)


def _guard(term: str, fn):
    try:
        return fn()
    except tc.NonFiniteError as exc:
        raise TrainingError(f"non-finite values while computing {term}: {exc}") from None


def compute_step_gradients(state: TrainState, data: ConceptTensors):
    """Losses and the assembled per-parameter update direction for one step.

    Returns ``(report, grads)``; ``grads`` holds float32 arrays for every
    trainable parameter.
    """
    cfg, params = state.config, state.params
    w = cfg.weights
    schedule = cfg.schedule
    rng = np.random.default_rng([cfg.seed, state.step + 1])
    obj_batch = make_training_batch(data.object_images, data.object_tokens, rng, schedule,
                                    cfg.batch, cfg.cfg_dropout)
    phys_batch = make_training_batch(data.physics_images, data.physics_tokens, rng, schedule,
                                     cfg.batch, cfg.cfg_dropout)
    need_graph = w.lambda_dec > 0
    obj_store = branch_params(params, "object")
    phys_store = branch_params(params, "physics")

    L_o = _guard("L_o", lambda: loss_mse(obj_batch, params, state.den_cfg, {"object"}))
    L_p = _guard("L_p", lambda: loss_mse(phys_batch, params, state.den_cfg, {"physics"}))
    g_o = _guard("grad L_o", lambda: tc.backward(L_o, obj_store, create_graph=need_graph))
    g_p = _guard("grad L_p", lambda: tc.backward(L_p, phys_store, create_graph=need_graph))
    flat_o = tc.flatten_grads(g_o, obj_store)
    flat_p = tc.flatten_grads(g_p, phys_store)

    grads: dict[str, np.ndarray] = {n: g_o[n].data for n in obj_store}
    grads.update({n: g_p[n].data for n in phys_store})

    skipped = False
    try:
        L_dec, cos = loss_decouple(flat_o, flat_p, w.decouple_form)
    except tc.DegenerateInputError as exc:
        log.warning("step %d: decouple term skipped (%s)", state.step + 1, exc)
        L_dec, cos, skipped = 0.0, 0.0, True

    if need_graph and not skipped:
        dec = _guard("decouple HVP", lambda: decouple_gradient(g_o, g_p, obj_store, phys_store,
                                                               w.decouple_form))
        lam = np.float32(w.lambda_dec)
        for n, h in dec.items():
            grads[n] = grads[n] + lam * h

    text_store = params.with_prefix("text.")
    if w.lambda_iso > 0:
        L_iso = _guard("L_isometric", lambda: loss_isometric(data.anchor_tokens, data.physics_tokens, params))
        g_iso = _guard("grad L_isometric", lambda: tc.backward(L_iso, text_store))
        lam = np.float32(w.lambda_iso)
        grads.update({n: lam * g_iso[n].data for n in text_store})
    else:
        with tc.no_grad():
            L_iso = _guard("L_isometric", lambda: loss_isometric(data.anchor_tokens, data.physics_tokens, params))
        grads.update({n: np.zeros_like(text_store[n].data) for n in text_store})

    vals = (L_o.item(), L_p.item(), L_iso.item(), L_dec)
    total = total_objective(*vals, w)
    report = LossReport(*vals, cos_raw=cos, total=total, decouple_skipped=skipped)
    return report, grads


def decouple_gradient(g_o: dict[str, tc.Tensor], g_p: dict[str, tc.Tensor], obj_store: ParamStore,
                      phys_store: ParamStore, form: str) -> dict[str, np.ndarray]:
    """Gradient of the decouple value w.r.t. both branches.

    ``g_o`` and ``g_p`` must be recorded with ``create_graph=True``. The
    closed-form derivative of the form w.r.t. each gradient vector is pushed
    back through that branch's gradient graph, one HVP per branch.
    """
    flat_o, flat_p = tc.flatten_grads(g_o, obj_store), tc.flatten_grads(g_p, phys_store)
    d_o, d_p = decouple_direction(flat_o, flat_p, form)
    return {**_grad_dot(g_o, obj_store, d_o), **_grad_dot(g_p, phys_store, d_p)}


def _grad_dot(grads: dict[str, tc.Tensor], store: ParamStore, direction: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagate <grads, direction> through the recorded gradient graph (one HVP)."""
    dot = None
    offset = 0
    for n in sorted(store):
        p = store[n]
        v = direction[offset:offset + p.size].reshape(p.shape).astype(p.dtype)
        offset += p.size
        g = grads[n]
        if not g.requires_grad:
            continue
        term = tc.sum(tc.mul(g, tc.Tensor(v)))
        dot = term if dot is None else tc.add(dot, term)
    if dot is None:
        return {n: np.zeros_like(store[n].data) for n in store}
    out = tc.backward(dot, store)
    return {n: out[n].data for n in store}


def train_step(state: TrainState, data: ConceptTensors) -> LossReport:
    report, grads = compute_step_gradients(state, data)
    state.optimizer.step(state.params, grads)
    state.step += 1
    return report


def state_to_tensors(state: TrainState) -> dict[str, np.ndarray]:
    out = {n: state.params[n].data for n in state.params}
    opt = state.optimizer
    for n in opt.m:
        out[f"adam.m.{n}"] = opt.m[n]
        out[f"adam.v.{n}"] = opt.v[n]
    out["meta.step"] = np.array(state.step, dtype=np.float32)
    out["meta.adam_t"] = np.array(opt.t, dtype=np.float32)
    out["meta.kind"] = checkpoint.text_to_tensor("customized")
    out["meta.config"] = checkpoint.text_to_tensor(state.config.to_json())
    out["meta.concept"] = checkpoint.text_to_tensor(json.dumps([state.target, state.physics]))
    return out


def state_from_tensors(tensors: dict[str, np.ndarray]) -> TrainState:
    try:
        config = TrainConfig.from_dict(json.loads(checkpoint.tensor_to_text(tensors["meta.config"])))
        target, physics = json.loads(checkpoint.tensor_to_text(tensors["meta.concept"]))
        step = int(tensors["meta.step"])
        adam_t = int(tensors["meta.adam_t"])
    except KeyError as exc:
        raise TrainingError(f"checkpoint lacks training metadata {exc}") from None
    params = ParamStore({n: tc.Tensor(a.copy()) for n, a in tensors.items()
                         if n.startswith(("den.", "text.", "lora."))})
    _mark_trainable(params, ("lora.", "text."))
    opt = AdamW(config.lr, config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    opt.t = adam_t
    for n, a in tensors.items():
        if n.startswith("adam.m."):
            opt.m[n[len("adam.m."):]] = a.copy()
        elif n.startswith("adam.v."):
            opt.v[n[len("adam.v."):]] = a.copy()
    return TrainState(params, config, opt, step, target, physics,
                      DenoiserConfig(timesteps=config.timesteps))


def save_checkpoint(state: TrainState, path) -> None:
    checkpoint.save(path, state_to_tensors(state))


def load_checkpoint(path) -> TrainState:
    return state_from_tensors(checkpoint.load(path))


def _fmt(x) -> str:
    return repr(float(x)) if not isinstance(x, int) else str(x)


def run_training(state: TrainState, data: ConceptTensors, ckpt_path=None, csv_path=None,
                 on_step: Callable[[int, LossReport], None] | None = None) -> list[LossReport]:
    """Train until ``state.config.steps``, appending one CSV row per step.

    A fresh state (step 0) starts a new CSV with a header; a resumed state
    appends. The checkpoint is rewritten every ``checkpoint_every`` steps and
    at the end.
    """
    cfg = state.config
    reports = []
    fh = None
    if csv_path is not None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        fresh = state.step == 0
        fh = open(csv_path, "w" if fresh else "a", encoding="utf-8", newline="")
    try:
        writer = csv.writer(fh, lineterminator="\n") if fh else None
        if writer and state.step == 0:
            writer.writerow(CSV_HEADER)
        while state.step < cfg.steps:
            report = train_step(state, data)
            reports.append(report)
            if writer:
                writer.writerow([_fmt(x) for x in report.row(state.step)])
            if on_step:
                on_step(state.step, report)
            if ckpt_path is not None and state.step % cfg.checkpoint_every == 0:
                fh and fh.flush()
                save_checkpoint(state, ckpt_path)
        if ckpt_path is not None:
            save_checkpoint(state, ckpt_path)
    finally:
        if fh:
            fh.close()
    return reports


def with_weights(config: TrainConfig, **overrides) -> TrainConfig:
    return replace(config, **overrides)


def concept_for(manifest: Manifest, target: str, physics: str, config: TrainConfig) -> ConceptDataset:
    """Concept dataset picked from the corpus; fixed by the corpus seed, not the training seed."""
    rng = np.random.default_rng([manifest.seed, 99])
    return build_concept_dataset(target, physics, rng, manifest, config.n_object, config.d)
