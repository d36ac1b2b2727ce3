"""Probe classifier, proxy scores, and the benchmark / ablation / sweep harnesses.

The probe is a small two-head MLP trained on the procedural grid corpus. Its
physics-head probability of the target concept is Proxy-V; multiplying by the
object-head probability of the target object gives Proxy-V-O.
"""

from __future__ import annotations

import csv
import json
import logging
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.stats import binomtest

from . import checkpoint
from . import tensorcore as tc
from .dataset import (Manifest, combined_prompt, default_workers, foreground_count,
                      grid_arrays)
from .diffusion import from_uint8, sample, to_uint8
from .errors import DataError, ProbeError
from .tensorcore import ParamStore
from .textencoder import OBJECTS, PHYSICS, Vocabulary, tokenize
from .trainer import (AdamW, ConceptTensors, TrainConfig, TrainState, concept_for, init_state,
                      load_checkpoint, run_training, with_weights)

log = logging.getLogger(__name__)

NONE = "none"
OBJECT_CLASSES = (*OBJECTS, NONE)
PHYSICS_CLASSES = (*PHYSICS, NONE)
ACCURACY_FLOOR = 0.95
UNCERTAIN_BELOW = 0.5


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 256
    epochs: int = 40
    batch: int = 128
    lr: float = 3e-3
    seed: int = 0
    holdout: float = 0.2
    junk_fraction: float = 1.0  # junk images per grid cell, relative to cell size


@dataclass
class Probe:
    params: ParamStore
    dataset_hash: str
    accuracy: dict = field(default_factory=dict)

    def predict(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Class probabilities ``(object (n, 9), physics (n, 7))`` in float64."""
        x = np.asarray(images, dtype=np.float32).reshape(len(images), -1)
        with tc.no_grad():
            lo, lp = probe_logits(self.params, tc.tensor(x))
            po, pp = tc.softmax(lo), tc.softmax(lp)
        return po.data.astype(np.float64), pp.data.astype(np.float64)

    def flags(self, images: np.ndarray) -> np.ndarray:
        """True where an image is blank or the physics head is unsure."""
        _, pp = self.predict(images)
        blank = np.array([foreground_count(im) == 0 for im in images])
        return blank | (pp.max(axis=1) < UNCERTAIN_BELOW)


def init_probe(rng: np.random.Generator, n_in: int = 256, hidden: int = 256) -> ParamStore:
    def w(*shape):
        return tc.tensor(rng.standard_normal(shape) / np.sqrt(shape[0]))
    return ParamStore({
        "probe.fc.weight": w(n_in, hidden),
        "probe.fc.bias": tc.tensor(np.zeros(hidden)),
        "probe.object.weight": w(hidden, len(OBJECT_CLASSES)),
        "probe.object.bias": tc.tensor(np.zeros(len(OBJECT_CLASSES))),
        "probe.physics.weight": w(hidden, len(PHYSICS_CLASSES)),
        "probe.physics.bias": tc.tensor(np.zeros(len(PHYSICS_CLASSES))),
    })


def probe_logits(params: ParamStore, x: tc.Tensor) -> tuple[tc.Tensor, tc.Tensor]:
    h = tc.tanh(x @ params["probe.fc.weight"] + params["probe.fc.bias"])
    return (h @ params["probe.object.weight"] + params["probe.object.bias"],
            h @ params["probe.physics.weight"] + params["probe.physics.bias"])


def cross_entropy(logits: tc.Tensor, labels: np.ndarray) -> tc.Tensor:
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    p = tc.softmax(logits)
    logp = tc.log(p + tc.tensor(1e-7, dtype=p.dtype))
    picked = tc.sum(tc.mul(logp, tc.tensor(onehot)), axis=1)
    return tc.neg(tc.mean(picked))


def junk_images(n: int, rng: np.random.Generator, size: int = 16) -> np.ndarray:
    """Blobs and noise fields that are neither a known shape nor a transform."""
    out = []
    for i in range(n):
        noise = rng.standard_normal((size, size))
        if i % 2 == 0:
            field_ = gaussian_filter(noise, sigma=rng.uniform(0.8, 2.0))
            thresh = np.quantile(field_, rng.uniform(0.5, 0.9))
            img = np.where(field_ > thresh, rng.uniform(0.7, 1.0), -1.0)
        else:
            img = np.clip(noise * rng.uniform(0.3, 1.0), -1.0, 1.0)
        out.append(from_uint8(to_uint8(img)))
    return np.stack(out).astype(np.float32)


def _labels(manifest: Manifest) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    images, items = grid_arrays(manifest)
    obj = np.array([OBJECT_CLASSES.index(it.object) for it in items])
    phys = np.array([PHYSICS_CLASSES.index(it.transform) for it in items])
    return images, obj, phys


def check_grid(manifest: Manifest, min_per_cell: int = 20) -> None:
    counts: dict[tuple[str, str], int] = {}
    for it in manifest.items:
        counts[(it.object, it.transform)] = counts.get((it.object, it.transform), 0) + 1
    for o in manifest.objects:
        for tr in (NONE, *PHYSICS):
            if counts.get((o, tr), 0) < min_per_cell:
                raise DataError(f"grid cell ({o}, {tr}) has {counts.get((o, tr), 0)} images, "
                                f"need >= {min_per_cell}")


def train_probe(manifest: Manifest, dataset_hash: str, config: ProbeConfig = ProbeConfig(),
                on_epoch: Callable[[int, float], None] | None = None) -> Probe:
    """Fit the probe on an 80/20 split and refuse to return it below 95% held-out."""
    check_grid(manifest)
    rng = np.random.default_rng([config.seed, 11])
    images, obj, phys = _labels(manifest)
    per_cell = len(images) // (len(manifest.objects) * len(PHYSICS_CLASSES))
    n_junk = int(round(per_cell * config.junk_fraction))
    junk = junk_images(n_junk, rng, manifest.size)
    images = np.concatenate([images, junk])
    obj = np.concatenate([obj, np.full(n_junk, OBJECT_CLASSES.index(NONE))])
    phys = np.concatenate([phys, np.full(n_junk, PHYSICS_CLASSES.index(NONE))])

    order = rng.permutation(len(images))
    n_test = int(round(config.holdout * len(images)))
    test, train = order[:n_test], order[n_test:]
    x = images.reshape(len(images), -1).astype(np.float32)

    params = init_probe(rng, x.shape[1], config.hidden)
    for p in params.values():
        p.requires_grad = True
    opt = AdamW(config.lr, weight_decay=0.0)
    for epoch in range(config.epochs):
        perm = rng.permutation(train)
        total = 0.0
        for start in range(0, len(perm), config.batch):
            idx = perm[start:start + config.batch]
            lo, lp = probe_logits(params, tc.tensor(x[idx]))
            loss = cross_entropy(lo, obj[idx]) + cross_entropy(lp, phys[idx])
            grads = tc.backward(loss, params)
            opt.step(params, {n: g.data for n, g in grads.items()})
            total += loss.item() * len(idx)
        if on_epoch:
            on_epoch(epoch, total / len(train))
    for p in params.values():
        p.requires_grad = False

    probe = Probe(params, dataset_hash)
    po, pp = probe.predict(images[test])
    probe.accuracy = {
        "object": _accuracy(po.argmax(1), obj[test]),
        "physics": _accuracy(pp.argmax(1), phys[test]),
        "n_test": int(n_test),
    }
    for head in ("object", "physics"):
        acc = probe.accuracy[head]["value"]
        if acc < ACCURACY_FLOOR:
            raise ProbeError(f"{head} head held-out accuracy {acc:.4f} < {ACCURACY_FLOOR}")
    return probe


def _accuracy(pred: np.ndarray, truth: np.ndarray) -> dict:
    k, n = int((pred == truth).sum()), len(truth)
    ci = binomtest(k, n).proportion_ci(0.95, method="wilson")
    return {"value": k / n, "ci95": [float(ci.low), float(ci.high)]}


def probe_to_tensors(probe: Probe) -> dict[str, np.ndarray]:
    out = {n: probe.params[n].data for n in probe.params}
    out["meta.kind"] = checkpoint.text_to_tensor("probe")
    out["meta.dataset_hash"] = checkpoint.text_to_tensor(probe.dataset_hash)
    out["meta.accuracy"] = checkpoint.text_to_tensor(json.dumps(probe.accuracy, sort_keys=True))
    return out


def save_probe(probe: Probe, path) -> None:
    checkpoint.save(path, probe_to_tensors(probe))


def load_probe(path) -> Probe:
    tensors = checkpoint.load(path)
    if "meta.kind" not in tensors or checkpoint.tensor_to_text(tensors["meta.kind"]) != "probe":
        raise ProbeError(f"{path} is not a probe file")
    params = ParamStore({n: tc.Tensor(a) for n, a in tensors.items() if n.startswith("probe.")})
    return Probe(params, checkpoint.tensor_to_text(tensors["meta.dataset_hash"]),
                 json.loads(checkpoint.tensor_to_text(tensors["meta.accuracy"])))


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------

def proxy_from_probs(p_obj: np.ndarray, p_phys: np.ndarray, obj: str, physics: str):
    """(Proxy-V, Proxy-V-O) from probability rows; works on one row or a batch."""
    pv = np.asarray(p_phys)[..., PHYSICS_CLASSES.index(physics)]
    po = np.asarray(p_obj)[..., OBJECT_CLASSES.index(obj)]
    return pv, pv * po


def proxy_scores(images: np.ndarray, obj: str, physics: str, probe: Probe,
                 dataset_hash: str | None = None) -> tuple[np.ndarray, np.ndarray]:
    if dataset_hash is not None and dataset_hash != probe.dataset_hash:
        raise ProbeError("probe was trained on a different dataset "
                         f"({probe.dataset_hash[:12]} != {dataset_hash[:12]})")
    if obj not in OBJECT_CLASSES or physics not in PHYSICS_CLASSES:
        raise ProbeError(f"unknown target ({obj}, {physics})")
    images = np.asarray(images)
    single = images.ndim == 2
    po, pp = probe.predict(images[None] if single else images)
    pv, pvo = proxy_from_probs(po, pp, obj, physics)
    return (pv[0], pvo[0]) if single else (pv, pvo)


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------

@dataclass
class ComboResult:
    object: str
    physics: str
    seeds: list[int]
    proxy_v: list[float]
    proxy_vo: list[float]

    @property
    def selected(self) -> int:
        return int(np.argmax(self.proxy_v))

    @property
    def best(self) -> tuple[float, float]:
        i = self.selected
        return self.proxy_v[i], self.proxy_vo[i]


@dataclass
class BenchmarkResult:
    rows: list[ComboResult]

    def aggregate(self) -> tuple[float, float]:
        best = [r.best for r in self.rows]
        return float(np.mean([b[0] for b in best])), float(np.mean([b[1] for b in best]))

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["combination", "seed", "proxy_v", "proxy_vo", "selected"])
            for r in self.rows:
                for i, s in enumerate(r.seeds):
                    w.writerow([f"{r.object}+{r.physics}", s, repr(r.proxy_v[i]),
                                repr(r.proxy_vo[i]), int(i == r.selected)])


def generate(state: TrainState, seeds: Sequence[int], n_steps: int = 50,
             guidance: float = 7.5, vocab: Vocabulary | None = None) -> np.ndarray:
    """Samples for "a photo of [V] [O] <object>" with both branches merged."""
    vocab = vocab or Vocabulary.default()
    tokens = tokenize(combined_prompt(state.target), vocab)
    return sample(state.params, state.den_cfg, state.config.schedule, tokens, seeds,
                  ("object", "physics"), n_steps, guidance)


def score_state(state: TrainState, probe: Probe, seeds: Sequence[int], n_steps: int = 50,
                guidance: float = 7.5) -> tuple[ComboResult, np.ndarray]:
    images = from_uint8(to_uint8(generate(state, seeds, n_steps, guidance)))
    pv, pvo = proxy_scores(images, state.target, state.physics, probe)
    row = ComboResult(state.target, state.physics, list(seeds),
                      [float(x) for x in pv], [float(x) for x in pvo])
    return row, images


def run_benchmark(checkpoints: Mapping[tuple[str, str], str | Path], probe: Probe,
                  seeds: Sequence[int] = range(20), n_steps: int = 50, guidance: float = 7.5,
                  sheet_dir=None, workers: int | None = None) -> BenchmarkResult:
    """Sample every combination, select argmax Proxy-V per combination.

    Each combination is an independent task, so the thread count does not
    change the result.
    """
    seeds = list(seeds)
    for key, path in checkpoints.items():
        if not Path(path).is_file():
            raise DataError(f"missing checkpoint for {key}: {path}")

    def task(item):
        (obj, phys), path = item
        state = load_checkpoint(path)
        if (state.target, state.physics) != (obj, phys):
            raise DataError(f"checkpoint {path} holds {state.target}+{state.physics}, "
                            f"expected {obj}+{phys}")
        return score_state(state, probe, seeds, n_steps, guidance)

    items = sorted(checkpoints.items())
    with ThreadPoolExecutor(max_workers=workers or default_workers()) as pool:
        done = list(pool.map(task, items))
    if sheet_dir is not None:
        from .report import contact_sheet
        for row, images in done:
            contact_sheet(images, Path(sheet_dir) / f"{row.object}+{row.physics}.png",
                          labels=[f"{v:.2f}" for v in row.proxy_v], highlight=row.selected)
    return BenchmarkResult([row for row, _ in done])


def checkpoint_dir_index(ckpt_dir) -> dict[tuple[str, str], Path]:
    """Map (object, physics) to every ``*.phyc`` customization checkpoint in a directory."""
    out: dict[tuple[str, str], Path] = {}
    for path in sorted(Path(ckpt_dir).glob("*.phyc")):
        tensors = checkpoint.load(path)
        if "meta.concept" not in tensors:
            continue
        obj, phys = json.loads(checkpoint.tensor_to_text(tensors["meta.concept"]))
        out[(obj, phys)] = path
    if not out:
        raise DataError(f"no customization checkpoints in {ckpt_dir}")
    return out


# ---------------------------------------------------------------------------
# ablation and sweep
# ---------------------------------------------------------------------------

ABLATION_ROWS = (("full", 1.0, 1.0), ("w/o IL", 0.0, 1.0), ("w/o DL", 1.0, 0.0))


@dataclass
class RunScore:
    """One trained model: its config, the per-step losses, and its proxy scores."""
    label: str
    config: TrainConfig
    proxy_v: float
    proxy_vo: float
    losses: list[list[float]]


def train_and_score(base: ParamStore, manifest: Manifest, target: str, physics: str,
                    config: TrainConfig, probe: Probe, samples: int = 20, n_steps: int = 50,
                    guidance: float = 7.5, label: str = "", csv_path=None) -> RunScore:
    data = ConceptTensors.from_dataset(concept_for(manifest, target, physics, config))
    state = init_state(base, config, target, physics)
    reports = run_training(state, data, csv_path=csv_path)
    seeds = [config.seed * 1000 + i for i in range(samples)]
    row, _ = score_state(state, probe, seeds, n_steps, guidance)
    pv, pvo = row.best
    return RunScore(label, config, pv, pvo, [r.row(i + 1) for i, r in enumerate(reports)])


@dataclass
class AblationRow:
    name: str
    lambda_iso: float
    lambda_dec: float
    runs: list[RunScore]

    def stats(self, key: str) -> tuple[float, float]:
        vals = [getattr(r, key) for r in self.runs]
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        return float(np.mean(vals)), float(sd)


def run_ablation(base: ParamStore, manifest: Manifest, target: str, physics: str,
                 config: TrainConfig, probe: Probe, seeds: Sequence[int] = range(5),
                 samples: int = 20, n_steps: int = 50, guidance: float = 7.5,
                 on_run: Callable[[RunScore], None] | None = None) -> list[AblationRow]:
    seeds = list(seeds)
    if len(seeds) < 5:
        log.warning("ablation with %d seeds; directional claims need at least 5", len(seeds))
    rows = []
    for name, li, ld in ABLATION_ROWS:
        runs = []
        for s in seeds:
            cfg = with_weights(config, lambda_iso=li, lambda_dec=ld, seed=s)
            run = train_and_score(base, manifest, target, physics, cfg, probe, samples,
                                  n_steps, guidance, label=name)
            runs.append(run)
            if on_run:
                on_run(run)
        rows.append(AblationRow(name, li, ld, runs))
    return rows


def write_ablation(rows: Sequence[AblationRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "lambda_iso", "lambda_dec", "n_seeds", "proxy_v_mean", "proxy_v_std",
                    "proxy_vo_mean", "proxy_vo_std"])
        for r in rows:
            v, vo = r.stats("proxy_v"), r.stats("proxy_vo")
            w.writerow([r.name, r.lambda_iso, r.lambda_dec, len(r.runs),
                        repr(v[0]), repr(v[1]), repr(vo[0]), repr(vo[1])])


DEFAULT_GRID = (0.1, 0.5, 1.0, 2.0)


@dataclass
class SweepCell:
    lambda_iso: float
    lambda_dec: float
    seeds: list[int]
    proxy_vo: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.proxy_vo))


def run_sweep(base: ParamStore, manifest: Manifest, target: str, physics: str,
              config: TrainConfig, probe: Probe, grid: Sequence[float] = DEFAULT_GRID,
              seeds: Sequence[int] = (0,), samples: int = 20, n_steps: int = 50,
              guidance: float = 7.5,
              on_cell: Callable[[SweepCell], None] | None = None) -> list[SweepCell]:
    cells = []
    for li in grid:
        for ld in grid:
            scores = []
            for s in seeds:
                cfg = with_weights(config, lambda_iso=float(li), lambda_dec=float(ld), seed=s)
                scores.append(train_and_score(base, manifest, target, physics, cfg, probe,
                                              samples, n_steps, guidance).proxy_vo)
            cell = SweepCell(float(li), float(ld), list(seeds), scores)
            cells.append(cell)
            if on_cell:
                on_cell(cell)
    return cells


def write_sweep(cells: Sequence[SweepCell], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda_iso", "lambda_dec", "seeds", "proxy_vo_mean"])
        for c in cells:
            w.writerow([c.lambda_iso, c.lambda_dec, " ".join(map(str, c.seeds)), repr(c.mean)])


def summary(rows: Sequence[AblationRow]) -> dict:
    return {r.name: {"proxy_v": r.stats("proxy_v"), "proxy_vo": r.stats("proxy_vo"),
                     "config": asdict(r.runs[0].config) if r.runs else None} for r in rows}
