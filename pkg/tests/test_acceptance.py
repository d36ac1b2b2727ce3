"""End-to-end acceptance criteria A1-A9.

Each test records a verdict line; the run ends with one PASS/FAIL line per
criterion in the "acceptance criteria" summary section.
"""

import hashlib
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from phycustom import tensorcore as tc
from phycustom.dataset import ObjectSpec, build_concept_dataset, corpus_prompt, rasterize_object
from phycustom.denoiser import DenoiserConfig
from phycustom.diffusion import DiffusionSchedule, from_uint8, make_training_batch, sample, to_uint8
from phycustom.evalbench import OBJECT_CLASSES, run_ablation
from phycustom.lora import BRANCHES, attach, branch_params
from phycustom.losses import loss_decouple, loss_isometric, loss_mse
from phycustom.report import smooth
from phycustom.tensorcore import ParamStore
from phycustom.textencoder import OBJECTS, PHYSICS, Vocabulary, embedding_distance, encode, tokenize
from phycustom.trainer import (AdamW, ConceptTensors, PretrainConfig, TrainConfig, concept_for,
                               decouple_gradient, init_base, init_state, load_checkpoint,
                               pretrain_base, run_training, save_checkpoint, state_to_tensors,
                               with_weights)

from conftest import central_diff, rel_err

pytestmark = pytest.mark.acceptance

VOCAB = Vocabulary.default()
TINY = DenoiserConfig(size=8, d_model=8, n_blocks=1, mlp_hidden=16)
TARGET, CONCEPT = "circle", "melt"
ABLATION_SEEDS = range(5)


def _tiny_model(hosts=None, rank=2, seed=0):
    """Float64 copy of a small denoiser + text encoder with random LoRA pairs on both branches."""
    r = np.random.default_rng(seed)
    base = init_base(seed, TINY)
    params = ParamStore({n: tc.tensor(base[n].data, dtype=np.float64) for n in base})
    hosts = hosts or sorted(n for n in params if n.startswith("den.block") and
                            n.endswith((".cross.q", ".cross.k", ".cross.v", ".cross.o",
                                        ".mlp.fc1.weight", ".mlp.fc2.weight")))
    for b in BRANCHES:
        attach(params, hosts, rank, b, seed=seed)
    for n in params:
        # the fresh head is zero, which would zero every upstream gradient
        if n.startswith("lora.") or n == "den.out.weight":
            params[n].data = 0.3 * r.standard_normal(params[n].shape)
    images = np.stack([rasterize_object(ObjectSpec(o), 8) for o in ("circle", "square", "star")])
    obj_tokens = np.stack([tokenize("a photo of [O] circle", VOCAB)] * 3)
    phys_tokens = np.stack([tokenize(f"a photo of [V] {o}", VOCAB) for o in ("ring", "cross", "gear")])
    sched = DiffusionSchedule()
    ob = make_training_batch(images, obj_tokens, np.random.default_rng([seed, 1]), sched, 3, 0.0)
    pb = make_training_batch(images, phys_tokens, np.random.default_rng([seed, 2]), sched, 3, 0.0)
    return params, ob, pb, phys_tokens


def _store(params, names):
    return ParamStore({n: params[n] for n in names})


def _fd_gradient(loss_fn, store):
    x0 = store.flatten().copy()

    def f(v):
        store.assign_flat(v)
        with tc.no_grad():
            return loss_fn().item()
    num = central_diff(f, x0, 1e-3)
    store.assign_flat(x0)
    return num


def test_A1_gradient_oracle(verdict):
    t0 = time.perf_counter()
    errs = {}
    with tc.precision(np.float64):
        params, ob, pb, phys_tokens = _tiny_model()
        anchor = tokenize("a photo of [V] object", VOCAB)
        text_names = ["text.tok_emb", "text.pos_emb", "text.attn.q", "text.attn.k", "text.attn.v",
                      "text.mlp.fc2.bias"]
        cases = {
            "L_o": (lambda: loss_mse(ob, params, TINY, {"object"}), branch_params(params, "object")),
            "L_p": (lambda: loss_mse(pb, params, TINY, {"physics"}), branch_params(params, "physics")),
            "L_isometric": (lambda: loss_isometric(anchor, phys_tokens, params), _store(params, text_names)),
        }
        sizes = {}
        for key, (fn, store) in cases.items():
            for p in store.values():
                p.requires_grad = True
            analytic = tc.flatten_grads(tc.backward(fn(), store), store)
            assert np.count_nonzero(analytic) > analytic.size // 2, key
            sizes[key] = analytic.size
            errs[key] = rel_err(analytic, _fd_gradient(fn, store))
    worst = max(errs.values())
    dt = time.perf_counter() - t0
    ok = verdict("A1", worst < 1e-3 and max(sizes.values()) <= 5000 and dt < 120,
                 f"gradient oracle: max rel err {worst:.2e} (<1e-3) over "
                 f"{', '.join(f'{k}[{sizes[k]}]' for k in sizes)}, {dt:.0f}s")
    assert ok, errs


def test_A2_hvp_oracle(verdict):
    t0 = time.perf_counter()
    with tc.precision(np.float64):
        params, ob, _, _ = _tiny_model()
        names = [n for n in params if n.startswith(("lora.object.", "den.block0.mlp."))]
        store = _store(params, names)
        for p in store.values():
            p.requires_grad = True
        n = store.flatten().size
        r = np.random.default_rng(3)
        x0 = store.flatten().copy()

        def g_at(x):
            store.assign_flat(x)
            return tc.flatten_grads(tc.backward(loss_mse(ob, params, TINY, {"object"}), store), store)
        errs = []
        for _ in range(3):
            v = r.standard_normal(n)
            v /= np.linalg.norm(v)
            store.assign_flat(x0)
            hv = tc.hvp(loss_mse(ob, params, TINY, {"object"}), store, v)
            assert np.linalg.norm(hv) > 0
            fd = (g_at(x0 + 1e-3 * v) - g_at(x0 - 1e-3 * v)) / 2e-3
            errs.append(rel_err(hv, fd))
        store.assign_flat(x0)

    # 0.5 x'Qx + b'x: the Hessian is Q exactly, checked at float32
    q = r.standard_normal((40, 40)).astype(np.float32)
    q = (q + q.T) / 2
    x = tc.tensor(r.standard_normal((40, 1)), requires_grad=True)
    quad = tc.add(tc.scale(tc.sum(tc.mul(x, tc.matmul(tc.Tensor(q), x))), 0.5),
                  tc.sum(tc.mul(tc.tensor(r.standard_normal((40, 1))), x)))
    v = r.standard_normal(40).astype(np.float32)
    quad_err = rel_err(tc.hvp(quad, {"x": x}, v), q.astype(np.float64) @ v.astype(np.float64))
    dt = time.perf_counter() - t0
    ok = verdict("A2", max(errs) < 1e-3 and quad_err < 1e-5 and n <= 2000 and dt < 60,
                 f"HVP oracle: max rel err {max(errs):.2e} (<1e-3) on {n} params; "
                 f"quadratic form rel err {quad_err:.1e}, {dt:.0f}s")
    assert ok


def test_A3_decouple_gradient_oracle(verdict):
    t0 = time.perf_counter()
    hosts = ["den.block0.cross.q", "den.block0.cross.v", "den.block0.mlp.fc1.weight",
             "den.block0.mlp.fc2.weight"]
    errs = {}
    with tc.precision(np.float64):
        params, ob, pb, _ = _tiny_model(hosts)
        so, sp = branch_params(params, "object"), branch_params(params, "physics")
        both = ParamStore({**so, **sp})

        def flat_grads(create_graph=False):
            g_o = tc.backward(loss_mse(ob, params, TINY, {"object"}), so, create_graph=create_graph)
            g_p = tc.backward(loss_mse(pb, params, TINY, {"physics"}), sp, create_graph=create_graph)
            return g_o, g_p

        for form in ("cos", "cos_sq"):
            g_o, g_p = flat_grads(create_graph=True)
            dec = decouple_gradient(g_o, g_p, so, sp, form)
            analytic = np.concatenate([dec[n].ravel() for n in both])
            assert np.count_nonzero(analytic) > analytic.size // 2

            def value():
                g_o, g_p = flat_grads()
                return loss_decouple(tc.flatten_grads(g_o, so), tc.flatten_grads(g_p, sp), form)[0]
            x0 = both.flatten().copy()
            num = central_diff(lambda v: (both.assign_flat(v), value())[1], x0, 1e-3)
            both.assign_flat(x0)
            errs[form] = rel_err(analytic, num)
    size = both.flatten().size
    dt = time.perf_counter() - t0
    ok = verdict("A3", max(errs.values()) < 1e-2 and size <= 500 and dt < 120,
                 f"decouple-gradient oracle: rel err cos {errs['cos']:.2e}, cos_sq {errs['cos_sq']:.2e} "
                 f"(<1e-2) on {size} params, {dt:.0f}s")
    assert ok


def test_A4_isometric_convergence(verdict):
    t0 = time.perf_counter()
    data = ConceptTensors.from_dataset(build_concept_dataset(TARGET, CONCEPT, np.random.default_rng(0)))
    cfg = TrainConfig()
    text = ParamStore({n: t for n, t in init_base(0).items() if n.startswith("text.")})
    for t in text.values():
        t.requires_grad = True
    opt = AdamW(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    for _ in range(cfg.steps):
        loss = loss_isometric(data.anchor_tokens, data.physics_tokens, text)
        opt.step(text, {n: g.data for n, g in tc.backward(loss, text).items()})
    with tc.no_grad():
        final = loss_isometric(data.anchor_tokens, data.physics_tokens, text).item()
        emb = encode(np.concatenate([data.anchor_tokens[None], data.physics_tokens]), text)
        dist = [embedding_distance(emb[0], emb[i]).item() for i in range(1, emb.shape[0])]
    spread = (max(dist) - min(dist)) / np.mean(dist)
    dt = time.perf_counter() - t0
    ok = verdict("A4", final < 1e-6 and spread < 1e-3 and dt < 60,
                 f"isometric convergence: L_isometric {final:.1e} (<1e-6), distance spread "
                 f"{spread:.1e} (<1e-3) after {cfg.steps} steps at lr {cfg.lr}, {dt:.0f}s")
    assert ok


@pytest.fixture(scope="module")
def ablation(base, manifest, probe):
    t0 = time.perf_counter()
    rows = run_ablation(base, manifest, TARGET, CONCEPT, TrainConfig(), probe, seeds=ABLATION_SEEDS)
    return {r.name: r for r in rows}, time.perf_counter() - t0


def _final_abs_cos(run) -> float:
    return float(np.mean([abs(row[6]) for row in run.losses[-100:]]))


def test_A5_decouple_effect(verdict, ablation):
    rows, _ = ablation
    with_dec = np.mean([_final_abs_cos(r) for r in rows["full"].runs[:3]])
    without = np.mean([_final_abs_cos(r) for r in rows["w/o DL"].runs[:3]])
    ok = verdict("A5", with_dec <= 0.5 * without,
                 f"decouple effect: mean |cos| over final 100 steps {with_dec:.4f} (lambda_dec=1) vs "
                 f"{without:.4f} (lambda_dec=0), ratio {with_dec / without:.2f} (<=0.5), 3 seeds")
    assert ok


def test_A6_ablation_ordering(verdict, ablation):
    rows, dt = ablation
    full, no_il, no_dl = rows["full"], rows["w/o IL"], rows["w/o DL"]
    v = {k: r.stats("proxy_v")[0] for k, r in rows.items()}
    vo = {k: r.stats("proxy_vo")[0] for k, r in rows.items()}
    first = v["full"] > v["w/o IL"]
    second = vo["full"] > vo["w/o DL"]
    ok = verdict("A6", first and second and len(full.runs) >= 5 and dt < 3600,
                 f"ablation ordering over {len(full.runs)} seeds on {TARGET}+{CONCEPT}: "
                 f"Proxy-V full {v['full']:.3f} vs w/o IL {v['w/o IL']:.3f} ({'ok' if first else 'violated'}); "
                 f"Proxy-V-O full {vo['full']:.3f} vs w/o DL {vo['w/o DL']:.3f} "
                 f"({'ok' if second else 'violated'}), {dt:.0f}s")
    assert len(no_il.runs) == len(no_dl.runs) == len(full.runs)
    assert ok


def test_A7_diffusion_sanity(verdict, manifest, probe):
    t0 = time.perf_counter()
    objs = OBJECTS[:4]
    items = [it for it in manifest.items if it.transform == "none" and it.object in objs]
    model = pretrain_base(np.stack([it.image for it in items]), [it.prompt for it in items],
                          PretrainConfig(steps=500))
    hits = 0
    for o in objs:
        tokens = tokenize(corpus_prompt(o, "none"), VOCAB)
        imgs = from_uint8(to_uint8(sample(model, DenoiserConfig(), DiffusionSchedule(), tokens,
                                          range(16), active=())))
        po, _ = probe.predict(imgs)
        hits += int((po.argmax(1) == OBJECT_CLASSES.index(o)).sum())
    acc = hits / 64
    dt = time.perf_counter() - t0
    ok = verdict("A7", acc >= 0.70 and dt < 1200,
                 f"diffusion sanity: probe object accuracy {acc:.3f} (>=0.70) over 64 samples of "
                 f"{', '.join(objs)}, {dt:.0f}s")
    assert ok


def test_A8_convergence_logging(verdict, base, manifest, ablation, tmp_path):
    rows, _ = ablation
    cfg = TrainConfig()
    curves = {CONCEPT: [r[1] for r in rows["full"].runs[0].losses]}
    for concept in PHYSICS:
        if concept in curves:
            continue
        state = init_state(base, cfg, TARGET, concept)
        data = ConceptTensors.from_dataset(concept_for(manifest, TARGET, concept, cfg))
        curves[concept] = [r.total for r in run_training(state, data)]
    drops = {}
    for concept, totals in curves.items():
        s = smooth(totals, 50)
        drops[concept] = (s[49], s[499])
    decreasing = all(late < early for early, late in drops.values())

    # the same config twice gives the same CSV bytes
    digests = []
    for name in ("a", "b"):
        state = init_state(base, cfg, TARGET, "burn")
        data = ConceptTensors.from_dataset(concept_for(manifest, TARGET, "burn", cfg))
        run_training(state, data, csv_path=tmp_path / f"{name}.csv")
        digests.append(hashlib.sha256((tmp_path / f"{name}.csv").read_bytes()).hexdigest())
    same = digests[0] == digests[1]
    ok = verdict("A8", decreasing and same and len(drops) == 6,
                 "convergence: smoothed total step 50 -> 500 " +
                 ", ".join(f"{c} {a:.3f}->{b:.3f}" for c, (a, b) in drops.items()) +
                 f"; CSV reproducible: {same}")
    assert ok


_PIPELINE = """
import sys
from phycustom.cli import main
steps = [
    ["gen-data", "--out", "data", "--objects", "4", "--per-cell", "20"],
    ["pretrain", "--data", "data", "--steps", "30", "--batch", "16"],
    ["train", "--data", "data", "--object", "circle", "--physics", "melt", "--out", "run/model.phyc",
     "--steps", "20"],
    ["sample", "--ckpt", "run/model.phyc", "--object", "circle", "--physics", "melt", "--n", "4",
     "--steps", "10", "--out", "samples", "--attention"],
]
for argv in steps:
    if main(argv) != 0:
        sys.exit(1)
"""


def _tree_digest(root: Path) -> dict[str, str]:
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_A9_determinism_and_persistence(verdict, base, manifest, tmp_path):
    t0 = time.perf_counter()
    trees = []
    for name in ("first", "second"):
        work = tmp_path / name
        work.mkdir()
        env = {**os.environ, "PHYC_THREADS": "2" if name == "first" else "1"}
        subprocess.run([sys.executable, "-c", _PIPELINE], cwd=work, env=env, check=True,
                       capture_output=True)
        trees.append(_tree_digest(work))
    kinds = sorted({Path(k).suffix for k in trees[0]})
    fresh_same = trees[0] == trees[1] and {".phyc", ".csv", ".png"} <= set(kinds)

    # save/load round trip and resume-at-250 vs uninterrupted 500
    cfg = TrainConfig()
    data = ConceptTensors.from_dataset(concept_for(manifest, TARGET, CONCEPT, cfg))
    straight = init_state(base, cfg, TARGET, CONCEPT)
    run_training(straight, data, tmp_path / "straight.phyc")
    loaded = load_checkpoint(tmp_path / "straight.phyc")
    a, b = state_to_tensors(straight), state_to_tensors(loaded)
    round_trip = a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)

    half = init_state(base, with_weights(cfg, steps=250), TARGET, CONCEPT)
    run_training(half, data, tmp_path / "half.phyc")
    resumed = load_checkpoint(tmp_path / "half.phyc")
    resumed.config = cfg
    run_training(resumed, data, tmp_path / "resumed.phyc")
    save_checkpoint(straight, tmp_path / "straight2.phyc")
    resume_same = (tmp_path / "resumed.phyc").read_bytes() == (tmp_path / "straight2.phyc").read_bytes()
    dt = time.perf_counter() - t0
    ok = verdict("A9", fresh_same and round_trip and resume_same and dt < 600,
                 f"determinism: two fresh processes identical over {len(trees[0])} files ({' '.join(kinds)}): "
                 f"{fresh_same}; round trip bit-exact: {round_trip}; resume@250 == straight 500: "
                 f"{resume_same}, {dt:.0f}s")
    assert ok
