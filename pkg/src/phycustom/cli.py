"""Command-line entry point: ``phycustom <command> [flags]`` or ``python -m phycustom``.

Every command accepts ``--config run.json``. Keys in that file are flag names
(dashes or underscores); flags given on the command line win. The resolved
settings are written as ``config.lock.json`` into the command's output
directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__, checkpoint
from . import dataset as ds
from . import evalbench as eb
from . import report
from . import trainer as tr
from .diffusion import sample
from .errors import ConfigError, DataError, PhyCustomError
from .textencoder import PHYSICS, Vocabulary, tokenize

log = logging.getLogger("phycustom")

REQUIRED = object()


class UsageError(PhyCustomError):
    code = "E_USAGE"


@dataclass(frozen=True)
class Opt:
    flag: str
    type: type
    default: Any
    help: str

    @property
    def dest(self) -> str:
        return self.flag.lstrip("-").replace("-", "_")


_TRAIN_DEFAULTS = tr.TrainConfig()
_PRE_DEFAULTS = tr.PretrainConfig()

TRAIN_OPTS = [
    Opt("--steps", int, _TRAIN_DEFAULTS.steps, "training steps"),
    Opt("--lr", float, _TRAIN_DEFAULTS.lr, "AdamW learning rate"),
    Opt("--batch", int, _TRAIN_DEFAULTS.batch, "batch size per concept"),
    Opt("--rank", int, _TRAIN_DEFAULTS.rank, "LoRA rank"),
    Opt("--lambda-iso", float, _TRAIN_DEFAULTS.lambda_iso, "isometric loss weight"),
    Opt("--lambda-dec", float, _TRAIN_DEFAULTS.lambda_dec, "decouple loss weight"),
    Opt("--decouple-form", str, _TRAIN_DEFAULTS.decouple_form, "cos, cos_sq or cos_abs"),
    Opt("--seed", int, _TRAIN_DEFAULTS.seed, "training seed"),
]

BASE_OPT = Opt("--base", str, "", "base model file; empty means <data>/base.phyc, built if absent")
PROBE_OPT = Opt("--probe", str, "", "probe file; empty means <data>/probe.phyc, built if absent")
PRETRAIN_STEPS = Opt("--pretrain-steps", int, _PRE_DEFAULTS.steps,
                     "steps used when the base model has to be built")

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "gen-data": ("render the procedural grid corpus", [
        Opt("--out", str, REQUIRED, "output directory"),
        Opt("--objects", int, 8, "number of object shapes (1-8)"),
        Opt("--seed", int, 0, "corpus seed"),
        Opt("--size", int, 16, "image side in pixels"),
        Opt("--severity-jitter", float, 0.2, "uniform jitter around the base severity"),
        Opt("--per-cell", int, 200, "renders per (object, transform) cell"),
    ]),
    "pretrain": ("train the frozen base denoiser and text encoder on the corpus", [
        Opt("--data", str, REQUIRED, "corpus directory"),
        Opt("--out", str, "", "output file; empty means <data>/base.phyc"),
        Opt("--steps", int, _PRE_DEFAULTS.steps, "training steps"),
        Opt("--lr", float, _PRE_DEFAULTS.lr, "AdamW learning rate"),
        Opt("--batch", int, _PRE_DEFAULTS.batch, "batch size"),
        Opt("--seed", int, _PRE_DEFAULTS.seed, "training seed"),
    ]),
    "train": ("customize one (object, physics) pair", [
        Opt("--data", str, REQUIRED, "corpus directory"),
        Opt("--object", str, REQUIRED, "target object name"),
        Opt("--physics", str, REQUIRED, "physics concept name"),
        Opt("--out", str, REQUIRED, "checkpoint path"),
        *TRAIN_OPTS, BASE_OPT, PRETRAIN_STEPS,
    ]),
    "sample": ("draw images for '[V] [O] <object>' from a checkpoint", [
        Opt("--ckpt", str, REQUIRED, "customization checkpoint"),
        Opt("--object", str, REQUIRED, "target object (must match the checkpoint)"),
        Opt("--physics", str, REQUIRED, "physics concept (must match the checkpoint)"),
        Opt("--n", int, 20, "number of images"),
        Opt("--steps", int, 50, "sampling steps"),
        Opt("--guidance", float, 7.5, "classifier-free guidance scale"),
        Opt("--seed", int, 0, "first seed; image i uses seed + i"),
        Opt("--out", str, REQUIRED, "output directory"),
        Opt("--attention", bool, False, "also write cross-attention heatmaps (PNG + CSV)"),
    ]),
    "probe-train": ("fit the evaluation probe on the corpus", [
        Opt("--data", str, REQUIRED, "corpus directory"),
        Opt("--out", str, REQUIRED, "probe file"),
        Opt("--epochs", int, eb.ProbeConfig.epochs, "training epochs"),
        Opt("--seed", int, 0, "probe seed"),
    ]),
    "eval": ("benchmark every checkpoint in a directory", [
        Opt("--ckpt-dir", str, REQUIRED, "directory of customization checkpoints"),
        Opt("--probe", str, REQUIRED, "probe file"),
        Opt("--out", str, REQUIRED, "results CSV"),
        Opt("--data", str, "", "corpus directory, checked against the probe's dataset hash"),
        Opt("--seeds", int, 20, "samples per combination"),
        Opt("--steps", int, 50, "sampling steps"),
        Opt("--guidance", float, 7.5, "classifier-free guidance scale"),
    ]),
    "ablate": ("full vs w/o isometric vs w/o decouple", [
        Opt("--data", str, REQUIRED, "corpus directory"),
        Opt("--object", str, REQUIRED, "target object name"),
        Opt("--physics", str, REQUIRED, "physics concept name"),
        Opt("--seeds", int, 5, "training seeds per row"),
        Opt("--out", str, REQUIRED, "ablation CSV"),
        Opt("--samples", int, 20, "samples per trained model"),
        Opt("--steps", int, _TRAIN_DEFAULTS.steps, "training steps per model"),
        Opt("--lr", float, _TRAIN_DEFAULTS.lr, "AdamW learning rate"),
        BASE_OPT, PROBE_OPT, PRETRAIN_STEPS,
    ]),
    "sweep": ("grid over (lambda_iso, lambda_dec)", [
        Opt("--data", str, REQUIRED, "corpus directory"),
        Opt("--grid", str, "0.1,0.5,1.0,2.0", "comma-separated lambda values (both axes)"),
        Opt("--out", str, REQUIRED, "sweep CSV"),
        Opt("--object", str, "circle", "target object name"),
        Opt("--physics", str, "melt", "physics concept name"),
        Opt("--seeds", int, 1, "training seeds per cell"),
        Opt("--samples", int, 20, "samples per trained model"),
        Opt("--steps", int, _TRAIN_DEFAULTS.steps, "training steps per model"),
        Opt("--lr", float, _TRAIN_DEFAULTS.lr, "AdamW learning rate"),
        BASE_OPT, PROBE_OPT, PRETRAIN_STEPS,
    ]),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser(with_defaults: bool = True) -> argparse.ArgumentParser:
    parser = _Parser(prog="phycustom", description="Physical concept customization at desk scale.")
    parser.add_argument("--version", action="version", version=f"phycustom {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (summary, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=summary, description=summary,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", default=argparse.SUPPRESS,
                       help="JSON file of flag values; explicit flags win")
        for o in opts:
            hidden = not with_defaults or o.default is REQUIRED
            default = argparse.SUPPRESS if hidden else o.default
            text = o.help + (" (required)" if o.default is REQUIRED else "")
            if o.type is bool:
                p.add_argument(o.flag, action="store_true", default=default, help=text)
            else:
                p.add_argument(o.flag, type=o.type, default=default, help=text,
                               metavar=o.dest.upper())
    return parser


def _coerce(opt: Opt, value, source: str):
    if opt.type is bool:
        ok = isinstance(value, bool)
    elif opt.type is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif opt.type is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, str)
    if not ok:
        raise ConfigError(f"{source}: '{opt.dest}' must be {opt.type.__name__}, "
                          f"got {type(value).__name__}")
    return opt.type(value)


def resolve(argv: Sequence[str]) -> tuple[str, dict]:
    """Merge defaults, the JSON config and explicit flags (in that order)."""
    argv = list(argv)
    full = build_parser(True).parse_args(argv)
    if full.command is None:
        raise UsageError("missing command; one of: " + ", ".join(COMMANDS))
    explicit = vars(build_parser(False).parse_args(argv))
    explicit.pop("command", None)
    opts = {o.dest: o for o in COMMANDS[full.command][1]}
    values = {d: o.default for d, o in opts.items()}
    cfg_path = explicit.pop("config", None)
    if cfg_path:
        try:
            doc = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {cfg_path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in doc.items():
            dest = key.replace("-", "_")
            if dest not in opts:
                raise ConfigError(f"unknown config key {key!r} for {full.command}")
            values[dest] = _coerce(opts[dest], value, cfg_path)
    values.update(explicit)
    missing = [opts[d].flag for d, v in values.items() if v is REQUIRED]
    if missing:
        raise UsageError(f"missing required flag(s): {', '.join(missing)}")
    return full.command, values


def write_lock(out_dir, command: str, values: dict, extra: dict | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "version": __version__, "args": values, **(extra or {})}
    path = out_dir / "config.lock.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# shared steps
# ---------------------------------------------------------------------------

def _progress(label: str, every: int):
    t0 = time.perf_counter()

    def cb(step, value):
        if step % every == 0:
            loss = value.total if hasattr(value, "total") else value
            log.info("%s step %d loss %.5f (%.1fs)", label, step, loss, time.perf_counter() - t0)
    return cb


def _base_for(values: dict, manifest: ds.Manifest) -> tr.ParamStore:
    path = Path(values["base"] or Path(values["data"]) / "base.phyc")
    if not path.is_file():
        if values["base"]:
            raise DataError(f"missing base model {path}")
        log.info("no base model at %s; pretraining one", path)
        cfg = tr.PretrainConfig(steps=values["pretrain_steps"])
        _pretrain(manifest, cfg, path)
    return tr.load_base(path)


def _pretrain(manifest: ds.Manifest, cfg: tr.PretrainConfig, path: Path) -> None:
    images, items = ds.grid_arrays(manifest)
    params = tr.pretrain_base(images, [it.prompt for it in items], cfg,
                              on_step=_progress("pretrain", 250))
    checkpoint.save(path, tr.base_to_tensors(params, cfg))


def _probe_for(values: dict, manifest: ds.Manifest) -> eb.Probe:
    data = Path(values["data"])
    path = Path(values["probe"] or data / "probe.phyc")
    if not path.is_file():
        if values["probe"]:
            raise DataError(f"missing probe {path}")
        log.info("no probe at %s; training one", path)
        eb.save_probe(eb.train_probe(manifest, ds.manifest_hash(data)), path)
    probe = eb.load_probe(path)
    if probe.dataset_hash != ds.manifest_hash(data):
        raise eb.ProbeError(f"probe {path} was trained on a different corpus")
    return probe


def _check_concept(obj: str, physics: str, manifest: ds.Manifest | None = None) -> None:
    objects = manifest.objects if manifest is not None else eb.OBJECTS
    if obj not in objects:
        raise ConfigError(f"unknown object {obj!r}; choose from {', '.join(objects)}")
    if physics not in PHYSICS:
        raise ConfigError(f"unknown physics {physics!r}; choose from {', '.join(PHYSICS)}")


def _train_config(values: dict) -> tr.TrainConfig:
    return tr.TrainConfig(**{k: values[k] for k in (
        "steps", "lr", "batch", "rank", "lambda_iso", "lambda_dec", "decouple_form", "seed")})


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(v: dict) -> None:
    manifest = ds.generate_corpus(v["objects"], v["seed"], v["size"], v["per_cell"],
                                  v["severity_jitter"])
    path = ds.write_manifest(v["out"], manifest)
    write_lock(v["out"], "gen-data", v)
    log.info("wrote %d images and %s", len(manifest.items), path)


def cmd_pretrain(v: dict) -> None:
    manifest = ds.read_manifest(v["data"])
    out = Path(v["out"] or Path(v["data"]) / "base.phyc")
    cfg = tr.PretrainConfig(steps=v["steps"], lr=v["lr"], batch=v["batch"], seed=v["seed"])
    _pretrain(manifest, cfg, out)
    write_lock(out.parent, "pretrain", v, {"pretrain_config": asdict(cfg),
                                           "manifest_sha256": ds.manifest_hash(v["data"])})
    log.info("wrote %s", out)


def cmd_train(v: dict) -> None:
    manifest = ds.read_manifest(v["data"])
    _check_concept(v["object"], v["physics"], manifest)
    cfg = _train_config(v)
    base = _base_for(v, manifest)
    out = Path(v["out"])
    concept = tr.concept_for(manifest, v["object"], v["physics"], cfg)
    state = tr.init_state(base, cfg, v["object"], v["physics"])
    csv_path = out.with_suffix(".losses.csv")
    tr.run_training(state, tr.ConceptTensors.from_dataset(concept), out, csv_path,
                    on_step=_progress("train", 50))
    report.loss_curves({f"{v['object']}+{v['physics']}": report.read_loss_csv(csv_path)},
                       out.with_suffix(".losses.png"))
    write_lock(out.parent, "train", v, {"train_config": asdict(cfg),
                                        "manifest_sha256": ds.manifest_hash(v["data"]),
                                        "physics_objects": concept.physics_objects})
    log.info("wrote %s and %s", out, csv_path)


def cmd_sample(v: dict) -> None:
    state = tr.load_checkpoint(v["ckpt"])
    if (state.target, state.physics) != (v["object"], v["physics"]):
        raise ConfigError(f"checkpoint holds {state.target}+{state.physics}, "
                          f"not {v['object']}+{v['physics']}")
    if v["n"] < 1:
        raise ConfigError("--n must be >= 1")
    vocab = Vocabulary.default()
    seeds = [v["seed"] + i for i in range(v["n"])]
    prompt = ds.combined_prompt(state.target)
    tokens = tokenize(prompt, vocab)
    out = sample(state.params, state.den_cfg, state.config.schedule, tokens, seeds,
                 ("object", "physics"), v["steps"], v["guidance"], return_attention=v["attention"])
    images, maps = (out if v["attention"] else (out, None))
    report.save_images(images, v["out"])
    report.contact_sheet(images, Path(v["out"]) / "contact_sheet.png")
    if maps is not None:
        words = prompt.split()
        mean_maps = [m.mean(axis=0) for m in maps]
        positions = {"[V]": words.index("[V]"), "[O]": words.index("[O]")}
        report.attention_heatmaps(mean_maps, positions, state.den_cfg.grid,
                                  Path(v["out"]) / "attention.png", Path(v["out"]) / "attention.csv")
    write_lock(v["out"], "sample", v, {"seeds": seeds, "prompt": prompt})
    log.info("wrote %d images to %s", len(images), v["out"])


def cmd_probe_train(v: dict) -> None:
    manifest = ds.read_manifest(v["data"])
    cfg = eb.ProbeConfig(epochs=v["epochs"], seed=v["seed"])
    probe = eb.train_probe(manifest, ds.manifest_hash(v["data"]), cfg)
    eb.save_probe(probe, v["out"])
    write_lock(Path(v["out"]).parent, "probe-train", v, {"accuracy": probe.accuracy})
    acc = probe.accuracy
    log.info("held-out accuracy object %.4f %s physics %.4f %s (n=%d)",
             acc["object"]["value"], acc["object"]["ci95"],
             acc["physics"]["value"], acc["physics"]["ci95"], acc["n_test"])


def cmd_eval(v: dict) -> None:
    probe = eb.load_probe(v["probe"])
    if v["data"] and ds.manifest_hash(v["data"]) != probe.dataset_hash:
        raise eb.ProbeError("probe/dataset hash mismatch")
    index = eb.checkpoint_dir_index(v["ckpt_dir"])
    out = Path(v["out"])
    result = eb.run_benchmark(index, probe, range(v["seeds"]), v["steps"], v["guidance"],
                              sheet_dir=out.parent / "sheets")
    result.write_csv(out)
    pv, pvo = result.aggregate()
    write_lock(out.parent, "eval", v, {"combinations": [list(k) for k in sorted(index)],
                                       "proxy_v_mean": pv, "proxy_vo_mean": pvo})
    print(f"combinations={len(result.rows)} proxy_v={pv:.4f} proxy_vo={pvo:.4f}")


def cmd_ablate(v: dict) -> None:
    manifest = ds.read_manifest(v["data"])
    _check_concept(v["object"], v["physics"], manifest)
    base, probe = _base_for(v, manifest), _probe_for(v, manifest)
    cfg = tr.TrainConfig(steps=v["steps"], lr=v["lr"])
    out = Path(v["out"])
    curves: dict[str, list] = {}

    def on_run(run):
        log.info("%s seed %d: proxy_v %.4f proxy_vo %.4f", run.label, run.config.seed,
                 run.proxy_v, run.proxy_vo)
        curves.setdefault(run.label, []).append(np.array(run.losses))

    rows = eb.run_ablation(base, manifest, v["object"], v["physics"], cfg, probe,
                           range(v["seeds"]), v["samples"], on_run=on_run)
    eb.write_ablation(rows, out)
    report.ablation_plot(rows, out.with_suffix(".png"))
    mean_curves = {}
    for label, runs in curves.items():
        avg = np.mean(runs, axis=0)
        mean_curves[label] = {name: avg[:, i] for i, name in enumerate(tr.CSV_HEADER)}
    report.loss_curves(mean_curves, out.with_name(out.stem + "_losses.png"))
    write_lock(out.parent, "ablate", v, {"train_config": asdict(cfg)})
    for r in rows:
        (mv, sv), (mo, so) = r.stats("proxy_v"), r.stats("proxy_vo")
        print(f"{r.name}: proxy_v={mv:.4f}+-{sv:.4f} proxy_vo={mo:.4f}+-{so:.4f}")


def cmd_sweep(v: dict) -> None:
    try:
        grid = [float(x) for x in v["grid"].split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"--grid must be comma-separated numbers, got {v['grid']!r}") from None
    if not grid:
        raise ConfigError("--grid is empty")
    manifest = ds.read_manifest(v["data"])
    _check_concept(v["object"], v["physics"], manifest)
    base, probe = _base_for(v, manifest), _probe_for(v, manifest)
    cfg = tr.TrainConfig(steps=v["steps"], lr=v["lr"])
    out = Path(v["out"])
    cells = eb.run_sweep(base, manifest, v["object"], v["physics"], cfg, probe, grid,
                         range(v["seeds"]), v["samples"],
                         on_cell=lambda c: log.info("cell (%g, %g): proxy_vo %.4f",
                                                    c.lambda_iso, c.lambda_dec, c.mean))
    eb.write_sweep(cells, out)
    report.sweep_heatmap(cells, out.with_suffix(".png"))
    write_lock(out.parent, "sweep", v, {"train_config": asdict(cfg)})


HANDLERS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train,
    "sample": cmd_sample, "probe-train": cmd_probe_train, "eval": cmd_eval,
    "ablate": cmd_ablate, "sweep": cmd_sweep,
}


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, values = resolve(argv)
        HANDLERS[command](values)
    except PhyCustomError as exc:
        print(f"error code={exc.code} message={json.dumps(_one_line(exc))}", file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    except OSError as exc:
        print(f"error code=E_IO message={json.dumps(_one_line(exc))}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
