"""Procedural shapes, physics transforms, and the on-disk corpus manifest."""

from __future__ import annotations

import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.path import Path as PolyPath
from PIL import Image
from scipy import ndimage

from .diffusion import from_uint8, to_uint8
from .errors import DataError, ManifestError
from .textencoder import OBJECTS, PHYSICS, Vocabulary, tokenize

SUPERSAMPLE = 4
MANIFEST_VERSION = 1
BASE_SEVERITY = 0.45


@dataclass(frozen=True)
class ObjectSpec:
    name: str
    center: tuple[float, float] = (0.0, 0.0)
    scale: float = 0.8
    intensity: float = 1.0


@dataclass(frozen=True)
class PhysicsTransform:
    name: str
    severity: float = BASE_SEVERITY
    seed: int = 0


def _star(points: int = 5, inner: float = 0.45) -> np.ndarray:
    k = np.arange(2 * points)
    radius = np.where(k % 2 == 0, 1.0, inner)
    theta = -np.pi / 2 + k * np.pi / points
    return np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)


# y grows downward, so the triangle and star point up
_POLYGONS = {
    "triangle": PolyPath(np.array([[0.0, -1.0], [0.95, 0.75], [-0.95, 0.75]])),
    "star": PolyPath(_star()),
}


def _inside(name: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    r2 = x * x + y * y
    if name == "circle":
        return r2 <= 1.0
    if name == "ring":
        return (r2 <= 1.0) & (r2 >= 0.55 ** 2)
    if name == "square":
        return np.maximum(np.abs(x), np.abs(y)) <= 0.8
    if name == "diamond":
        return np.abs(x) + np.abs(y) <= 1.0
    if name == "cross":
        ax, ay = np.abs(x), np.abs(y)
        return ((ax <= 0.3) & (ay <= 1.0)) | ((ay <= 0.3) & (ax <= 1.0))
    if name == "gear":
        r = np.sqrt(r2)
        teeth = (r <= 1.0) & (np.cos(8 * np.arctan2(y, x)) >= 0.0)
        return ((r <= 0.65) | teeth) & (r >= 0.25)
    if name in _POLYGONS:
        pts = np.stack([x.ravel(), y.ravel()], axis=1)
        return _POLYGONS[name].contains_points(pts).reshape(x.shape)
    raise DataError(f"unknown object {name!r}")


def rasterize_object(spec: ObjectSpec, size: int = 16) -> np.ndarray:
    """Antialiased grayscale render in [-1, 1]: background -1, foreground ~ intensity."""
    if spec.name not in OBJECTS:
        raise DataError(f"unknown object {spec.name!r}")
    if not spec.scale > 0:
        raise DataError(f"degenerate object scale {spec.scale}")
    n = size * SUPERSAMPLE
    coords = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    inside = _inside(spec.name, (xx - spec.center[0]) / spec.scale, (yy - spec.center[1]) / spec.scale)
    coverage = inside.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE).mean(axis=(1, 3))
    if not coverage.any():
        raise DataError(f"object {spec.name!r} has empty foreground at scale {spec.scale}")
    return (-1.0 + coverage * (spec.intensity + 1.0)).astype(np.float32)


def _shift(u: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(u)
    h, w = u.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = u[ys, xs]
    return out


def _disk(radius: int) -> np.ndarray:
    k = np.arange(-radius, radius + 1)
    return (k[:, None] ** 2 + k[None, :] ** 2) <= radius * radius + 0.5


def _melt(u, s, rng):
    rate = 0.45 + 0.35 * rng.random(u.shape[1])
    for _ in range(math.ceil(s * 8)):
        for r in range(u.shape[0] - 2, -1, -1):
            flow = np.minimum(rate * u[r], 1.0 - u[r + 1])
            u[r] -= flow
            u[r + 1] += flow
    return u


def _burn(u, s, rng):
    if s <= 0:
        return u
    cross = ndimage.generate_binary_structure(2, 1)
    edge = u - ndimage.grey_erosion(u, footprint=cross)
    eroded = u - (0.35 + 0.45 * s) * edge
    # char the new rim: darken what now sits on the boundary
    rim = eroded - ndimage.grey_erosion(eroded, footprint=cross)
    char = (0.3 + 0.4 * s) * (0.7 + 0.3 * rng.random(u.shape))
    return eroded - char * rim


def _expand(u, s, rng):
    k = math.ceil(s * 3)
    return ndimage.grey_dilation(u, footprint=_disk(k)) if k else u


def _dissolve(u, s, rng):
    drop = (rng.random(u.shape) < s) & (u > 0)
    return np.where(drop, 0.0, u)


def _shatter(u, s, rng):
    mass = u.sum()
    if mass <= 0:
        return u
    n = math.ceil(2 + s * 4)
    yy, xx = np.indices(u.shape)
    cy, cx = (yy * u).sum() / mass, (xx * u).sum() / mass
    start = rng.uniform(0, 2 * np.pi)
    theta = np.mod(np.arctan2(yy - cy, xx - cx) - start, 2 * np.pi)
    sector = np.minimum((theta / (2 * np.pi / n)).astype(int), n - 1)
    out = np.zeros_like(u)
    for i in range(n):
        mid = start + (i + 0.5) * 2 * np.pi / n
        dist = 0.5 + 1.5 * s
        dy = int(round(dist * np.sin(mid) + rng.normal(0, 0.5)))
        dx = int(round(dist * np.cos(mid) + rng.normal(0, 0.5)))
        out = np.maximum(out, _shift(np.where(sector == i, u, 0.0), dy, dx))
    return out


def _deform(u, s, rng):
    amp = s * 3.0
    period = u.shape[0] * (1.0 + 0.5 * rng.random())
    p1, p2 = rng.uniform(0, 2 * np.pi, size=2)
    yy, xx = np.indices(u.shape).astype(np.float64)
    src_y = yy + amp * np.sin(2 * np.pi * xx / period + p1)
    src_x = xx + amp * np.sin(2 * np.pi * yy / period + p2)
    return ndimage.map_coordinates(u, [src_y, src_x], order=1, mode="constant", cval=0.0)


_TRANSFORMS = {"melt": _melt, "burn": _burn, "expand": _expand,
               "dissolve": _dissolve, "shatter": _shatter, "deform": _deform}


def apply_physics(img: np.ndarray, transform: PhysicsTransform) -> np.ndarray:
    """Apply a deterministic procedural transform to a [-1, 1] image."""
    fn = _TRANSFORMS.get(transform.name)
    if fn is None:
        raise DataError(f"unknown physics transform {transform.name!r}")
    if not 0.0 <= transform.severity <= 1.0:
        raise DataError(f"severity must lie in [0, 1], got {transform.severity}")
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or not np.isfinite(img).all():
        raise DataError("physics transforms need a finite 2-D image")
    rng = np.random.default_rng(transform.seed)
    u = fn((img + 1.0) / 2.0, transform.severity, rng)
    return np.clip(2.0 * u - 1.0, -1.0, 1.0).astype(np.float32)


def foreground_count(img: np.ndarray) -> int:
    return int((np.asarray(img) > -1.0).sum())


def intensity_mass(img: np.ndarray) -> float:
    return float(((np.asarray(img, dtype=np.float64) + 1.0) / 2.0).sum())


# ---------------------------------------------------------------------------
# corpus + manifest
# ---------------------------------------------------------------------------

@dataclass
class Item:
    png_path: str
    prompt: str
    role: str
    object: str
    transform: str
    severity: float
    seed: int
    pixels: np.ndarray | None = field(default=None, repr=False, compare=False)

    def record(self) -> dict:
        rec = asdict(self)
        rec.pop("pixels")
        return rec

    @property
    def image(self) -> np.ndarray:
        return from_uint8(self.pixels)


@dataclass
class Manifest:
    size: int
    seed: int
    vocabulary: list[str]
    objects: list[str]
    physics: list[str]
    items: list[Item]
    version: int = MANIFEST_VERSION

    def document(self) -> dict:
        return {"version": self.version, "size": self.size, "seed": self.seed,
                "vocabulary": self.vocabulary, "objects": self.objects, "physics": self.physics,
                "items": [it.record() for it in self.items]}

    def select(self, obj: str | None = None, transform: str | None = None) -> list[Item]:
        return [it for it in self.items
                if (obj is None or it.object == obj) and (transform is None or it.transform == transform)]


def object_prompt(obj: str) -> str:
    return f"a photo of [O] {obj}"


def physics_prompt(obj: str) -> str:
    return f"a photo of [V] {obj}"


ANCHOR_PROMPT = "a photo of [V] object"


def combined_prompt(obj: str) -> str:
    return f"a photo of [V] [O] {obj}"


def corpus_prompt(obj: str, transform: str) -> str:
    return f"a photo of {obj}" if transform == "none" else f"a photo of {transform} {obj}"


def _item_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def render_corpus_item(obj: str, transform: str, index: int, seed: int, size: int,
                       jitter: float) -> tuple[np.ndarray, float, int]:
    item_seed = _item_seed(seed, index)
    rng = np.random.default_rng(item_seed)
    spec = ObjectSpec(obj, center=tuple(rng.uniform(-0.05, 0.05, size=2)),
                      scale=float(rng.uniform(0.55, 0.7)), intensity=float(rng.uniform(0.85, 1.0)))
    img = rasterize_object(spec, size)
    severity = 0.0
    if transform != "none":
        severity = float(np.clip(BASE_SEVERITY + rng.uniform(-jitter, jitter), 0.05, 1.0))
        img = apply_physics(img, PhysicsTransform(transform, severity, item_seed))
    return img, severity, item_seed


def generate_corpus(n_objects: int = 8, seed: int = 0, size: int = 16, per_cell: int = 200,
                    severity_jitter: float = 0.2, workers: int | None = None) -> Manifest:
    """Every object x {clean + each transform}, ``per_cell`` renders per cell.

    Each item is seeded from (seed, item index), so output does not depend on
    the worker count. Pixels are quantized to 8 bits here, once.
    """
    if not 1 <= n_objects <= len(OBJECTS):
        raise DataError(f"objects must be in [1, {len(OBJECTS)}]")
    objects = list(OBJECTS[:n_objects])
    cells = [(o, tr) for o in objects for tr in ("none", *PHYSICS)]
    jobs = [(o, tr, k) for o, tr in cells for k in range(per_cell)]

    def work(args):
        index, (o, tr, k) = args
        img, severity, item_seed = render_corpus_item(o, tr, index, seed, size, severity_jitter)
        return Item(png_path=f"images/{o}_{tr}_{k:03d}.png", prompt=corpus_prompt(o, tr),
                    role="object" if tr == "none" else "physics", object=o, transform=tr,
                    severity=severity, seed=item_seed, pixels=to_uint8(img))

    workers = workers or default_workers()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        items = list(pool.map(work, enumerate(jobs)))
    return Manifest(size=size, seed=seed, vocabulary=Vocabulary.default().tokens,
                    objects=objects, physics=list(PHYSICS), items=items)


def default_workers() -> int:
    env = os.environ.get("PHYC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def write_manifest(root: str | Path, manifest: Manifest) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for it in manifest.items:
        path = _resolve(root, it.png_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(it.pixels, mode="L").save(path, format="PNG")
    out = root / "manifest.json"
    out.write_text(json.dumps(manifest.document(), indent=1) + "\n", encoding="utf-8", newline="\n")
    return out


def _resolve(root: Path, rel: str) -> Path:
    root_r = root.resolve()
    path = (root / rel).resolve()
    if root_r not in path.parents:
        raise ManifestError(f"path {rel!r} escapes dataset directory")
    return path


def read_manifest(root: str | Path) -> Manifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise ManifestError(f"missing manifest: {path}")
    raw = path.read_bytes()
    text = raw.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise ManifestError(f"malformed manifest JSON at byte {offset}: {exc.msg}") from None
    try:
        items = []
        for rec in doc["items"]:
            img_path = _resolve(root, rec["png_path"])
            if not img_path.is_file():
                raise ManifestError(f"missing image file: {rec['png_path']}")
            with Image.open(img_path) as im:
                pixels = np.asarray(im.convert("L"), dtype=np.uint8).copy()
            items.append(Item(**{k: rec[k] for k in ("png_path", "prompt", "role", "object",
                                                     "transform", "severity", "seed")},
                              pixels=pixels))
        return Manifest(size=doc["size"], seed=doc["seed"], vocabulary=doc["vocabulary"],
                        objects=doc["objects"], physics=doc["physics"], items=items,
                        version=doc["version"])
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"manifest schema violation: {exc!r}") from None


def manifest_hash(root: str | Path) -> str:
    return hashlib.sha256((Path(root) / "manifest.json").read_bytes()).hexdigest()


@dataclass
class ConceptDataset:
    target: str
    physics: str
    object_images: np.ndarray
    object_prompts: list[str]
    physics_images: np.ndarray
    physics_prompts: list[str]
    physics_objects: list[str]
    anchor_prompt: str = ANCHOR_PROMPT

    def tokens(self, vocab: Vocabulary) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(object tokens, physics tokens, anchor tokens)."""
        return (np.stack([tokenize(p, vocab) for p in self.object_prompts]),
                np.stack([tokenize(p, vocab) for p in self.physics_prompts]),
                tokenize(self.anchor_prompt, vocab))


def build_concept_dataset(target: str, physics: str, rng: np.random.Generator,
                          manifest: Manifest | None = None, n_object: int = 4,
                          d: int = 3) -> ConceptDataset:
    """Object set for ``target`` plus ``d`` cross-object images under ``physics``.

    Images come from ``manifest`` when given, otherwise they are rendered and
    quantized here.
    """
    objects = list(manifest.objects) if manifest is not None else list(OBJECTS)
    if target not in objects:
        raise DataError(f"unknown target object {target!r}")
    if physics not in PHYSICS:
        raise DataError(f"unknown physics concept {physics!r}")
    if not 2 <= n_object <= 5:
        raise DataError("object sets hold 2 to 5 images")
    others = [o for o in objects if o != target]
    if len(others) < d:
        raise DataError(f"need {d} objects besides {target!r}, have {len(others)}")
    chosen = [others[i] for i in sorted(rng.choice(len(others), size=d, replace=False))]

    if manifest is not None:
        pool = manifest.select(target, "none")
        if len(pool) < n_object:
            raise DataError(f"corpus has only {len(pool)} clean images of {target!r}")
        obj_imgs = [pool[i].image for i in rng.choice(len(pool), size=n_object, replace=False)]
        phys_imgs = []
        for o in chosen:
            cands = manifest.select(o, physics)
            if not cands:
                raise DataError(f"corpus has no {physics!r} images of {o!r}")
            phys_imgs.append(cands[int(rng.integers(len(cands)))].image)
    else:
        base = int(rng.integers(2 ** 31))
        obj_imgs = [from_uint8(to_uint8(render_corpus_item(target, "none", i, base, 16, 0.2)[0]))
                    for i in range(n_object)]
        phys_imgs = [from_uint8(to_uint8(render_corpus_item(o, physics, 100 + i, base, 16, 0.2)[0]))
                     for i, o in enumerate(chosen)]
    return ConceptDataset(
        target=target, physics=physics,
        object_images=np.stack(obj_imgs), object_prompts=[object_prompt(target)] * n_object,
        physics_images=np.stack(phys_imgs), physics_prompts=[physics_prompt(o) for o in chosen],
        physics_objects=chosen)


def grid_arrays(manifest: Manifest) -> tuple[np.ndarray, list[Item]]:
    return np.stack([it.image for it in manifest.items]), manifest.items


def tokenize_all(prompts: Sequence[str], vocab: Vocabulary) -> np.ndarray:
    return np.stack([tokenize(p, vocab) for p in prompts])
