import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phycustom.dataset import (ANCHOR_PROMPT, ObjectSpec, PhysicsTransform, apply_physics,
                               build_concept_dataset, foreground_count, generate_corpus,
                               intensity_mass, rasterize_object, read_manifest, write_manifest)
from phycustom.diffusion import to_uint8
from phycustom.errors import DataError, ManifestError
from phycustom.textencoder import OBJECTS, PHYSICS, Vocabulary, tokenize


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(n_objects=3, per_cell=2, seed=5, workers=1)


def test_circle_is_flip_symmetric_and_deterministic():
    img = rasterize_object(ObjectSpec("circle", scale=0.8))
    assert img.shape == (16, 16)
    assert np.abs(img - img[:, ::-1]).max() < 1e-6
    assert img.min() == pytest.approx(-1.0) and img.max() > 0.9
    assert rasterize_object(ObjectSpec("circle", scale=0.8)).tobytes() == img.tobytes()


def test_rasterize_errors():
    with pytest.raises(DataError):
        rasterize_object(ObjectSpec("circle", scale=0.0))
    with pytest.raises(DataError):
        rasterize_object(ObjectSpec("teapot"))


@pytest.mark.parametrize("name", OBJECTS)
def test_every_object_has_a_foreground(name):
    assert foreground_count(rasterize_object(ObjectSpec(name))) > 10


def test_dissolve_endpoints():
    img = rasterize_object(ObjectSpec("square"))
    assert np.array_equal(apply_physics(img, PhysicsTransform("dissolve", 0.0)), img)
    assert foreground_count(apply_physics(img, PhysicsTransform("dissolve", 1.0))) == 0


def test_expand_grows_the_default_circle():
    img = rasterize_object(ObjectSpec("circle"))
    out = apply_physics(img, PhysicsTransform("expand", 0.5))
    assert foreground_count(out) > foreground_count(img)


def test_transform_errors():
    img = rasterize_object(ObjectSpec("circle"))
    with pytest.raises(DataError):
        apply_physics(img, PhysicsTransform("freeze"))
    with pytest.raises(DataError):
        apply_physics(img, PhysicsTransform("melt", 1.5))
    with pytest.raises(DataError):
        apply_physics(img[0], PhysicsTransform("melt"))


@settings(max_examples=15)
@given(st.sampled_from(PHYSICS), st.floats(0, 1), st.integers(0, 2**31))
def test_transforms_are_deterministic_and_clamped(name, severity, seed):
    img = rasterize_object(ObjectSpec("star"))
    a = apply_physics(img, PhysicsTransform(name, severity, seed))
    b = apply_physics(img, PhysicsTransform(name, severity, seed))
    assert a.tobytes() == b.tobytes()
    assert a.min() >= -1.0 and a.max() <= 1.0


@settings(max_examples=15)
@given(st.sampled_from(OBJECTS), st.floats(0, 1), st.integers(0, 1000))
def test_melt_conserves_mass(name, severity, seed):
    img = rasterize_object(ObjectSpec(name, scale=0.6))
    out = apply_physics(img, PhysicsTransform("melt", severity, seed))
    assert intensity_mass(out) == pytest.approx(intensity_mass(img), rel=0.01)


def test_melt_moves_mass_down():
    img = rasterize_object(ObjectSpec("square", scale=0.6))
    out = apply_physics(img, PhysicsTransform("melt", 0.8))
    rows = np.arange(16)[:, None]
    centroid = lambda x: float(((x + 1) / 2 * rows).sum() / ((x + 1) / 2).sum())
    assert centroid(out) > centroid(img)


@pytest.mark.parametrize("severity", [0.2, 0.5, 0.8])
def test_dissolve_survival_fraction(severity):
    img = rasterize_object(ObjectSpec("square", scale=0.9))
    n0 = foreground_count(img)
    frac = np.mean([foreground_count(apply_physics(img, PhysicsTransform("dissolve", severity, s))) / n0
                    for s in range(200)])
    assert frac == pytest.approx(1 - severity, abs=0.05)


def test_corpus_does_not_depend_on_worker_count():
    a = generate_corpus(n_objects=2, per_cell=2, seed=1, workers=1)
    b = generate_corpus(n_objects=2, per_cell=2, seed=1, workers=4)
    assert [it.record() for it in a.items] == [it.record() for it in b.items]
    assert all(x.pixels.tobytes() == y.pixels.tobytes() for x, y in zip(a.items, b.items))
    assert len(a.items) == 2 * 7 * 2


def test_manifest_round_trip(tmp_path, small_corpus):
    write_manifest(tmp_path, small_corpus)
    back = read_manifest(tmp_path)
    assert back.document() == small_corpus.document()
    for x, y in zip(small_corpus.items, back.items):
        assert x.pixels.tobytes() == y.pixels.tobytes()
    # quantization happens once: re-encoding the read pixels is a fixed point
    assert to_uint8(back.items[5].image).tobytes() == back.items[5].pixels.tobytes()


def test_corrupt_json_names_byte_offset(tmp_path, small_corpus):
    write_manifest(tmp_path, small_corpus)
    path = tmp_path / "manifest.json"
    text = path.read_text()
    path.write_text(text[:30] + "}" + text[30:])
    with pytest.raises(ManifestError, match="byte 30"):
        read_manifest(tmp_path)


def test_path_escape_and_missing_files(tmp_path, small_corpus):
    write_manifest(tmp_path, small_corpus)
    path = tmp_path / "manifest.json"
    doc = json.loads(path.read_text())
    doc["items"][0]["png_path"] = "../outside.png"
    path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match="escapes"):
        read_manifest(tmp_path)
    doc["items"][0]["png_path"] = "images/missing.png"
    path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match="missing image"):
        read_manifest(tmp_path)
    path.unlink()
    with pytest.raises(ManifestError, match="missing manifest"):
        read_manifest(tmp_path)


@pytest.mark.parametrize("use_corpus", [False, True])
def test_concept_dataset_invariants(use_corpus):
    manifest = generate_corpus(n_objects=5, per_cell=4, workers=1) if use_corpus else None
    ds = build_concept_dataset("circle", "melt", np.random.default_rng(0), manifest)
    assert "circle" not in ds.physics_objects and len(ds.physics_objects) == 3
    assert ds.object_images.shape == (4, 16, 16) and ds.physics_images.shape == (3, 16, 16)
    assert ds.object_prompts == ["a photo of [O] circle"] * 4
    assert ds.physics_prompts == [f"a photo of [V] {o}" for o in ds.physics_objects]
    vocab = Vocabulary.default()
    anchor = tokenize(ANCHOR_PROMPT, vocab)
    assert [vocab.tokens[i] for i in anchor[:5]] == ["a", "photo", "of", "[V]", "object"]


def test_concept_dataset_errors():
    r = np.random.default_rng(0)
    with pytest.raises(DataError):
        build_concept_dataset("circle", "freeze", r)
    with pytest.raises(DataError):
        build_concept_dataset("teapot", "melt", r)
    few = generate_corpus(n_objects=3, per_cell=4, workers=1)
    with pytest.raises(DataError, match="need 3 objects"):
        build_concept_dataset("circle", "melt", r, few)
