import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phycustom import tensorcore as tc
from phycustom.denoiser import DenoiserConfig, init_params
from phycustom.diffusion import DiffusionSchedule, q_sample
from phycustom.errors import TrainingError
from phycustom.losses import (LossError, LossWeights, decouple_direction, decouple_value,
                              distance_variance, loss_decouple, loss_isometric, loss_mse,
                              mse_against, total_objective)
from phycustom.textencoder import Vocabulary, init_params as init_text, tokenize

from conftest import central_diff, rel_err

VOCAB = Vocabulary.default()


def test_mse_examples():
    eps = np.random.default_rng(0).standard_normal((3, 4, 4)).astype(np.float32)
    assert mse_against(tc.tensor(eps), eps).item() == 0.0
    assert mse_against(tc.tensor(eps + 1.0), eps).item() == pytest.approx(1.0, rel=1e-5)


def test_mse_of_zero_model_is_noise_variance():
    r = np.random.default_rng(1)
    cfg = DenoiserConfig()
    params = init_params(cfg, r)
    for n, t in init_text(len(VOCAB), r).items():
        params[n] = t
    n = 256
    batch = q_sample(np.zeros((n, 16, 16)), r.integers(0, 200, n), r.standard_normal((n, 16, 16)),
                     DiffusionSchedule(), np.zeros((n, 8), dtype=np.int64))
    # 65536 standard normal squares: mean 1, sd about 0.0055
    assert loss_mse(batch, params, cfg).item() == pytest.approx(1.0, abs=0.03)


def test_isometric_on_constructed_distances():
    d = [tc.tensor(1.0), tc.tensor(3.0)]
    assert distance_variance(d).item() == pytest.approx(1.0)
    assert distance_variance([tc.tensor(2.5)]).item() == 0.0
    with pytest.raises(LossError):
        distance_variance([])


@given(st.lists(st.floats(0, 10), min_size=1, max_size=5), st.randoms(use_true_random=False))
def test_isometric_is_permutation_invariant(values, rnd):
    shuffled = values[:]
    rnd.shuffle(shuffled)
    a = distance_variance([tc.tensor(v, dtype=np.float64) for v in values]).item()
    b = distance_variance([tc.tensor(v, dtype=np.float64) for v in shuffled]).item()
    assert a == pytest.approx(b, abs=1e-9)
    assert a >= 0


def test_isometric_zero_for_equal_distances_on_a_sphere():
    r = np.random.default_rng(2)
    dirs = r.standard_normal((4, 8 * 32))
    pts = 2.5 * dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    anchor = tc.tensor(np.zeros(8 * 32), dtype=np.float64)
    from phycustom.textencoder import embedding_distance
    dist = [embedding_distance(anchor, tc.tensor(p, dtype=np.float64)) for p in pts]
    assert distance_variance(dist).item() < 1e-7


def test_isometric_single_prompt_and_gradient_flow():
    params = init_text(len(VOCAB), np.random.default_rng(3))
    anchor = tokenize("a photo of [V] object", VOCAB)
    one = tokenize("a photo of [V] circle", VOCAB)[None]
    assert loss_isometric(anchor, one, params).item() == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(LossError):
        loss_isometric(anchor, one[:0], params)
    for t in params.values():
        t.requires_grad = True
    prompts = np.stack([tokenize(f"a photo of [V] {o}", VOCAB) for o in ("circle", "star", "gear")])
    loss = loss_isometric(anchor, prompts, params)
    g = tc.backward(loss, params)
    assert np.abs(g["text.tok_emb"].data[VOCAB.id("object")]).sum() > 0  # anchor side
    assert np.abs(g["text.tok_emb"].data[VOCAB.id("gear")]).sum() > 0  # prompt side


def test_isometric_gradient_matches_central_differences():
    with tc.precision(np.float64):
        params = init_text(len(VOCAB), np.random.default_rng(4))
        anchor = tokenize("a photo of [V] object", VOCAB)
        prompts = np.stack([tokenize(f"a photo of [V] {o}", VOCAB) for o in ("ring", "cross", "star")])
        name = "text.mlp.fc2.weight"
        p = params[name]
        p.requires_grad = True
        g = tc.backward(loss_isometric(anchor, prompts, params), {name: p})[name].data.ravel()
        x0 = p.data.ravel().copy()

        def f(x):
            p.data = x.reshape(p.shape)
            with tc.no_grad():
                return loss_isometric(anchor, prompts, params).item()
        num = central_diff(f, x0)
        p.data = x0.reshape(p.shape)
    assert rel_err(g, num) < 1e-3


def test_decouple_examples():
    for form in ("cos", "cos_sq", "cos_abs"):
        assert loss_decouple([1, 0], [0, 1], form)[0] == 0.0
        assert loss_decouple([1, 2], [1, 2], form)[0] == pytest.approx(1.0)
    assert loss_decouple([1, 0], [-1, 0], "cos") == (-1.0, -1.0)
    assert loss_decouple([1, 0], [-1, 0], "cos_sq") == (1.0, -1.0)
    assert loss_decouple([1, 0], [-1, 0], "cos_abs") == (1.0, -1.0)
    with pytest.raises(tc.DegenerateInputError):
        loss_decouple([0, 0], [1, 0])
    with pytest.raises(LossError):
        decouple_value(0.5, "cos3")


@given(arrays(np.float64, 5, elements=st.floats(-3, 3)), arrays(np.float64, 5, elements=st.floats(-3, 3)),
       st.floats(0.01, 100))
def test_cosine_form_invariant_to_positive_rescaling(u, v, k):
    if np.linalg.norm(u) < 1e-3 or np.linalg.norm(v) < 1e-3:
        return
    assert loss_decouple(u * k, v, "cos")[0] == pytest.approx(loss_decouple(u, v, "cos")[0], abs=1e-9)


@pytest.mark.parametrize("form", ["cos", "cos_sq", "cos_abs"])
def test_decouple_direction_matches_numeric_derivative(form):
    r = np.random.default_rng(5)
    u, v = r.standard_normal(7), r.standard_normal(7)
    d_u, d_v = decouple_direction(u, v, form)
    num_u = central_diff(lambda x: decouple_value(tc.cosine_similarity(x, v), form), u, 1e-6)
    num_v = central_diff(lambda x: decouple_value(tc.cosine_similarity(u, x), form), v, 1e-6)
    assert rel_err(d_u, num_u) < 1e-6 and rel_err(d_v, num_v) < 1e-6


def test_total_objective_examples():
    assert total_objective(0.5, 0.5, 0.1, 0.2, LossWeights()) == pytest.approx(1.3)
    assert total_objective(0.5, 0.25, 9.0, 9.0, LossWeights(0.0, 0.0)) == 0.75
    assert LossWeights() == LossWeights(1.0, 1.0, "cos_sq")
    with pytest.raises(TrainingError, match="L_isometric"):
        total_objective(0.1, 0.1, float("nan"), 0.0, LossWeights())
    with pytest.raises(LossError):
        LossWeights(lambda_iso=-1)
    with pytest.raises(LossError):
        LossWeights(decouple_form="dot")
