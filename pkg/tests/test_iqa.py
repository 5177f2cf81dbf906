import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from sfd.archive import state_digest
from sfd.config import RunConfig
from sfd.errors import ConfigError, ShapeError, UndefinedCorrelationError
from sfd.generator import gaussian_blur
from sfd.iqa import (NO_TEXT_WARNING, IQAConfig, combine_scores, correlations, crop_to_multiple, input_multiple,
                     iqa_score_matrix, krcc, plcc, score_images, sfd_iqa_score, srcc, weighted_average_score)
from sfd.model import build_models


@pytest.fixture(scope="module")
def toy_model():
    return build_models(RunConfig().replace(prompts={"text_embedder": False}))


@pytest.fixture(scope="module")
def text_model():
    return build_models(RunConfig())


def _img(seed, size=64):
    return torch.rand(3, size, size, generator=torch.Generator().manual_seed(seed))


# -- closed-form cases ----------------------------------------------------------

def test_weighted_average_examples():
    assert weighted_average_score(0.6, 0.8, IQAConfig(0.5, 0.5)) == pytest.approx(0.7, abs=1e-12)
    assert weighted_average_score(0.5, 0.9, IQAConfig(0.3, 0.7)) == pytest.approx(0.78, abs=1e-12)
    assert weighted_average_score(0.123, 0.9, IQAConfig(1.0, 0.0)) == 0.123


def test_combine_scores_examples():
    s_d, mean_sig = combine_scores(torch.zeros(16, 16), 0.7)
    assert s_d == pytest.approx(0.35, abs=1e-9) and mean_sig == 0.5
    s_d, mean_sig = combine_scores(torch.tensor([[0.0, math.log(3)], [-math.log(3), 0.0]]), 0.8)
    assert mean_sig == pytest.approx(0.5, abs=1e-12)
    assert s_d == pytest.approx(0.40, abs=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=16), st.floats(1e-6, 1 - 1e-6))
def test_s_d_in_open_unit_interval(logits, s_aver):
    s_d, _ = combine_scores(torch.tensor(logits), s_aver)
    assert 0.0 < s_d < 1.0


def test_alpha_validation():
    for a in ((-0.1, 1.0), (0.0, 0.0)):
        with pytest.raises(ConfigError) as ei:
            IQAConfig(*a)
        assert ei.value.key == "iqa.alpha"


# -- model-backed scoring -------------------------------------------------------

def test_score_matrix_shape_and_determinism(toy_model):
    img = _img(0)
    a, b = iqa_score_matrix(img, toy_model), iqa_score_matrix(img, toy_model)
    assert a.shape[-2:] == (16, 16)
    assert torch.equal(a, b)
    assert not torch.equal(a, iqa_score_matrix(gaussian_blur(img[None], 2.0)[0], toy_model))


def test_crop_to_multiple(toy_model):
    m = input_multiple(toy_model)
    assert m == 32  # encoder stride 16 times the Feat-D pyramid depth factor 2
    x = torch.arange(3 * 70 * 50, dtype=torch.float32).reshape(1, 3, 70, 50)
    y = crop_to_multiple(x, m)
    assert y.shape[-2:] == (64, 32)
    assert torch.equal(y, x[..., 3:67, 9:41])
    with pytest.raises(ShapeError):
        crop_to_multiple(torch.zeros(1, 3, 16, 64), m)


def test_sfd_iqa_score_consistency(text_model):
    r = sfd_iqa_score(_img(1), text_model, IQAConfig(0.3, 0.7))
    assert r.warning is None and r.alpha == (0.3, 0.7)
    assert 0 < r.s_o < 1 and 0 < r.s_lp < 1
    assert r.s_aver == pytest.approx(0.3 * r.s_o + 0.7 * r.s_lp, abs=1e-12)
    assert r.s_d == pytest.approx(r.s_aver * r.mean_sigmoid_matrix, abs=1e-12)
    assert 0 < r.s_d < 1
    assert sfd_iqa_score(_img(1), text_model, IQAConfig(0.3, 0.7)) == r


def test_no_text_embedder_falls_back(toy_model):
    with pytest.warns(RuntimeWarning, match="no text embedder"):
        r = sfd_iqa_score(_img(2), toy_model)
    assert r.alpha == (0.0, 1.0) and r.s_o is None and r.warning == NO_TEXT_WARNING
    assert r.s_aver == r.s_lp
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        r2 = sfd_iqa_score(_img(2), toy_model, IQAConfig(0.0, 1.0))
    assert r2.warning is None and r2.s_d == r.s_d


def test_scoring_mutates_nothing(text_model):
    mods = {"encoder": text_model.encoder, "feat_d": text_model.feat_d, "lpp": text_model.lpp,
            "text": text_model.text_embedder}
    before = {k: state_digest(v) for k, v in mods.items()}
    training = {k: v.training for k, v in mods.items()}
    img = _img(3)
    img_copy = img.clone()
    score_images([img, _img(4)], text_model)
    assert {k: state_digest(v) for k, v in mods.items()} == before
    assert {k: v.training for k, v in mods.items()} == training
    assert torch.equal(img, img_copy)


def test_rejects_batches(toy_model):
    with pytest.raises(ShapeError):
        sfd_iqa_score(torch.rand(2, 3, 64, 64), toy_model)


# -- correlations ---------------------------------------------------------------

def test_correlation_examples():
    assert correlations([1, 2, 3], [2, 4, 6]) == pytest.approx({"plcc": 1.0, "srcc": 1.0, "krcc": 1.0})
    assert srcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)
    assert krcc([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(4 / 6, abs=1e-12)
    x = [0.5, 1.5, 2.5, 3.5]
    assert correlations(x, x[::-1]) == pytest.approx({"plcc": -1.0, "srcc": -1.0, "krcc": -1.0})


def _avg_ranks(v):
    return [sum(u < a for u in v) + (sum(u == a for u in v) + 1) / 2 for a in v]


def _pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def _tau_b(x, y):
    nc = nd = tx = ty = 0
    n = len(x)
    for i in range(n):
        for j in range(i + 1, n):
            dx, dy = x[i] - x[j], y[i] - y[j]
            if dx == 0 and dy == 0:
                continue
            if dx == 0:
                tx += 1
            elif dy == 0:
                ty += 1
            elif dx * dy > 0:
                nc += 1
            else:
                nd += 1
    return (nc - nd) / math.sqrt((nc + nd + tx) * (nc + nd + ty))


def test_correlations_match_brute_force_oracles():
    rng = np.random.default_rng(7)
    checked = 0
    for case in range(1000):
        n = int(rng.integers(2, 51))
        if case % 2:  # heavy ties
            x = rng.integers(0, 5, n).astype(float).tolist()
            y = rng.integers(0, 5, n).astype(float).tolist()
        else:
            x, y = rng.normal(size=n).tolist(), rng.normal(size=n).tolist()
        if len(set(x)) < 2 or len(set(y)) < 2:
            with pytest.raises(UndefinedCorrelationError):
                correlations(x, y)
            continue
        assert plcc(x, y) == pytest.approx(_pearson(x, y), abs=1e-12)
        assert srcc(x, y) == pytest.approx(_pearson(_avg_ranks(x), _avg_ranks(y)), abs=1e-12)
        assert krcc(x, y) == pytest.approx(_tau_b(x, y), abs=1e-12)
        checked += 1
    assert checked > 900


@given(st.lists(st.integers(-1000, 1000), min_size=3, max_size=30, unique=True),
       st.floats(0.1, 10), st.floats(-5, 5))
def test_invariances(ints, a, b):
    x = [v / 10 for v in ints]  # spacing keeps the monotone map strictly increasing in floats
    y = [v ** 3 - 2 * v for v in x] if len(x) % 2 else [math.sin(v) for v in x]
    if len(set(y)) < 2:
        return
    mono = [math.exp(v / 50) for v in x]  # strictly increasing map
    assert srcc(mono, y) == pytest.approx(srcc(x, y), abs=1e-12)
    assert krcc(mono, y) == pytest.approx(krcc(x, y), abs=1e-12)
    aff = [a * v + b for v in x]
    assert plcc(aff, y) == pytest.approx(plcc(x, y), abs=1e-9)


def test_correlation_errors():
    with pytest.raises(UndefinedCorrelationError):
        plcc([1, 1, 1], [1, 2, 3])
    with pytest.raises(UndefinedCorrelationError):
        krcc([1, 2, 3], [5, 5, 5])
    with pytest.raises(ValueError):
        srcc([1], [1])
    with pytest.raises(ValueError):
        plcc([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        plcc([1, float("nan")], [1, 2])
