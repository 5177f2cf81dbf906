import math

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from sfd.encoders import init_text_embedder
from sfd.errors import ConfigError, ShapeError
from sfd.text_disc import (EPS, PromptPair, cosine_pair, init_prompt_pair, loss_tg_d, loss_tg_g, relative_score,
                           score_embeddings)

finite = st.floats(-1e6, 1e6, allow_nan=False)


def _t(*v):
    return torch.tensor(v, dtype=torch.float64)


def test_cosine_closed_forms():
    sp, sm = cosine_pair(_t(1, 0), (_t(1, 0), _t(0, 1)))
    assert (sp.item(), sm.item()) == (1.0, 0.0)
    sp, sm = cosine_pair(_t(1, 1), (_t(1, 0), _t(0, 1)))
    assert sp.item() == pytest.approx(0.70711, abs=1e-5) and sm.item() == pytest.approx(0.70711, abs=1e-5)
    a = cosine_pair(_t(0.3, -2.0), (_t(1, 2), _t(-1, 0.5)))
    b = cosine_pair(10 * _t(0.3, -2.0), (_t(1, 2), _t(-1, 0.5)))
    assert torch.allclose(torch.stack(a), torch.stack(b), atol=1e-15)


def test_cosine_errors():
    with pytest.raises(ValueError):
        cosine_pair(_t(0, 0), (_t(1, 0), _t(0, 1)))
    with pytest.raises(ValueError):
        cosine_pair(_t(1, 0), (_t(0, 0), _t(0, 1)))
    with pytest.raises(ShapeError):
        cosine_pair(_t(1, 0, 0), (_t(1, 0), _t(0, 1)))


def test_relative_score_closed_forms():
    assert relative_score(0.3, 0.3).item() == 0.5
    e = math.e / (math.e + 1)
    assert relative_score(1.0, 0.0).item() == pytest.approx(0.731059, abs=1e-6)
    assert relative_score(1.0, 0.0).item() == pytest.approx(e, abs=1e-12)
    assert relative_score(0.5, -0.5).item() == pytest.approx(e, abs=1e-12)


@given(finite, finite)
def test_relative_score_complement(a, b):
    assert (relative_score(a, b) + relative_score(b, a)).item() == pytest.approx(1.0, abs=1e-12)


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-50, 50))
def test_relative_score_shift_invariant(a, b, c):
    assert relative_score(a + c, b + c).item() == pytest.approx(relative_score(a, b).item(), abs=1e-9)


@given(st.floats(1e-3, 1e3))
def test_score_scale_invariance(c):
    f = torch.randn(8, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    pair = (torch.ones(8, dtype=torch.float64), torch.arange(8, dtype=torch.float64))
    a = relative_score(*cosine_pair(f, pair))
    b = relative_score(*cosine_pair(c * f, pair))
    assert abs(a.item() - b.item()) <= 1e-9


def test_tg_loss_closed_forms():
    h = torch.full((5,), 0.5)
    assert loss_tg_d(h, h).item() == pytest.approx(-1.386294, abs=1e-6)
    assert loss_tg_g(h, h).item() == pytest.approx(-1.386294, abs=1e-6)
    assert loss_tg_d(_t(0.731059), _t(0.268941)).item() == pytest.approx(-2.62652, abs=1e-5)
    assert loss_tg_g(_t(0.9), _t(0.9)).item() == pytest.approx(-2.40795, abs=1e-5)


def test_tg_loss_clamped_endpoints():
    one, zero = _t(1.0), _t(0.0)
    v = loss_tg_d(zero, one)
    assert torch.isfinite(v)
    assert v.item() == pytest.approx(2 * math.log1p(-EPS), abs=1e-12)
    assert torch.isfinite(loss_tg_d(one, zero))
    # 1 - (1 - EPS) is not exact in binary, hence the looser tolerance
    assert loss_tg_d(one, zero).item() == pytest.approx(2 * math.log(EPS), rel=1e-8)
    assert torch.isfinite(loss_tg_g(zero, one)) and torch.isfinite(loss_tg_g(one, zero))


def test_tg_g_derivative_at_half():
    s = torch.tensor(0.5, dtype=torch.float64, requires_grad=True)
    hr = torch.tensor(0.5, dtype=torch.float64, requires_grad=True)
    loss_tg_g(hr, s).backward()
    assert s.grad.item() == pytest.approx(-2.0, abs=1e-12)
    h = 1e-6
    fd = (loss_tg_g(_t(0.5), _t(0.5 + h)) - loss_tg_g(_t(0.5), _t(0.5 - h))).item() / (2 * h)
    assert fd == pytest.approx(-2.0, rel=1e-6)
    assert hr.grad is None or hr.grad.item() == 0


def test_tg_d_gradient_direction():
    sh = torch.tensor([0.5], requires_grad=True)
    ss = torch.tensor([0.5], requires_grad=True)
    loss_tg_d(sh, ss).backward()
    assert sh.grad.item() < 0 < ss.grad.item()


def test_prompt_pair_init_modes():
    rnd = init_prompt_pair(16, seed=3)
    assert rnd.init_mode == "random_unit"
    assert torch.allclose(rnd.positive.norm(), torch.tensor(1.0))
    assert torch.equal(init_prompt_pair(16, seed=3).positive, rnd.positive)
    txt = init_text_embedder(16, seed=0)
    tp = init_prompt_pair(16, text_embedder=txt)
    assert tp.init_mode == "from_text"
    assert torch.allclose(tp.positive, txt("Good photo"))
    with pytest.raises(ShapeError):
        init_prompt_pair(32, text_embedder=txt)


def test_token_parameterization_learns_through_frozen_tower():
    txt = init_text_embedder(16, seed=0)
    pp = init_prompt_pair(16, text_embedder=txt, parameterization="token")
    pos, neg = pp.features()
    assert torch.allclose(pos, txt("Good photo"), atol=1e-6)
    s = score_embeddings(torch.randn(4, 16), pp)
    loss_tg_d(s[:2], s[2:]).backward()
    assert pp.positive.grad is not None and pp.positive.grad.abs().sum() > 0
    assert all(p.grad is None for p in txt.parameters())
    assert "text_embedder" not in dict(pp.named_modules())
    with pytest.raises(ConfigError):
        init_prompt_pair(16, parameterization="token")


def test_centering_is_a_running_mean():
    pp = init_prompt_pair(4, seed=0)
    a, b = torch.randn(3, 4), torch.randn(5, 4)
    pp.update_center(a)
    pp.update_center(b)
    assert torch.allclose(pp.embedding_center, torch.cat([a, b]).mean(0), atol=1e-6)
    assert int(pp.center_count) == 8
    f = torch.randn(2, 4)
    assert torch.allclose(score_embeddings(f, pp), relative_score(*cosine_pair(f - pp.embedding_center, pp)))
    off = init_prompt_pair(4, seed=0, center_embeddings=False)
    off.update_center(a)
    assert int(off.center_count) == 0
    assert torch.equal(score_embeddings(f, off), relative_score(*cosine_pair(f, off)))


def test_tg_g_gradient_wrt_embedding_matches_finite_differences():
    g = torch.Generator().manual_seed(0)
    pair = (torch.randn(12, dtype=torch.float64, generator=g), torch.randn(12, dtype=torch.float64, generator=g))
    f_hr = torch.randn(3, 12, dtype=torch.float64, generator=g)
    f_sr = torch.randn(3, 12, dtype=torch.float64, generator=g, requires_grad=True)

    def loss(x):
        return loss_tg_g(relative_score(*cosine_pair(f_hr, pair)), relative_score(*cosine_pair(x, pair)))

    loss(f_sr).backward()
    h = 1e-6
    for i in range(3):
        for j in range(12):
            e = torch.zeros_like(f_sr)
            e[i, j] = h
            fd = ((loss(f_sr.detach() + e) - loss(f_sr.detach() - e)) / (2 * h)).item()
            ad = f_sr.grad[i, j].item()
            assert abs(fd - ad) <= 1e-3 * max(abs(ad), 1e-6)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8), st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_tg_losses_finite_on_unit_interval(a, b):
    n = min(len(a), len(b))
    sa, sb = _t(*a[:n]), _t(*b[:n])
    for f in (loss_tg_d, loss_tg_g):
        assert torch.isfinite(f(sa, sb))
