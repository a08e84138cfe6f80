import math

import numpy as np
import pytest

from feedloc.core import DegenerateSpan, EpisodeRecord, ShapeMismatch, Span
from feedloc.falm import (FalmConfig, FalmModel, FalmOutput, build_reference_embedding, falm_forward,
                          falm_loss)
from feedloc.labelgen import AlignmentLabels
from feedloc.tensor import autograd as ag
from feedloc.tensor.autograd import Tensor
from feedloc.tensor.gradcheck import grad_errors

TINY = dict(d_in=6, d_model=8, heads=2, t_q_layers=1, t_v_layers=1, t_m_layers=1, head_hidden=6)


def _episode(rng, m=8, d=6):
    return EpisodeRecord("e0", tuple(("x",) for _ in range(m)), rng.normal(size=(m, d)))


def _inputs(rng, m=6, d=6):
    return (rng.normal(size=(m, d)).astype(np.float32), rng.normal(size=(3, d)).astype(np.float32),
            rng.normal(size=(4, d)).astype(np.float32), rng.normal(size=(3, d)).astype(np.float32))


def _labels(rng, m, c=True, k=True, t=True):
    b = lambda: rng.uniform(size=m) < 0.5  # noqa: E731
    return AlignmentLabels(s_c=rng.uniform(size=m), s_k=rng.uniform(size=m), l_c=b(), l_k=b(),
                           l_t=b(), l=b(), has_contains=c, has_not_contains=k, has_temporal=t)


# --- reference embedding ---------------------------------------------------

def test_single_clip_ref_rows_identical(rng):
    ep = _episode(rng)
    e_r = build_reference_embedding(ep, Span(3, 4))
    assert np.array_equal(e_r[0], e_r[1]) and np.allclose(e_r[2], e_r[0])


def test_ref_rows_definition(rng):
    ep = _episode(rng)
    e_r = build_reference_embedding(ep, Span(2, 5))
    f = ep.features
    np.testing.assert_allclose(e_r, np.stack([f[2], f[4], f[2:5].mean(0)]), atol=1e-6)


def test_ref_mean_loop_oracle(rng):
    ep = _episode(rng, m=20)
    for _ in range(10):
        s = int(rng.integers(0, 19))
        e = int(rng.integers(s + 1, 21))
        acc = [0.0] * ep.features.shape[1]
        for i in range(s, e):
            for j in range(len(acc)):
                acc[j] += ep.features[i, j]
        mean = [a / (e - s) for a in acc]
        np.testing.assert_allclose(build_reference_embedding(ep, Span(s, e))[2], mean, atol=1e-6)


def test_ref_degenerate(rng):
    with pytest.raises(DegenerateSpan):
        build_reference_embedding(_episode(rng), Span(7.3, 7.7))


# --- forward ---------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        FalmConfig(d_model=10, heads=4)
    with pytest.raises(ValueError):
        FalmConfig(lam_c=-0.1)


@pytest.mark.parametrize("m", [1, 6, 17])
def test_output_shapes_and_range(m, rng):
    model = FalmModel(FalmConfig(**TINY))
    e_v, e_q, e_f, e_r = _inputs(rng, m=m)
    out = falm_forward(model, 100 * e_v, e_q, -100 * e_f, e_r, Span(0, 1))
    for v in (out.p, out.p_c, out.p_k, out.p_t):
        assert v.shape == (m,)
        assert np.all((v.data > 0) & (v.data < 1))
    assert out.e_a.shape == (m, 8)


def test_forward_deterministic(rng):
    ins = _inputs(rng)
    a = falm_forward(FalmModel(FalmConfig(**TINY, seed=5)), *ins).p.data
    b = falm_forward(FalmModel(FalmConfig(**TINY, seed=5)), *ins).p.data
    c = falm_forward(FalmModel(FalmConfig(**TINY, seed=6)), *ins).p.data
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()


def test_forward_shape_errors(rng):
    model = FalmModel(FalmConfig(**TINY))
    e_v, e_q, e_f, e_r = _inputs(rng)
    with pytest.raises(ShapeMismatch):
        falm_forward(model, e_v[:, :5], e_q, e_f, e_r)
    with pytest.raises(ShapeMismatch):
        falm_forward(model, e_v, e_q[:, :5], e_f, e_r)
    with pytest.raises(ShapeMismatch):
        falm_forward(model, e_v[:0], e_q, e_f, e_r)


def test_permutation_equivariance_without_positions(rng):
    cfg = FalmConfig(**TINY, positional=False, ref_positions=False)
    model = FalmModel(cfg)
    e_v, e_q, e_f, e_r = _inputs(rng, m=7)
    perm = rng.permutation(7)
    with ag.precision(np.float64):
        model64 = FalmModel(cfg)
        base = falm_forward(model64, e_v, e_q, e_f, e_r)
        shuffled = falm_forward(model64, e_v[perm], e_q, e_f, e_r)
    for a, b in ((base.p, shuffled.p), (base.p_t, shuffled.p_t), (base.e_a, shuffled.e_a)):
        np.testing.assert_allclose(a.data[perm], b.data, atol=1e-10)
    assert model.num_parameters() == model64.num_parameters()


def test_positions_break_equivariance(rng):
    model = FalmModel(FalmConfig(**TINY))
    e_v, e_q, e_f, e_r = _inputs(rng, m=7)
    perm = np.roll(np.arange(7), 1)
    a = falm_forward(model, e_v, e_q, e_f, e_r).p.data
    b = falm_forward(model, e_v[perm], e_q, e_f, e_r).p.data
    assert not np.allclose(a[perm], b, atol=1e-6)


# --- loss ------------------------------------------------------------------

def _out_from(p, p_c, p_k, p_t):
    m = len(p)
    return FalmOutput(Tensor(p), Tensor(p_c), Tensor(p_k), Tensor(p_t), Tensor(np.zeros((m, 2))))


def test_perfect_predictions_near_zero(rng):
    lb = _labels(rng, 9)
    out = _out_from(lb.l.astype(float), lb.s_c, lb.s_k, lb.l_t.astype(float))
    assert falm_loss(out, lb).item() < 1e-5


def _bce(p, t):
    p = min(max(p, 1e-7), 1 - 1e-7)
    return -(t * math.log(p) + (1 - t) * math.log(1 - p))


def _oracle(p, p_c, p_k, p_t, lb, lam=(1.0, 0.5, 0.25, 0.25)):
    m = len(p)
    total = lam[0] * sum(_bce(p[i], float(lb.l[i])) for i in range(m)) / m
    if lb.has_temporal:
        total += lam[1] * sum(_bce(p_t[i], float(lb.l_t[i])) for i in range(m)) / m
    if lb.has_contains:
        total += lam[2] * sum((p_c[i] - lb.s_c[i]) ** 2 for i in range(m)) / m
    if lb.has_not_contains:
        total += lam[3] * sum((p_k[i] - lb.s_k[i]) ** 2 for i in range(m)) / m
    return total


@pytest.mark.parametrize("flags", [(True, True, True), (False, False, True), (True, False, False),
                                   (False, True, True)])
def test_loss_component_oracle(flags, rng):
    m = 11
    lb = _labels(rng, m, *flags)
    preds = [rng.uniform(0.02, 0.98, m) for _ in range(4)]
    with ag.precision(np.float64):
        got = falm_loss(_out_from(*preds), lb).item()
    assert got == pytest.approx(_oracle(*preds, lb), abs=1e-6)


def test_temporal_only_masks_clause_terms(rng):
    m = 8
    lb = _labels(rng, m, c=False, k=False, t=True)
    p, p_t = rng.uniform(0.1, 0.9, m), rng.uniform(0.1, 0.9, m)
    with ag.precision(np.float64):
        a = falm_loss(_out_from(p, rng.uniform(size=m), rng.uniform(size=m), p_t), lb).item()
        b = falm_loss(_out_from(p, rng.uniform(size=m), rng.uniform(size=m), p_t), lb).item()
    expect = sum(_bce(p[i], lb.l[i]) for i in range(m)) / m + 0.5 * sum(
        _bce(p_t[i], lb.l_t[i]) for i in range(m)) / m
    assert a == pytest.approx(expect, abs=1e-9) and a == pytest.approx(b, abs=1e-12)


def test_loss_custom_weights(rng):
    lb = _labels(rng, 5)
    preds = [rng.uniform(0.1, 0.9, 5) for _ in range(4)]
    cfg = FalmConfig(lam=0.0, lam_t=2.0, lam_c=0.0, lam_n=1.0)
    with ag.precision(np.float64):
        got = falm_loss(_out_from(*preds), lb, cfg).item()
    assert got == pytest.approx(_oracle(*preds, lb, lam=(0.0, 2.0, 0.0, 1.0)), abs=1e-6)


def test_loss_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        falm_loss(_out_from(*[np.full(4, 0.5)] * 4), _labels(rng, 5))


def test_gradcheck_all_parameters(rng):
    with ag.precision(np.float64):
        cfg = FalmConfig(**TINY, ref_positions=True, seed=3)
        model = FalmModel(cfg)
        e_v, e_q, e_f, e_r = _inputs(rng, m=6)
        lb = _labels(rng, 6)
        loss = lambda: falm_loss(falm_forward(model, e_v, e_q, e_f, e_r, Span(1, 3)), lb, cfg)  # noqa: E731
        errs = grad_errors(loss, model.parameters())
    assert len(errs) == len(model.parameters()) and max(errs) < 1e-3
