import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from deglass import losses as L

D = torch.float64


def full(v, shape=(2, 1, 6, 6)):
    return torch.full(shape, float(v), dtype=D)


def test_lsgan_examples():
    assert L.lsgan_d_loss(full(1), full(0)).item() == 0.0
    assert L.lsgan_d_loss(full(0.5), full(0.5)).item() == pytest.approx(0.5, abs=1e-12)
    assert L.lsgan_d_loss(full(0), full(1)).item() == pytest.approx(2.0, abs=1e-12)
    assert L.lsgan_g_loss(full(1)).item() == 0.0
    assert L.lsgan_g_loss(full(0)).item() == 1.0
    assert L.lsgan_g_loss(full(0.25)).item() == pytest.approx(0.5625, abs=1e-12)


def test_lsgan_rejects_non_finite():
    with pytest.raises(ValueError):
        L.lsgan_d_loss(full(float("nan")), full(0))


def test_masked_examples(rng):
    x = torch.from_numpy(rng.normal(size=(2, 3, 4, 4)))
    assert torch.equal(L.masked(x, torch.ones(2, 4, 4, dtype=D)), x)
    assert torch.equal(L.masked(x, torch.zeros(2, 1, 4, 4, dtype=D)), torch.zeros_like(x))
    m = torch.from_numpy((rng.random((2, 1, 4, 4)) < 0.5).astype(np.float64))
    assert torch.equal(L.masked(L.masked(x, m), m), L.masked(x, m))


def test_l1_examples(rng):
    y = torch.from_numpy(rng.normal(size=(2, 3, 4, 4)))
    assert L.l1_loss(y, y).item() == 0.0
    assert L.l1_loss(y + 0.5, y).item() == pytest.approx(0.5, abs=1e-12)
    assert L.l1_local_loss(y + 3.0, y, torch.zeros(2, 1, 4, 4, dtype=D)).item() == 0.0


def test_seg_bce_examples():
    m = (torch.rand(2, 2, 5, 5) < 0.5).to(D)
    assert 0 <= L.seg_bce(m, m).item() <= -math.log(1 - 1e-7) + 1e-12
    assert L.seg_bce(full(0.5), full(1)).item() == pytest.approx(math.log(2), abs=1e-12)
    assert L.seg_bce(full(0.5), full(0)).item() == pytest.approx(math.log(2), abs=1e-12)


def test_id_examples(rng):
    e = torch.from_numpy(rng.normal(size=(3, 512)))
    assert L.id_mse(e, e).item() == 0.0
    assert L.id_mse(e + 0.1, e).item() == pytest.approx(0.01, abs=1e-12)
    f = torch.from_numpy(rng.normal(size=(3, 512)))
    assert L.id_mse(2.5 * e, 2.5 * f).item() == pytest.approx(6.25 * L.id_mse(e, f).item(), rel=1e-12)
    assert L.id_norm(e + 0.1, e).item() == pytest.approx(0.1 * math.sqrt(512), abs=1e-9)


def test_total_examples():
    zero = {k: 0.0 for k in L.TERM_NAMES}
    assert L.total_g_loss(zero).total == 0.0
    ones = {k: 1.0 for k in L.TERM_NAMES}
    assert L.total_g_loss(ones).total == pytest.approx(310.0, abs=1e-12)
    no_ie = L.LossWeights(id=0.0)
    assert L.total_g_loss({**ones, "id": 123.0}, no_ie).total == pytest.approx(305.0, abs=1e-12)


def test_weights_validated():
    with pytest.raises(ValueError):
        L.LossWeights(seg=-1.0)


tensors = st.integers(0, 2**31 - 1).map(lambda s: np.random.default_rng(s))


@given(g=tensors)
def test_losses_non_negative(g):
    a = torch.from_numpy(g.normal(size=(2, 3, 4, 4)) * 3)
    b = torch.from_numpy(g.normal(size=(2, 3, 4, 4)) * 3)
    p = torch.from_numpy(g.random((2, 2, 4, 4)))
    m = torch.from_numpy((g.random((2, 2, 4, 4)) < 0.5).astype(np.float64))
    mg = m[:, :1]
    for v in (L.lsgan_d_loss(a, b), L.lsgan_g_loss(a), L.l1_loss(a, b), L.l1_local_loss(a, b, mg),
              L.seg_bce(p, m), L.id_mse(a, b), L.id_norm(a, b)):
        assert v.item() >= 0


@given(g=tensors)
def test_local_global_consistency(g):
    a = torch.from_numpy(g.normal(size=(2, 3, 4, 4)))
    b = torch.from_numpy(g.normal(size=(2, 3, 4, 4)))
    assert L.l1_local_loss(a, b, torch.ones(2, 1, 4, 4, dtype=D)).item() == L.l1_loss(a, b).item()
    assert L.l1_local_loss(a, b, torch.zeros(2, 4, 4, dtype=D)).item() == 0.0


@given(
    terms=st.lists(st.floats(0, 100), min_size=6, max_size=6),
    weights=st.lists(st.floats(0, 300), min_size=6, max_size=6),
    i=st.integers(0, 5),
    c=st.floats(0, 10),
)
def test_total_linear_in_each_weight(terms, weights, i, c):
    names = list(L.LossWeights().to_dict())
    t = dict(zip(L.TERM_NAMES, terms))
    w0 = dict(zip(names, weights))
    base = L.total_g_loss(t, L.LossWeights(**{**w0, names[i]: 0.0})).total
    one = L.total_g_loss(t, L.LossWeights(**{**w0, names[i]: 1.0})).total
    scaled = L.total_g_loss(t, L.LossWeights(**{**w0, names[i]: c})).total
    assert scaled == pytest.approx(base + c * (one - base), rel=1e-9, abs=1e-6)
