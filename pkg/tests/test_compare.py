import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptseg.compare import concat_shots, correlation_map, flatten_features
from adaptseg.errors import ConfigurationError

D = torch.float64


def triple_loop(q, k, v):
    nq, d = q.shape
    out = []
    for i in range(nq):
        logits = [sum(float(q[i, c]) * float(k[j, c]) for c in range(d)) / math.sqrt(d) for j in range(len(k))]
        m = max(logits)
        w = [math.exp(x - m) for x in logits]
        s = sum(w)
        out.append(sum(wj / s * float(vj) for wj, vj in zip(w, v)))
    return np.array(out)


@pytest.mark.parametrize("seed", range(3))
def test_matches_triple_loop(seed):
    g = torch.Generator().manual_seed(seed)
    fq, fs = torch.randn(5, 6, 6, generator=g, dtype=D), torch.randn(5, 6, 6, generator=g, dtype=D)
    m = torch.rand(6, 6, generator=g, dtype=D)
    k, v = concat_shots([fs], [m])
    out = correlation_map(fq, k, v)
    assert out.shape == (6, 6)
    ref = triple_loop(flatten_features(fq), k, v).reshape(6, 6)
    assert np.abs(out.numpy() - ref).max() < 1e-6


def test_uniform_logits_give_mask_mean():
    k = torch.zeros(20, 4, dtype=D)
    q = torch.randn(7, 4, dtype=D)
    v = torch.rand(20, dtype=D)
    out = correlation_map(q, k, v)
    assert (out - v.mean()).abs().max() < 1e-6


def test_all_ones_values():
    g = torch.Generator().manual_seed(0)
    q, k = torch.randn(9, 3, generator=g, dtype=D), torch.randn(12, 3, generator=g, dtype=D)
    assert torch.allclose(correlation_map(q, k, torch.ones(12, dtype=D)), torch.ones(9, dtype=D))


def test_peaked_attention():
    d = 4
    k = torch.eye(d, dtype=D)
    v = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=D)
    q = 100 * k[:1]
    out = correlation_map(q, k, v)
    assert float(out[0]) == pytest.approx(float(triple_loop(q, k, v)[0]), abs=1e-4)
    assert float(out[0]) > 1 - 1e-4


def test_duplicated_shots_invariance():
    g = torch.Generator().manual_seed(1)
    fq, fs = torch.randn(8, 5, 5, generator=g, dtype=D), torch.randn(8, 5, 5, generator=g, dtype=D)
    m = (torch.rand(5, 5, generator=g) > 0.5).to(D)
    one = correlation_map(fq, *concat_shots([fs], [m]))
    two = correlation_map(fq, *concat_shots([fs, fs], [m, m]))
    assert (one - two).abs().max() < 1e-5


def test_concat_shapes_and_order():
    fs = [torch.full((3, 2, 2), float(i), dtype=D) for i in range(5)]
    ms = [torch.full((2, 2), i / 5, dtype=D) for i in range(5)]
    k, v = concat_shots(fs, ms)
    assert k.shape == (20, 3) and v.shape == (20,)
    assert torch.equal(k[:4], torch.zeros(4, 3, dtype=D))
    assert torch.equal(v[16:], torch.full((4,), 0.8, dtype=D))
    k1, _ = concat_shots(fs[:1], ms[:1])
    assert torch.equal(k1, flatten_features(fs[0]))


def test_concat_errors():
    with pytest.raises(ConfigurationError):
        concat_shots([torch.zeros(3, 2, 2), torch.zeros(3, 3, 3)], [torch.zeros(2, 2), torch.zeros(3, 3)])
    with pytest.raises(ConfigurationError):
        concat_shots([], [])
    with pytest.raises(ConfigurationError):
        correlation_map(torch.zeros(2, 3), torch.zeros(0, 3), torch.zeros(0))


def test_concat_drops_invalid_rows():
    f = torch.arange(8, dtype=D).reshape(2, 2, 2)
    valid = np.array([[True, False], [True, True]])
    k, v = concat_shots([f], [torch.ones(2, 2, dtype=D)], [valid])
    assert k.shape == (3, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.0, 3.0))
def test_range_permutation_linearity(seed, scale):
    g = torch.Generator().manual_seed(seed)
    q, k = torch.randn(6, 4, generator=g, dtype=D), torch.randn(10, 4, generator=g, dtype=D)
    v = torch.rand(10, generator=g, dtype=D)
    out = correlation_map(q, k, v)
    assert float(out.min()) >= -1e-12 and float(out.max()) <= 1 + 1e-12
    perm = torch.randperm(10, generator=g)
    assert torch.allclose(correlation_map(q, k[perm], v[perm]), out, atol=1e-12, rtol=0)
    assert torch.allclose(correlation_map(q, k, scale * v), scale * out, atol=1e-12)


def test_scale_sensitivity():
    g = torch.Generator().manual_seed(4)
    q, k = torch.randn(6, 4, generator=g, dtype=D), torch.randn(10, 4, generator=g, dtype=D)
    v = torch.rand(10, generator=g, dtype=D)
    assert not torch.allclose(correlation_map(2 * q, 2 * k, v), correlation_map(q, k, v))
