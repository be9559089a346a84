import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ucad.metrics import aupr, auroc, avg_fm


def brute_auroc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def brute_aupr(s, y):
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(s.tolist()), reverse=True):
        hit = s >= t
        tp = int((hit & (y == 1)).sum())
        recall = tp / int(y.sum())
        ap += (recall - prev_recall) * tp / int(hit.sum())
        prev_recall = recall
    return ap


def test_auroc_examples():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auroc([0.5] * 6, [0, 1] * 3) == 0.5


def test_aupr_examples():
    assert aupr([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert aupr([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-15)
    assert aupr([0.9, 0.8, 0.7, 0.1], [0, 0, 0, 1]) == 0.25


def test_single_class_errors():
    with pytest.raises(ValueError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(ValueError):
        aupr([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        auroc([0.1], [0, 1])


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2**32 - 1))
def test_against_brute_force(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 8, size=n) / 8.0  # coarse grid forces ties
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    assert auroc(s, y) == brute_auroc(s, y)
    assert aupr(s, y) == pytest.approx(brute_aupr(s, y), abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_monotone_transform_and_negation(n, seed):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=n)
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    t = np.exp(3 * s) + 2
    assert auroc(t, y) == auroc(s, y)
    assert aupr(t, y) == aupr(s, y)
    assert auroc(s, y) + auroc(-s, y) == pytest.approx(1.0, abs=1e-15)


def test_avg_fm_examples():
    T = [[0.95], [0.90, 0.85], [0.80, 0.85, 0.90]]
    assert avg_fm(T, 3) == 0.075
    assert avg_fm([[0.9], [0.9, 0.8]], 2) == 0.0
    assert avg_fm([[0.7], [0.8, 0.6], [0.8, 0.6, 0.5]]) == 0.0


def test_avg_fm_allows_negative():
    assert avg_fm([[0.5], [0.9, 0.7]]) == -0.4


def test_avg_fm_errors():
    with pytest.raises(ValueError):
        avg_fm([[0.9]], 1)
    with pytest.raises(ValueError):
        avg_fm([[0.9], []], 2)
