import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ucad.encoder import PromptSet
from ucad.inference import (
    anomaly_map,
    image_score,
    infer,
    patch_scores,
    reweight_factor,
    select_task,
    task_distance,
    write_heatmap,
)
from ucad.memory import MemorySpace, TaskEntry


def _mem(*keys):
    mem = MemorySpace()
    for t, k in enumerate(keys):
        k = np.asarray(k, dtype=float)
        mem.append(TaskEntry(t, k, PromptSet(np.zeros((1, 1, k.shape[1]))), k, len(k)))
    return mem


def test_select_task_example():
    mem = _mem([[0, 0], [1, 1]], [[5, 5]])
    test = np.array([[0.0, 0.1]])
    assert task_distance(mem[0].key, test) == pytest.approx(0.1 + math.hypot(1, 0.9))
    assert task_distance(mem[1].key, test) == pytest.approx(math.hypot(5, 4.9))
    assert select_task(test, mem) == 0


def test_select_task_exact_key_and_ties():
    a, b = [[0.0, 0.0], [1.0, 0.0]], [[3.0, 3.0], [4.0, 3.0]]
    assert task_distance(np.array(b), np.array(b)) == 0.0
    assert select_task(np.array(b), _mem(a, b)) == 1
    assert select_task(np.array(a), _mem(a, a)) == 0
    assert select_task(np.array([[9.0, 9.0]]), _mem(a)) == 0
    with pytest.raises(ValueError):
        select_task(np.array(a), MemorySpace())


def test_patch_score_examples():
    bank = np.array([[0.0], [2.0]])
    s, s_star, f = patch_scores(np.array([[1.0]]), bank, b=2, return_details=True)
    assert s_star[0] == 1.0 and f[0] == 0.5 and s[0] == 0.5
    assert patch_scores(np.array([[2.0]]), bank, b=2)[0] == 0.0


@pytest.mark.parametrize("b", [1, 3])
def test_b_out_of_range(b):
    with pytest.raises(ValueError):
        patch_scores(np.array([[1.0]]), np.array([[0.0], [2.0]]), b=b)


def test_empty_knowledge():
    with pytest.raises(ValueError):
        patch_scores(np.array([[1.0]]), np.zeros((0, 1)), b=2)


def test_factor_log_space_matches_direct():
    d = np.array([0.5, 3.0, 4.0])
    direct = reweight_factor(d, np.array([0, 1, 2]), 3)
    far = reweight_factor(d + 800.0, np.array([0, 1, 2]), 3)
    assert far == pytest.approx(direct, rel=1e-12)
    assert reweight_factor(np.array([0.0, 750.0]), np.array([0, 1]), 2) == pytest.approx(1.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 12), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_factor_bounds_and_monotonicity(k, c, seed):
    rng = np.random.default_rng(seed)
    bank = rng.normal(size=(k, c))
    test = rng.normal(size=(5, c))
    b = int(rng.integers(2, k + 1))
    s, s_star, f = patch_scores(test, bank, b, return_details=True)
    assert np.all(f >= 1 - 1 / b) and np.all(f < 1)
    bigger = np.vstack([bank, rng.normal(size=(3, c))])
    _, s_star2, _ = patch_scores(test, bigger, b, return_details=True)
    assert np.all(s_star2 <= s_star)


def test_select_task_permutation_invariance():
    rng = np.random.default_rng(0)
    keys = [rng.normal(size=(20, 4)) for _ in range(3)]
    test = rng.normal(size=(20, 4))
    mem = _mem(*keys)
    for t in range(3):
        perm = rng.permutation(20)
        assert task_distance(keys[t][perm], test[rng.permutation(20)]) == task_distance(keys[t], test)
    assert select_task(test[::-1], mem) == select_task(test, mem)


def test_image_score():
    assert image_score([0.1, 0.9, 0.3]) == 0.9
    assert image_score(np.zeros(4)) == 0.0
    assert image_score([0.7]) == 0.7
    with pytest.raises(ValueError):
        image_score([])


def test_constant_map_is_preserved():
    smap = anomaly_map(np.full(16, 0.37), (4, 4), (32, 32), sigma=4.0)
    assert smap.shape == (32, 32)
    np.testing.assert_allclose(smap, 0.37, rtol=0, atol=1e-15)


@pytest.mark.parametrize("cell", [0, 5, 10, 15])
def test_hot_patch_peak_stays_in_block(cell):
    scores = np.zeros(16)
    scores[cell] = 1.0
    smap = anomaly_map(scores, (4, 4), (32, 32), sigma=4.0)
    r, c = np.unravel_index(np.argmax(smap), smap.shape)
    assert (r // 8, c // 8) == divmod(cell, 4)
    assert np.argmax(scores.reshape(4, 4)) == cell


def test_anomaly_map_errors():
    with pytest.raises(ValueError):
        anomaly_map(np.zeros(16), (4, 4), (32, 32), sigma=0)
    with pytest.raises(ValueError):
        anomaly_map(np.zeros(15), (4, 4), (32, 32))


def test_infer_single_task_and_determinism(tiny_encoder):
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(16, 16))
    feats = tiny_encoder.encode(rng.uniform(size=(16, 16))).features
    mem = MemorySpace.for_encoder(tiny_encoder)
    mem.append(TaskEntry(0, feats, PromptSet.zeros(tiny_encoder.config), feats, 16))
    a = infer(img, tiny_encoder, mem)
    b = infer(img, tiny_encoder, mem, task=0)
    assert a.selected_task == 0
    assert a.patch_scores.tobytes() == b.patch_scores.tobytes()
    assert a.map.tobytes() == infer(img, tiny_encoder, mem).map.tobytes()
    assert a.image_score == a.patch_scores.max() and np.all(a.patch_scores >= 0)
    assert a.map.shape == img.shape and a.coarse_map.shape == (4, 4)


def test_heatmap_export(tmp_path):
    import json
    from PIL import Image

    smap = np.linspace(0.2, 0.8, 64).reshape(8, 8)
    write_heatmap(tmp_path / "h.pgm", smap, {"task": 1})
    img = np.asarray(Image.open(tmp_path / "h.pgm"))
    assert img.min() == 0 and img.max() == 255
    meta = json.loads((tmp_path / "h.pgm.json").read_text())
    assert meta["min"] == 0.2 and meta["max"] == 0.8 and meta["task"] == 1
