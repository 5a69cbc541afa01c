import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arcvq.codebook import Codebook
from arcvq.errors import ConfigError, ShapeError
from arcvq.quantizer import angles, cosine_table, normalize_rows, quantize, top_k_sets


def brute_force(z, e, mode):
    # exhaustive double loop in plain python floats
    out = []
    for zi in z.tolist():
        best, best_j = None, -1
        nz = math.sqrt(sum(v * v for v in zi))
        for j, ej in enumerate(e.tolist()):
            if mode == "euclidean":
                score = -sum((a - b) ** 2 for a, b in zip(zi, ej))
            else:
                ne = math.sqrt(sum(v * v for v in ej))
                score = sum(a * b for a, b in zip(zi, ej)) / (max(nz, 1e-12) * max(ne, 1e-12))
            if best is None or score > best:
                best, best_j = score, j
        out.append(best_j)
    return np.array(out)


def test_normalize_rows_examples():
    np.testing.assert_allclose(normalize_rows(np.array([[3.0, 4.0]])), [[0.6, 0.8]])
    u = np.array([[0.0, 1.0]])
    assert np.array_equal(normalize_rows(u), u)
    assert not normalize_rows(np.zeros((1, 3))).any()


def test_spherical_hand_example():
    cb = Codebook(np.array([[1.0, 0.0], [0.0, 2.0]]))
    r = quantize(np.array([[3.0, 4.0]]), cb, "spherical")
    assert r.indices[0] == 1
    np.testing.assert_array_equal(r.quantized, [[0.0, 2.0]])  # raw, unnormalized row
    np.testing.assert_allclose(r.cos_table, [[0.6, 0.8]])


@pytest.mark.parametrize("mode", ["euclidean", "spherical"])
def test_exact_row_is_chosen(mode):
    rng = np.random.default_rng(0)
    e = rng.normal(size=(10, 4))
    r = quantize(e[[7, 2]], Codebook(e), mode)
    assert r.indices.tolist() == [7, 2]
    assert np.array_equal(r.quantized, e[[7, 2]])


@pytest.mark.parametrize("mode", ["euclidean", "spherical"])
def test_ties_go_to_lowest_index(mode):
    e = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    r = quantize(np.array([[1.0, 1.0], [2.0, 0.0]]), Codebook(e), mode)
    assert r.indices.tolist() == [0, 0]


def test_errors():
    cb = Codebook(np.ones((3, 4)))
    with pytest.raises(ShapeError):
        quantize(np.ones((2, 5)), cb)
    with pytest.raises(ConfigError):
        quantize(np.ones((2, 4)), Codebook(np.ones((0, 4))))
    with pytest.raises(ConfigError):
        quantize(np.ones((2, 4)), cb, "manhattan")


@pytest.mark.parametrize("mode", ["euclidean", "spherical"])
def test_matches_brute_force(mode):
    rng = np.random.default_rng(11)
    for _ in range(40):
        n, k, d = rng.integers(1, 30), rng.integers(1, 30), rng.integers(2, 9)
        z, e = rng.normal(size=(n, d)), rng.normal(size=(k, d))
        assert np.array_equal(quantize(z, Codebook(e), mode).indices, brute_force(z, e, mode))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_spherical_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    z, e = rng.normal(size=(20, 6)), rng.normal(size=(15, 6))
    cb = Codebook(e)
    assert np.array_equal(quantize(z, cb).indices, quantize(c * z, cb).indices)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_normalized_euclidean_equals_max_cosine(seed):
    rng = np.random.default_rng(seed)
    z, e = rng.normal(size=(16, 5)), rng.normal(size=(12, 5))
    via_l2 = quantize(normalize_rows(z), Codebook(normalize_rows(e)), "euclidean").indices
    assert np.array_equal(via_l2, quantize(z, Codebook(e), "spherical").indices)


def test_usage_recorded_only_on_request():
    cb = Codebook(np.eye(3))
    quantize(np.eye(3)[[0, 0, 2]], cb)
    assert not cb.usage_counts.any()
    quantize(np.eye(3)[[0, 0, 2]], cb, record_usage=True)
    assert cb.usage_counts.tolist() == [2, 0, 1]


def test_angles_examples():
    th = angles(np.array([[0.0, 1.0, -1.0]]))
    assert th[0, 0] == pytest.approx(math.pi / 2)
    assert th[0, 1] == pytest.approx(math.acos(1 - 1e-7))
    assert th[0, 1] == pytest.approx(4.47e-4, abs=1e-6)
    assert th[0, 2] == pytest.approx(math.pi - math.acos(1 - 1e-7))
    c = np.linspace(-1, 1, 101)[None]
    assert np.all(np.diff(angles(c)[0]) <= 0)


def test_top_k_examples():
    cos = np.array([[0.1, 0.9], [0.5, 0.2]])
    sets = top_k_sets(cos, 5)
    assert sets.members.tolist() == [[1, 0], [0, 1]]
    z = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    e = np.array([[1.0, 0.0], [0.0, -1.0]])
    assert top_k_sets(cosine_table(z, e), 1).members[0].tolist() == [0]


def test_top_k_tie_prefers_lower_token():
    cos = np.zeros((10, 1))
    cos[3, 0] = cos[7, 0] = 0.5
    assert top_k_sets(cos, 2).members[0].tolist() == [3, 7]
    assert top_k_sets(cos, 1).members[0].tolist() == [3]


def test_top_k_matches_sort_and_mask():
    rng = np.random.default_rng(3)
    cos = np.round(rng.uniform(-1, 1, size=(40, 9)), 1)  # plenty of ties
    sets = top_k_sets(cos, 4)
    for j in range(9):
        ref = sorted(range(40), key=lambda i: (-cos[i, j], i))[:4]
        assert sets.members[j].tolist() == ref
    assert sets.mask().sum(axis=0).tolist() == [4] * 9
