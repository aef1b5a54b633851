import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crepa.errors import DegenerateInputError, DimensionError, DomainError
from crepa.metrics import (
    cka,
    cknna,
    fit_linear_probe,
    gram_linear,
    hsic,
    mutual_knn_mask,
    trim_measurements,
)


def _hsic_biased_loop(k, l):
    n = k.shape[0]
    h = np.eye(n) - 1.0 / n
    kc = h @ k @ h
    lc = h @ l @ h
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += kc[i, j] * lc[j, i]
    return total / (n - 1) ** 2


def _hsic_unbiased_loop(k, l):
    n = k.shape[0]
    kt = k.copy()
    lt = l.copy()
    np.fill_diagonal(kt, 0)
    np.fill_diagonal(lt, 0)
    t1 = sum(kt[i, j] * lt[j, i] for i in range(n) for j in range(n))
    t2 = kt.sum() * lt.sum() / ((n - 1) * (n - 2))
    t3 = 0.0
    for i in range(n):
        for j in range(n):
            for m in range(n):
                t3 += kt[i, j] * lt[j, m]
    t3 *= 2.0 / (n - 2)
    return (t1 + t2 - t3) / (n * (n - 3))


def test_hsic_biased_psd_and_centering(rng):
    x = rng.normal(size=(12, 5))
    k = gram_linear(x)
    assert hsic(k, k, "biased") >= 0.0
    ones = np.ones((12, 12))
    assert abs(hsic(k, ones, "biased")) < 1e-12  # centering annihilates constants


def test_hsic_matches_loop_oracles(rng):
    x = rng.normal(size=(8, 4))
    y = rng.normal(size=(8, 6))
    k, l = gram_linear(x), gram_linear(y)
    assert abs(hsic(k, l, "biased") - _hsic_biased_loop(k, l)) < 1e-10
    assert abs(hsic(k, l, "unbiased") - _hsic_unbiased_loop(k, l)) < 1e-10


def test_hsic_validation(rng):
    k = gram_linear(rng.normal(size=(3, 2)))
    with pytest.raises(DomainError):
        hsic(k, k, "unbiased")
    with pytest.raises(DomainError):
        hsic(k, k, "nope")
    with pytest.raises(DimensionError):
        hsic(k, np.ones((4, 4)))
    with pytest.raises(DimensionError):
        hsic(np.ones(3), np.ones(3))


def test_cka_self_is_one(rng):
    x = rng.normal(size=(20, 7))
    assert abs(cka(x, x) - 1.0) < 1e-12
    assert abs(cka(x, x, "biased") - 1.0) < 1e-12


def test_cka_rotation_and_scale_invariance(rng):
    x = rng.normal(size=(16, 6))
    y = rng.normal(size=(16, 9))
    q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    base = cka(x, y)
    assert abs(cka(x @ q, y) - base) < 1e-10
    assert abs(cka(-2.5 * x, y) - base) < 1e-10


def test_cka_degenerate_input():
    const = np.ones((8, 3))
    with pytest.raises(DegenerateInputError):
        cka(const, const)


def test_cka_row_count_mismatch(rng):
    with pytest.raises(DimensionError):
        cka(rng.normal(size=(8, 3)), rng.normal(size=(7, 3)))
    with pytest.raises(DomainError):
        cka(np.full((8, 3), np.nan), rng.normal(size=(8, 3)))


def test_cknna_full_neighborhood_equals_cka(rng):
    for _ in range(10):
        x = rng.normal(size=(32, 16))
        y = rng.normal(size=(32, 16))
        assert abs(cknna(x, y, 31) - cka(x, y)) < 1e-8


def test_cknna_self_alignment_is_one(rng):
    x = rng.normal(size=(16, 5))
    for k in (1, 4, 10, 15):
        assert abs(cknna(x, x, k) - 1.0) < 1e-10


def test_cknna_symmetry_and_joint_permutation(rng):
    x = rng.normal(size=(14, 6))
    y = rng.normal(size=(14, 4))
    assert abs(cknna(x, y, 5) - cknna(y, x, 5)) < 1e-12
    perm = rng.permutation(14)
    assert abs(cknna(x[perm], y[perm], 5) - cknna(x, y, 5)) < 1e-12


def test_cknna_validation(rng):
    x = rng.normal(size=(8, 3))
    with pytest.raises(DomainError):
        cknna(x, x, 0)
    with pytest.raises(DomainError):
        cknna(x, x, 8)
    with pytest.raises(DomainError):
        cknna(rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), 1)


def _mutual_mask_loop(gram, k):
    n = gram.shape[0]
    neigh = np.zeros((n, n), dtype=bool)
    for i in range(n):
        order = sorted((j for j in range(n) if j != i),
                       key=lambda j: (-gram[i, j], j))
        for j in order[:k]:
            neigh[i, j] = True
    out = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            out[i, j] = neigh[i, j] and neigh[j, i]
    return out


def _cknna_loop(x, y, k):
    gx, gy = gram_linear(x), gram_linear(y)
    mx = _mutual_mask_loop(gx, k)
    my = _mutual_mask_loop(gy, k)
    both = (mx & my).astype(float)
    num = _hsic_unbiased_loop(both * gx, both * gy)
    xx = _hsic_unbiased_loop(mx * gx, mx * gx)
    yy = _hsic_unbiased_loop(my * gy, my * gy)
    return num / np.sqrt(xx * yy)


def test_cknna_matches_exhaustive_oracle_n4(rng):
    for trial in range(20):
        x = rng.normal(size=(4, 3))
        y = rng.normal(size=(4, 5))
        for k in (1, 2, 3):
            got = cknna(x, y, k)
            want = _cknna_loop(x, y, k)
            assert got == pytest.approx(want, abs=1e-12), (trial, k)


def test_mutual_mask_matches_loop(rng):
    x = rng.normal(size=(9, 4))
    g = gram_linear(x)
    for k in (1, 3, 8):
        assert np.array_equal(mutual_knn_mask(g, k), _mutual_mask_loop(g, k))


def test_mutual_mask_symmetric_no_self(rng):
    g = gram_linear(rng.normal(size=(10, 4)))
    m = mutual_knn_mask(g, 3)
    assert np.array_equal(m, m.T)
    assert not m.diagonal().any()


def test_trimming_removes_planted_outliers(rng):
    core = rng.uniform(0.4, 0.6, size=94)
    values = np.concatenate([core, [-9, -8, -7], [7, 8, 9]])
    trimmed = trim_measurements(values, 0.03)
    assert trimmed.size == 94
    assert trimmed.min() >= 0.4 and trimmed.max() <= 0.6


def test_trimming_small_samples_untouched():
    vals = [3.0, 1.0, 2.0]
    assert np.array_equal(trim_measurements(vals, 0.03), [1.0, 2.0, 3.0])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 11))
def test_cknna_bounded_for_random_inputs(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(12, 6))
    y = rng.normal(size=(12, 6))
    val = cknna(x, y, k)
    assert np.isfinite(val)
    assert -1.5 <= val <= 1.5


def test_linear_probe_deterministic(rng):
    x = rng.normal(size=(40, 6))
    y = rng.integers(0, 3, size=40)
    xt = rng.normal(size=(20, 6))
    yt = rng.integers(0, 3, size=20)
    a = fit_linear_probe(x, y, xt, yt, 3)
    b = fit_linear_probe(x, y, xt, yt, 3)
    assert a == b


def test_linear_probe_learns_separable_data(rng):
    centers = rng.normal(scale=4.0, size=(4, 5))
    y = rng.integers(0, 4, size=120)
    x = centers[y] + rng.normal(scale=0.3, size=(120, 5))
    y_test = rng.integers(0, 4, size=60)
    x_test = centers[y_test] + rng.normal(scale=0.3, size=(60, 5))
    assert fit_linear_probe(x, y, x_test, y_test, 4) > 0.95
