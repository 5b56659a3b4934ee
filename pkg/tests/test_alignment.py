import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mtut.alignment import (
    FocalGate,
    SsaTerm,
    correlation_batch,
    correlation_matrix,
    focal_rho,
    normalize_feature_map,
    ssa_loss,
    ssa_loss_and_grad_batch,
    ssa_loss_grad,
    total_objective,
    write_correlation_csv,
)
from mtut.gradcheck import numeric_grad, relative_error
from mtut.numerics import RngStream, ShapeError

ONE = FocalGate(rho=1.0, loss_self=1.0, loss_other=0.0, beta=2.0)


def map_from_elements(elements, extents):
    w, h, t = extents
    return np.array(elements, dtype=np.float64).reshape(w, h, t, -1)


def oracle_rows(f, eps_std=1e-5, eps_norm=1e-8):
    """Element normalization written out with Python loops."""
    w, h, t, c = f.shape
    rows = []
    for i in range(w):
        for j in range(h):
            for k in range(t):
                v = [float(x) for x in f[i, j, k]]
                mu = sum(v) / c
                sigma = math.sqrt(sum((x - mu) ** 2 for x in v) / c)
                tilde = [(x - mu) / (sigma + eps_std) if sigma + eps_std > 0 else 0.0 for x in v]
                norm = math.sqrt(sum(x * x for x in tilde))
                rows.append([0.0] * c if norm <= eps_norm else [x / norm for x in tilde])
    return np.array(rows)


def oracle_corr(rows):
    d = len(rows)
    out = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            out[a, b] = sum(float(x) * float(y) for x, y in zip(rows[a], rows[b]))
    return out


maps = st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 2),
                 st.integers(2, 5), st.integers(0, 2**32))


def random_map(shape_seed):
    w, h, t, c, seed = shape_seed
    return RngStream(seed).normal((w, h, t, c))


def test_zero_variance_element_masked():
    n = normalize_feature_map(map_from_elements([[5, 5, 5]], (1, 1, 1)))
    assert n.zero_mask[0] and np.array_equal(n.rows[0], [0.0, 0.0, 0.0])
    assert correlation_matrix(n)[0, 0] == 0.0


def test_antisymmetric_pair_hand_value():
    n = normalize_feature_map(map_from_elements([[1, -1]], (1, 1, 1)), eps_std=0.0)
    assert np.allclose(n.rows[0], [0.70710678, -0.70710678], atol=1e-8)
    assert n.mean[0] == 0.0 and n.std[0] == 1.0


def test_affine_element_example():
    a = normalize_feature_map(map_from_elements([[5, 1]], (1, 1, 1)), eps_std=0.0)
    b = normalize_feature_map(map_from_elements([[1, -1]], (1, 1, 1)), eps_std=0.0)
    assert np.allclose(a.rows, b.rows, atol=1e-12)


def test_normalization_rejects_bad_input():
    with pytest.raises(ValueError):
        normalize_feature_map(np.zeros((2, 2, 2, 1)))
    bad = np.zeros((1, 1, 1, 3))
    bad[0, 0, 0, 1] = np.nan
    with pytest.raises(ValueError):
        normalize_feature_map(bad)
    with pytest.raises(ShapeError):
        normalize_feature_map(np.zeros((2, 2, 3)))


@given(maps)
def test_normalization_matches_loop_oracle(ms):
    f = random_map(ms)
    assert np.allclose(normalize_feature_map(f).rows, oracle_rows(f), atol=1e-12)


def test_corr_unit_row_and_antipodal():
    one = normalize_feature_map(map_from_elements([[3.0, 1.0]], (1, 1, 1)))
    assert np.allclose(correlation_matrix(one), [[1.0]], atol=1e-15)
    pair = normalize_feature_map(map_from_elements([[1, -1], [-1, 1]], (2, 1, 1)))
    assert np.allclose(correlation_matrix(pair), [[1, -1], [-1, 1]], atol=1e-15)


def test_corr_matches_pairwise_loop_small():
    f = RngStream(4).normal((2, 2, 1, 3))
    corr = correlation_matrix(normalize_feature_map(f))
    assert np.max(np.abs(corr - oracle_corr(oracle_rows(f)))) <= 1e-12


@given(maps)
def test_corr_invariants(ms):
    f = random_map(ms)
    f[0, 0, 0, :] = 2.5  # force a masked element
    n = normalize_feature_map(f)
    corr = correlation_matrix(n)
    assert np.array_equal(corr, corr.T)
    assert np.all(np.abs(corr) <= 1.0 + 1e-12)
    diag = np.diag(corr)
    assert np.all(diag[n.zero_mask] == 0.0)
    assert np.allclose(diag[~n.zero_mask], 1.0, atol=1e-12)
    assert np.all(corr[n.zero_mask] == 0.0)


@given(maps, st.randoms())
def test_corr_channel_permutation_invariant(ms, rnd):
    f = random_map(ms)
    perm = list(range(f.shape[-1]))
    rnd.shuffle(perm)
    a = correlation_matrix(normalize_feature_map(f))
    b = correlation_matrix(normalize_feature_map(f[..., perm]))
    assert np.array_equal(a, b)


@given(maps, st.integers(0, 2**32))
def test_affine_invariance(ms, seed):
    f = random_map(ms)
    g = RngStream(seed)
    a = np.exp(g.normal(f.shape[:3] + (1,)))
    b = 10.0 * g.normal(f.shape[:3] + (1,))
    n1 = normalize_feature_map(f, eps_std=0.0)
    n2 = normalize_feature_map(a * f + b, eps_std=0.0)
    assert np.allclose(n1.rows, n2.rows, atol=1e-9)
    target = RngStream(seed + 1).normal(f.shape)
    assert math.isclose(ssa_loss(f, target, ONE, (0.0, 1e-8)),
                        ssa_loss(a * f + b, target, ONE, (0.0, 1e-8)), rel_tol=1e-9, abs_tol=1e-9)


def test_ssa_hand_frobenius_value():
    fm = map_from_elements([[1, -1], [1, -1]], (2, 1, 1))   # corr [[1,1],[1,1]]
    fn = map_from_elements([[1, -1], [-1, 1]], (2, 1, 1))   # corr [[1,-1],[-1,1]]
    assert math.isclose(ssa_loss(fm, fn, ONE), 8.0, rel_tol=1e-12)


def test_ssa_zero_cases():
    f = RngStream(2).normal((2, 2, 2, 4))
    assert ssa_loss(f, f, ONE) == 0.0
    assert np.array_equal(ssa_loss_grad(f, f, ONE), np.zeros_like(f))
    other = RngStream(3).normal((2, 2, 2, 6))
    off = FocalGate(0.0, 0.5, 1.0, 2.0)
    assert ssa_loss(f, other, off) == 0.0
    assert np.array_equal(ssa_loss_grad(f, other, off), np.zeros_like(f))


def test_ssa_rejects_extent_mismatch():
    with pytest.raises(ShapeError):
        ssa_loss(np.ones((2, 2, 2, 3)), np.ones((2, 2, 1, 3)), ONE)


def test_ssa_target_channels_may_differ():
    r = RngStream(8)
    assert ssa_loss(r.normal((2, 2, 2, 3)), r.normal((2, 2, 2, 7)), ONE) > 0.0


def test_ssa_grad_matches_finite_differences():
    rng = RngStream(21)
    worst = 0.0
    for _ in range(20):
        fm, fn = rng.normal((3, 3, 2, 4)), rng.normal((3, 3, 2, 4))
        num = numeric_grad(lambda: ssa_loss(fm, fn, ONE), fm, 1e-4)
        worst = max(worst, relative_error(ssa_loss_grad(fm, fn, ONE), num))
    assert worst <= 1e-5


def test_ssa_grad_is_linear_in_rho():
    rng = RngStream(5)
    fm, fn = rng.normal((2, 2, 2, 3)), rng.normal((2, 2, 2, 3))
    g1 = ssa_loss_grad(fm, fn, ONE)
    g3 = ssa_loss_grad(fm, fn, FocalGate(3.0, 1.0, 0.0, 2.0))
    assert np.allclose(g3, 3.0 * g1, rtol=1e-13, atol=0)


def test_masked_element_gets_zero_grad():
    rng = RngStream(6)
    fm, fn = rng.normal((2, 2, 2, 3)), rng.normal((2, 2, 2, 3))
    fm[1, 0, 1, :] = 0.75
    g = ssa_loss_grad(fm, fn, ONE)
    assert np.array_equal(g[1, 0, 1], [0.0, 0.0, 0.0])
    assert np.any(g != 0.0)


def test_batch_matches_single_calls():
    rng = RngStream(12)
    fm, fn = rng.normal((3, 2, 2, 2, 4)), rng.normal((3, 2, 2, 2, 5))
    rho = np.array([0.5, 1.0, 2.0])
    values, grads = ssa_loss_and_grad_batch(fm, fn, rho)
    for i in range(3):
        gate = FocalGate(float(rho[i]), 1.0, 0.0, 2.0)
        assert math.isclose(values[i], ssa_loss(fm[i], fn[i], gate), rel_tol=1e-13)
        assert np.allclose(grads[i], ssa_loss_grad(fm[i], fn[i], gate), rtol=1e-12, atol=1e-15)
    corr = correlation_batch(fm)
    assert corr.shape == (3, 8, 8)


def test_focal_examples():
    assert focal_rho(0.8, 0.8, 2.0).rho == 0.0
    assert focal_rho(0.5, 1.2, 2.0).rho == 0.0
    g = focal_rho(1.5, 1.0, 2.0)
    assert math.isclose(g.rho, math.e - 1.0, rel_tol=1e-12)
    assert math.isclose(g.delta_loss, 0.5)
    with pytest.raises(ValueError):
        focal_rho(1.0, 0.0, 0.0)


def test_focal_saturates_instead_of_overflowing():
    assert math.isfinite(focal_rho(1e6, 0.0, 2.0).rho)


@given(st.floats(0, 10), st.floats(0, 10), st.floats(0.1, 5))
def test_focal_gate_one_way(ls, lo, beta):
    a, b = focal_rho(ls, lo, beta).rho, focal_rho(lo, ls, beta).rho
    assert a >= 0.0 and b >= 0.0 and a * b == 0.0


def test_total_objective_examples():
    assert total_objective(1.25, [], 0.05).total == 1.25
    term = SsaTerm("b", ONE, 8.0)
    assert total_objective(0.7, [term], 0.0).total == 0.7
    assert math.isclose(total_objective(1.0, [term], 0.05).total, 1.4, rel_tol=1e-15)
    with pytest.raises(ValueError):
        total_objective(1.0, [term], -1.0)


def test_correlation_csv(tmp_path):
    corr = np.array([[1.0, -0.25], [-0.25, 1.0]])
    p = write_correlation_csv(corr, tmp_path / "c.csv")
    back = np.loadtxt(p, delimiter=",")
    assert np.array_equal(back, corr)
