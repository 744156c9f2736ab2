import math

import numpy as np
import pytest

from conftest import random_tensor
from scadatensor.cpapr import (
    FitOptions,
    KruskalModel,
    SmoothedModel,
    fit,
    fit_detailed,
    fit_smoothed,
    fuse,
    reconstruct_lambda,
    sparse_objective,
)
from scadatensor.errors import ConfigError, DataError, SolverError
from scadatensor.sparse_tensor import SparseTensorCOO, from_entries


def dense_objective(tensor, model):
    # all-cells summation of (lambda - x log lambda), 0 log 0 = 0
    lam = model.full()
    x = tensor.to_dense()
    with np.errstate(divide="ignore", invalid="ignore"):
        xlog = np.where(x > 0, x * np.log(lam), 0.0)
    return float(lam.sum() - xlog.sum())


def dense_rate(model, index):
    total = 0.0
    for r in range(model.rank):
        term = model.weights[r]
        for d, i in enumerate(index):
            term *= model.factors[d][i, r]
        total += term
    return total


def model_from(weights, *factors):
    return KruskalModel(np.asarray(weights, float), tuple(np.asarray(f, float) for f in factors))


def test_uniform_rank1_rate():
    half = [[0.5], [0.5]]
    m = model_from([8.0], half, half, half)
    for idx in np.ndindex(2, 2, 2):
        assert reconstruct_lambda(m, idx) == pytest.approx(1.0)


def test_rates_match_dense_summation(rng):
    f = [rng.random((n, 2)) for n in (4, 4, 4)]
    m = model_from(rng.random(2) * 5, *f)
    for idx in np.ndindex(4, 4, 4):
        assert reconstruct_lambda(m, idx) == pytest.approx(dense_rate(m, idx), rel=1e-12)


def test_normalized_total_rate_is_weight_sum(rng):
    t = random_tensor(rng, (5, 4, 3))
    m = fit(t, 3, FitOptions(seed=1))
    assert m.full().sum() == pytest.approx(m.weights.sum(), rel=1e-10)
    for f in m.factors:
        assert np.allclose(f.sum(axis=0), 1.0, atol=1e-9)


def test_reconstruct_out_of_bounds():
    m = model_from([1.0], [[1.0], [0.0]], [[1.0]])
    with pytest.raises(DataError):
        reconstruct_lambda(m, (2, 0))


def test_kruskal_invariants():
    with pytest.raises((DataError, ConfigError)):
        model_from([-1.0], [[1.0]], [[1.0]])
    with pytest.raises((DataError, ConfigError)):
        model_from([1.0, 1.0], [[1.0]], [[1.0]])


def test_constant_tensor_mle():
    t = from_entries([(idx, 4) for idx in np.ndindex(3, 3, 3)], (3, 3, 3))
    m = fit(t, 1, FitOptions(seed=0))
    assert np.all(np.abs(m.full() - 4.0) < 0.01)


def test_fit_is_deterministic(rng):
    t = random_tensor(rng, (6, 5, 4))
    a = fit(t, 3, FitOptions(seed=7))
    b = fit(t, 3, FitOptions(seed=7))
    assert a == b
    assert all(np.array_equal(x, y) for x, y in zip(a.factors, b.factors))


@pytest.mark.parametrize("seed", range(5))
def test_objective_non_increasing_small(seed):
    rng = np.random.default_rng(seed)
    t = random_tensor(rng, (5, 4, 3), density=0.4)
    res = fit_detailed(t, 3, FitOptions(seed=seed, max_iters=100))
    assert np.all(np.diff(res.objectives) <= 1e-9)
    assert res.objective == pytest.approx(dense_objective(t, res.model), abs=1e-8)


def test_zero_locked_entries_are_released():
    # a factor entry initialized near zero must be able to grow back
    t = from_entries([((0, 0), 5), ((1, 1), 5), ((0, 1), 1), ((1, 0), 1)], (2, 2))
    res = fit_detailed(t, 2, FitOptions(seed=3, max_iters=300, tol=1e-8))
    assert np.all(np.diff(res.objectives) <= 1e-9)
    assert res.model.full().sum() == pytest.approx(t.total(), rel=1e-6)


def test_fit_errors():
    t = from_entries([((0, 0), 1)], (2, 2))
    with pytest.raises(ConfigError):
        fit(t, 0)
    with pytest.raises(DataError):
        fit(from_entries([], (2, 2)), 1)
    with pytest.raises(ConfigError):
        FitOptions(tol=0)


def test_fuse_arithmetic():
    r1 = model_from([2.0], [[1.0]], [[1.0]])
    rR = model_from([1.0], [[1.0]], [[1.0]])
    sm = fuse(r1, rR)
    assert sm.rates(np.array([[0, 0]]))[0] == pytest.approx(1.1)


def test_fuse_floor():
    r1 = model_from([0.4], [[1.0], [1.0]], [[1.0]])
    rR = model_from([1.0], [[1.0], [0.0]], [[1.0]])
    sm = fuse(r1, rR)
    assert sm.rates(np.array([[1, 0]]))[0] == pytest.approx(0.04)


def test_fuse_rejects_bad_weights_and_shapes():
    r1 = model_from([1.0], [[1.0]], [[1.0]])
    with pytest.raises(ConfigError):
        fuse(r1, r1, 1.0, 0.0)
    with pytest.raises(ConfigError):
        fuse(r1, r1, 0.2, 0.9)
    other = model_from([1.0], [[0.5], [0.5]], [[1.0]])
    with pytest.raises(DataError, match="shape mismatch"):
        fuse(r1, other)


def test_fuse_rejects_zero_rank1_factor():
    r1 = model_from([1.0], [[1.0], [0.0]], [[1.0]])
    with pytest.raises(SolverError):
        fuse(r1, r1)


def test_smoothed_rates_positive_everywhere(rng):
    t = random_tensor(rng, (6, 5, 4), density=0.1)
    sm, _ = fit_smoothed(t, 4, FitOptions(seed=2))
    idx = np.array(list(np.ndindex(*t.shape)))
    assert np.all(sm.rates(idx) > 0)


def test_smoothed_round_trip_bit_stable(rng):
    t = random_tensor(rng, (5, 4, 3))
    sm, _ = fit_smoothed(t, 2, FitOptions(seed=0))
    back = SmoothedModel.from_dict(sm.to_dict())
    idx = np.array(list(np.ndindex(*t.shape)))
    assert np.array_equal(back.rates(idx), sm.rates(idx))


def test_objective_matches_dense_with_zeros(rng):
    t = random_tensor(rng, (4, 3, 2))
    m = model_from(rng.random(2), rng.random((4, 2)), rng.random((3, 2)), rng.random((2, 2)))
    assert sparse_objective(t, m) == pytest.approx(dense_objective(t, m), abs=1e-10)


def test_binary_inflated_fit_keeps_positive_rank1():
    t = SparseTensorCOO.from_arrays(np.array([[0, 0, 0], [1, 1, 1], [2, 2, 0]]),
                                    np.full(3, 6.0), (3, 3, 2))
    sm, res = fit_smoothed(t, 2, FitOptions(seed=0))
    assert math.isfinite(res.objective)
    assert np.all(sm.rank1.factors[0] > 0)
