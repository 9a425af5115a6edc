import json

import numpy as np
import pytest

from snsmix.field import GalerkinField
from snsmix.noise import (BRANCH_STREAM, MAIN_STREAM, CovarianceOperator, EnsembleNoise,
                          build_covariance, noise_generator, sample_increment,
                          stationary_variance, stochastic_convolution)


def test_power_law_blocks(Q3):
    ms = Q3.modes
    low = ms.low_mask(1)
    assert np.all(Q3.blocks[low] == 0)
    i = ms.index((2, 1, 0))
    assert np.allclose(Q3.blocks[i], np.eye(2) * 5.0 ** -1.4)
    assert np.array_equal(Q3.forced, ~low)


def test_trace_and_regularity(Q3):
    w = Q3.modes.norm2
    qq = np.where(Q3.forced, w ** -2.8, 0.0) * 2
    assert np.isclose(Q3.trace(), qq.sum())
    assert np.isclose(Q3.trace_regularity(0.1), np.sum(w**1.1 * qq))


def test_default_sigma_in_range():
    Q = build_covariance(1, 1.4, 2)
    assert 0 < Q.sigma < 2 * 1.4 - 2.5


def test_warns_outside_range():
    with pytest.warns(UserWarning):
        build_covariance(1, 1.0, 2)


def test_rejects_bad_cutoffs():
    with pytest.raises(ValueError):
        build_covariance(2, 1.4, 2)


def test_solve_inverts_apply(Q3, rng):
    x = rng.standard_normal((len(Q3.modes), 2))
    y = Q3.solve(Q3.apply(x))
    assert np.allclose(y[Q3.forced], x[Q3.forced])
    assert np.all(y[~Q3.forced] == 0)


def test_rank_one_is_singular():
    Q = build_covariance(1, 1.4, 2, rank_one=True)
    with pytest.raises(np.linalg.LinAlgError):
        Q.solve(np.ones((len(Q.modes), 2)))


def test_json_roundtrip(Q2):
    again = CovarianceOperator.from_json(Q2.to_json())
    assert np.array_equal(again.blocks, Q2.blocks)
    rank1 = build_covariance(1, 1.4, 2, rank_one=True)
    doc = json.loads(rank1.to_json())
    assert "blocks" in doc
    assert np.array_equal(CovarianceOperator.from_json(rank1.to_json()).blocks, rank1.blocks)


def test_low_matrix(Q3):
    L = Q3.low_matrix(2)
    assert L.shape == (248, 248)
    assert np.allclose(L, np.diag(np.diag(L)))


def test_streams_are_keyed():
    a = noise_generator(3, 5).standard_normal(4)
    b = noise_generator(3, 5).standard_normal(4)
    c = noise_generator(3, 5, BRANCH_STREAM).standard_normal(4)
    d = noise_generator(3, 6).standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.allclose(a, c) and not np.allclose(a, d)


@pytest.mark.parametrize("block", [1, 3, None])
def test_ensemble_noise_matches_single_streams(block):
    ens = EnsembleNoise(7, [2, 9], 5, MAIN_STREAM, block=block)
    draws = np.stack([ens.next() for _ in range(4)])
    for j, r in enumerate([2, 9]):
        g = noise_generator(7, r)
        ref = np.stack([g.standard_normal((5, 2)) for _ in range(4)])
        assert np.array_equal(draws[:, j], ref)


def test_increment_variance(Q2):
    rng = np.random.default_rng(0)
    incs = np.stack([sample_increment(Q2, 0.01, rng).coeffs for _ in range(4000)])
    i = Q2.modes.index((2, 0, 0))
    var = incs[:, i].var(axis=0)
    expect = 0.01 * 4.0 ** -2.8
    assert np.allclose(var, expect, rtol=0.1)
    assert isinstance(sample_increment(Q2, 0.1, rng), GalerkinField)


def test_stochastic_convolution_stationary_law(Q2):
    """Exact OU steps reproduce q^2 (1 - e^{-2 lam t}) / (2 lam) at any step size."""
    rng = np.random.default_rng(1)
    T = 0.3
    finals = np.stack([stochastic_convolution(Q2, T, 0.1, rng)[-1] for _ in range(3000)])
    i = Q2.modes.index((1, 1, 1)) if Q2.forced[Q2.modes.index((1, 1, 1))] else Q2.modes.index((2, 1, 0))
    lam = Q2.modes.norm2[i]
    q2 = Q2.blocks[i, 0, 0] ** 2
    expect = q2 * -np.expm1(-2 * lam * T) / (2 * lam)
    assert np.allclose(finals[:, i].var(axis=0), expect, rtol=0.1)
    sv = stationary_variance(Q2)[i]
    assert np.isclose(sv[0, 0], q2 / (2 * lam))
