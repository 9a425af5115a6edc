import warnings

import numpy as np
import pytest

from snsmix.field import random_field
from snsmix.hormander import (bracket_span_check, level_two_generators, lie_bracket, low_drift,
                              mixing_set, twisted_covariance)
from snsmix.noise import build_covariance


@pytest.fixture(scope="module")
def Q3m():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_covariance(1, 1.4, 3)


def test_certificate_passes(Q3m):
    cert = bracket_span_check(Q3m, 2, samples=3)
    assert cert.passed and cert.witness is None
    assert cert.delta_hat > 0 and len(cert.delta_per_sample) == 4
    assert cert.constant_rank == cert.dimension
    assert all(v["rank"] == 2 for v in cert.per_k.values())
    assert len(cert.per_k) == 26


def test_rank_one_fails_with_witness():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        Q = build_covariance(1, 1.4, 3, rank_one=True)
    cert = bracket_span_check(Q, 2, samples=2)
    assert not cert.passed
    assert cert.witness is not None and "direction" in cert.witness
    assert cert.constant_rank < cert.dimension


def test_bad_levels(Q3m):
    with pytest.raises(ValueError):
        bracket_span_check(Q3m, 1)
    with pytest.raises(ValueError):
        bracket_span_check(Q3m, 4)


def test_mixing_set_ranks(Q3m):
    for k in [(1, 0, 0), (1, 1, 1), (0, 1, -1)]:
        ms = mixing_set(k, Q3m)
        assert ms.rank == 2 and len(ms.pairs) > 0
        # contributions are divergence free at k
        assert np.allclose(ms.vectors @ np.array(k, float), 0, atol=1e-12)


def test_mixing_set_requires_forced_pairs():
    Q = build_covariance(2, 1.4, 3)
    # with n0 = 2 no admissible pair fits below cutoff 2
    assert mixing_set((1, 0, 0), Q, cutoff=2).rank == 0


def test_level_two_generators_shape(Q3m):
    rows, cols, vals, ncol = level_two_generators(Q3m, 2)
    N = 2 * int(Q3m.modes.low_mask(2).sum())
    assert rows.max() < N and cols.max() < ncol and np.all(np.isfinite(vals))


def test_json_certificate(Q3m):
    import json
    doc = json.loads(bracket_span_check(Q3m, 2, samples=1).to_json())
    assert doc["passed"] is True and "1,0,0" in doc["per_k"]


def test_lie_bracket_matches_jacobians(Q3m, rng):
    modes = Q3m.modes
    low = modes.low_mask(2)
    col = Q3m.low_matrix(2)[:, 30]

    def embed(v):
        y = np.zeros((len(modes), 2))
        y[low] = v.reshape(-1, 2)
        return y

    y = embed(random_field(3, rng).coeffs[low].reshape(-1))
    f = lambda z: low_drift(z, Q3m, 2)
    g = lambda z: col
    br = lie_bracket(f, g, y, embed)
    # constant g: [f, g] = Df g, and Df is affine in y so differences are exact
    eps = 1e-3
    Dfg = (f(y + eps * embed(col)) - f(y - eps * embed(col))) / (2 * eps)
    assert np.allclose(br, Dfg, atol=1e-9)
    for e in (1e-2, 1e-4):
        assert np.allclose(lie_bracket(f, g, y, embed, e), br, atol=1e-7)


def test_twist_invariance(Q3m):
    a = bracket_span_check(Q3m, 2, samples=0)
    b = bracket_span_check(twisted_covariance(Q3m, 0.7), 2, samples=0)
    assert a.passed and b.passed
    assert a.constant_rank == b.constant_rank
    assert {k: v["rank"] for k, v in a.per_k.items()} == {k: v["rank"] for k, v in b.per_k.items()}
