import numpy as np
import pytest

from snsmix.dynamics import SimConfig, simulate
from snsmix.field import GalerkinField, random_field, sobolev_norm
from snsmix.noise import build_covariance
from snsmix.tangent import (MalliavinMatrix, derivative_flow, low_jacobian, malliavin_direction,
                            malliavin_matrix, malliavin_path, min_eigen_tail)


@pytest.fixture(scope="module")
def run3():
    Q = build_covariance(1, 1.4, 3)
    x = random_field(3, np.random.default_rng(2))
    return simulate(x, SimConfig(m=3, dt=1e-3, T=0.05, seed=1), Q), Q


def test_zero_direction(run3):
    run, _ = run3
    assert np.all(derivative_flow(run, GalerkinField(3)).values == 0)


def test_stokes_only_variation(rng):
    x = random_field(2, rng)
    cfg = SimConfig(m=2, dt=0.01, T=0.2, convection=False)
    run = simulate(x, cfg)
    h = random_field(2, rng)
    path = derivative_flow(run, h)
    decay = (1 + cfg.step_size * x.modes.norm2) ** -cfg.nsteps
    assert np.allclose(path.values[-1], h.coeffs * decay[:, None], rtol=1e-13)


def test_finite_difference_second_order(rng, Q2):
    """The scheme is quadratic, so the difference quotient error is exactly O(eps)."""
    x, h = random_field(2, rng), random_field(2, rng)
    cfg = SimConfig(m=2, dt=0.01, T=0.3, seed=3)
    run = simulate(x, cfg, Q2)
    eta = derivative_flow(run, h).values[-1]
    errs = []
    for eps in (1e-2, 1e-3):
        xe = simulate(x + h * eps, cfg, Q2).final.coeffs
        errs.append(np.abs((xe - run.final.coeffs) / eps - eta).max())
    assert 5 < errs[0] / errs[1] < 20


def test_jacobian_identity_start(run3):
    run, _ = run3
    path = low_jacobian(run, 2)
    J0, Ji0 = path.at(0)
    assert np.array_equal(J0, np.eye(248)) and np.array_equal(Ji0, np.eye(248))
    assert np.nanmax(path.residual) < 1e-10
    with pytest.raises(KeyError):
        low_jacobian(run, 2, store_every=10).at(3)


def test_jacobian_stokes_only(rng):
    x = random_field(3, rng)
    cfg = SimConfig(m=3, dt=0.01, T=0.1, convection=False)
    run = simulate(x, cfg)
    J, Jinv = low_jacobian(run, 1).at(run.nsteps)
    lam = np.repeat(x.modes.norm2[x.modes.low_mask(1)], 2)
    assert np.allclose(J, np.diag((1 + 0.01 * lam) ** -10))
    assert np.allclose(Jinv @ J, np.eye(len(lam)))


def test_cocycle(run3):
    run, _ = run3
    s = 20
    full = low_jacobian(run, 1)
    tail = low_jacobian(run, 1, start=s)
    J_t, _ = full.at(run.nsteps)
    J_s, _ = full.at(s)
    J_st, _ = tail.at(run.nsteps)
    assert np.abs(J_t - J_st @ J_s).max() < 1e-12


def test_jacobian_invertible(run3):
    run, _ = run3
    path = low_jacobian(run, 1)
    J, _ = path.at(run.nsteps)
    assert np.all(np.isfinite(J)) and np.linalg.matrix_rank(J) == J.shape[0]


def test_malliavin_psd_and_zero(run3):
    run, Q = run3
    mm = malliavin_matrix(run, 2, Q)
    assert np.allclose(mm.M, mm.M.T)
    assert mm.eigenvalues[0] >= -1e-12 and mm.lambda_min >= 0
    zero = malliavin_matrix(run, 1, Q)
    assert np.all(zero.M == 0) and zero.lambda_min == 0


def test_malliavin_small_time(run3):
    run, Q = run3
    QQ = Q.low_matrix(2) @ Q.low_matrix(2).T
    ms = malliavin_path(run, 2, Q, [4, 8, 16])
    errs = [np.linalg.norm(m.M / m.t - QQ) for m in ms]
    assert errs[0] < errs[1] < errs[2]


def test_malliavin_additivity(run3):
    run, Q = run3
    a, b = malliavin_path(run, 2, Q, [10, 30])
    full = low_jacobian(run, 2, Q, store_steps=[10, 30])
    assert np.allclose(full.malliavin[-1], b.M, rtol=1e-12, atol=0)
    assert np.all(np.linalg.eigvalsh(b.M - a.M) >= -1e-15)


def test_from_matrix_clips():
    mm = MalliavinMatrix.from_matrix(1.0, np.array([[1.0, 0.0], [0.0, -1e-14]]))
    assert mm.lambda_min == 0.0
    bad = MalliavinMatrix.from_matrix(1.0, np.array([[1.0, 0.0], [0.0, -1e-6]]))
    assert bad.lambda_min < 0


def test_direction_zero_target(run3):
    run, Q = run3
    d = malliavin_direction(run, np.zeros(248), Q, 2)
    assert np.all(d.v == 0) and np.all(d.low_variation == 0) and d.high_residual == 0


def test_direction_kills_high_variation(run3):
    run, Q = run3
    rng = np.random.default_rng(5)
    h = rng.standard_normal(248)
    d = malliavin_direction(run, h, Q, 2)
    assert d.high_residual <= 1e-8
    # D_v X^l(t) = J_t M_t h
    path = low_jacobian(run, 2, Q, store_steps=[run.nsteps])
    J, _ = path.at(run.nsteps)
    ref = J @ path.malliavin[-1] @ h
    assert np.linalg.norm(d.low_variation[-1] - ref) <= 0.05 * np.linalg.norm(ref)


def test_direction_needs_invertible_noise(run3):
    run, _ = run3
    Q = build_covariance(1, 1.4, 3, rank_one=True)
    with pytest.raises(ValueError):
        malliavin_direction(run, np.ones(248), Q, 2)


def test_tail_estimate():
    lam = np.linspace(0, 1, 200)
    probs = [min_eigen_tail(lam, e, 1.0).probability for e in (0.5, 0.25, 0.125)]
    assert probs == sorted(probs, reverse=True)
    te = min_eigen_tail(lam, 0.5, 1.0)
    assert te.ci_low <= te.probability <= te.ci_high
    assert min_eigen_tail(np.zeros(100), 0.5, 2.0).probability == 1.0
    with pytest.raises(ValueError):
        min_eigen_tail(lam[:50], 0.5, 1.0)


def test_energy_inequality_with_large_K(rng, Q2):
    """|A^g D_h X(t)|^2 E_K(t) <= |A^g h|^2 once K dominates the stretching."""
    x, h = random_field(2, rng), random_field(2, rng)
    run = simulate(x, SimConfig(m=2, dt=1e-3, T=0.3, K=50.0, seed=2), Q2)
    vals = derivative_flow(run, h).values
    w = np.exp(run.log_fk_weight)
    for g in (0.6, 1.0):
        lhs = [sobolev_norm(GalerkinField(h.modes, v), g) ** 2 * wi for v, wi in zip(vals, w)]
        assert max(lhs) <= sobolev_norm(h, g) ** 2 * (1 + 1e-9)


def test_jacobian_bound_with_large_K(rng, Q3):
    x = random_field(3, rng)
    run = simulate(x, SimConfig(m=3, dt=1e-3, T=0.05, K=50.0, seed=2), Q3)
    path = low_jacobian(run, 1, store_every=10)
    for s, J in zip(path.steps, path.J):
        assert np.linalg.norm(J, 2) ** 2 * np.exp(run.log_fk_weight[s]) <= 1 + 1e-9
