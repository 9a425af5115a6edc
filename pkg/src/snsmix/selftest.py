"""Quick invariant suite behind `snsmix selftest`.

Each check returns (name, passed, detail).  Sizes are kept small so the
whole suite runs in well under a minute.
"""
from __future__ import annotations

import warnings

import numpy as np

from .dynamics import SimConfig, fk_integral, simulate
from .ergodicity import (Observable, control_synthesis, duhamel_residual,
                         mixing_estimate, semigroup_estimate)
from .field import BASIS_SCALE, GalerkinField, random_field
from .hormander import bracket_span_check
from .lattice import enumerate_modes
from .noise import build_covariance
from .nonlinearity import bilinear, pair_interaction
from .tangent import low_jacobian, malliavin_matrix


def _energy(rng):
    worst = 0.0
    for _ in range(50):
        u = random_field(3, rng, 1.0, 0.0, 0.0)
        b = bilinear(u, u)
        worst = max(worst, abs(np.sum(b.coeffs * u.coeffs)) / np.linalg.norm(u.coeffs) ** 3)
    return worst <= 1e-11, f"max |<B(u,u),u>|/|u|^3 = {worst:.2e}"


def _pairs(rng):
    modes = enumerate_modes(2)
    worst = 0.0
    for _ in range(20):
        i, j = rng.choice(len(modes), 2, replace=False)
        u = GalerkinField(modes)
        v = GalerkinField(modes)
        u.coeffs[i] = rng.standard_normal(2)
        v.coeffs[j] = rng.standard_normal(2)
        a = u.coeffs[i, 0] * modes.e1[i] + u.coeffs[i, 1] * modes.e2[i]
        b = v.coeffs[j, 0] * modes.e1[j] + v.coeffs[j, 1] * modes.e2[j]
        ref = GalerkinField(modes)
        for k, vec in pair_interaction(modes.modes[i], a, modes.modes[j], b).items():
            idx = modes.index(k)
            if idx >= 0:
                # raw trig basis -> normalized basis
                ref.coeffs[idx] += BASIS_SCALE * np.array([vec @ modes.e1[idx], vec @ modes.e2[idx]])
        got = bilinear(u, v) + bilinear(v, u)
        worst = max(worst, np.abs(got.coeffs - ref.coeffs).max())
    return worst <= 1e-12, f"table vs pair formula {worst:.2e}"


def _roundtrip(rng):
    x = random_field(3, rng)
    y = GalerkinField.from_json(x.to_json())
    return bool(np.array_equal(x.coeffs, y.coeffs)), "field JSON round trip"


def _fk(rng, Q):
    x = random_field(2, rng)
    worst = 0.0
    for K in (1.0, 100.0, 1e4):
        run = simulate(x, SimConfig(m=2, dt=1e-4, T=0.05, K=K, seed=1), Q)
        E = np.exp(run.log_fk_weight[-1])
        ref = (1.0 - E) / K
        worst = max(worst, abs(fk_integral(run.enstrophy, K, run.dt) - ref) / ref)
    return worst <= 1e-6, f"quadrature vs (1-E)/K, rel {worst:.2e}"


def _jacobian(rng):
    Q = build_covariance(1, 1.4, 3)
    run = simulate(random_field(3, rng), SimConfig(m=3, dt=1e-3, T=0.03, seed=2), Q)
    path = low_jacobian(run, 2)
    J0, Ji0 = path.at(0)
    ident = np.eye(J0.shape[0])
    exact = np.array_equal(J0, ident) and np.array_equal(Ji0, ident)
    res = float(np.nanmax(path.residual))
    return exact and res <= 1e-7, f"J0 = Id: {exact}, max |J Jinv - I| = {res:.2e}"


def _malliavin_zero(rng):
    Q = build_covariance(1, 1.4, 3)
    run = simulate(random_field(3, rng), SimConfig(m=3, dt=1e-3, T=0.01, seed=3), Q)
    mm = malliavin_matrix(run, 1, Q)
    return bool(np.all(mm.M == 0)), "unforced low box gives M_t = 0"


def _hormander():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        good = bracket_span_check(build_covariance(1, 1.4, 3), 2, samples=2)
        bad = bracket_span_check(build_covariance(1, 1.4, 3, rank_one=True), 2, samples=2)
    ok = good.passed and not bad.passed and bad.witness is not None
    return ok, f"delta_hat {good.delta_hat:.3e}; rank-one forcing flagged: {not bad.passed}"


def _semigroups(rng, Q):
    x = random_field(2, rng)
    one = Observable("one", lambda X: np.ones(len(X)))
    est = semigroup_estimate(one, x, 0.05, 8, 0.0, Q, 0.01)
    d = duhamel_residual(Observable("e", lambda X: np.cos(X[:, 0, 0])), x, 0.05, 8, 0.0, Q, 0.01)
    ok = est.mean == 1.0 and est.stderr == 0.0 and d.residual == 0.0
    return ok, f"constants pass through, K=0 Duhamel residual {d.residual}"


def _mixing(rng, Q):
    x = random_field(2, rng)
    res = mixing_estimate(x, x, Q, 0.5, 8, 0.05, bootstrap=5)
    return bool(np.all(res.tv == 0)), "x1 = x2 gives TV 0"


def _control():
    Q = build_covariance(1, 1.4, 3)
    z = GalerkinField(3)
    res = control_synthesis(z, z, 1.0, Q, dt=0.02)
    ok = res.error == 0.0 and not np.any(res.controls) and res.high_at_T2 == 0.0
    return ok, "x = y = 0 gives w = 0 and error 0"


def _replay(rng, Q):
    x = random_field(2, rng)
    cfg = SimConfig(m=2, dt=0.01, T=0.1, K=1.0, seed=9)
    a = simulate(x, cfg, Q, replica=4).to_jsonl(2)
    b = simulate(x, cfg, Q, replica=4).to_jsonl(2)
    return a == b, "same seed gives identical output"


def run_selftest(seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        Q2 = build_covariance(1, 1.4, 2)
    checks = [
        ("energy conservation", lambda: _energy(rng)),
        ("pair interactions", lambda: _pairs(rng)),
        ("field serialization", lambda: _roundtrip(rng)),
        ("Feynman-Kac identity", lambda: _fk(rng, Q2)),
        ("Jacobian inverse", lambda: _jacobian(rng)),
        ("Malliavin degenerate", lambda: _malliavin_zero(rng)),
        ("Hormander certificate", _hormander),
        ("semigroup trivia", lambda: _semigroups(rng, Q2)),
        ("mixing identical starts", lambda: _mixing(rng, Q2)),
        ("control at rest", _control),
        ("reproducibility", lambda: _replay(rng, Q2)),
    ]
    rows = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        rows.append((name, bool(ok), detail))
    return rows
