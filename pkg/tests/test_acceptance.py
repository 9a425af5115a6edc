"""Acceptance gate.

Each criterion is a function returning (passed, detail).  Under pytest every
criterion is a test that prints one PASS/FAIL line; run this file directly
to get the same report without pytest.
"""
import json
import math
import os
import subprocess
import sys
import tempfile
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from oracles import convection_oracle, pair_formula_plus_minus  # noqa: E402

from snsmix.cli import build_field
from snsmix.dynamics import SimConfig, fk_integral, simulate
from snsmix.ergodicity import (control_synthesis, cosine_observable, duhamel_residual,
                               mixing_estimate)
from snsmix.field import BASIS_SCALE, GalerkinField, random_field
from snsmix.hormander import bracket_span_check
from snsmix.lattice import enumerate_modes, in_plus
from snsmix.noise import build_covariance
from snsmix.nonlinearity import bilinear, bilinear_batch
from snsmix.tangent import (derivative_flow, low_jacobian, malliavin_direction, malliavin_matrix,
                            malliavin_path)

CRITERIA = {}


def criterion(num, title):
    def wrap(fn):
        CRITERIA[num] = (title, fn)
        return fn
    return wrap


def _q(n0=1, m=3, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return build_covariance(n0, 1.4, m, **kw)


@criterion(1, "nonlinearity matches grid oracle and pair formulas")
def c1():
    start = time.perf_counter()
    ms = enumerate_modes(3)
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        u, v = random_field(3, rng, 1.0, 0.0, 0.0), random_field(3, rng, 1.0, 0.0, 0.0)
        ref = convection_oracle(ms.modes, ms.frames, u.coeffs, v.coeffs)
        worst = max(worst, np.abs(bilinear(u, v).coeffs - ref).max() / np.abs(ref).max())
    # single cos/sin pairs through the full bilinear map
    pair_worst, count = 0.0, 0
    while count < 200:
        i, k = rng.integers(len(ms), size=2)
        j, l = ms.modes[i], ms.modes[k]
        if not in_plus(j) or in_plus(l) or not (np.any(j + l) and np.any(j - l)):
            continue
        u, v = GalerkinField(ms), GalerkinField(ms)
        u.coeffs[i], v.coeffs[k] = rng.standard_normal(2), rng.standard_normal(2)
        aj = u.coeffs[i] @ ms.frames[i]
        al = v.coeffs[k] @ ms.frames[k]
        plus, minus = pair_formula_plus_minus(j, aj, l, al)
        ref = GalerkinField(ms)
        for kk, vec in ((j + l, plus), (j - l, minus)):
            kk = kk if in_plus(kk) else -kk
            idx = ms.index(kk)
            if idx >= 0:
                ref.coeffs[idx] += BASIS_SCALE * (ms.frames[idx] @ vec)
        got = bilinear(u, v) + bilinear(v, u)
        pair_worst = max(pair_worst, np.abs(got.coeffs - ref.coeffs).max())
        count += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and pair_worst <= 1e-10 and elapsed < 60
    return ok, f"grid rel {worst:.1e}, pairs {pair_worst:.1e}, {elapsed:.1f}s"


@criterion(2, "energy conservation of the truncated nonlinearity")
def c2():
    ms = enumerate_modes(3)
    rng = np.random.default_rng(2)
    worst = 0.0
    for chunk in range(10):
        X = np.stack([random_field(3, rng, 10.0 ** rng.uniform(-3, 3), rng.uniform(0, 1),
                                   rng.uniform(0, 2)).coeffs for _ in range(100)])
        B = bilinear_batch(X, X, ms)
        ratio = np.abs(np.sum(B * X, axis=(1, 2))) / np.linalg.norm(X.reshape(100, -1), axis=1) ** 3
        worst = max(worst, ratio.max())
    return worst <= 1e-11, f"max |<B(u,u),u>|/|u|^3 = {worst:.1e} over 1000 fields"


@criterion(3, "Feynman-Kac quadrature equals (1 - E)/K")
def c3():
    Q = _q(m=2)
    rng = np.random.default_rng(3)
    worst = 0.0
    for r in range(20):
        x = random_field(2, rng)
        for K in (1.0, 1e2, 1e4):
            run = simulate(x, SimConfig(m=2, dt=1e-4, T=0.05, K=K, seed=r), Q)
            ref = -math.expm1(run.log_fk_weight[-1]) / K
            worst = max(worst, abs(fk_integral(run.enstrophy, K, run.dt) - ref) / ref)
    return worst <= 1e-6, f"max relative gap {worst:.1e}"


@criterion(4, "derivative flow matches finite differences linearly in eps")
def c4():
    Q = _q()
    rng = np.random.default_rng(4)
    eps = (1e-3, 1e-4, 1e-5)
    rates, scaled = [], []
    for r in range(10):
        x, h = random_field(3, rng), random_field(3, rng)
        cfg = SimConfig(m=3, dt=1e-3, T=0.2, seed=r)
        run = simulate(x, cfg, Q)
        eta = derivative_flow(run, h).values[-1]
        errs = []
        for e in eps:
            xe = simulate(x + h * e, cfg, Q).final.coeffs  # same seed, shared noise
            errs.append(np.linalg.norm((xe - run.final.coeffs) / e - eta))
        rates += [errs[0] / errs[1], errs[1] / errs[2]]
        scaled.append(np.array(errs) / np.array(eps))
    scaled = np.array(scaled)
    spread = float((scaled.max(axis=1) / scaled.min(axis=1)).max())
    ok = min(rates) >= 8 and max(rates) <= 12 and spread <= 1.5
    return ok, f"error ratios per decade in [{min(rates):.2f}, {max(rates):.2f}], error/eps spread {spread:.3f}"


@criterion(5, "Jacobian identity start, inverse, cocycle, Stokes closed form")
def c5():
    Q = _q()
    x = random_field(3, np.random.default_rng(5))
    run = simulate(x, SimConfig(m=3, dt=1e-4, T=1.0, seed=5), Q)
    s = 9000
    path = low_jacobian(run, 2, store_steps=[0, s, run.nsteps])
    J0, Ji0 = path.at(0)
    ident = np.array_equal(J0, np.eye(len(J0))) and np.array_equal(Ji0, np.eye(len(J0)))
    inv_res = float(np.nanmax(path.residual))
    Js, _ = path.at(s)
    JT, _ = path.at(run.nsteps)
    JsT, _ = low_jacobian(run, 2, start=s).at(run.nsteps)
    cocycle = float(np.linalg.norm(JT - JsT @ Js) / np.linalg.norm(JT))
    # Stokes only: exact discrete product, first order against exp(-|k|^2 t)
    gaps = []
    for dt in (1e-2, 5e-3):
        st = simulate(x, SimConfig(m=3, dt=dt, T=1.0, convection=False))
        J, _ = low_jacobian(st, 2).at(st.nsteps)
        lam = np.repeat(x.modes.norm2[x.modes.low_mask(2)], 2)
        exact_disc = np.abs(np.diag(J) - (1 + dt * lam) ** -st.nsteps).max()
        gaps.append((exact_disc, np.abs(np.diag(J) - np.exp(-lam)).max()))
    order = gaps[0][1] / gaps[1][1]
    ok = ident and inv_res <= 1e-7 and cocycle <= 1e-8 and max(g[0] for g in gaps) <= 1e-14 \
        and 1.8 <= order <= 2.2
    return ok, (f"J0 = Id {ident}, max |J Jinv - I|_F {inv_res:.1e}, cocycle {cocycle:.1e}, "
                f"Stokes error halves per halving of dt ({order:.2f}x)")


@criterion(6, "Malliavin matrix PSD, small-time slope, degenerate case, direction")
def c6():
    Q = _q()
    Ql = Q.low_matrix(2)
    S = Ql @ Ql.T
    rng = np.random.default_rng(6)
    sym, low = 0.0, np.inf
    for r in range(100):
        run = simulate(random_field(3, rng), SimConfig(m=3, dt=1e-3, T=0.02, seed=r), Q)
        M = malliavin_matrix(run, 2, Q).M
        sym = max(sym, np.abs(M - M.T).max() / np.abs(M).max())
        low = min(low, np.linalg.eigvalsh(M)[0] / np.abs(M).max())
    ratios = []
    for r in range(10):
        run = simulate(random_field(3, rng), SimConfig(m=3, dt=1e-5, T=1e-3, seed=r), Q)
        errs = [np.linalg.norm(mm.M / mm.t - S) for mm in malliavin_path(run, 2, Q, [25, 50, 100])]
        ratios += [errs[1] / errs[0], errs[2] / errs[1]]
    zero = malliavin_matrix(run, 1, Q).M
    high = 0.0
    for r in range(3):
        run = simulate(random_field(3, rng), SimConfig(m=3, dt=1e-3, T=0.05, seed=r), Q)
        d = malliavin_direction(run, rng.standard_normal(len(S)), Q, 2)
        high = max(high, d.high_residual)
    ok = sym <= 1e-12 and low >= -1e-12 and min(ratios) >= 2 and not np.any(zero) and high <= 1e-8
    return ok, (f"asym {sym:.0e}, min eig/max entry {low:.1e}, halving ratio >= {min(ratios):.4f}, "
                f"M = 0 when Q^l = 0: {not np.any(zero)}, max|D_vX^h|/max|D_vX^l| {high:.1e}")


@criterion(7, "Hormander certificate and rank-one witness")
def c7():
    start = time.perf_counter()
    cert = bracket_span_check(_q(), 2, samples=20)
    bad = bracket_span_check(_q(rank_one=True), 2, samples=20)
    elapsed = time.perf_counter() - start
    ranks = {v["rank"] for v in cert.per_k.values()}
    ok = (cert.passed and ranks == {2} and len(cert.delta_per_sample) == 21
          and min(cert.delta_per_sample) > 0 and not bad.passed and bad.witness is not None
          and elapsed < 60)
    return ok, (f"{len(cert.per_k)} unforced modes with rank {sorted(ranks)}, delta_hat {cert.delta_hat:.2e} "
                f"over {len(cert.delta_per_sample)} points, rank-one flagged {not bad.passed}, {elapsed:.1f}s")


@criterion(8, "Duhamel identity between plain and weighted semigroups")
def c8():
    Q = _q(m=2)
    x = random_field(2, np.random.default_rng(8), 1.0, 1.0, 2.0)
    phi = cosine_observable(x.modes, (1, 0, 0), 0, 2.0)
    d = duhamel_residual(phi, x, 0.25, 10_000, 10.0, Q, 0.01, seed=8)
    ok = abs(d.residual) <= 3 * d.stderr
    return ok, f"residual {d.residual:.4f}, stderr {d.stderr:.4f}, P_t {d.lhs:.4f}, S^K_t {d.weighted:.4f}"


@criterion(9, "mixing diagnostics")
def c9():
    start = time.perf_counter()
    Q = _q(m=2)
    cfg = {"m": 2, "seed": 0, "x1": {"random": {"amplitude": 1.0}}, "x2": {"random": {"amplitude": 1.0}}}
    x1, x2 = build_field(cfg, "x1"), build_field(cfg, "x2")
    same = mixing_estimate(x1, x1, Q, 5.0, 1000, 0.05, seed=9, bootstrap=10)
    res = mixing_estimate(x1, x2, Q, 20.0, 1000, 0.05, seed=9)
    elapsed = time.perf_counter() - start
    zero = bool(np.all(same.tv == 0) and np.all(same.coupling_tv == 0))
    ok = zero and res.spearman < -0.9 and res.fit_c > 0 and res.never_separated and elapsed < 600
    return ok, (f"x1 = x2 gives TV 0: {zero}, Spearman {res.spearman:.3f}, c {res.fit_c:.3f}, "
                f"never separated {res.never_separated}, {elapsed:.0f}s")


@criterion(10, "four-phase control reaches the target")
def c10():
    Q = _q()
    rng = np.random.default_rng(10)
    errors, high, unforced = [], 0.0, 0.0
    for _ in range(10):
        x, y = random_field(3, rng, 1.0, 1.0), random_field(3, rng, 1.0, 1.0)
        res = control_synthesis(x, y, 2.0, Q, epsilon=0.1)
        errors.append(res.error)
        high = max(high, res.high_at_T2)
        unforced = max(unforced, float(np.abs(res.controls[:, ~Q.forced]).max()))
    ok = max(errors) <= 0.1 and high == 0.0 and unforced == 0.0
    return ok, f"max |A(u(T) - y)| {max(errors):.1e}, max |u^h(T2)| {high}, max |w| on unforced modes {unforced}"


RERUNS = {
    "simulate": ["--m", "2", "--T", "0.05", "--dt", "0.01", "--K", "1", "--ensemble", "2",
                 "--snapshot-every", "2"],
    "check-hormander": ["--samples", "2"],
    "malliavin": ["--T", "0.01", "--dt", "1e-3", "--ensemble", "4"],
    "mixing": ["--horizon", "1", "--ensemble", "50"],
    "control": ["--T", "1.0", "--dt", "0.01"],
    "selftest": [],
}


def _outputs(root):
    files = {}
    for p in sorted(root.iterdir()):
        if p.name == "manifest.json":
            man = json.loads(p.read_text())
            man.pop("wall_time")
            files[p.name] = json.dumps(man, sort_keys=True).encode()
        else:
            files[p.name] = p.read_bytes()
    return files


@criterion(11, "reruns are byte-identical")
def c11():
    bad = []
    env = dict(os.environ)
    with tempfile.TemporaryDirectory() as tmp:
        for cmd, args in RERUNS.items():
            got = []
            for rep in ("a", "b"):
                cwd = Path(tmp) / cmd / rep
                cwd.mkdir(parents=True)
                proc = subprocess.run([sys.executable, "-m", "snsmix", cmd, *args, "--seed", "11",
                                       "--output-dir", "out"], cwd=cwd, env=env, capture_output=True)
                if proc.returncode != 0:
                    bad.append(f"{cmd} exit {proc.returncode}")
                got.append(_outputs(cwd / "out"))
            if got[0] != got[1]:
                bad.append(cmd)
    return not bad, "all commands identical (manifest wall time aside)" if not bad else f"differ: {bad}"


def _line(num, ok, detail):
    return f"[{num:2d}] {'PASS' if ok else 'FAIL'}  {CRITERIA[num][0]}: {detail}"


@pytest.mark.slow
@pytest.mark.parametrize("num", sorted(CRITERIA))
def test_criterion(num, capsys):
    ok, detail = CRITERIA[num][1]()
    with capsys.disabled():
        print("\n" + _line(num, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    results = []
    for num in sorted(CRITERIA):
        ok, detail = CRITERIA[num][1]()
        results.append(ok)
        print(_line(num, ok, detail), flush=True)
    sys.exit(0 if all(results) else 1)
