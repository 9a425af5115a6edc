"""Monte Carlo estimators for the weighted semigroups and mixing, plus control synthesis.

semigroup_estimate   E[phi(X_t) E_K(t)]
duhamel_residual     P_t phi - S^K_t phi - K int_0^t S^K_s[|A.|^2 P_{t-s} phi] ds
mixing_estimate      coupling and binned total-variation curves from two starts
control_synthesis    open-loop forcing steering x to a neighbourhood of y
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .dynamics import NumericalBlowup, SimConfig, _advance
from .field import GalerkinField, sobolev_norm
from .lattice import ModeSet
from .noise import BRANCH_STREAM, MAIN_STREAM, CovarianceOperator, EnsembleNoise
from .nonlinearity import bilinear_batch, linearization_matrix


@dataclass(frozen=True)
class Observable:
    """Function of a batch of states (R, M, 2) -> (R,), with its polynomial degree."""

    name: str
    fn: object
    degree: int = 0

    def __call__(self, states):
        return self.fn(states)


def energy_observable(modes: ModeSet) -> Observable:
    return Observable("energy", lambda X: np.einsum("rkc->r", X**2), 2)


def enstrophy_observable(modes: ModeSet) -> Observable:
    w = modes.norm2**2
    return Observable("enstrophy", lambda X: np.einsum("rkc,k->r", X**2, w), 2)


def coefficient_observable(modes: ModeSet, k, comp: int = 0) -> Observable:
    i = modes.index(k)
    if i < 0:
        raise ValueError(f"mode {k} is not in the box")
    return Observable(f"coef{tuple(int(c) for c in k)}[{comp}]", lambda X: X[:, i, comp], 1)


def cosine_observable(modes: ModeSet, k, comp: int = 0, scale: float = 1.0) -> Observable:
    """Bounded cylinder function cos(scale * x_k^comp)."""
    i = modes.index(k)
    if i < 0:
        raise ValueError(f"mode {k} is not in the box")
    return Observable(f"cos{tuple(int(c) for c in k)}[{comp}]",
                      lambda X: np.cos(scale * X[:, i, comp]), 0)


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    used: int
    blown: int


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    if len(v) == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else float("nan")
    return float(v.mean()), se


def _stack(x0, R, M):
    X = np.empty((R, M, 2))
    X[:] = x0.coeffs if isinstance(x0, GalerkinField) else x0
    return X


def semigroup_estimate(phi, x0: GalerkinField, t: float, M: int, K: float,
                       Q: CovarianceOperator, dt: float, seed: int = 0,
                       drop_blowups: bool = False) -> Estimate:
    """Monte Carlo estimate of S^K_t phi(x0) = E[phi(X_t) E_K(t)] over M replicas.

    Blown-up replicas abort the estimate unless drop_blowups is set, in
    which case they are excluded and counted.
    """
    if M < 2:
        raise ValueError(f"need at least 2 replicas, got {M}")
    cfg = SimConfig(m=Q.m, dt=dt, T=t, K=K, seed=seed)
    modes = Q.modes
    X = _stack(x0, M, len(modes))
    noise = EnsembleNoise(seed, np.arange(M), len(modes), MAIN_STREAM)
    n, h = cfg.nsteps, cfg.step_size
    lam2 = modes.norm2**2
    ens = np.einsum("rkc,k->r", X**2, lam2)
    logw = np.zeros(M)
    for i in range(n):
        X = _advance(X, h, Q.apply(noise.next()) * math.sqrt(h), modes)
        new = np.einsum("rkc,k->r", X**2, lam2)
        logw -= K * 0.5 * h * (ens + new)
        ens = new
    ok = np.isfinite(ens)
    if not ok.all() and not drop_blowups:
        raise NumericalBlowup(t)
    vals = phi(X[ok]) * np.exp(logw[ok])
    mean, se = _mean_se(vals)
    return Estimate(mean, se, int(ok.sum()), int((~ok).sum()))


@dataclass(frozen=True)
class DuhamelResult:
    lhs: float          # P_t phi(x)
    weighted: float     # S^K_t phi(x)
    integral: float     # K int_0^t S^K_s[|A.|^2 P_{t-s} phi](x) ds
    residual: float
    stderr: float
    replicas: int
    steps: int


def duhamel_residual(phi, x0: GalerkinField, t: float, M: int, K: float,
                     Q: CovarianceOperator, dt: float, seed: int = 0) -> DuhamelResult:
    """Check P_t phi = S^K_t phi + K int_0^t S^K_s[|A.|^2 P_{t-s} phi] ds.

    Each replica runs one outer path with common random numbers for both
    semigroups.  The time integral is sampled by branching once per
    replica at a uniformly chosen grid step s = t_I: an independent
    continuation (separate noise stream) restarts from X_I and estimates
    P_{t-s} phi.  The kernel K |A X|^2 E_K ds of a step is taken as
    E_K(t_I) (1 - exp(-K tau_I)), tau_I the trapezoidal enstrophy integral
    over the branch's first step, which makes the discrete identity exact
    in expectation.  The residual and its standard error are computed per
    replica from the combined estimator.
    """
    if M < 2:
        raise ValueError(f"need at least 2 replicas, got {M}")
    cfg = SimConfig(m=Q.m, dt=dt, T=t, K=K, seed=seed)
    n, h = cfg.nsteps, cfg.step_size
    modes = Q.modes
    size = len(modes)
    reps = np.arange(M)
    X = _stack(x0, M, size)
    if n == 0:
        f = float(np.mean(phi(X)))
        return DuhamelResult(f, f, 0.0, 0.0, 0.0, M, 0)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 2])))
    branch_at = rng.integers(0, n, size=M)
    Y = np.zeros_like(X)  # branch states
    outer = EnsembleNoise(seed, reps, size, MAIN_STREAM)
    inner = EnsembleNoise(seed, reps, size, BRANCH_STREAM)
    lam2 = modes.norm2**2
    sq = math.sqrt(h)
    ens = np.einsum("rkc,k->r", X**2, lam2)
    logw = np.zeros(M)
    kernel = np.zeros(M)
    for i in range(n):
        start = branch_at == i
        if start.any():
            Y[start] = X[start]
        active = branch_at <= i
        xi_in = inner.next()
        if active.any():
            Y[active] = _advance(Y[active], h, Q.apply(xi_in[active]) * sq, modes)
        if start.any():
            ens_y = np.einsum("rkc,k->r", Y[start] ** 2, lam2)
            tau = 0.5 * h * (ens[start] + ens_y)
            kernel[start] = np.exp(logw[start]) * -np.expm1(-K * tau)
        X = _advance(X, h, Q.apply(outer.next()) * sq, modes)
        new = np.einsum("rkc,k->r", X**2, lam2)
        logw -= K * 0.5 * h * (ens + new)
        ens = new
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise NumericalBlowup(t)
    fx = phi(X)
    fy = phi(Y)
    a = fx
    b = fx * np.exp(logw)
    c = n * kernel * fy
    res = a - b - c
    mean, se = _mean_se(res)
    return DuhamelResult(float(a.mean()), float(b.mean()), float(c.mean()), mean, se, M, n)


@dataclass
class MixingResult:
    times: np.ndarray
    coupling_tv: np.ndarray     # fraction of pairs not yet coalesced
    coupling_ci: np.ndarray
    tv: np.ndarray              # binned TV, maximum over observables
    tv_ci: np.ndarray
    tv_by_observable: dict
    fit_C: float
    fit_c: float
    fit_residual: float         # RMS residual of the log-linear fit
    spearman: float
    tail: tuple
    never_separated: bool
    replicas: int
    observables: list = field(default_factory=list)

    def to_csv(self) -> str:
        lines = ["t,tv,ci,fit_C,fit_c"]
        for t, tv, ci in zip(self.times, self.tv, self.tv_ci):
            lines.append(",".join(repr(float(v)) for v in (t, tv, ci, self.fit_C, self.fit_c)))
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        return {
            "replicas": self.replicas,
            "observables": self.observables,
            "fit_C": self.fit_C,
            "fit_c": self.fit_c,
            "fit_residual": self.fit_residual,
            "fit_reliable": self.fit_reliable,
            "spearman": self.spearman,
            "tail": list(self.tail),
            "never_separated": self.never_separated,
            "final_coupling_tv": float(self.coupling_tv[-1]),
            "final_tv": float(self.tv[-1]),
            "binned_tv_is_lower_bound": True,
        }

    @property
    def fit_reliable(self) -> bool:
        return bool(np.isfinite(self.fit_c) and self.fit_residual <= FIT_RESIDUAL_MAX)


FIT_RESIDUAL_MAX = 1.0  # RMS of log TV about the fitted line


def _binned_tv(a, b, edges):
    """TV between two samples on fixed bins, per time row. a, b: (T, R)."""
    nb = len(edges) + 1
    ia = np.searchsorted(edges, a)
    ib = np.searchsorted(edges, b)
    T, R = a.shape
    off = (np.arange(T) * nb)[:, None]
    ha = np.bincount((ia + off).ravel(), minlength=T * nb).reshape(T, nb)
    hb = np.bincount((ib + off).ravel(), minlength=T * nb).reshape(T, nb)
    return 0.5 * np.abs(ha - hb).sum(axis=1) / R, ia, ib


def _fit_tail(times, tv, burn_in):
    """Log-linear fit C e^{-c t} and Spearman correlation over the tail.

    The tail runs from burn_in up to and including the first time the
    curve reaches zero.
    """
    sel = np.flatnonzero(times >= burn_in)
    nan = float("nan")
    if len(sel) == 0:
        return nan, nan, nan, nan, (nan, nan)
    zeros = sel[tv[sel] <= 0]
    end = zeros[0] if len(zeros) else sel[-1]
    win = sel[sel <= end]
    pos = win[tv[win] > 0]
    if len(pos) >= 2:
        slope, icpt = np.polyfit(times[pos], np.log(tv[pos]), 1)
        C, c = float(np.exp(icpt)), float(-slope)
        resid = float(np.sqrt(np.mean((np.log(tv[pos]) - icpt - slope * times[pos]) ** 2)))
    else:
        C = c = resid = nan
    if len(win) >= 3 and np.ptp(tv[win]) > 0:
        rho = float(stats.spearmanr(times[win], tv[win]).statistic)
    else:
        rho = nan
    return C, c, resid, rho, (float(times[win[0]]), float(times[win[-1]]))


def mixing_estimate(x1: GalerkinField, x2: GalerkinField, Q: CovarianceOperator,
                    horizon: float, replicas: int, dt: float, seed: int = 0,
                    observables: list | None = None, bins: int = 30,
                    delta_match: float = 1e-6, burn_in: float | None = None,
                    observe_every: int = 1, bootstrap: int = 100) -> MixingResult:
    """Distance between the laws of the chains started at x1 and x2.

    Both chains of replica r are driven by the same increments
    (synchronous coupling).  Once |A(X1 - X2)| <= delta_match the pair is
    merged.  Both chains keep being integrated and merged pairs are
    compared bitwise every step, so never_separated is a check rather
    than an assumption.  Reported curves:
      coupling_tv  P(not coalesced by t), an upper bound on the TV distance
      tv           binned TV between the two ensembles of each observable on
                   a fixed grid of equal-mass bins, maximum over observables
    The tail fit and Spearman correlation use t >= burn_in
    (default horizon / 4).
    """
    if replicas < 2:
        raise ValueError(f"need at least 2 replicas, got {replicas}")
    modes = Q.modes
    size = len(modes)
    cfg = SimConfig(m=Q.m, dt=dt, T=horizon, seed=seed)
    n, h = cfg.nsteps, cfg.step_size
    burn_in = horizon / 4 if burn_in is None else burn_in
    if observables is None:
        observables = default_mixing_observables(modes)
    X1 = _stack(x1, replicas, size)
    X2 = _stack(x2, replicas, size)
    noise = EnsembleNoise(seed, np.arange(replicas), size, MAIN_STREAM)
    lam2 = modes.norm2**2
    sq = math.sqrt(h)
    merged = np.zeros(replicas, bool)
    never_separated = True
    times, uncoupled = [], []
    obs1 = [[] for _ in observables]
    obs2 = [[] for _ in observables]

    def check_merge():
        nonlocal merged
        d = np.sqrt(np.einsum("rkc,k->r", (X1 - X2) ** 2, lam2))
        hit = (~merged) & (d <= delta_match)
        X2[hit] = X1[hit]
        merged |= hit

    def record(i):
        times.append(i * h)
        uncoupled.append(1.0 - merged.mean())
        for j, ob in enumerate(observables):
            obs1[j].append(ob(X1))
            obs2[j].append(ob(X2))

    check_merge()
    record(0)
    for i in range(n):
        inc = Q.apply(noise.next()) * sq
        X1 = _advance(X1, h, inc, modes)
        X2 = _advance(X2, h, inc, modes)
        if merged.any() and not np.array_equal(X1[merged], X2[merged]):
            never_separated = False
            X2[merged] = X1[merged]
        if not (np.all(np.isfinite(X1)) and np.all(np.isfinite(X2))):
            raise NumericalBlowup((i + 1) * h, i + 1)
        check_merge()
        if (i + 1) % observe_every == 0 or i + 1 == n:
            record(i + 1)
    times = np.asarray(times)
    uncoupled = np.asarray(uncoupled)
    z = 1.96
    cci = z * np.sqrt(uncoupled * (1 - uncoupled) / replicas)

    tv_all, ci_all, names = [], [], []
    brng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 3])))
    boot_idx = brng.integers(0, replicas, size=(bootstrap, replicas))
    for ob, o1, o2 in zip(observables, obs1, obs2):
        a, b = np.asarray(o1), np.asarray(o2)  # (T, R)
        # equal-mass bins over every recorded value of both ensembles
        pool = np.concatenate([a, b]).ravel()
        pool = pool[np.isfinite(pool)]
        edges = np.unique(np.quantile(pool, np.linspace(0, 1, bins + 1)[1:-1])) if len(pool) else np.zeros(1)
        tv, _, _ = _binned_tv(a, b, edges)
        boots = np.stack([_binned_tv(a[:, ix], b[:, ix], edges)[0] for ix in boot_idx])
        qlo, qhi = np.quantile(boots, [0.025, 0.975], axis=0)
        tv_all.append(tv)
        ci_all.append(0.5 * (qhi - qlo))
        names.append(ob.name)
    tv_all = np.asarray(tv_all)
    ci_all = np.asarray(ci_all)
    which = np.argmax(tv_all, axis=0)
    tv = tv_all[which, np.arange(len(times))]
    tv_ci = ci_all[which, np.arange(len(times))]
    C, c, resid, rho, tail = _fit_tail(times, tv, burn_in)
    return MixingResult(times, uncoupled, cci, tv, tv_ci, dict(zip(names, tv_all)),
                        C, c, resid, rho, tail, never_separated, replicas, names)


def default_mixing_observables(modes: ModeSet) -> list:
    """Energy plus one coordinate of the slowest unforced mode."""
    return [energy_observable(modes), coefficient_observable(modes, (1, 0, 0), 0)]


def smoothstep(tau):
    """Cubic with value 1 at 0, value 0 at 1 and zero slope at both ends."""
    tau = np.clip(tau, 0.0, 1.0)
    return 1.0 - 3.0 * tau**2 + 2.0 * tau**3


@dataclass
class ControlResult:
    """Synthesized plan and its verification through the plain integrator."""

    times: np.ndarray
    states: np.ndarray       # (n + 1, M, 2) prescribed path
    controls: np.ndarray     # (n, M, 2)
    replayed: np.ndarray     # (n + 1, M, 2) integrator driven by Q w dt
    target: GalerkinField
    error: float             # |A(u(T) - y)| on the replayed path
    epsilon: float
    phase_steps: tuple       # grid indices of T1, T2, T3, T
    phase_errors: dict
    high_at_T2: float        # max |u^h(T2)| on the prescribed path
    replay_error: float      # max |replayed - prescribed|
    unforced_control: float  # max |w| on unforced modes
    shooting_iterations: int
    control_norm: float      # sqrt(int |w|^2 dt)

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.epsilon)

    def to_json(self) -> str:
        modes = self.target.modes
        return json.dumps({
            "passed": self.passed,
            "error": self.error,
            "epsilon": self.epsilon,
            "phase_times": [float(self.times[i]) for i in (0,) + tuple(self.phase_steps)],
            "phase_errors": self.phase_errors,
            "high_at_T2": self.high_at_T2,
            "replay_error": self.replay_error,
            "unforced_control": self.unforced_control,
            "shooting_iterations": self.shooting_iterations,
            "control_L2": self.control_norm,
            "final_state": json.loads(GalerkinField(modes, self.replayed[-1]).to_json()),
        })


class _ShellSolver:
    """Solve pi^l B(s, s) = g for s supported on a high shell.

    Shell modes satisfy |j|_inf > 2 n0, so convection between the shell
    and the low box never lands back in the low box.
    """

    def __init__(self, modes, n0, seed=0):
        self.modes = modes
        self.low = modes.low_mask(n0)
        self.shell = modes.supnorm() > 2 * n0
        if not self.shell.any():
            raise ValueError(f"steering needs modes with |k|_inf > 2 n0; raise m above {2 * n0}")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 4])))
        self.s = np.zeros((len(modes), 2))
        self.s[self.shell] = rng.standard_normal((self.shell.sum(), 2))
        self.fresh = True

    def value(self, s):
        return bilinear_batch(s, s, self.modes)[self.low].reshape(-1)

    def solve(self, g, tol=1e-12, max_iter=50):
        """Damped Gauss-Newton (minimum-norm steps) warm-started from the last solution."""
        gn = np.linalg.norm(g)
        if gn == 0:
            return np.zeros_like(self.s)
        s = self.s.copy()
        if self.fresh:
            # scale the random start to the size of the target
            s *= math.sqrt(gn / np.linalg.norm(self.value(s)))
            self.fresh = False
        r = g - self.value(s)
        for _ in range(max_iter):
            if np.linalg.norm(r) <= tol * (1.0 + gn):
                break
            J = linearization_matrix(s, self.modes, self.low, self.shell)
            step = np.linalg.lstsq(J, r, rcond=None)[0].reshape(-1, 2)
            lam = 1.0
            while lam > 1e-4:
                trial = s.copy()
                trial[self.shell] += lam * step
                rt = g - self.value(trial)
                if np.linalg.norm(rt) < np.linalg.norm(r):
                    break
                lam *= 0.5
            s, r = trial, rt
        else:
            raise RuntimeError("steering solve did not converge")
        self.s = s
        return s


def control_synthesis(x: GalerkinField, y: GalerkinField, T: float, Q: CovarianceOperator,
                      epsilon: float = 0.1, dt: float | None = None,
                      fractions=(0.3, 0.3, 0.3, 0.1), tol: float = 1e-6,
                      max_shoot: int = 30, seed: int = 0) -> ControlResult:
    """Forcing w on the forced modes driving u from x to within epsilon of y at T.

    Phase 1  [0, T1]   free flow, w = 0.
    Phase 2  [T1, T2]  high modes follow u^h(t) = psi(t) u^h(T1) with a cubic
                       psi, so u^h(T2) = 0.  On the grid
                       Q w = (psi_{i+1} - psi_i)/dt u^h(T1) + psi_{i+1} A u^h(T1) + B^h(u, u).
    Phase 3  [T2, T3]  low (unforced) modes follow a straight line to an
                       intermediate point z, driven through a high shell
                       chosen so that B^l(u, u) supplies the needed forcing.
    Phase 4  [T3, T]   high modes interpolate linearly to y^h; low modes run
                       free.  z is corrected by shooting so that u^l(T) = y^l.
    In every phase w solves the high-mode step equation of the scheme, and
    the plan is checked by driving the integrator with the increments Q w dt.
    """
    from .dynamics import simulate

    modes = Q.modes
    n0 = Q.n0
    low = modes.low_mask(n0)
    high = ~low
    if not np.all(Q.forced[high]):
        raise ValueError("control needs invertible noise on every mode outside Z_l(n0)")
    if x.modes.n != modes.n or y.modes.n != modes.n:
        raise ValueError("x, y and Q must share the cutoff")
    if not T > 0:
        raise ValueError(f"T must be positive, got {T}")
    dt = T / 500 if dt is None else dt
    cfg = SimConfig(m=modes.n, dt=dt, T=T)
    nsteps, h = cfg.nsteps, cfg.step_size
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (4,) or np.any(fr <= 0):
        raise ValueError("fractions must be four positive numbers")
    cuts = np.round(np.cumsum(fr) / fr.sum() * nsteps).astype(int)
    i1, i2, i3 = (int(c) for c in cuts[:3])
    if not 0 < i1 < i2 < i2 + 2 < i3 < nsteps:
        raise ValueError("time grid too coarse for the four phases")
    D = (1.0 + h * modes.norm2)[:, None]
    times = np.arange(nsteps + 1) * h
    U = np.zeros((nsteps + 1, len(modes), 2))
    W = np.zeros((nsteps, len(modes), 2))
    U[0] = x.coeffs

    def forced_step(i, uh_next):
        u = U[i]
        b = bilinear_batch(u, u, modes)
        r = (D * uh_next - u) / h + b
        r[low] = 0.0
        W[i] = Q.solve(r)
        nxt = (u - h * b + h * Q.apply(W[i])) / D
        nxt[high] = uh_next[high]
        U[i + 1] = nxt

    for i in range(i1):
        U[i + 1] = _advance(U[i], h, 0.0, modes)
    uh1 = np.where(high[:, None], U[i1], 0.0)
    psi = smoothstep((times[i1:i2 + 1] - times[i1]) / (times[i2] - times[i1]))
    for i in range(i1, i2):
        forced_step(i, psi[i + 1 - i1] * uh1)
    high_T2 = float(np.abs(U[i2][high]).max()) if high.any() else 0.0

    yh = np.where(high[:, None], y.coeffs, 0.0)
    Dl = D[low]
    lam_l = modes.norm2[low, None]
    z = y.coeffs[low].copy()
    # Broyden secant on z -> u^l(T), seeded with the Stokes part of phase 4
    Bk = np.diag(np.repeat(Dl[:, 0] ** (-(nsteps - i3)), 2))
    prev = None
    it = 0
    for it in range(1, max_shoot + 1):
        solver = _ShellSolver(modes, n0, seed)
        # u^h(T2) = 0, so the first low step of phase 3 is free
        start = _advance(U[i2], h, 0.0, modes)[low]
        span = times[i3] - times[i2 + 1]

        def path(j):
            return start + (times[j] - times[i2 + 1]) / span * (z - start)

        def shell_state(j):
            # u^h_j such that the low step j -> j + 1 lands on the path;
            # B^l(u, u) = B^l(u^l, u^l) + B^l(s, s) for s on the shell
            base = np.zeros_like(U[0])
            base[low] = path(j)
            bl = bilinear_batch(base, base, modes)[low]
            need = (path(j) - Dl * path(j + 1)) / h - bl
            return solver.solve(need.reshape(-1))

        s = None
        for i in range(i2, i3):
            if i + 1 < i3:
                s = shell_state(i + 1)
            forced_step(i, s)
        uh3 = np.where(high[:, None], U[i3], 0.0)
        for i in range(i3, nsteps):
            frac = (times[i + 1] - times[i3]) / (times[nsteps] - times[i3])
            forced_step(i, uh3 + frac * (yh - uh3))
        miss = y.coeffs[low] - U[nsteps][low]
        if np.sqrt(np.sum((lam_l * miss) ** 2)) <= tol:
            break
        mv = miss.reshape(-1)
        if prev is not None:
            dz, dm = prev[0], prev[1] - mv  # dm = change in u^l(T)
            Bk += np.outer(dm - Bk @ dz, dz) / (dz @ dz)
        dz = np.linalg.solve(Bk, mv)
        prev = (dz, mv)
        z = z + dz.reshape(z.shape)

    run = simulate(x, cfg, None, increments=h * Q.apply(W))
    V = run.states
    lam = modes.norm2[:, None]

    def a_norm(d):
        return float(np.sqrt(np.sum((lam * d) ** 2)))

    tracking = max(a_norm(np.where(low[:, None], V[j], 0.0) - _embed(low, path(j)))
                   for j in range(i2 + 1, i3 + 1))
    phase_errors = {
        "free_flow": a_norm(V[i1] - U[i1]),
        "high_to_zero": max(a_norm(np.where(high[:, None], V[j], 0.0) - psi[j - i1] * uh1)
                            for j in range(i1, i2 + 1)),
        "low_steering": tracking,
        "high_to_target": a_norm(np.where(high[:, None], V[-1] - y.coeffs, 0.0)),
    }
    final_err = sobolev_norm(GalerkinField(modes, V[-1] - y.coeffs), 1.0)
    return ControlResult(
        times, U, W, V, y, final_err, epsilon, (i1, i2, i3, nsteps), phase_errors, high_T2,
        float(np.abs(V - U).max()), float(np.abs(W[:, low]).max()) if low.any() else 0.0,
        it, float(np.sqrt(np.sum(W**2) * h)))


def _embed(mask, vals):
    out = np.zeros((len(mask), 2))
    out[mask] = vals
    return out
