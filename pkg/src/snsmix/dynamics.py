"""Time stepping of the Galerkin-truncated stochastic Navier-Stokes system.

    dX = -[A X + B(X, X)] dt + Q dW

Stokes term implicit, convection explicit.  Along each path the
Feynman-Kac weight E_K(t) = exp(-K int_0^t |A X|^2 ds) is carried in log
space with trapezoidal quadrature of the stored enstrophy.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .field import GalerkinField
from .lattice import ModeSet, enumerate_modes
from .noise import MAIN_STREAM, CovarianceOperator, EnsembleNoise, noise_generator
from .nonlinearity import bilinear_batch


class NumericalBlowup(RuntimeError):
    """Raised when a state stops being finite."""

    def __init__(self, time: float, step: int | None = None):
        self.time = time
        self.step = step
        where = f"t={time:.6g}" if step is None else f"t={time:.6g} (step {step})"
        super().__init__(f"non-finite state at {where}")


@dataclass(frozen=True)
class SimConfig:
    m: int
    dt: float
    T: float
    K: float = 0.0
    nu: float = 1.0
    seed: int = 0
    convection: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not self.T >= 0:
            raise ValueError(f"T must be non-negative, got {self.T}")
        if self.K < 0:
            raise ValueError(f"K must be non-negative, got {self.K}")
        if self.nu != 1.0:
            raise ValueError("the viscosity is fixed to 1")
        if self.m < 1:
            raise ValueError(f"cutoff m must be >= 1, got {self.m}")

    @property
    def nsteps(self) -> int:
        return int(math.ceil(self.T / self.dt - 1e-9))

    @property
    def step_size(self) -> float:
        """dt adjusted so that nsteps uniform steps end exactly at T."""
        n = self.nsteps
        return self.T / n if n else self.dt


@dataclass(frozen=True, eq=False)
class RunRecord:
    """One stored trajectory on the time grid t_i = i * dt."""

    config: SimConfig
    modes: ModeSet
    times: np.ndarray
    states: np.ndarray          # (nsteps + 1, M, 2)
    energy: np.ndarray          # |X|^2
    enstrophy: np.ndarray       # |A X|^2
    log_fk_weight: np.ndarray   # log E_K(t_i)
    increments: np.ndarray | None = field(default=None, repr=False)  # (nsteps, M, 2)
    replica: int = 0

    def __post_init__(self):
        for name in ("times", "states", "energy", "enstrophy", "log_fk_weight", "increments"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    @property
    def dt(self) -> float:
        return self.config.step_size

    @property
    def nsteps(self) -> int:
        return len(self.times) - 1

    def state(self, i: int) -> GalerkinField:
        return GalerkinField(self.modes, self.states[i])

    @property
    def final(self) -> GalerkinField:
        return self.state(-1)

    def to_jsonl(self, snapshot_every: int | None = None) -> str:
        lines = []
        for i, t in enumerate(self.times):
            rec = {"t": float(t), "energy": float(self.energy[i]),
                   "enstrophy": float(self.enstrophy[i]), "logw": float(self.log_fk_weight[i])}
            if snapshot_every and i % snapshot_every == 0:
                rec["state"] = json.loads(self.state(i).to_json())
            lines.append(json.dumps(rec))
        return "\n".join(lines) + "\n"


def _advance(X, dt, inc, modes, convection=True):
    """One semi-implicit step on arrays of shape (..., M, 2)."""
    rhs = X + inc
    if convection:
        rhs = rhs - dt * bilinear_batch(X, X, modes)
    return rhs / (1.0 + dt * modes.norm2)[:, None]


def step(x: GalerkinField, dt: float, increment: GalerkinField | None = None,
         convection: bool = True, time: float = float("nan")) -> GalerkinField:
    """(1 + |k|^2 dt) x'_k = x_k - dt B(x, x)_k + increment_k."""
    if not np.all(np.isfinite(x.coeffs)):
        raise NumericalBlowup(time)
    inc = 0.0 if increment is None else increment.coeffs
    return GalerkinField(x.modes, _advance(x.coeffs, dt, inc, x.modes, convection))


def fk_log_weight(enstrophy: np.ndarray, K: float, dt: float) -> np.ndarray:
    """-K times the running trapezoidal integral of the enstrophy samples."""
    ens = np.asarray(enstrophy, dtype=float)
    out = np.zeros_like(ens)
    if K != 0 and len(ens) > 1:
        out[1:] = -K * np.cumsum(0.5 * dt * (ens[1:] + ens[:-1]), axis=0)
    return out


def fk_integral(enstrophy: np.ndarray, K: float, dt: float, order: int = 8) -> float:
    """int_0^t e(s) exp(-K int_0^s e) ds for the piecewise-linear interpolant e.

    Gauss-Legendre quadrature on each step, independent of the log-weight
    bookkeeping; for K > 0 it should equal (1 - E_K(t)) / K.
    """
    ens = np.asarray(enstrophy, dtype=float)
    nodes, weights = np.polynomial.legendre.leggauss(order)
    s = 0.5 * (nodes + 1.0)  # nodes on [0, 1]
    w = 0.5 * weights
    e0, e1 = ens[:-1, None], ens[1:, None]
    e = e0 + (e1 - e0) * s
    # running integral of e up to the node, within the step
    part = dt * (e0 * s + 0.5 * (e1 - e0) * s**2)
    before = np.concatenate([[0.0], np.cumsum(0.5 * dt * (ens[1:] + ens[:-1]))[:-1]])[:, None]
    return float(np.sum(dt * w * e * np.exp(-K * (before + part))))


def simulate(x0: GalerkinField, cfg: SimConfig, Q: CovarianceOperator | None = None,
             replica: int = 0, increments: np.ndarray | None = None) -> RunRecord:
    """Integrate from x0 over [0, T] and record the path.

    The noise is drawn from the stream keyed by (cfg.seed, replica) unless
    explicit increments of shape (nsteps, M, 2) are supplied for replay.
    """
    modes = x0.modes
    if modes.n != cfg.m:
        raise ValueError(f"initial field has cutoff {modes.n}, config says {cfg.m}")
    n, dt = cfg.nsteps, cfg.step_size
    M = len(modes)
    if increments is None:
        incs = np.zeros((n, M, 2))
        if Q is not None:
            if Q.modes.n != cfg.m:
                raise ValueError("covariance and config use different cutoffs")
            rng = noise_generator(cfg.seed, replica)
            sq = math.sqrt(dt)
            for i in range(n):
                incs[i] = Q.apply(rng.standard_normal((M, 2))) * sq
    else:
        incs = np.asarray(increments, dtype=float)
        if incs.shape != (n, M, 2):
            raise ValueError(f"replay needs increments of shape {(n, M, 2)}, got {incs.shape}")
    states = np.empty((n + 1, M, 2))
    states[0] = x0.coeffs
    if not np.all(np.isfinite(states[0])):
        raise NumericalBlowup(0.0, 0)
    for i in range(n):
        states[i + 1] = _advance(states[i], dt, incs[i], modes, cfg.convection)
        if not np.all(np.isfinite(states[i + 1])):
            raise NumericalBlowup((i + 1) * dt, i + 1)
    sq = np.sum(states**2, axis=2)
    energy = sq.sum(axis=1)
    enstrophy = sq @ (modes.norm2**2)
    times = np.arange(n + 1) * dt
    logw = fk_log_weight(enstrophy, cfg.K, dt)
    return RunRecord(cfg, modes, times, states, energy, enstrophy, logw, incs, replica)


def replay(run: RunRecord, x0: GalerkinField | None = None) -> RunRecord:
    """Re-integrate with the stored noise, optionally from a different start."""
    if run.increments is None:
        raise ValueError("run has no stored noise stream to replay")
    x0 = run.state(0) if x0 is None else x0
    return simulate(x0, run.config, None, run.replica, increments=run.increments)


@dataclass
class EnsembleResult:
    """Final states and running weights of a batch of replicas."""

    times: np.ndarray
    states: np.ndarray       # (R, M, 2) at the final time
    log_fk_weight: np.ndarray  # (R,)
    blown: np.ndarray        # (R,) bool
    observations: dict = field(default_factory=dict)


def simulate_ensemble(x0, cfg: SimConfig, Q: CovarianceOperator, replicas,
                      observers: dict | None = None, observe_every: int = 1,
                      stream: int = MAIN_STREAM, start_step: int = 0) -> EnsembleResult:
    """Propagate many replicas together.

    x0 is one field (shared start) or an array (R, M, 2).  Replica r uses
    the noise stream (cfg.seed, stream, replicas[r]), so a replica's path
    matches simulate(..., replica=r) for the main stream.  observers maps
    names to functions of the (R, M, 2) state array; they are evaluated
    every observe_every steps and at the end.  Blown-up replicas are
    flagged, not raised.
    """
    modes = enumerate_modes(cfg.m) if Q is None else Q.modes
    replicas = np.asarray(replicas, dtype=np.int64)
    R, M = len(replicas), len(modes)
    X = np.empty((R, M, 2))
    X[:] = x0.coeffs if isinstance(x0, GalerkinField) else np.asarray(x0, dtype=float)
    n, dt = cfg.nsteps, cfg.step_size
    noise = EnsembleNoise(cfg.seed, replicas, M, stream)
    sq = math.sqrt(dt)
    lam2 = modes.norm2**2
    ens = np.einsum("rkc,k->r", X**2, lam2)
    logw = np.zeros(R)
    blown = ~np.all(np.isfinite(X), axis=(1, 2))
    observers = observers or {}
    obs_times = []
    obs = {k: [] for k in observers}

    def record(i):
        obs_times.append((start_step + i) * dt)
        for k, f in observers.items():
            obs[k].append(np.asarray(f(X)))

    record(0)
    for i in range(n):
        inc = Q.apply(noise.next()) * sq
        X = _advance(X, dt, inc, modes, cfg.convection)
        new_ens = np.einsum("rkc,k->r", X**2, lam2)
        if cfg.K:
            logw -= cfg.K * 0.5 * dt * (ens + new_ens)
        ens = new_ens
        bad = ~np.isfinite(new_ens)
        if bad.any():
            blown |= bad
            X[bad] = np.nan
        if (i + 1) % observe_every == 0 or i + 1 == n:
            if not obs_times or obs_times[-1] != (start_step + i + 1) * dt:
                record(i + 1)
    result = EnsembleResult(np.asarray(obs_times), X, logw, blown,
                            {k: np.asarray(v) for k, v in obs.items()})
    return result
