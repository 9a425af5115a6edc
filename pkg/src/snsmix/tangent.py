"""First variations along a stored path, the low-mode Jacobian and the Malliavin matrix.

All propagators reuse the semi-implicit scheme of the forward integrator
with the trajectory frozen, so each discrete step is exactly the
derivative of the corresponding forward step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy import stats

from .dynamics import RunRecord
from .field import GalerkinField
from .noise import CovarianceOperator
from .nonlinearity import bilinear_batch, linearization_matrix


@dataclass(frozen=True, eq=False)
class TangentPath:
    base: RunRecord
    h: GalerkinField
    values: np.ndarray  # (nsteps + 1, M, 2)

    def value(self, i: int) -> GalerkinField:
        return GalerkinField(self.base.modes, self.values[i])


@dataclass(eq=False)
class LowJacobianPath:
    """J_{s,t} and its inverse on the coordinates of Z_l(n).

    J[j], Jinv[j] are the matrices at step steps[j]; residual[i] is
    |J Jinv - I|_F at step i (NaN where not evaluated).
    """

    base: RunRecord
    n: int
    start: int
    steps: np.ndarray
    J: list
    Jinv: list
    residual: np.ndarray
    malliavin: list | None = None
    refreshes: int = 0

    def at(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        j = int(np.searchsorted(self.steps, step))
        if j >= len(self.steps) or self.steps[j] != step:
            raise KeyError(f"step {step} was not stored")
        return self.J[j], self.Jinv[j]


@dataclass(frozen=True, eq=False)
class MalliavinMatrix:
    t: float
    M: np.ndarray
    lambda_min: float
    eigenvalues: np.ndarray = field(repr=False)

    @classmethod
    def from_matrix(cls, t: float, M: np.ndarray) -> "MalliavinMatrix":
        S = 0.5 * (M + M.T)
        ev = np.linalg.eigvalsh(S)
        lam = float(ev[0])
        if lam < 0 and lam >= -1e-12:
            lam = 0.0
        return cls(t, S, lam, ev)


def _low_setup(run: RunRecord, n: int):
    modes = run.modes
    if not 1 <= n <= modes.n:
        raise ValueError(f"low cutoff must satisfy 1 <= n <= m, got n={n}, m={modes.n}")
    low = modes.low_mask(n)
    d = np.repeat(1.0 + run.dt * modes.norm2[low], 2)
    return low, d


def derivative_flow(run: RunRecord, h: GalerkinField) -> TangentPath:
    """D_h X along the run: (1 + dt A) eta' = eta - dt [B(eta, X) + B(X, eta)]."""
    if run.increments is None:
        raise ValueError("run has no stored noise stream; derivative flows need a replayable run")
    modes = run.modes
    if h.modes.n != modes.n:
        raise ValueError("direction and run use different cutoffs")
    dt = run.dt
    D = (1.0 + dt * modes.norm2)[:, None]
    vals = np.empty_like(run.states)
    vals[0] = h.coeffs
    conv = run.config.convection
    for i in range(run.nsteps):
        rhs = vals[i]
        if conv:
            rhs = rhs - dt * bilinear_batch(vals[i], run.states[i], modes, symmetric=True)
        vals[i + 1] = rhs / D
    return TangentPath(run, h, vals)


def _right_inverse_update(Jinv, P, tol=1e-18, max_terms=40):
    """Jinv (I - P)^{-1}, by Neumann series when P is small."""
    if np.abs(P).sum(axis=0).max() > 0.25:
        return scipy.linalg.solve((np.eye(len(P)) - P).T, Jinv.T).T
    acc = Jinv.copy()
    term = Jinv
    scale = np.abs(Jinv).max()
    for _ in range(max_terms):
        term = term @ P
        acc += term
        if np.abs(term).max() <= tol * scale:
            break
    return acc


def low_jacobian(run: RunRecord, n: int, Q: CovarianceOperator | None = None,
                 start: int = 0, stop: int | None = None, store_every: int = 1,
                 residual_every: int = 1, refresh_tol: float | None = 1e-6,
                 store_steps=None) -> LowJacobianPath:
    """Propagate J_{s,t} and J_{s,t}^{-1} on the low space from step `start`.

        J_{i+1}    = D^{-1} (I - dt L_i) J_i
        Jinv_{i+1} = Jinv_i (I - dt L_i)^{-1} D

    with D = I + dt A and L_i the low block of h -> B(h, X_i) + B(X_i, h).
    Both recursions invert each other step by step, so J Jinv stays at the
    identity up to rounding.  When the residual exceeds refresh_tol, Jinv is
    recomputed by a direct solve.  If Q is given, the Malliavin matrix
    int (Jinv Q^l)(Jinv Q^l)^T ds is accumulated by the trapezoidal rule
    and stored alongside J.
    """
    low, d = _low_setup(run, n)
    stop = run.nsteps if stop is None else stop
    dt = run.dt
    N = len(d)
    eye = np.eye(N)
    J = eye.copy()
    Jinv = eye.copy()
    if store_steps is None:
        store = set(range(start, stop + 1, store_every)) | {stop}
    else:
        store = set(int(s) for s in store_steps) | {start}
    conv = run.config.convection
    if Q is not None:
        Ql = Q.low_matrix(n)
        cols = np.flatnonzero(np.any(Ql != 0, axis=0))
        Qc = Ql[:, cols]

        def integrand(Ji):
            G = Ji @ Qc
            return G @ G.T
        Mt = np.zeros((N, N))
        prev = integrand(Jinv)
    steps, Js, Jinvs, Ms = [], [], [], []
    residual = np.full(run.nsteps + 1, np.nan)
    residual[start] = 0.0
    refreshes = 0

    def keep(i):
        if i in store:
            steps.append(i)
            Js.append(J.copy())
            Jinvs.append(Jinv.copy())
            if Q is not None:
                Ms.append(Mt.copy())

    keep(start)
    for i in range(start, stop):
        if conv:
            P = dt * linearization_matrix(run.states[i], run.modes, low, low)
            J = (J - P @ J) / d[:, None]
            Jinv = _right_inverse_update(Jinv, P) * d[None, :]
        else:
            J = J / d[:, None]
            Jinv = Jinv * d[None, :]
        if (i + 1 - start) % residual_every == 0 or i + 1 == stop:
            res = np.linalg.norm(J @ Jinv - eye)
            if refresh_tol is not None and res > refresh_tol:
                Jinv = np.linalg.inv(J)
                refreshes += 1
                res = np.linalg.norm(J @ Jinv - eye)
            residual[i + 1] = res
        if Q is not None:
            cur = integrand(Jinv)
            Mt = Mt + 0.5 * dt * (prev + cur)
            prev = cur
        keep(i + 1)
    return LowJacobianPath(run, n, start, np.asarray(steps), Js, Jinvs, residual,
                           Ms if Q is not None else None, refreshes)


def malliavin_matrix(run: RunRecord, n: int, Q: CovarianceOperator,
                     step: int | None = None, **kw) -> MalliavinMatrix:
    """M_t at the final time (or at `step`) of the run."""
    step = run.nsteps if step is None else step
    path = low_jacobian(run, n, Q, stop=step, store_steps=[step], residual_every=max(step, 1), **kw)
    return MalliavinMatrix.from_matrix(run.times[step], path.malliavin[-1])


def malliavin_path(run: RunRecord, n: int, Q: CovarianceOperator, steps, **kw) -> list:
    """MalliavinMatrix at each requested step, from a single propagation."""
    steps = sorted(int(s) for s in steps)
    path = low_jacobian(run, n, Q, stop=steps[-1], store_steps=steps,
                        residual_every=max(steps[-1], 1), **kw)
    out = []
    for s, M in zip(path.steps, path.malliavin):
        if s in steps:
            out.append(MalliavinMatrix.from_matrix(run.times[s], M))
    return out


@dataclass(frozen=True, eq=False)
class DirectionPath:
    """Malliavin direction v = (v^l, v^h) and the variations it produces."""

    base: RunRecord
    n: int
    target: np.ndarray        # h in the low coordinates
    v: np.ndarray             # (nsteps + 1, M, 2) direction on the full space
    low_variation: np.ndarray  # (nsteps + 1, N) D_v X^l from the low equation
    full_variation: np.ndarray  # (nsteps + 1, M, 2) D_v X from the full equation
    high_residual: float      # max_t |D_v X^h(t)| / max_t |D_v X^l(t)|


def malliavin_direction(run: RunRecord, target, Q: CovarianceOperator, n: int) -> DirectionPath:
    """Direction whose high-mode variation vanishes.

    The low part is v^l(s) = (J_s^{-1} Q^l)^T target, obtained by
    propagating the row vector target^T J_s^{-1}.  The high part solves
    Q^h v^h = B^h(D_v X^l, X) + B^h(X, D_v X^l) on every high mode.
    Afterwards the full variation equation is integrated with this v as an
    independent check that its high part stays at rounding level.
    """
    modes = run.modes
    low, d = _low_setup(run, n)
    high = ~low
    if not np.all(Q.forced[high]):
        raise ValueError("direction needs invertible noise on every mode outside the low box")
    dets = np.linalg.det(Q.blocks[high])
    if np.any(np.abs(dets) < 1e-300):
        raise ValueError("direction needs invertible noise on every mode outside the low box")
    dt = run.dt
    target = np.asarray(target, dtype=float).reshape(-1)
    N = len(d)
    if target.shape != (N,):
        raise ValueError(f"target must have {N} low coordinates")
    Ql = Q.low_matrix(n)
    conv = run.config.convection
    nst = run.nsteps
    xi = np.zeros((nst + 1, N))
    y = target.copy()  # target^T J_i^{-1}, as a column
    v = np.zeros((nst + 1, len(modes), 2))
    Dfull = (1.0 + dt * modes.norm2)[:, None]
    full = np.zeros((nst + 1, len(modes), 2))

    def high_part(i):
        emb = np.zeros((len(modes), 2))
        emb[low] = xi[i].reshape(-1, 2)
        if not conv:
            return np.zeros((len(modes), 2))
        b = bilinear_batch(emb, run.states[i], modes, symmetric=True)
        b[low] = 0.0
        return Q.solve(b)

    for i in range(nst + 1):
        vl = Ql.T @ y
        v[i][low] = vl.reshape(-1, 2)
        v[i][high] = high_part(i)[high]
        if i == nst:
            break
        P = dt * linearization_matrix(run.states[i], modes, low, low) if conv else np.zeros((N, N))
        xi[i + 1] = (xi[i] - P @ xi[i] + dt * (Ql @ vl)) / d
        # y_{i+1} = D (I - P^T)^{-1} y_i
        z, term = y.copy(), y
        for _ in range(60):
            term = P.T @ term
            z += term
            if np.abs(term).max() <= 1e-18 * max(np.abs(z).max(), 1e-300):
                break
        y = d * z
        # full variation with the assembled direction
        rhs = full[i] + dt * Q.apply(v[i])
        if conv:
            rhs = rhs - dt * bilinear_batch(full[i], run.states[i], modes, symmetric=True)
        full[i + 1] = rhs / Dfull
    hi = np.sqrt(np.sum(full[:, high] ** 2, axis=(1, 2))).max()
    lo = np.sqrt(np.sum(xi**2, axis=1)).max()
    return DirectionPath(run, n, target, v, xi, full, float(hi / lo) if lo > 0 else 0.0)


@dataclass(frozen=True)
class TailEstimate:
    probability: float
    ci_low: float
    ci_high: float
    count: int
    total: int


def min_eigen_tail(lambdas, epsilon: float, q_exponent: float, confidence: float = 0.95) -> TailEstimate:
    """Fraction of replicas with lambda_min <= epsilon^q, with a Wilson interval.

    `lambdas` is a sequence of smallest eigenvalues or of MalliavinMatrix.
    """
    lam = np.array([getattr(x, "lambda_min", x) for x in lambdas], dtype=float)
    if len(lam) < 100:
        raise ValueError("tail estimates need at least 100 replicas")
    k = int(np.sum(lam <= epsilon**q_exponent))
    ci = stats.binomtest(k, len(lam)).proportion_ci(confidence, method="wilson")
    return TailEstimate(k / len(lam), float(ci.low), float(ci.high), k, len(lam))
