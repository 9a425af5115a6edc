"""Degenerate Gaussian forcing and reproducible random streams.

The covariance Q acts block-diagonally: on mode k it is a 2x2 matrix
q_k in the local frame.  Modes of the low box Z_l(n0) are unforced.

Random draws come from counter-based Philox generators keyed by
(seed, stream tag, replica).  Each step consumes one standard normal per
(mode, component) in canonical order, for every mode of the box whether
forced or not, so a stream does not depend on the choice of Q.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .field import GalerkinField
from .lattice import ModeSet, enumerate_modes

MAIN_STREAM = 0
BRANCH_STREAM = 1


@dataclass(eq=False)
class CovarianceOperator:
    """Block-diagonal noise covariance on the Galerkin space."""

    modes: ModeSet
    blocks: np.ndarray  # (M, 2, 2)
    n0: int
    r: float | None = None
    sigma: float | None = None

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=float)
        if self.blocks.shape != (len(self.modes), 2, 2):
            raise ValueError("covariance blocks must have shape (M, 2, 2)")

    @property
    def m(self) -> int:
        return self.modes.n

    @property
    def forced(self) -> np.ndarray:
        return np.any(self.blocks != 0, axis=(1, 2))

    def trace(self) -> float:
        """Tr(QQ*) = sum of squared Frobenius norms of the blocks."""
        return float(np.sum(self.blocks**2))

    def trace_regularity(self, sigma: float) -> float:
        """Tr(A^(1+sigma) QQ*)."""
        w = self.modes.norm2 ** (1.0 + sigma)
        return float(np.sum(w * np.sum(self.blocks**2, axis=(1, 2))))

    def apply(self, coeffs: np.ndarray) -> np.ndarray:
        """Q applied to coefficient arrays of shape (..., M, 2)."""
        return np.einsum("kab,...kb->...ka", self.blocks, coeffs)

    def apply_transpose(self, coeffs: np.ndarray) -> np.ndarray:
        return np.einsum("kba,...kb->...ka", self.blocks, coeffs)

    def solve(self, coeffs: np.ndarray) -> np.ndarray:
        """Q^{-1} on forced modes; zero on unforced modes.

        Raises if a forced block is singular.
        """
        out = np.zeros_like(coeffs)
        f = self.forced
        dets = np.linalg.det(self.blocks[f])
        if np.any(np.abs(dets) < 1e-300):
            raise np.linalg.LinAlgError("covariance block is singular on a forced mode")
        out[..., f, :] = np.einsum("kab,...kb->...ka", np.linalg.inv(self.blocks[f]), coeffs[..., f, :])
        return out

    def low_matrix(self, n: int) -> np.ndarray:
        """Dense block-diagonal matrix of pi_n Q on the coordinates of Z_l(n)."""
        b = self.blocks[self.modes.low_mask(n)]
        N = 2 * len(b)
        out = np.zeros((N, N))
        for i, blk in enumerate(b):
            out[2 * i:2 * i + 2, 2 * i:2 * i + 2] = blk
        return out

    def to_json(self) -> str:
        doc = {"m": self.m, "n0": self.n0}
        if self.r is not None and self._is_power_law():
            doc["r"] = self.r
        else:
            doc["blocks"] = [
                [int(k[0]), int(k[1]), int(k[2])] + [float(v) for v in b.ravel()]
                for k, b in zip(self.modes.modes, self.blocks) if np.any(b)
            ]
        if self.sigma is not None:
            doc["sigma"] = self.sigma
        return json.dumps(doc)

    def _is_power_law(self) -> bool:
        ref = build_covariance(self.n0, self.r, self.m, twist=self.modes.twist)
        return np.array_equal(ref.blocks, self.blocks)

    @classmethod
    def from_json(cls, text: str) -> "CovarianceOperator":
        doc = json.loads(text)
        m, n0 = int(doc["m"]), int(doc["n0"])
        if "blocks" not in doc:
            return build_covariance(n0, float(doc["r"]), m, sigma=doc.get("sigma"))
        modes = enumerate_modes(m)
        blocks = np.zeros((len(modes), 2, 2))
        for row in doc["blocks"]:
            i = modes.index(row[:3])
            if i < 0:
                raise ValueError(f"mode {row[:3]} lies outside the box of size {m}")
            blocks[i] = np.reshape(row[3:7], (2, 2))
        return cls(modes, blocks, n0, doc.get("r"), doc.get("sigma"))


def build_covariance(n0: int, r: float, m: int, sigma: float | None = None,
                     rank_one: bool = False, twist: float = 0.0,
                     forced_mask=None) -> CovarianceOperator:
    """Q = (Id - pi_{n0}) A^{-r} on the box of size m.

    rank_one keeps only the first frame direction of each forced mode,
    which is a degenerate forcing used to exercise failure reporting.
    forced_mask further restricts the forced modes.
    """
    if not 0 < n0 < m:
        raise ValueError(f"need 0 < n0 < m, got n0={n0}, m={m}")
    if not 1.25 < r < 1.5:
        warnings.warn(f"noise exponent r={r} lies outside the range (5/4, 3/2)", stacklevel=2)
    modes = enumerate_modes(m, twist)
    forced = ~modes.low_mask(n0)
    if forced_mask is not None:
        forced &= np.asarray(forced_mask, bool)
    scale = np.where(forced, modes.norm2 ** (-r), 0.0)
    blocks = np.zeros((len(modes), 2, 2))
    blocks[:, 0, 0] = scale
    if not rank_one:
        blocks[:, 1, 1] = scale
    if sigma is None:
        # midpoint of the admissible range 0 < sigma < 2r - 5/2
        sigma = max(2.0 * r - 2.5, 0.0) / 2.0
    return CovarianceOperator(modes, blocks, n0, r, sigma)


def noise_generator(seed: int, replica: int = 0, stream: int = MAIN_STREAM) -> np.random.Generator:
    """Philox generator keyed by (seed, stream, replica)."""
    ss = np.random.SeedSequence([int(seed), int(stream), int(replica)])
    return np.random.Generator(np.random.Philox(ss))


def sample_increment(Q: CovarianceOperator, dt: float, rng: np.random.Generator) -> GalerkinField:
    """Q dW over a step dt: q_k xi_k sqrt(dt) with xi standard normal."""
    xi = rng.standard_normal((len(Q.modes), 2))
    return GalerkinField(Q.modes, Q.apply(xi) * np.sqrt(dt))


class EnsembleNoise:
    """Standard normals for many replicas, one (R, M, 2) slab per step.

    Replica r always reads the stream keyed by (seed, stream, replicas[r]),
    so results do not depend on the block size or on which other replicas
    are simulated alongside.
    """

    def __init__(self, seed: int, replicas, size: int, stream: int = MAIN_STREAM, block: int | None = None):
        self.replicas = np.asarray(replicas, dtype=np.int64)
        self.size = size
        self.gens = [noise_generator(seed, r, stream) for r in self.replicas]
        if block is None:
            block = max(1, min(64, (1 << 22) // max(1, len(self.replicas) * size * 2)))
        self.block = block
        self._buf = None
        self._pos = block

    def next(self) -> np.ndarray:
        if self._pos >= self.block:
            self._buf = np.stack([g.standard_normal((self.block, self.size, 2)) for g in self.gens], axis=1)
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out


def stochastic_convolution(Q: CovarianceOperator, T: float, dt: float, rng: np.random.Generator,
                           z0: np.ndarray | None = None) -> np.ndarray:
    """Sample Z(t) = int_0^t e^{-A(t-s)} Q dW(s) on the grid t_i = i dt.

    Uses the exact Ornstein-Uhlenbeck transition of each mode, so the
    marginal law at grid points carries no time-stepping error.
    Returns an array of shape (nsteps + 1, M, 2).
    """
    nsteps = int(round(T / dt))
    lam = Q.modes.norm2
    decay = np.exp(-lam * dt)[:, None]
    std = np.sqrt(-np.expm1(-2.0 * lam * dt) / (2.0 * lam))[:, None]
    out = np.empty((nsteps + 1, len(Q.modes), 2))
    out[0] = 0.0 if z0 is None else z0
    for i in range(nsteps):
        xi = rng.standard_normal((len(Q.modes), 2))
        out[i + 1] = decay * out[i] + Q.apply(std * xi)
    return out


def stationary_variance(Q: CovarianceOperator) -> np.ndarray:
    """Per-mode covariance q_k q_k^T / (2 |k|^2) of the stationary OU law."""
    qq = np.einsum("kab,kcb->kac", Q.blocks, Q.blocks)
    return qq / (2.0 * Q.modes.norm2)[:, None, None]
