"""Truncated divergence-free velocity fields.

A field in the Galerkin space pi_m H is a dense (M, 2) array of real
coordinates, row i holding the components along (e1, e2) of mode i in
canonical order.  The basis functions are L2-normalized, so the L2 norm
of the field is the Euclidean norm of the array.
"""
from __future__ import annotations

import json

import numpy as np

from .lattice import ModeSet, enumerate_modes

# L2 normalization of cos(k.x) and sin(k.x) on [0, 2pi]^3
BASIS_SCALE = np.sqrt(2.0) / (2.0 * np.pi) ** 1.5


class GalerkinField:
    """Coefficients of a field on the mode box of size m."""

    __slots__ = ("modes", "coeffs")

    def __init__(self, modes: ModeSet | int, coeffs=None):
        if not isinstance(modes, ModeSet):
            modes = enumerate_modes(int(modes))
        if coeffs is None:
            coeffs = np.zeros((len(modes), 2))
        coeffs = np.array(coeffs, dtype=float)
        if coeffs.shape != (len(modes), 2):
            raise ValueError(f"expected coefficients of shape {(len(modes), 2)}, got {coeffs.shape}")
        self.modes = modes
        self.coeffs = coeffs

    @property
    def m(self) -> int:
        return self.modes.n

    def copy(self) -> "GalerkinField":
        return GalerkinField(self.modes, self.coeffs.copy())

    def flat(self) -> np.ndarray:
        return self.coeffs.reshape(-1)

    @classmethod
    def from_flat(cls, modes, vec) -> "GalerkinField":
        if not isinstance(modes, ModeSet):
            modes = enumerate_modes(int(modes))
        return cls(modes, np.asarray(vec, dtype=float).reshape(-1, 2))

    def _check(self, other):
        if other.modes is not self.modes and (other.modes.n != self.modes.n or other.modes.twist != self.modes.twist):
            raise ValueError("fields live on different mode boxes")

    def __add__(self, other):
        self._check(other)
        return GalerkinField(self.modes, self.coeffs + other.coeffs)

    def __sub__(self, other):
        self._check(other)
        return GalerkinField(self.modes, self.coeffs - other.coeffs)

    def __mul__(self, a):
        return GalerkinField(self.modes, self.coeffs * float(a))

    __rmul__ = __mul__

    def __neg__(self):
        return GalerkinField(self.modes, -self.coeffs)

    def __repr__(self):
        return f"GalerkinField(m={self.m}, |x|={np.linalg.norm(self.coeffs):.6g})"

    def coefficient(self, k) -> np.ndarray:
        i = self.modes.index(k)
        if i < 0:
            return np.zeros(2)
        return self.coeffs[i].copy()

    def reframe(self, modes: ModeSet) -> "GalerkinField":
        """Same physical field expressed in the frames of another ModeSet."""
        if modes.n != self.modes.n:
            raise ValueError("reframing needs the same cutoff")
        vec = self.coeffs[:, 0, None] * self.modes.e1 + self.coeffs[:, 1, None] * self.modes.e2
        return GalerkinField(modes, np.stack([np.sum(vec * modes.e1, 1), np.sum(vec * modes.e2, 1)], 1))

    def velocity(self, points) -> np.ndarray:
        """Evaluate the physical velocity at points of shape (..., 3)."""
        pts = np.asarray(points, dtype=float)
        phase = pts @ self.modes.modes.T.astype(float)
        trig = np.where(self.modes.plus, np.cos(phase), np.sin(phase))
        vec = self.coeffs[:, 0, None] * self.modes.e1 + self.coeffs[:, 1, None] * self.modes.e2
        return BASIS_SCALE * trig @ vec

    def to_json(self) -> str:
        rows = [
            [int(k[0]), int(k[1]), int(k[2]), float(c[0]), float(c[1])]
            for k, c in zip(self.modes.modes, self.coeffs)
        ]
        doc = {"m": self.m, "coeffs": rows}
        if self.modes.twist:
            doc["twist"] = self.modes.twist
        return json.dumps(doc)

    @classmethod
    def from_json(cls, text: str) -> "GalerkinField":
        doc = json.loads(text)
        modes = enumerate_modes(int(doc["m"]), float(doc.get("twist", 0.0)))
        out = cls(modes)
        for row in doc["coeffs"]:
            i = modes.index(row[:3])
            if i < 0:
                raise ValueError(f"mode {row[:3]} lies outside the box of size {modes.n}")
            out.coeffs[i] = row[3], row[4]
        return out


def sobolev_norm(x: GalerkinField, gamma: float) -> float:
    """|A^gamma x| = sqrt(sum |k|^(4 gamma) |x_k|^2)."""
    w = x.modes.norm2 ** (2.0 * gamma)
    return float(np.sqrt(np.sum(w * np.sum(x.coeffs**2, axis=1))))


def sobolev_norms(states: np.ndarray, norm2: np.ndarray, gamma: float) -> np.ndarray:
    """Batched |A^gamma x| for states of shape (..., M, 2)."""
    w = norm2 ** (2.0 * gamma)
    return np.sqrt(np.einsum("...ic,i->...", states**2, w))


def apply_stokes(x: GalerkinField, power: float = 1.0) -> GalerkinField:
    """A^power x, with A k = |k|^2 on every mode."""
    return GalerkinField(x.modes, x.coeffs * (x.modes.norm2 ** power)[:, None])


def split(x: GalerkinField, n: int) -> tuple[GalerkinField, GalerkinField]:
    """(pi_n x, (Id - pi_n) x) on the same mode box."""
    mask = x.modes.low_mask(n)[:, None]
    return (GalerkinField(x.modes, np.where(mask, x.coeffs, 0.0)),
            GalerkinField(x.modes, np.where(mask, 0.0, x.coeffs)))


def low_coordinates(x: GalerkinField, n: int) -> np.ndarray:
    """Flattened coordinates of pi_n x in the canonical order of Z_l(n)."""
    return x.coeffs[x.modes.low_mask(n)].reshape(-1)


def embed_low(modes: ModeSet, n: int, vec) -> GalerkinField:
    """Inverse of low_coordinates: place an N-vector on the low modes."""
    out = GalerkinField(modes)
    out.coeffs[modes.low_mask(n)] = np.asarray(vec, dtype=float).reshape(-1, 2)
    return out


def random_field(m: int, rng: np.random.Generator, amplitude: float = 1.0,
                 gamma: float = 0.5, decay: float = 1.0) -> GalerkinField:
    """Gaussian field rescaled so that |A^gamma x| = amplitude.

    Coefficients are drawn with standard deviation |k|^(-decay) before
    rescaling, which keeps the energy spread over low modes.
    """
    modes = enumerate_modes(m)
    c = rng.standard_normal((len(modes), 2)) * modes.norm2[:, None] ** (-0.5 * decay)
    x = GalerkinField(modes, c)
    s = sobolev_norm(x, gamma)
    return x * (amplitude / s) if s > 0 else x
