"""Fourier lattice for divergence-free fields on the 3-torus.

Modes are integer vectors k != 0 in the box [-n, n]^3, split into a
"plus" half (cos) and a "minus" half (sin).  Each mode carries an
orthonormal frame (e1, e2) of the plane orthogonal to k, so a
divergence-free field is stored as two real coordinates per mode.
"""
from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ModeSet",
    "enumerate_modes",
    "in_plus",
    "perp_basis",
    "project_perp",
    "modes_to_json",
    "modes_from_json",
]


def in_plus(k) -> np.ndarray | bool:
    """Membership in the positive half-lattice.

    k1 > 0, or k1 == 0 and k2 > 0, or k1 == k2 == 0 and k3 > 0.
    Works on a single triple or on an (..., 3) array.
    """
    k = np.asarray(k)
    k1, k2, k3 = k[..., 0], k[..., 1], k[..., 2]
    out = (k1 > 0) | ((k1 == 0) & (k2 > 0)) | ((k1 == 0) & (k2 == 0) & (k3 > 0))
    return bool(out) if out.ndim == 0 else out


def perp_basis(k, twist: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal pair spanning the plane orthogonal to k.

    e1 = (k x a)/|k x a| with a = z-hat, or a = x-hat when k is parallel
    to z-hat; e2 = (k x e1)/|k x e1|.  A nonzero twist rotates the pair
    by that angle inside the plane.
    """
    k = np.asarray(k, dtype=float)
    if not np.any(k):
        raise ValueError("perp_basis is undefined for k = 0")
    a = np.array([0.0, 0.0, 1.0])
    if k[0] == 0 and k[1] == 0:
        a = np.array([1.0, 0.0, 0.0])
    e1 = np.cross(k, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(k, e1)
    e2 /= np.linalg.norm(e2)
    if twist:
        c, s = np.cos(twist), np.sin(twist)
        e1, e2 = c * e1 + s * e2, -s * e1 + c * e2
    return e1, e2


def project_perp(k, eta) -> np.ndarray:
    """Leray projection of a single mode: eta - (k.eta / |k|^2) k."""
    k = np.asarray(k, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return eta - (k @ eta) / (k @ k) * k


@dataclass(frozen=True, eq=False)
class ModeSet:
    """The box Z_l(n) = [-n, n]^3 minus the origin in lexicographic order.

    Attributes are read-only numpy arrays:
      modes   (M, 3) int      wavevectors
      norm2   (M,)   float    |k|^2, the eigenvalue of the Stokes operator
      plus    (M,)   bool     True for the cos half
      e1, e2  (M, 3) float    frame of the plane orthogonal to each k
    """

    n: int
    twist: float = 0.0
    modes: np.ndarray = field(init=False, repr=False)
    norm2: np.ndarray = field(init=False, repr=False)
    plus: np.ndarray = field(init=False, repr=False)
    e1: np.ndarray = field(init=False, repr=False)
    e2: np.ndarray = field(init=False, repr=False)
    _lookup: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = int(self.n)
        if n < 1:
            raise ValueError(f"mode box size must be >= 1, got {n}")
        r = np.arange(-n, n + 1)
        grid = np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)
        modes = grid[np.any(grid != 0, axis=1)]
        e1 = np.empty((len(modes), 3))
        e2 = np.empty((len(modes), 3))
        for i, k in enumerate(modes):
            # deterministic per-mode angle, only used for basis-invariance checks
            ang = self.twist * (1.0 + 0.37 * k[0] + 0.61 * k[1] + 0.83 * k[2])
            e1[i], e2[i] = perp_basis(k, ang if self.twist else 0.0)
        side = 2 * n + 1
        lookup = np.full(side**3, -1, dtype=np.int64)
        flat = ((modes[:, 0] + n) * side + (modes[:, 1] + n)) * side + (modes[:, 2] + n)
        lookup[flat] = np.arange(len(modes))
        arrays = {
            "modes": modes.astype(np.int64),
            "norm2": np.sum(modes.astype(float) ** 2, axis=1),
            "plus": in_plus(modes),
            "e1": e1,
            "e2": e2,
            "_lookup": lookup,
        }
        for name, arr in arrays.items():
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "n", n)

    def __len__(self) -> int:
        return len(self.modes)

    @property
    def dim(self) -> int:
        """Real dimension of the divergence-free coefficient space."""
        return 2 * len(self.modes)

    @property
    def frames(self) -> np.ndarray:
        """(M, 2, 3) array with frames[i, a] = e_a of mode i."""
        return np.stack([self.e1, self.e2], axis=1)

    def index(self, k) -> np.ndarray | int:
        """Canonical index of one or many modes; -1 for modes outside the box."""
        k = np.asarray(k, dtype=np.int64)
        n, side = self.n, 2 * self.n + 1
        inside = np.all(np.abs(k) <= n, axis=-1)
        kk = np.where(inside[..., None], k, 0)
        flat = ((kk[..., 0] + n) * side + (kk[..., 1] + n)) * side + (kk[..., 2] + n)
        out = np.where(inside, self._lookup[flat], -1)
        return int(out) if out.ndim == 0 else out

    def supnorm(self) -> np.ndarray:
        return np.max(np.abs(self.modes), axis=1)

    def low_mask(self, n: int) -> np.ndarray:
        """Modes of the sub-box Z_l(n), as a boolean mask in this ordering."""
        return self.supnorm() <= n


@functools.lru_cache(maxsize=32)
def enumerate_modes(n: int, twist: float = 0.0) -> ModeSet:
    """Cached ModeSet for the box of size n."""
    return ModeSet(n, twist)


def modes_to_json(modes) -> str:
    return json.dumps([[int(a) for a in k] for k in np.asarray(modes)])


def modes_from_json(text: str) -> np.ndarray:
    data = json.loads(text)
    arr = np.asarray(data, dtype=np.int64).reshape(-1, 3)
    return arr
