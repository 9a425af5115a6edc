"""Projected convection term B(u, v) = P[(u . grad) v] on the Galerkin space.

The product of two trigonometric modes is expanded with the
product-to-sum identities, giving an exact sparse table of triad
interactions (p, q) -> k.  Every bilinear evaluation is a pass over that
table; no physical-space grid is involved.
"""
from __future__ import annotations

import functools

import numpy as np

from . import _kernels
from .field import BASIS_SCALE, GalerkinField
from .lattice import ModeSet, enumerate_modes, in_plus

__all__ = [
    "product_terms",
    "pair_interaction",
    "pair_terms",
    "InteractionTable",
    "interaction_table",
    "bilinear",
    "bilinear_sym",
    "bilinear_batch",
    "linearization_matrix",
]


def product_terms(p, q):
    """Expand tau_p(p.x) * d/ds tau_q(s)|_{s=q.x} in the real basis.

    tau_k is cos for k in the plus half and sin otherwise.  Returns
    (kappa, coef) with kappa of shape (P, 2, 3) and coef of shape (P, 2):
    the product equals sum_t coef_t * e_{kappa_t}(x).  Terms landing on
    the zero mode carry coef 0.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.int64))
    q = np.atleast_2d(np.asarray(q, dtype=np.int64))
    pp = in_plus(p)
    qp = in_plus(q)
    # cos.cos and sin.sin produce sines, mixed products produce cosines
    is_sin = pp == qp
    c_sum = np.where(pp & qp, -0.5, 0.5)
    c_dif = np.where(~pp & qp, -0.5, 0.5)
    kappa = np.stack([p + q, p - q], axis=1)
    coef = np.stack([c_sum, c_dif], axis=1)
    kplus = in_plus(kappa)
    zero = ~np.any(kappa != 0, axis=-1)
    sin2 = np.broadcast_to(is_sin[:, None], kplus.shape)
    # sin of a plus-mode and cos of a minus-mode map to the mirrored mode
    flip = (sin2 & kplus) | (~sin2 & ~kplus)
    sign = np.where(sin2 & kplus, -1.0, 1.0)
    kappa = np.where(flip[..., None], -kappa, kappa)
    coef = np.where(zero, 0.0, coef * sign)
    return kappa, coef


def _project(k, v):
    k = k.astype(float)
    kk = np.sum(k * k, axis=-1, keepdims=True)
    kk = np.where(kk == 0, 1.0, kk)
    return v - np.sum(k * v, axis=-1, keepdims=True) / kk * k


def pair_terms(j, a, l, b):
    """Vectorized B(a e_j, b e_l) + B(b e_l, a e_j) for raw trig modes.

    j, l: (P, 3) integer modes; a, b: (P, 3) amplitudes orthogonal to j, l.
    Returns (targets, vectors) of shapes (P, 4, 3); rows with a zero
    vector contribute nothing.
    """
    j = np.atleast_2d(np.asarray(j, dtype=np.int64))
    l = np.atleast_2d(np.asarray(l, dtype=np.int64))
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    k1, c1 = product_terms(j, l)
    k2, c2 = product_terms(l, j)
    s1 = np.sum(l * a, axis=1)  # (l . a) for B(a e_j, b e_l)
    s2 = np.sum(j * b, axis=1)
    v1 = (c1 * s1[:, None])[..., None] * _project(k1, np.broadcast_to(b[:, None, :], k1.shape))
    v2 = (c2 * s2[:, None])[..., None] * _project(k2, np.broadcast_to(a[:, None, :], k2.shape))
    return np.concatenate([k1, k2], axis=1), np.concatenate([v1, v2], axis=1)


def pair_interaction(j, a, l, b) -> dict:
    """Symmetrized convection of two single-mode fields a e_j and b e_l.

    Uses the raw basis cos(k.x), sin(k.x) (no normalization).  Returns a
    dict mapping each output mode to its projected vector amplitude.
    """
    targets, vecs = pair_terms(j, a, l, b)
    out: dict = {}
    for k, v in zip(targets[0], vecs[0]):
        if not np.any(v):
            continue
        key = tuple(int(c) for c in k)
        out[key] = out.get(key, 0.0) + v
    return out


class InteractionTable:
    """All triads (p, q) -> k of the Galerkin truncation at box size m."""

    def __init__(self, modes: ModeSet):
        self.modes = modes
        M = len(modes)
        pi, qi = np.meshgrid(np.arange(M), np.arange(M), indexing="ij")
        pi, qi = pi.ravel(), qi.ravel()
        kappa, coef = product_terms(modes.modes[pi], modes.modes[qi])
        ki = modes.index(kappa)
        keep = (coef != 0) & (ki >= 0)
        rows, terms = np.nonzero(keep)
        order = np.lexsort((qi[rows], pi[rows], ki[rows, terms]))
        rows, terms = rows[order], terms[order]
        self.p_idx = np.ascontiguousarray(pi[rows])
        self.q_idx = np.ascontiguousarray(qi[rows])
        self.k_idx = np.ascontiguousarray(ki[rows, terms])
        self.coef = np.ascontiguousarray(coef[rows, terms] * BASIS_SCALE)
        self.qvec = np.ascontiguousarray(modes.modes[self.q_idx].astype(float))
        self._lin_tables = None

    def __len__(self):
        return len(self.p_idx)

    def lin_tables(self):
        if self._lin_tables is None:
            fr = self.modes.frames
            qe = np.einsum("ec,eac->ea", self.qvec, fr[self.p_idx])
            ee = np.einsum("eic,ebc->eib", fr[self.k_idx], fr[self.q_idx])
            self._lin_tables = (np.ascontiguousarray(qe), np.ascontiguousarray(ee),
                                np.ascontiguousarray(fr))
        return self._lin_tables


@functools.lru_cache(maxsize=8)
def _table(n: int, twist: float) -> InteractionTable:
    return InteractionTable(enumerate_modes(n, twist))


def interaction_table(modes: ModeSet | int) -> InteractionTable:
    if not isinstance(modes, ModeSet):
        modes = enumerate_modes(int(modes))
    return _table(modes.n, modes.twist)


def _to_cart(c, modes):
    return np.ascontiguousarray(c[..., 0, None] * modes.e1 + c[..., 1, None] * modes.e2)


def bilinear_batch(U: np.ndarray, V: np.ndarray, modes: ModeSet | int,
                   symmetric: bool = False) -> np.ndarray:
    """B(U, V) for stacks of coefficient arrays of shape (R, M, 2).

    With symmetric=True returns B(U, V) + B(V, U).
    """
    table = interaction_table(modes)
    modes = table.modes
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    single = U.ndim == 2
    if single:
        U, V = U[None], V[None]
    uc, vc = _to_cart(U, modes), _to_cart(V, modes)
    out = np.zeros_like(uc)
    args = (table.p_idx, table.q_idx, table.k_idx, table.coef, table.qvec)
    _kernels.convect_batch(uc, vc, *args, out)
    if symmetric:
        _kernels.convect_batch(vc, uc, *args, out)
    res = np.stack([np.einsum("rkc,kc->rk", out, modes.e1),
                    np.einsum("rkc,kc->rk", out, modes.e2)], axis=-1)
    return res[0] if single else res


def bilinear(u: GalerkinField, v: GalerkinField) -> GalerkinField:
    """pi_m P[(u . grad) v]."""
    u._check(v)
    return GalerkinField(u.modes, bilinear_batch(u.coeffs, v.coeffs, u.modes))


def bilinear_sym(u: GalerkinField, v: GalerkinField) -> GalerkinField:
    """B(u, v) + B(v, u)."""
    u._check(v)
    return GalerkinField(u.modes, bilinear_batch(u.coeffs, v.coeffs, u.modes, symmetric=True))


def linearization_matrix(x: GalerkinField | np.ndarray, modes: ModeSet | int | None = None,
                         row_mask=None, col_mask=None) -> np.ndarray:
    """Dense matrix of h -> B(h, x) + B(x, h).

    Rows and columns are restricted to the modes selected by the boolean
    masks (all modes by default) and use the flattened frame coordinates
    in canonical order.
    """
    if isinstance(x, GalerkinField):
        modes, coeffs = x.modes, x.coeffs
    else:
        coeffs = np.asarray(x, dtype=float)
        if not isinstance(modes, ModeSet):
            modes = enumerate_modes(int(modes))
    table = interaction_table(modes)
    M = len(modes)
    row_mask = np.ones(M, bool) if row_mask is None else np.asarray(row_mask, bool)
    col_mask = np.ones(M, bool) if col_mask is None else np.asarray(col_mask, bool)
    rowpos = np.full(M, -1, dtype=np.int64)
    rowpos[row_mask] = np.arange(row_mask.sum())
    colpos = np.full(M, -1, dtype=np.int64)
    colpos[col_mask] = np.arange(col_mask.sum())
    out = np.zeros((2 * row_mask.sum(), 2 * col_mask.sum()))
    qe, ee, fr = table.lin_tables()
    xc = _to_cart(coeffs, modes)
    _kernels.linearization(xc, table.p_idx, table.q_idx, table.k_idx, table.coef, table.qvec,
                           qe, ee, fr, rowpos, colpos, out)
    return out
