"""Spanning checks for the brackets of the low-mode drift with the forcing.

Generators on the low space pi_n H:
  K0     forced directions q_k^i e_k with k in Z_l(n) minus Z_l(n0)
  K1(y)  [F, K0] = A K + pi^l (B(K, y) + B(y, K)) at a point y
  K2     [K_j, [F, K_l]] = -pi^l (B(K_l, K_j) + B(K_j, K_l))
The smallest singular value of the stacked generator matrix measures how
well they span; the mixing set checks that unforced modes are reached
through pairs of forced modes.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .field import BASIS_SCALE, random_field
from .lattice import enumerate_modes
from .noise import CovarianceOperator
from .nonlinearity import bilinear_batch, linearization_matrix, pair_terms

RANK_TOL = 1e-10


@dataclass(frozen=True)
class MixingSet:
    k: tuple
    pairs: list            # [(j, l)] admissible pairs with a nonzero contribution
    vectors: np.ndarray    # (P, 3) contributions at mode k, raw basis
    rank: int


def _columns(Q: CovarianceOperator, idx: int) -> list:
    """Cartesian amplitudes of the columns q_k^i e_k of mode idx."""
    fr = Q.modes.frames[idx]
    out = []
    for i in range(2):
        c = Q.blocks[idx][:, i]
        if np.any(c):
            out.append(c[0] * fr[0] + c[1] * fr[1])
    return out


def _rank(vecs: np.ndarray, scale: float) -> int:
    if len(vecs) == 0 or scale == 0:
        return 0
    s = np.linalg.svd(vecs, compute_uv=False)
    return int(np.sum(s > RANK_TOL * scale))


def mixing_set(k, Q: CovarianceOperator, cutoff: int | None = None) -> MixingSet:
    """Pairs of forced high modes feeding mode k, with their contributions.

    Pairs are real basis modes (j, l) with j + l or j - l equal to +-k.
    Admissible pairs have |j|_inf, |l|_inf in (n0, cutoff], j not parallel
    to l and |j| != |l|.  The rank of the span of the contributions inside
    the plane orthogonal to k is reported.
    """
    modes = Q.modes
    k = np.asarray(k, dtype=np.int64)
    cutoff = modes.n if cutoff is None else min(int(cutoff), modes.n)
    r = np.arange(-cutoff, cutoff + 1)
    grid = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
    # cos and sin modes of one wavevector carry opposite labels, so in the
    # real basis any pair with j + l or j - l equal to +-k can feed mode k
    js = np.concatenate([grid] * 4)
    ls = np.concatenate([k[None] - grid, -k[None] - grid, grid - k[None], grid + k[None]])
    sup_j, sup_l = np.abs(js).max(1), np.abs(ls).max(1)
    ok = (sup_j > Q.n0) & (sup_l > Q.n0) & (sup_j <= cutoff) & (sup_l <= cutoff)
    ok &= np.any(np.cross(js, ls) != 0, axis=1)
    ok &= np.sum(js**2, 1) != np.sum(ls**2, 1)
    js, ls = js[ok], ls[ok]
    # each unordered pair once
    swap = np.array([tuple(a) > tuple(b) for a, b in zip(js, ls)], dtype=bool)[:, None]
    lo, hi = np.where(swap, ls, js), np.where(swap, js, ls)
    uniq = np.unique(np.concatenate([lo, hi], 1), axis=0)
    js, ls = uniq[:, :3], uniq[:, 3:]
    ji, li = modes.index(js), modes.index(ls)
    cart = Q.blocks.transpose(0, 2, 1) @ modes.frames  # (M, column, 3)
    rows = [(p, ca, cb) for p in range(len(js)) for ca in range(2) for cb in range(2)]
    rows = np.asarray(rows, dtype=np.int64).reshape(-1, 3)
    va = cart[ji[rows[:, 0]], rows[:, 1]]
    vb = cart[li[rows[:, 0]], rows[:, 2]]
    live = np.any(va != 0, 1) & np.any(vb != 0, 1)
    rows, va, vb = rows[live], va[live], vb[live]
    targets, contrib = pair_terms(js[rows[:, 0]], va, ls[rows[:, 0]], vb)
    hit = np.all(targets == k, axis=-1)
    v = np.sum(contrib * hit[..., None], axis=1)
    # natural size of a contribution, to separate cancellations from rounding
    size = np.linalg.norm(va, axis=1) * np.linalg.norm(vb, axis=1) * (
        np.linalg.norm(js[rows[:, 0]], axis=1) + np.linalg.norm(ls[rows[:, 0]], axis=1))
    scale = float(size.max()) if len(size) else 0.0
    nz = np.linalg.norm(v, axis=1) > RANK_TOL * size
    vecs = v[nz]
    used = np.unique(rows[nz, 0])
    pairs = [(tuple(int(c) for c in js[p]), tuple(int(c) for c in ls[p])) for p in used]
    return MixingSet(tuple(int(c) for c in k), pairs, vecs, _rank(vecs, scale))


def level_two_generators(Q: CovarianceOperator, n: int):
    """Sparse description of K2 on the low coordinates of Z_l(n).

    Returns (rows, cols, vals, ncols) of the matrix whose columns are
    -pi^l (B(K_a, K_b) + B(K_b, K_a)) over unordered pairs of forced
    low columns on distinct modes.
    """
    modes = Q.modes
    low = modes.low_mask(n)
    pos = np.full(len(modes), -1)
    pos[low] = np.arange(low.sum())
    gen_mode, gen_vec = [], []
    for idx in np.flatnonzero(low & Q.forced):
        for v in _columns(Q, idx):
            gen_mode.append(idx)
            gen_vec.append(v)
    gen_mode = np.asarray(gen_mode, dtype=np.int64)
    gen_vec = np.asarray(gen_vec).reshape(-1, 3)
    a, b = np.triu_indices(len(gen_mode), 1)
    keep = gen_mode[a] != gen_mode[b]
    a, b = a[keep], b[keep]
    if len(a) == 0:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0), 0
    targets, vecs = pair_terms(modes.modes[gen_mode[a]], gen_vec[a], modes.modes[gen_mode[b]], gen_vec[b])
    ti = modes.index(targets)  # (P, 4)
    inside = ti >= 0
    tp = np.where(inside, pos[np.where(inside, ti, 0)], -1)
    fr = modes.frames
    rows, cols, vals = [], [], []
    col = np.broadcast_to(np.arange(len(a))[:, None], tp.shape)
    for comp in range(2):
        e = fr[np.where(inside, ti, 0), comp]  # (P, 4, 3)
        coord = -BASIS_SCALE * np.sum(vecs * e, axis=-1)
        m = (tp >= 0) & (coord != 0)
        rows.append(2 * tp[m] + comp)
        cols.append(col[m])
        vals.append(coord[m])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), len(a)


def _compress(blocks, N: int) -> np.ndarray:
    """Upper-triangular R with R^T R = C C^T for C given as column blocks.

    Tall-skinny QR over the transposed blocks keeps singular values of C
    exact to rounding, unlike forming the Gram matrix.
    """
    R = np.zeros((0, N))
    for blk in blocks:
        stacked = np.vstack([R, blk.T])
        R = np.linalg.qr(stacked, mode="r")
    return R


@dataclass
class HormanderCertificate:
    n0: int
    n: int
    m: int
    per_k: dict
    delta_hat: float
    delta_per_sample: list
    sigma_max: float
    constant_rank: int
    dimension: int
    witness: dict | None
    passed: bool
    samples: list = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        doc = {
            "n0": self.n0, "n": self.n, "m": self.m,
            "per_k": {",".join(map(str, k)): v for k, v in self.per_k.items()},
            "delta_hat": self.delta_hat,
            "delta_per_sample": self.delta_per_sample,
            "sigma_max": self.sigma_max,
            "constant_rank": self.constant_rank,
            "dimension": self.dimension,
            "witness": self.witness,
            "passed": self.passed,
        }
        return json.dumps(doc, indent=1)


def bracket_span_check(Q: CovarianceOperator, n: int, samples: int = 20, seed: int = 0,
                       points=None, cutoff: int | None = None,
                       amplitude: float = 1.0) -> HormanderCertificate:
    """Certificate that K0, K1(y), K2 span the low space.

    Evaluated at y = 0 and at `samples` Gaussian points with |A y| =
    amplitude (or at explicit `points`, arrays of shape (M, 2)).  The
    certificate value is the smallest singular value over all points;
    a direction counts as spanned when its singular value exceeds
    1e-10 times the largest one.
    """
    modes = Q.modes
    m, n0 = modes.n, Q.n0
    if not n0 < n <= m:
        raise ValueError(f"need n0 < n <= m, got n0={n0}, n={n}, m={m}")
    cutoff = n + 2 if cutoff is None else cutoff
    low = modes.low_mask(n)
    N = 2 * int(low.sum())
    Ql = Q.low_matrix(n)
    K0 = Ql[:, np.any(Ql != 0, axis=0)]
    rows, cols, vals, ncol = level_two_generators(Q, n)

    def k2_blocks(chunk=20000):
        for s in range(0, ncol, chunk):
            sel = (cols >= s) & (cols < s + chunk)
            blk = np.zeros((N, min(chunk, ncol - s)))
            np.add.at(blk, (rows[sel], cols[sel] - s), vals[sel])
            yield blk

    R = _compress([K0, *k2_blocks()], N)
    sc = np.linalg.svd(R, compute_uv=False) if len(R) else np.zeros(1)
    const_rank = int(np.sum(sc > RANK_TOL * sc[0])) if sc[0] > 0 else 0

    if points is None:
        rng = np.random.default_rng(seed)
        points = [np.zeros((len(modes), 2))]
        points += [random_field(m, rng, amplitude, gamma=1.0, decay=0.0).coeffs for _ in range(samples)]
    A_low = np.repeat(modes.norm2[low], 2)
    deltas, smax, worst = [], 0.0, None
    for y in points:
        K1 = A_low[:, None] * K0
        if np.any(y):
            K1 = K1 + linearization_matrix(y, modes, low, low) @ K0
        G = np.hstack([R.T, K1])
        U, s, _ = np.linalg.svd(G, full_matrices=False)
        smin = float(s[-1]) if len(s) >= N else 0.0
        deltas.append(smin)
        smax = max(smax, float(s[0]))
        if worst is None or smin < worst[0]:
            worst = (smin, U[:, -1] if len(s) >= N else None, len(deltas) - 1)
    delta_hat = float(min(deltas))

    per_k = {}
    unforced = [tuple(int(c) for c in k) for k in modes.modes[modes.low_mask(n0)]]
    for k in unforced:
        ms = mixing_set(k, Q, cutoff)
        per_k[k] = {"rank": ms.rank, "pairs_used": len(ms.pairs)}
    mix_ok = all(v["rank"] == 2 for v in per_k.values())
    span_ok = delta_hat > RANK_TOL * smax
    witness = None
    if not (mix_ok and span_ok):
        witness = {"sample": worst[2], "delta": worst[0]}
        bad_k = [list(k) for k, v in per_k.items() if v["rank"] < 2]
        if bad_k:
            witness["mixing_rank_deficient"] = bad_k
        if worst[1] is not None:
            vec = worst[1]
            top = np.argsort(-np.abs(vec))[:6]
            lowmodes = modes.modes[low]
            witness["direction"] = [
                {"mode": [int(c) for c in lowmodes[i // 2]], "component": int(i % 2), "weight": float(vec[i])}
                for i in top
            ]
    return HormanderCertificate(n0, n, m, per_k, delta_hat, deltas, smax, const_rank, N,
                                witness, bool(mix_ok and span_ok), [np.asarray(p) for p in points])


def low_drift(y: np.ndarray, Q: CovarianceOperator, n: int) -> np.ndarray:
    """pi^l [A y + B(y, y)] in low coordinates, for y of shape (M, 2)."""
    modes = Q.modes
    low = modes.low_mask(n)
    f = modes.norm2[:, None] * y + bilinear_batch(y, y, modes)
    return f[low].reshape(-1)


def lie_bracket(f, g, y: np.ndarray, embed, eps: float = 1e-3) -> np.ndarray:
    """[f, g](y) = Df(y) g(y) - Dg(y) f(y) by central differences.

    f and g map a full state (M, 2) to low coordinates; `embed` lifts low
    coordinates back to a full state.  Exact up to rounding when f and g
    are polynomials of degree at most two.
    """
    fy, gy = embed(f(y)), embed(g(y))
    dg = (g(y + eps * fy) - g(y - eps * fy)) / (2 * eps)
    df = (f(y + eps * gy) - f(y - eps * gy)) / (2 * eps)
    return df - dg


def twisted_covariance(Q: CovarianceOperator, twist: float) -> CovarianceOperator:
    """The same covariance blocks expressed on a rotated frame of each mode."""
    modes = enumerate_modes(Q.m, twist)
    return CovarianceOperator(modes, Q.blocks.copy(), Q.n0, Q.r, Q.sigma)
