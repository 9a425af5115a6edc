"""Compiled loops over the sparse interaction table."""
import numba as nb
import numpy as np


@nb.njit(cache=True, nogil=True, fastmath=True)
def convect_batch(a, b, p_idx, q_idx, k_idx, coef, qvec, out):
    # out[r, k] += coef * (q . a[r, p]) * b[r, q], all vectors Cartesian
    nrep = a.shape[0]
    nent = p_idx.shape[0]
    for r in range(nrep):
        ar = a[r]
        br = b[r]
        o = out[r]
        for e in range(nent):
            p = p_idx[e]
            q = q_idx[e]
            k = k_idx[e]
            g = coef[e] * (qvec[e, 0] * ar[p, 0] + qvec[e, 1] * ar[p, 1] + qvec[e, 2] * ar[p, 2])
            o[k, 0] += g * br[q, 0]
            o[k, 1] += g * br[q, 1]
            o[k, 2] += g * br[q, 2]


@nb.njit(cache=True, nogil=True)
def linearization(xc, p_idx, q_idx, k_idx, coef, qvec, qe, ee, frames, rowpos, colpos, out):
    # Matrix of h -> B(h, x) + B(x, h) in frame coordinates.
    # qe[e, a] = q . e_a(p),  ee[e, i, b] = e_i(k) . e_b(q)
    nent = p_idx.shape[0]
    for e in range(nent):
        k = k_idx[e]
        rk = rowpos[k]
        if rk < 0:
            continue
        p = p_idx[e]
        q = q_idx[e]
        c = coef[e]
        cp = colpos[p]
        if cp >= 0:
            # B(h, x): derivative in h_p
            for i in range(2):
                ex = (frames[k, i, 0] * xc[q, 0] + frames[k, i, 1] * xc[q, 1]
                      + frames[k, i, 2] * xc[q, 2])
                for a in range(2):
                    out[2 * rk + i, 2 * cp + a] += c * qe[e, a] * ex
        cq = colpos[q]
        if cq >= 0:
            # B(x, h): derivative in h_q
            s = c * (qvec[e, 0] * xc[p, 0] + qvec[e, 1] * xc[p, 1] + qvec[e, 2] * xc[p, 2])
            for i in range(2):
                for b in range(2):
                    out[2 * rk + i, 2 * cq + b] += s * ee[e, i, b]


def warmup():
    """Trigger compilation on tiny inputs."""
    a = np.zeros((1, 1, 3))
    i = np.zeros(1, dtype=np.int64)
    f = np.zeros(1)
    v = np.zeros((1, 3))
    convect_batch(a, a, i, i, i, f, v, np.zeros((1, 1, 3)))
    linearization(np.zeros((1, 3)), i, i, i, f, v, np.zeros((1, 2)), np.zeros((1, 2, 2)),
                  np.zeros((1, 2, 3)), i, i, np.zeros((2, 2)))
