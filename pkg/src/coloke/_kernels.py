"""Compiled value-and-gradient kernel for the weighted multistep Koopman residual.

Parameter layout (flat, float64): for each MLP layer ``W`` (out x in, row-major)
then ``b``; the Koopman matrix ``K`` (m x m, row-major) last.

Weights ``wl[b, j-1]`` multiply ``||Phi(x_{b+j}) - K^j Phi(x_b)||^2`` in the
loss and ``ws`` does the same for the secondary (score) accumulator. Only the
loss is differentiated.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def objective(theta, widths, X, wl, ws, grad, need_grad):
    n, d = X.shape
    L = widths.shape[0] - 1
    maxw = 0
    for l in range(L + 1):
        if widths[l] > maxw:
            maxw = widths[l]
    m = d + widths[L]
    w_ofs = np.empty(L, np.int64)
    b_ofs = np.empty(L, np.int64)
    off = 0
    for l in range(L):
        w_ofs[l] = off
        off += widths[l] * widths[l + 1]
        b_ofs[l] = off
        off += widths[l + 1]
    k_ofs = off

    H = np.zeros((L + 1, n, maxw))
    for i in range(n):
        for k in range(d):
            H[0, i, k] = X[i, k]
    for l in range(L):
        fin = widths[l]
        fout = widths[l + 1]
        for i in range(n):
            for o in range(fout):
                z = theta[b_ofs[l] + o]
                base = w_ofs[l] + o * fin
                for k in range(fin):
                    z += theta[base + k] * H[l, i, k]
                if l < L - 1:
                    H[l + 1, i, o] = np.tanh(z)
                else:
                    H[l + 1, i, o] = z

    phi = np.empty((n, m))
    for i in range(n):
        for k in range(d):
            phi[i, k] = X[i, k]
        for k in range(m - d):
            phi[i, d + k] = H[L, i, k]

    w = wl.shape[1]
    Z = np.empty((w + 1, n, m))
    for i in range(n):
        for k in range(m):
            Z[0, i, k] = phi[i, k]
    for j in range(1, w + 1):
        for i in range(n - j):
            for r in range(m):
                acc = 0.0
                for c in range(m):
                    acc += theta[k_ofs + r * m + c] * Z[j - 1, i, c]
                Z[j, i, r] = acc

    loss = 0.0
    score = 0.0
    dphi = np.zeros((n, m))
    dZ = np.zeros((w + 1, n, m))
    res = np.empty(m)
    for j in range(1, w + 1):
        for b in range(n - j):
            a_ = wl[b, j - 1]
            s_ = ws[b, j - 1]
            if a_ == 0.0 and s_ == 0.0:
                continue
            rr = 0.0
            for k in range(m):
                res[k] = phi[b + j, k] - Z[j, b, k]
                rr += res[k] * res[k]
            loss += a_ * rr
            score += s_ * rr
            if need_grad and a_ != 0.0:
                for k in range(m):
                    g = 2.0 * a_ * res[k]
                    dphi[b + j, k] += g
                    dZ[j, b, k] -= g

    if not need_grad:
        return loss, score

    for q in range(grad.shape[0]):
        grad[q] = 0.0
    for j in range(w, 0, -1):
        for b in range(n - j):
            for r in range(m):
                g = dZ[j, b, r]
                if g == 0.0:
                    continue
                for c in range(m):
                    dZ[j - 1, b, c] += g * theta[k_ofs + r * m + c]
                    grad[k_ofs + r * m + c] += g * Z[j - 1, b, c]
    for i in range(n):
        for k in range(m):
            dphi[i, k] += dZ[0, i, k]

    G = np.zeros((n, maxw))
    for i in range(n):
        for k in range(m - d):
            G[i, k] = dphi[i, d + k]
    Gp = np.zeros((n, maxw))
    for l in range(L - 1, -1, -1):
        fin = widths[l]
        fout = widths[l + 1]
        if l < L - 1:
            for i in range(n):
                for o in range(fout):
                    h = H[l + 1, i, o]
                    G[i, o] *= 1.0 - h * h
        for i in range(n):
            for k in range(fin):
                Gp[i, k] = 0.0
        for i in range(n):
            for o in range(fout):
                g = G[i, o]
                if g == 0.0:
                    continue
                grad[b_ofs[l] + o] += g
                base = w_ofs[l] + o * fin
                for k in range(fin):
                    grad[base + k] += g * H[l, i, k]
                    Gp[i, k] += g * theta[base + k]
        for i in range(n):
            for k in range(fin):
                G[i, k] = Gp[i, k]
    return loss, score
