"""Compiled training step for the surrogate.

One call performs forward pass, negative-ELBO evaluation, backprop, global-norm
clipping and the AdamW update on a flat parameter buffer. The arithmetic
mirrors :func:`vbllbo.head.elbo_loss` and :func:`vbllbo.backbone.backward`
term by term; the test suite checks the two routes against each other.

Flat layout: ``[W0, b0, W1, b1, ..., mean (K, m), logdiag (K, m),
offdiag (K, m(m-1)/2), log_sigma2 (K,)]`` with the strictly-lower entries
packed in ``np.tril_indices(m, -1)`` order.
"""

from __future__ import annotations

import math

import numba
import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)
_BLOCK = 16


@numba.njit(cache=True, fastmath=True)
def _tri_inverse_small(L):
    m = L.shape[0]
    M = np.zeros((m, m))
    for i in range(m):
        row = M[i]
        for k in range(i):
            lik = L[i, k]
            if lik != 0.0:
                Mk = M[k]
                for j in range(k + 1):
                    row[j] -= lik * Mk[j]
        d = 1.0 / L[i, i]
        for j in range(i):
            row[j] *= d
        row[i] = d
    return M


@numba.njit(cache=True)
def tri_inverse_blocked(L):
    """Inverse of a lower-triangular matrix by block rows of width 16.

    Diagonal blocks are inverted by substitution, the rest with two matrix
    products per block row, which keeps most of the work inside BLAS.
    """
    m = L.shape[0]
    M = np.zeros((m, m))
    for i0 in range(0, m, _BLOCK):
        i1 = min(m, i0 + _BLOCK)
        Dii = _tri_inverse_small(np.ascontiguousarray(L[i0:i1, i0:i1]))
        M[i0:i1, i0:i1] = Dii
        if i0 > 0:
            left = np.dot(np.ascontiguousarray(L[i0:i1, 0:i0]), np.ascontiguousarray(M[0:i0, 0:i0]))
            M[i0:i1, 0:i0] = -np.dot(Dii, left)
    return M


@numba.njit(cache=True)
def fused_step(theta, grad, m1, v1, decay, dims, rows, cols, Xb, Yb, total_count,
               prior_scale, wishart_scale, prior_shape, step_size, denom_corr,
               beta1, beta2, eps, clip_norm):
    """Compute the minibatch loss and apply one AdamW update in place.

    Returns the loss; a non-finite loss leaves ``theta`` and the moments untouched.
    """
    n_layers = dims.shape[0] - 1
    B = Xb.shape[0]
    K = Yb.shape[1]
    m = dims[n_layers]
    n_off = rows.shape[0]
    T = total_count
    scale = T / B

    # forward
    inputs = [Xb]
    slopes = [Xb]
    h = Xb
    o = 0
    w_off = np.empty(n_layers, dtype=np.int64)
    for l in range(n_layers):
        fan_in = dims[l]
        c = dims[l + 1]
        w_off[l] = o
        W = theta[o : o + fan_in * c].reshape((fan_in, c))
        o += fan_in * c
        b = theta[o : o + c]
        o += c
        a = np.dot(h, W)
        hn = np.empty_like(a)
        d = np.empty_like(a)
        for i in range(B):
            for j in range(c):
                z = a[i, j] + b[j]
                if z > 0.0:
                    hn[i, j] = z
                    d[i, j] = 1.0
                else:
                    e = math.exp(z)
                    hn[i, j] = e - 1.0
                    d[i, j] = e
        if l == 0:
            slopes[0] = d
        else:
            inputs.append(h)
            slopes.append(d)
        h = hn
    Phi = h
    head0 = o
    mean = theta[head0 : head0 + K * m].reshape((K, m))
    logdiag = theta[head0 + K * m : head0 + 2 * K * m].reshape((K, m))
    offdiag = theta[head0 + 2 * K * m : head0 + 2 * K * m + K * n_off].reshape((K, n_off))
    log_sigma2 = theta[head0 + 2 * K * m + K * n_off : head0 + 2 * K * m + K * n_off + K]
    g_mean = grad[head0 : head0 + K * m].reshape((K, m))
    g_logdiag = grad[head0 + K * m : head0 + 2 * K * m].reshape((K, m))
    g_offdiag = grad[head0 + 2 * K * m : head0 + 2 * K * m + K * n_off].reshape((K, n_off))
    g_rho = grad[head0 + 2 * K * m + K * n_off : head0 + 2 * K * m + K * n_off + K]

    # head
    total = 0.0
    g_phi = np.zeros((B, m))
    for k in range(K):
        L = np.zeros((m, m))
        diagL = np.exp(logdiag[k])
        for i in range(m):
            L[i, i] = diagL[i]
        for p in range(n_off):
            L[rows[p], cols[p]] = offdiag[k, p]
        M = tri_inverse_blocked(L)
        w = mean[k]
        rho = log_sigma2[k]
        s2 = math.exp(rho)
        if not (s2 > 0.0 and s2 < np.inf):
            return np.inf
        U = np.dot(Phi, M.T)
        Vs = np.dot(U, M)
        r = Yb[:, k] - np.dot(Phi, w)
        rr = np.dot(r, r)
        aa = 0.0
        for i in range(B):
            for j in range(m):
                aa += U[i, j] * U[i, j]
        data = -0.5 * B * (_LOG_2PI + rho) - (rr + aa) / (2.0 * s2)
        trS = 0.0
        for i in range(m):
            for j in range(i + 1):
                trS += M[i, j] * M[i, j]
        kl = 0.5 * (trS / prior_scale + np.dot(w, w) / prior_scale - m
                    + m * math.log(prior_scale) + 2.0 * np.sum(logdiag[k]))
        log_prior = -prior_shape * rho - wishart_scale / (2.0 * s2)
        total += scale * data - kl + log_prior

        SMt = np.dot(M.T, np.dot(M, M.T))
        dJ = (scale / s2) * np.dot(Vs.T, U) + SMt / prior_scale
        for i in range(m):
            g_logdiag[k, i] = -(dJ[i, i] - 1.0 / diagL[i]) * diagL[i] / T
        for p in range(n_off):
            g_offdiag[k, p] = -dJ[rows[p], cols[p]] / T
        g_mean[k] = -(scale * np.dot(Phi.T, r) / s2 - w / prior_scale) / T
        g_rho[k] = -(scale * (-0.5 * B + (rr + aa) / (2.0 * s2)) - prior_shape
                     + wishart_scale / (2.0 * s2)) / T
        inv = 1.0 / (s2 * B)
        for i in range(B):
            for j in range(m):
                g_phi[i, j] -= (r[i] * w[j] - Vs[i, j]) * inv
    loss = -total / T
    if not np.isfinite(loss):
        return loss

    # backward
    g = g_phi
    for l in range(n_layers - 1, -1, -1):
        fan_in = dims[l]
        c = dims[l + 1]
        o = w_off[l]
        ga = g * slopes[l]
        inp = Xb if l == 0 else inputs[l]
        gW = grad[o : o + fan_in * c].reshape((fan_in, c))
        gW[:, :] = np.dot(inp.T, ga)
        gb = grad[o + fan_in * c : o + fan_in * c + c]
        for j in range(c):
            s = 0.0
            for i in range(B):
                s += ga[i, j]
            gb[j] = s
        if l > 0:
            W = theta[o : o + fan_in * c].reshape((fan_in, c))
            g = np.dot(ga, W.T)

    # clip + AdamW
    norm = math.sqrt(np.dot(grad, grad))
    clip = 1.0
    if clip_norm > 0.0 and norm > clip_norm:
        clip = clip_norm / norm
    for i in range(theta.shape[0]):
        gi = grad[i] * clip
        mi = beta1 * m1[i] + (1.0 - beta1) * gi
        vi = beta2 * v1[i] + (1.0 - beta2) * gi * gi
        m1[i] = mi
        v1[i] = vi
        theta[i] = theta[i] * decay[i] - step_size * mi / (math.sqrt(vi) * denom_corr + eps)
    return loss
