"""Variational Bayesian last layer.

Each of the K outputs carries an independent Gaussian posterior
``N(mean_k, S_k)`` over the last-layer weights, stored through the Cholesky
factor of its precision, ``inv(S_k) = L_k L_k^T``, plus the natural mean
``q_k = inv(S_k) mean_k``. Observation noise is a per-output variance
``sigma_k^2 = exp(log_sigma2_k)`` fitted by MAP under an inverse-gamma prior
with scale ``wishart_scale`` (the one-dimensional Wishart analogue).

Everything here lives in standardized output space; the trainer owns the
transforms.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import minimize

from .linalg import (
    chol_rank1_update,
    cholesky,
    inv_trace_from_chol,
    logdet_precision,
    sample_gaussian,
    tri_inverse,
    tri_solve,
)

__all__ = [
    "NonFiniteLoss",
    "VbllHead",
    "kl_to_prior",
    "elbo_loss",
    "predictive",
    "recursive_update",
    "fit_last_layer_exact",
    "log_predictive_density",
    "sample_head_weights",
    "chol_to_unconstrained",
    "unconstrained_to_chol",
    "optimize_head_elbo",
]

_LOG_2PI = math.log(2.0 * math.pi)


@lru_cache(maxsize=8)
def _lower_mask(m: int) -> NDArray:
    mask = np.tril(np.ones((m, m)))
    mask.flags.writeable = False
    return mask


class NonFiniteLoss(FloatingPointError):
    """The ELBO evaluated to NaN or infinity."""


@dataclass
class VbllHead:
    """Per-output last-layer posteriors with shared prior and noise model.

    Attributes:
        mean: ``(K, m)`` posterior means.
        chol: ``(K, m, m)`` lower Cholesky factors of the posterior precisions.
        q: ``(K, m)`` natural means ``L L^T mean``.
        log_sigma2: ``(K,)`` log observation-noise variances.
        prior_scale: ``s0`` in the prior ``N(0, s0 I)``.
        wishart_scale: Scale ``V`` of the noise prior.
        dof: Degrees of freedom ``nu`` of the noise prior.
    """

    mean: NDArray
    chol: NDArray
    q: NDArray
    log_sigma2: NDArray
    prior_scale: float = 1.0
    wishart_scale: float = 0.01
    dof: float = 1.0

    def __post_init__(self):
        if self.prior_scale <= 0:
            raise ValueError("prior_scale must be positive")
        if self.wishart_scale < 0:
            raise ValueError("wishart_scale must be nonnegative")
        K, m = self.mean.shape
        if self.chol.shape != (K, m, m) or self.q.shape != (K, m) or self.log_sigma2.shape != (K,):
            raise ValueError("inconsistent head shapes")

    @classmethod
    def from_prior(cls, num_outputs, feature_dim, prior_scale=1.0, wishart_scale=0.01, dof=1.0, log_sigma2=0.0):
        K, m = int(num_outputs), int(feature_dim)
        chol = np.broadcast_to(np.eye(m) / math.sqrt(prior_scale), (K, m, m)).copy()
        return cls(
            mean=np.zeros((K, m)),
            chol=chol,
            q=np.zeros((K, m)),
            log_sigma2=np.full(K, float(log_sigma2)),
            prior_scale=float(prior_scale),
            wishart_scale=float(wishart_scale),
            dof=float(dof),
        )

    @property
    def num_outputs(self) -> int:
        return self.mean.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.mean.shape[1]

    @property
    def sigma2(self) -> NDArray:
        return np.exp(self.log_sigma2)

    def covariance(self, k: int = 0) -> NDArray:
        """Dense covariance of output ``k``; O(m^3), meant for inspection and tests."""
        M = tri_inverse(self.chol[k])
        return M.T @ M

    def precision(self, k: int = 0) -> NDArray:
        return self.chol[k] @ self.chol[k].T

    def copy(self) -> "VbllHead":
        return replace(
            self,
            mean=self.mean.copy(),
            chol=self.chol.copy(),
            q=self.q.copy(),
            log_sigma2=self.log_sigma2.copy(),
        )

    def sync_natural(self) -> "VbllHead":
        """Recompute ``q`` from ``(mean, chol)`` in place (after gradient training)."""
        for k in range(self.num_outputs):
            L = self.chol[k]
            self.q[k] = L @ (L.T @ self.mean[k])
        return self

    def sync_mean(self) -> "VbllHead":
        """Recompute ``mean`` from ``(chol, q)`` in place."""
        for k in range(self.num_outputs):
            self.mean[k] = _mean_from_natural(self.chol[k], self.q[k])
        return self


def _mean_from_natural(L: NDArray, q: NDArray) -> NDArray:
    return tri_solve(L, tri_solve(L, q), transpose=True)


def kl_to_prior(mean: ArrayLike, chol: ArrayLike, prior_scale: float) -> float:
    """``KL(N(mean, inv(L L^T)) || N(0, prior_scale I))`` for one output."""
    mean = np.asarray(mean, dtype=float)
    m = mean.shape[0]
    s0 = float(prior_scale)
    trace_S = inv_trace_from_chol(chol)
    logdet_S = -logdet_precision(chol)
    return 0.5 * (trace_S / s0 + float(mean @ mean) / s0 - m + m * math.log(s0) - logdet_S)


def elbo_loss(head: VbllHead, features, targets, total_count: int):
    """Minibatch estimate of the negative ELBO, normalized by ``total_count``.

    For each output ``k`` with ``sigma2 = exp(log_sigma2_k)``::

        J_k = (T/B) sum_i [log N(y_ik | mean_k . phi_i, sigma2) - phi_i^T S_k phi_i / (2 sigma2)]
              - KL(q_k || p) + log p(sigma2)
        loss = -sum_k J_k / T

    with ``log p(sigma2) = -(dof/2 + 1) log sigma2 - V / (2 sigma2)``.

    Args:
        head: Current head state.
        features: ``(B, m)`` features of the minibatch.
        targets: ``(B, K)`` standardized targets.
        total_count: Dataset size ``T >= B``.

    Returns:
        ``(loss, grads)`` where ``grads`` maps ``"mean"`` (K, m), ``"chol"``
        (K, m, m, lower triangular), ``"log_sigma2"`` (K,) and ``"features"``
        (B, m) to exact gradients of ``loss``.

    Raises:
        NonFiniteLoss: if the loss is NaN or infinite.
    """
    Phi = np.asarray(features, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    B, m = Phi.shape
    K = head.num_outputs
    T = int(total_count)
    if B < 1 or T < B:
        raise ValueError(f"need 1 <= batch size <= total_count, got B={B}, T={T}")
    if Y.shape != (B, K):
        raise ValueError(f"targets must have shape {(B, K)}, got {Y.shape}")

    s0 = head.prior_scale
    V = head.wishart_scale
    prior_shape = head.dof / 2.0 + 1.0
    scale = T / B

    total = 0.0
    g_mean = np.empty_like(head.mean)
    g_chol = np.empty_like(head.chol)
    g_rho = np.empty(K)
    g_phi = np.zeros_like(Phi)
    for k in range(K):
        L = head.chol[k]
        w = head.mean[k]
        rho = head.log_sigma2[k]
        s2 = math.exp(rho)
        if not 0.0 < s2 < math.inf:
            raise NonFiniteLoss(f"noise variance {s2} out of range")
        M = tri_inverse(L)
        U = Phi @ M.T  # rows u_i = L^{-1} phi_i
        Vs = U @ M  # rows v_i = S phi_i
        a = np.einsum("ij,ij->i", U, U)
        r = Y[:, k] - Phi @ w

        data = -0.5 * B * (_LOG_2PI + rho) - (r @ r + a.sum()) / (2.0 * s2)
        diagL = np.diagonal(L)
        kl = 0.5 * (
            float(np.sum(M * M)) / s0 + float(w @ w) / s0 - m + m * math.log(s0) + 2.0 * np.sum(np.log(diagL))
        )
        log_prior = -prior_shape * rho - V / (2.0 * s2)
        total += scale * data - kl + log_prior

        SMt = M.T @ (M @ M.T)
        dJ_dL = (scale / s2) * (Vs.T @ U) + SMt / s0
        dJ_dL[np.diag_indices(m)] -= 1.0 / diagL
        np.multiply(dJ_dL, _lower_mask(m), out=dJ_dL)
        g_chol[k] = dJ_dL * (-1.0 / T)
        g_mean[k] = -(scale * (Phi.T @ r) / s2 - w / s0) / T
        g_rho[k] = -(scale * (-0.5 * B + (r @ r + a.sum()) / (2.0 * s2)) - prior_shape + V / (2.0 * s2)) / T
        g_phi -= (np.outer(r, w) - Vs) / (s2 * B)

    loss = -total / T
    if not math.isfinite(loss):
        raise NonFiniteLoss(f"ELBO loss is {loss}")
    return loss, {"mean": g_mean, "chol": g_chol, "log_sigma2": g_rho, "features": g_phi}


def predictive(head: VbllHead, features):
    """Gaussian posterior predictive per output.

    Returns:
        ``(mean, var)``; shapes ``(K,)`` for a single feature vector or
        ``(N, K)`` for a batch. ``var = phi^T S phi + sigma2``.
    """
    Phi = np.asarray(features, dtype=float)
    single = Phi.ndim == 1
    if single:
        Phi = Phi[None, :]
    mean = Phi @ head.mean.T
    var = np.empty_like(mean)
    sigma2 = head.sigma2
    for k in range(head.num_outputs):
        U = tri_solve(head.chol[k], Phi.T)
        var[:, k] = np.einsum("ij,ij->j", U, U) + sigma2[k]
    if single:
        return mean[0], var[0]
    return mean, var


def recursive_update(head: VbllHead, features, targets) -> VbllHead:
    """Condition on one observation without touching past data.

    Per output: ``L <- cholupdate(L, phi / sigma)``, ``q <- q + phi y / sigma2``
    and the mean is re-solved from ``(L, q)``. Noise stays fixed.
    """
    phi = np.asarray(features, dtype=float).reshape(-1)
    y = np.atleast_1d(np.asarray(targets, dtype=float))
    if phi.shape[0] != head.feature_dim or y.shape != (head.num_outputs,):
        raise ValueError("feature or target dimension mismatch")
    new = head.copy()
    if not np.any(phi):
        return new
    sigma2 = head.sigma2
    for k in range(head.num_outputs):
        new.chol[k] = chol_rank1_update(head.chol[k], phi / math.sqrt(sigma2[k]))
        new.q[k] = head.q[k] + phi * (y[k] / sigma2[k])
        new.mean[k] = _mean_from_natural(new.chol[k], new.q[k])
    return new


def fit_last_layer_exact(
    features, targets, prior_scale: float = 1.0, sigma2=1.0, wishart_scale: float = 0.01, dof: float = 1.0
) -> VbllHead:
    """Exact Bayesian linear-regression posterior for fixed features.

    ``inv(S) = I / s0 + Phi^T Phi / sigma2`` and ``q = Phi^T y / sigma2``.
    ``sigma2`` may be a scalar or one value per output.
    """
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    Phi = np.asarray(features, dtype=float)
    if Phi.ndim == 1:
        Phi = Phi.reshape(Y.shape[0], -1)
    T, K = Y.shape
    m = Phi.shape[1]
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (K,))
    head = VbllHead.from_prior(K, m, prior_scale, wishart_scale, dof)
    head.log_sigma2[:] = np.log(sigma2)
    if T == 0:
        return head
    gram = Phi.T @ Phi
    for k in range(K):
        P = np.eye(m) / prior_scale + gram / sigma2[k]
        head.chol[k] = cholesky(0.5 * (P + P.T))
        head.q[k] = Phi.T @ Y[:, k] / sigma2[k]
        head.mean[k] = _mean_from_natural(head.chol[k], head.q[k])
    return head


def log_predictive_density(head: VbllHead, features, targets):
    """``sum_k log N(y_k | mean_k, var_k)`` under the predictive.

    Returns a float for a single observation, an ``(N,)`` array for a batch.
    """
    mean, var = predictive(head, features)
    y = np.asarray(targets, dtype=float).reshape(mean.shape)
    lp = -0.5 * (_LOG_2PI + np.log(var) + (y - mean) ** 2 / var)
    out = lp.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def sample_head_weights(head: VbllHead, rng: np.random.Generator | None = None, z=None) -> NDArray:
    """One weight draw per output, shape ``(K, m)``.

    ``z`` (shape ``(K, m)``) fixes the standard-normal noise, e.g. zeros to
    recover the posterior means.
    """
    K = head.num_outputs
    out = np.empty_like(head.mean)
    for k in range(K):
        zk = None if z is None else np.asarray(z, dtype=float).reshape(K, -1)[k]
        out[k] = sample_gaussian(head.mean[k], head.chol[k], rng=rng, z=zk)
    return out


def chol_to_unconstrained(chol: NDArray) -> tuple[NDArray, NDArray]:
    """Split ``(K, m, m)`` factors into log-diagonals and strictly-lower parts."""
    logdiag = np.log(np.diagonal(chol, axis1=-2, axis2=-1)).copy()
    offdiag = np.tril(chol, k=-1)
    return logdiag, offdiag


def unconstrained_to_chol(logdiag: NDArray, offdiag: NDArray) -> NDArray:
    chol = np.tril(offdiag, k=-1)
    m = chol.shape[-1]
    idx = np.arange(m)
    chol[..., idx, idx] = np.exp(logdiag)
    return chol


def optimize_head_elbo(
    head: VbllHead,
    features,
    targets,
    fit_noise: bool = False,
    gtol: float = 1e-12,
    maxiter: int = 20000,
) -> VbllHead:
    """Maximize the full-batch ELBO over the head with frozen features.

    Uses L-BFGS on the unconstrained parameterization (log-diagonal Cholesky
    entries). With ``fit_noise=False`` the noise variances stay fixed.
    """
    Phi = np.asarray(features, dtype=float)
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    T = Phi.shape[0]
    K, m = head.mean.shape
    tril = np.tril_indices(m, k=-1)
    work = head.copy()

    def unpack(theta):
        i = 0
        mean = theta[i : i + K * m].reshape(K, m)
        i += K * m
        logdiag = theta[i : i + K * m].reshape(K, m)
        i += K * m
        n_off = len(tril[0])
        off = np.zeros((K, m, m))
        off[:, tril[0], tril[1]] = theta[i : i + K * n_off].reshape(K, n_off)
        i += K * n_off
        work.mean = mean.copy()
        work.chol = unconstrained_to_chol(logdiag, off)
        if fit_noise:
            work.log_sigma2 = theta[i : i + K].copy()

    def fun(theta):
        unpack(theta)
        loss, g = elbo_loss(work, Phi, Y, T)
        g_chol = g["chol"]
        g_logdiag = np.diagonal(g_chol, axis1=-2, axis2=-1) * np.diagonal(work.chol, axis1=-2, axis2=-1)
        parts = [g["mean"].ravel(), g_logdiag.ravel(), g_chol[:, tril[0], tril[1]].ravel()]
        if fit_noise:
            parts.append(g["log_sigma2"])
        return loss, np.concatenate(parts)

    logdiag, off = chol_to_unconstrained(head.chol)
    theta0 = [head.mean.ravel(), logdiag.ravel(), off[:, tril[0], tril[1]].ravel()]
    if fit_noise:
        theta0.append(head.log_sigma2)
    res = minimize(
        fun,
        np.concatenate(theta0),
        jac=True,
        method="L-BFGS-B",
        options={"gtol": gtol, "ftol": 0.0, "maxiter": maxiter, "maxfun": 2 * maxiter, "maxcor": 50},
    )
    unpack(res.x)
    return work.sync_natural()
