"""Acquisition functions and their optimizers.

Single objective: log expected improvement on the Gaussian predictive, and
Thompson sampling, where a weight draw turns the surrogate into a
deterministic network ``f(x) = W phi(x)`` that is maximized by multistart
L-BFGS-B. Multi objective: a Thompson draw per output, NSGA-II on the drawn
functions, then greedy hypervolume-improvement selection.

All optimization happens on the unit cube; results are mapped to raw bounds
on return. Objective values are in the surrogate's standardized space unless
stated otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.optimize import minimize
from scipy.special import erfcx, log_ndtr, ndtr

from .backbone import BackboneNet, forward, input_gradient
from .benchmarks import SobolStream
from .head import sample_head_weights
from .linalg import tri_solve

__all__ = [
    "DegenerateVariance",
    "UnsupportedDimension",
    "log_ei",
    "log_ei_with_grad",
    "optimize_acqf_ei",
    "GlmSample",
    "thompson_sample",
    "optimize_ts_single",
    "NsgaConfig",
    "non_dominated_sort",
    "crowding_distance",
    "nsga2",
    "nsga2_optimize",
    "hypervolume",
    "ParetoArchive",
    "hvi_gains",
    "select_hvi_candidate",
]

VARIANCE_FLOOR = 1e-18
_EPS = np.finfo(float).eps
_ASYMPTOTIC = -1.0 / math.sqrt(_EPS)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
_HALF_LOG_PI_2 = 0.5 * math.log(math.pi / 2.0)


class DegenerateVariance(ValueError):
    """Predictive variance too small for a meaningful improvement value."""


class UnsupportedDimension(ValueError):
    """Hypervolume requested for four or more objectives."""


# ---------------------------------------------------------------------------
# log expected improvement


def _log1mexp(x: NDArray) -> NDArray:
    """``log(1 - exp(x))`` for ``x < 0``."""
    return np.where(x > -math.log(2.0), np.log(-np.expm1(x)), np.log1p(-np.exp(x)))


def _log_h(u: NDArray) -> NDArray:
    """``log(u * Phi(u) + phi(u))`` with three branches for accuracy."""
    u = np.asarray(u, dtype=float)
    out = np.empty_like(u)
    upper = u > -1.0
    mid = (~upper) & (u > _ASYMPTOTIC)
    tail = ~(upper | mid)
    if np.any(upper):
        z = u[upper]
        out[upper] = np.log(z * ndtr(z) + np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi))
    if np.any(mid):
        z = u[mid]
        # h(u) = phi(u) * (1 - |u| sqrt(pi/2) erfcx(|u|/sqrt 2)) for u < 0
        w = np.log(erfcx(-z / math.sqrt(2.0)) * -z) + _HALF_LOG_PI_2
        out[mid] = -0.5 * z * z - _HALF_LOG_2PI + _log1mexp(w)
    if np.any(tail):
        z = u[tail]
        out[tail] = -0.5 * z * z - _HALF_LOG_2PI - 2.0 * np.log(-z)
    return out


def log_ei_with_grad(mean, variance, best):
    """logEI and its partial derivatives, elementwise.

    Args:
        mean: Predictive means.
        variance: Predictive variances, all > 1e-18.
        best: Incumbent value (same space as ``mean``).

    Returns:
        ``(value, d_mean, d_variance)`` arrays of the broadcast shape.

    Raises:
        DegenerateVariance: if any variance is at or below 1e-18.
    """
    mean = np.asarray(mean, dtype=float)
    variance = np.asarray(variance, dtype=float)
    if np.any(~(variance > VARIANCE_FLOOR)):
        raise DegenerateVariance("predictive variance at or below 1e-18")
    sigma = np.sqrt(variance)
    u = (mean - best) / sigma
    log_h = _log_h(u)
    value = np.log(sigma) + log_h
    dlogh_du = np.exp(log_ndtr(u) - log_h)
    d_mean = dlogh_du / sigma
    d_sigma = (1.0 - dlogh_du * u) / sigma
    return value, d_mean, d_sigma / (2.0 * sigma)


def log_ei(mean, variance, best):
    """Log expected improvement for maximization.

    With ``u = (mean - best) / sigma``, ``EI = sigma * (u Phi(u) + phi(u))``.
    The logarithm is evaluated without forming EI, so it stays finite and
    monotone in ``mean`` far into the tail.

    Returns:
        A float for scalar inputs, otherwise an array.
    """
    value = log_ei_with_grad(mean, variance, best)[0]
    return float(value) if value.ndim == 0 else value


# ---------------------------------------------------------------------------
# shared multistart machinery


def _unit_bounds(model_or_sample, bounds):
    if bounds is None:
        return model_or_sample.lower, model_or_sample.upper
    b = np.asarray(bounds, dtype=float)
    return b[0], b[1]


def _raw_candidates(dim: int, raw_samples: int, rng: np.random.Generator) -> NDArray:
    return SobolStream(dim, seed=int(rng.integers(2**63))).draw(raw_samples)


def _multistart_ascent(value_and_grad, starts: NDArray, maxiter: int):
    """Maximize a batched objective from several starts at once.

    ``value_and_grad(X)`` returns per-row values ``(n,)`` and gradients
    ``(n, D)``. The rows are independent, so L-BFGS-B on their sum ascends
    every start simultaneously.
    """
    n, D = starts.shape

    def fun(z):
        X = z.reshape(n, D)
        v, g = value_and_grad(X)
        if not np.all(np.isfinite(v)):
            return np.inf, np.zeros_like(z)
        return -float(np.sum(v)), -g.ravel()

    try:
        res = minimize(
            fun,
            starts.ravel(),
            jac=True,
            method="L-BFGS-B",
            bounds=[(0.0, 1.0)] * (n * D),
            options={"maxiter": maxiter},
        )
        X = np.clip(res.x.reshape(n, D), 0.0, 1.0)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError):
        X = starts
    v, _ = value_and_grad(X)
    return X, v


def _best_of(X_opt, v_opt, X_raw, v_raw):
    v_opt = np.where(np.isfinite(v_opt), v_opt, -np.inf)
    i = int(np.argmax(v_opt))
    j = int(np.argmax(v_raw))
    if not np.isfinite(v_opt[i]) or v_raw[j] > v_opt[i]:
        return X_raw[j]
    return X_opt[i]


# ---------------------------------------------------------------------------
# expected improvement


def _posterior_terms(model, X_unit, k: int = 0):
    feats, tape = forward(model.backbone, X_unit)
    head = model.head
    mean = feats @ head.mean[k]
    U = tri_solve(head.chol[k], feats.T)
    var = np.einsum("ij,ij->j", U, U) + head.sigma2[k]
    Sphi = tri_solve(head.chol[k], U, transpose=True).T
    return mean, var, tape, Sphi


def _ei_value_and_grad(model, best):
    w = model.head.mean[0]

    def f(X):
        mean, var, tape, Sphi = _posterior_terms(model, X)
        var = np.maximum(var, 2.0 * VARIANCE_FLOOR)
        val, dm, dv = log_ei_with_grad(mean, var, best)
        g_feat = dm[:, None] * w[None, :] + (2.0 * dv)[:, None] * Sphi
        return val, input_gradient(model.backbone, tape, g_feat)

    return f


def optimize_acqf_ei(model, best: float, bounds=None, restarts: int = 10, raw_samples: int = 512,
                     rng: np.random.Generator | None = None, maxiter: int = 200) -> NDArray:
    """Maximize logEI of output 0 over the box.

    Args:
        model: Trained single-output surrogate.
        best: Standardized incumbent.
        bounds: ``(2, D)`` raw bounds; defaults to the model's.
        restarts: Number of ascents, started at the best raw samples.
        raw_samples: Size of the scrambled Sobol screening set.
        rng: Generator for the Sobol scramble.
        maxiter: L-BFGS-B iteration cap.

    Returns:
        The chosen point in raw units.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    lower, upper = _unit_bounds(model, bounds)
    f = _ei_value_and_grad(model, best)
    X_raw = _raw_candidates(model.input_dim, raw_samples, rng)
    v_raw, _ = f(X_raw)
    order = np.argsort(-v_raw, kind="stable")[: min(restarts, raw_samples)]
    X_opt, v_opt = _multistart_ascent(f, X_raw[order], maxiter)
    x = np.clip(_best_of(X_opt, v_opt, X_raw, v_raw), 0.0, 1.0)
    return lower + x * (upper - lower)


# ---------------------------------------------------------------------------
# Thompson sampling


@dataclass
class GlmSample:
    """A posterior draw ``f(x) = W phi(x)`` on the unit cube.

    Attributes:
        weights: ``(K, m)`` sampled last-layer weights.
        backbone: Feature network the weights were drawn against.
        lower, upper: Raw bounds of the problem.
    """

    weights: NDArray
    backbone: BackboneNet
    lower: NDArray
    upper: NDArray

    @property
    def num_outputs(self) -> int:
        return self.weights.shape[0]

    @property
    def input_dim(self) -> int:
        return self.backbone.input_dim

    def __call__(self, X_unit) -> NDArray:
        """Values ``(N, K)`` (or ``(K,)`` for a single point)."""
        return forward(self.backbone, X_unit)[0] @ self.weights.T

    def value_and_grad(self, X_unit, k: int = 0):
        """Output ``k`` and its input gradient for a batch ``(N, D)``."""
        feats, tape = forward(self.backbone, np.atleast_2d(X_unit))
        w = self.weights[k]
        g = input_gradient(self.backbone, tape, np.broadcast_to(w, feats.shape))
        return feats @ w, g


def thompson_sample(model, rng: np.random.Generator | None = None, z=None) -> GlmSample:
    """Draw last-layer weights for every output; ``z`` fixes the normal noise."""
    W = sample_head_weights(model.head, rng, z)
    return GlmSample(W, model.backbone, np.asarray(model.lower), np.asarray(model.upper))


def optimize_ts_single(sample: GlmSample, bounds=None, restarts: int = 10,
                       rng: np.random.Generator | None = None, raw_samples: int = 512,
                       maxiter: int = 200) -> NDArray:
    """Multistart bounded ascent of a single-output draw; returns raw ``x``."""
    if sample.num_outputs != 1:
        raise ValueError("optimize_ts_single needs a single-output sample")
    rng = np.random.default_rng(0) if rng is None else rng
    lower, upper = _unit_bounds(sample, bounds)
    f = sample.value_and_grad
    X_raw = _raw_candidates(sample.input_dim, raw_samples, rng)
    v_raw = sample(X_raw)[:, 0]
    order = np.argsort(-v_raw, kind="stable")[: min(restarts, raw_samples)]
    X_opt, v_opt = _multistart_ascent(f, X_raw[order], maxiter)
    x = np.clip(_best_of(X_opt, v_opt, X_raw, v_raw), 0.0, 1.0)
    return lower + x * (upper - lower)


# ---------------------------------------------------------------------------
# NSGA-II


@dataclass(frozen=True)
class NsgaConfig:
    """NSGA-II settings. ``mutation_prob=None`` means ``1 / D``."""

    pop_size: int = 100
    generations: int = 200
    crossover_eta: float = 15.0
    crossover_prob: float = 0.9
    mutation_eta: float = 20.0
    mutation_prob: float | None = None

    def __post_init__(self):
        if self.pop_size < 4 or self.pop_size % 2:
            raise ValueError("pop_size must be even and >= 4")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")


def _dominance(F: NDArray) -> NDArray:
    """``dom[i, j]`` is True when row i dominates row j (maximization)."""
    ge = np.all(F[:, None, :] >= F[None, :, :], axis=2)
    gt = np.any(F[:, None, :] > F[None, :, :], axis=2)
    return ge & gt


def non_dominated_sort(F: ArrayLike) -> list[NDArray]:
    """Fronts of index arrays, best first, under maximization."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    dom = _dominance(F)
    count = dom.sum(axis=0)
    fronts = []
    current = np.flatnonzero(count == 0)
    while current.size:
        fronts.append(current)
        count = count - dom[current].sum(axis=0)
        count[current] = -1
        current = np.flatnonzero(count == 0)
    return fronts


def crowding_distance(F: ArrayLike) -> NDArray:
    """Crowding distance within one front; extremes of each objective get +inf."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    n, K = F.shape
    d = np.zeros(n)
    if n <= 2:
        d[:] = np.inf
        return d
    for k in range(K):
        order = np.argsort(F[:, k], kind="stable")
        f = F[order, k]
        d[order[0]] = d[order[-1]] = np.inf
        span = f[-1] - f[0]
        if span > 0:
            d[order[1:-1]] += (f[2:] - f[:-2]) / span
    return d


def _rank_and_crowding(F):
    rank = np.empty(F.shape[0], dtype=int)
    crowd = np.empty(F.shape[0])
    fronts = non_dominated_sort(F)
    for r, idx in enumerate(fronts):
        rank[idx] = r
        crowd[idx] = crowding_distance(F[idx])
    return rank, crowd, fronts


def _tournament(rank, crowd, n, rng):
    a, b = rng.integers(rank.shape[0], size=(2, n))
    coin = rng.random(n) < 0.5
    a_wins = (rank[a] < rank[b]) | ((rank[a] == rank[b]) & (crowd[a] > crowd[b]))
    tie = (rank[a] == rank[b]) & (crowd[a] == crowd[b])
    a_wins = np.where(tie, coin, a_wins)
    return np.where(a_wins, a, b)


def _sbx(P1, P2, eta, prob, rng):
    """Bounded simulated binary crossover on [0, 1]."""
    C1, C2 = P1.copy(), P2.copy()
    n, D = P1.shape
    do_pair = rng.random(n) < prob
    do_var = (rng.random((n, D)) < 0.5) & do_pair[:, None] & (np.abs(P1 - P2) > 1e-14)
    u = rng.random((n, D))
    swap = rng.random((n, D)) < 0.5
    y1 = np.minimum(P1, P2)
    y2 = np.maximum(P1, P2)
    diff = np.where(do_var, y2 - y1, 1.0)

    def betaq(beta):
        alpha = 2.0 - beta ** (-(eta + 1.0))
        return np.where(
            u <= 1.0 / alpha,
            (u * alpha) ** (1.0 / (eta + 1.0)),
            (1.0 / (2.0 - u * alpha)) ** (1.0 / (eta + 1.0)),
        )

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        b1 = betaq(1.0 + 2.0 * y1 / diff)
        b2 = betaq(1.0 + 2.0 * (1.0 - y2) / diff)
        c1 = np.clip(0.5 * (y1 + y2 - b1 * diff), 0.0, 1.0)
        c2 = np.clip(0.5 * (y1 + y2 + b2 * diff), 0.0, 1.0)
    first = np.where(swap, c2, c1)
    second = np.where(swap, c1, c2)
    C1 = np.where(do_var, first, C1)
    C2 = np.where(do_var, second, C2)
    return C1, C2


def _polynomial_mutation(X, eta, prob, rng):
    """Bounded polynomial mutation on [0, 1]."""
    mutate = rng.random(X.shape) < prob
    u = rng.random(X.shape)
    power = 1.0 / (eta + 1.0)
    lo_branch = u < 0.5
    xy = np.where(lo_branch, 1.0 - X, X)  # 1 - delta1 or 1 - delta2
    val = np.where(
        lo_branch,
        2.0 * u + (1.0 - 2.0 * u) * xy ** (eta + 1.0),
        2.0 * (1.0 - u) + 2.0 * (u - 0.5) * xy ** (eta + 1.0),
    )
    deltaq = np.where(lo_branch, val**power - 1.0, 1.0 - val**power)
    return np.where(mutate, np.clip(X + deltaq, 0.0, 1.0), X)


def nsga2(objective, dim: int, cfg: NsgaConfig | None = None, rng: np.random.Generator | None = None):
    """Maximize a batched vector objective on ``[0, 1]^dim``.

    Args:
        objective: Map ``(N, dim) -> (N, K)``.
        dim: Input dimension.
        cfg: Algorithm settings.
        rng: Generator for initialization and variation.

    Returns:
        ``(X, F)`` for the first non-dominated front of the final population,
        duplicates removed.
    """
    cfg = NsgaConfig() if cfg is None else cfg
    rng = np.random.default_rng(0) if rng is None else rng
    P = cfg.pop_size
    p_mut = 1.0 / dim if cfg.mutation_prob is None else cfg.mutation_prob
    X = rng.random((P, dim))
    F = np.asarray(objective(X), dtype=float)
    rank, crowd, _ = _rank_and_crowding(F)
    for _ in range(cfg.generations):
        parents = _tournament(rank, crowd, P, rng)
        A, B = X[parents[0::2]], X[parents[1::2]]
        C1, C2 = _sbx(A, B, cfg.crossover_eta, cfg.crossover_prob, rng)
        children = _polynomial_mutation(np.vstack([C1, C2]), cfg.mutation_eta, p_mut, rng)
        F_children = np.asarray(objective(children), dtype=float)
        X_all = np.vstack([X, children])
        F_all = np.vstack([F, F_children])
        rank_all, crowd_all, fronts = _rank_and_crowding(F_all)
        keep = []
        for idx in fronts:
            if len(keep) + idx.size <= P:
                keep.extend(idx.tolist())
            else:
                order = np.argsort(-crowd_all[idx], kind="stable")
                keep.extend(idx[order[: P - len(keep)]].tolist())
            if len(keep) == P:
                break
        keep = np.asarray(keep)
        X, F = X_all[keep], F_all[keep]
        rank, crowd = rank_all[keep], crowd_all[keep]
    first = non_dominated_sort(F)[0]
    _, uniq = np.unique(X[first], axis=0, return_index=True)
    first = first[np.sort(uniq)]
    return X[first], F[first]


def nsga2_optimize(sample: GlmSample, bounds=None, cfg: NsgaConfig | None = None,
                   rng: np.random.Generator | None = None):
    """Predicted Pareto set of a multi-output draw.

    Returns:
        ``(X_raw, Y_hat)`` with ``Y_hat`` in the sample's (standardized) space.
    """
    if sample.num_outputs < 2:
        raise ValueError("nsga2_optimize needs K >= 2")
    lower, upper = _unit_bounds(sample, bounds)
    X, F = nsga2(sample, sample.input_dim, cfg, rng)
    return lower + X * (upper - lower), F


# ---------------------------------------------------------------------------
# hypervolume


def _hv2(P: NDArray) -> float:
    # P shifted so the reference is the origin; all entries positive
    order = np.argsort(-P[:, 0], kind="stable")
    x = P[order, 0]
    y = np.maximum.accumulate(P[order, 1])
    steps = np.diff(y, prepend=0.0)
    return float(np.sum(x * steps))


def _hv3(P: NDArray) -> float:
    order = np.argsort(-P[:, 2], kind="stable")
    P = P[order]
    z = np.append(P[:, 2], 0.0)
    total = 0.0
    for i in range(P.shape[0]):
        depth = z[i] - z[i + 1]
        if depth > 0:
            total += _hv2(P[: i + 1, :2]) * depth
    return total


def hypervolume(points: ArrayLike, ref: ArrayLike) -> float:
    """Volume dominated by ``points`` and bounded below by ``ref`` (maximization).

    Points that do not strictly exceed ``ref`` in every coordinate add nothing
    and are dropped. Sweep for K=2, slicing into 2-D sweeps for K=3.

    Raises:
        UnsupportedDimension: for K >= 4.
    """
    ref = np.asarray(ref, dtype=float).reshape(-1)
    K = ref.shape[0]
    if K >= 4:
        raise UnsupportedDimension(f"hypervolume supports K <= 3, got {K}")
    P = np.asarray(points, dtype=float).reshape(-1, K)
    P = P[np.all(P > ref, axis=1)] - ref
    if P.shape[0] == 0:
        return 0.0
    if K == 1:
        return float(P.max())
    if K == 2:
        return _hv2(P)
    return _hv3(P)


class ParetoArchive:
    """Non-dominated set of observed objective vectors with a fixed reference."""

    def __init__(self, ref_point: ArrayLike, points: ArrayLike | None = None):
        self.ref_point = np.asarray(ref_point, dtype=float).reshape(-1)
        self.points = np.empty((0, self.ref_point.shape[0]))
        if points is not None:
            for p in np.asarray(points, dtype=float).reshape(-1, self.ref_point.shape[0]):
                self.add(p)

    def __len__(self) -> int:
        return self.points.shape[0]

    def add(self, y: ArrayLike) -> bool:
        """Insert ``y`` unless weakly dominated; returns whether it was kept."""
        y = np.asarray(y, dtype=float).reshape(-1)
        if self.points.size and np.any(np.all(self.points >= y, axis=1)):
            return False
        dominated = np.all(y >= self.points, axis=1) & np.any(y > self.points, axis=1)
        self.points = np.vstack([self.points[~dominated], y])
        return True

    def hypervolume(self) -> float:
        return hypervolume(self.points, self.ref_point)

    def hypervolume_with(self, y: ArrayLike) -> float:
        return hypervolume(np.vstack([self.points, np.reshape(y, (1, -1))]), self.ref_point)


def hvi_gains(archive: ParetoArchive, candidates: ArrayLike) -> NDArray:
    """Hypervolume improvement of adding each candidate on its own."""
    base = archive.hypervolume()
    Y = np.atleast_2d(np.asarray(candidates, dtype=float))
    return np.array([archive.hypervolume_with(y) - base for y in Y])


def select_hvi_candidate(archive: ParetoArchive, front_X: ArrayLike, front_Y: ArrayLike,
                         rng: np.random.Generator, rtol: float = 1e-10):
    """Pick the candidate with the largest hypervolume improvement.

    Ties (within ``rtol`` of the hypervolume scale), including the all-zero
    case, are broken uniformly at random.

    Returns:
        ``(x, index)`` of the chosen candidate.
    """
    X = np.atleast_2d(np.asarray(front_X, dtype=float))
    gains = hvi_gains(archive, front_Y)
    if gains.size == 0:
        raise ValueError("front must be non-empty")
    top = gains.max()
    tol = rtol * max(1.0, archive.hypervolume() + abs(top))
    winners = np.flatnonzero(gains >= top - tol)
    idx = int(winners[0]) if winners.size == 1 else int(rng.choice(winners))
    return X[idx], idx
