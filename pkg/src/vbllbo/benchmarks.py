"""Closed-form test objectives, Sobol initialization and noisy evaluation.

Every problem is exposed in the maximization convention: objectives whose
textbook form is minimized are negated here, so ``problem.optimum`` is the
negated textbook minimum and ``canonical(y) = -y`` maps back.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.stats import qmc

from .trainer import Dataset

__all__ = [
    "UnknownProblem",
    "OutOfBounds",
    "Problem",
    "SobolStream",
    "sobol_points",
    "make_problem",
    "list_problems",
    "evaluate_noisy",
    "initial_design",
    "reference_points",
    "branin",
    "ackley",
    "hartmann6",
    "currin",
    "dtlz1",
    "dtlz2",
]


class UnknownProblem(KeyError):
    """No problem is registered under the requested name."""


class OutOfBounds(ValueError):
    """An input lies outside the problem's box."""


# ---------------------------------------------------------------------------
# textbook objectives (minimization form, batched over the leading axis)


def branin(x: NDArray) -> NDArray:
    x = np.atleast_2d(x)
    x1, x2 = x[:, 0], x[:, 1]
    b = 5.1 / (4.0 * math.pi**2)
    c = 5.0 / math.pi
    t = 1.0 / (8.0 * math.pi)
    return (x2 - b * x1**2 + c * x1 - 6.0) ** 2 + 10.0 * (1.0 - t) * np.cos(x1) + 10.0


def ackley(x: NDArray) -> NDArray:
    x = np.atleast_2d(x)
    d = x.shape[1]
    s1 = np.sum(x**2, axis=1) / d
    s2 = np.sum(np.cos(2.0 * math.pi * x), axis=1) / d
    return -20.0 * np.exp(-0.2 * np.sqrt(s1)) - np.exp(s2) + 20.0 + math.e


_H6_ALPHA = np.array([1.0, 1.2, 3.0, 3.2])
_H6_A = np.array(
    [
        [10, 3, 17, 3.5, 1.7, 8],
        [0.05, 10, 17, 0.1, 8, 14],
        [3, 3.5, 1.7, 10, 17, 8],
        [17, 8, 0.05, 10, 0.1, 14],
    ]
)
_H6_P = 1e-4 * np.array(
    [
        [1312, 1696, 5569, 124, 8283, 5886],
        [2329, 4135, 8307, 3736, 1004, 9991],
        [2348, 1451, 3522, 2883, 3047, 6650],
        [4047, 8828, 8732, 5743, 1091, 381],
    ]
)
HARTMANN6_ARGMIN = np.array([0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573])


def hartmann6(x: NDArray) -> NDArray:
    x = np.atleast_2d(x)
    inner = np.sum(_H6_A[None] * (x[:, None, :] - _H6_P[None]) ** 2, axis=2)
    return -np.sum(_H6_ALPHA * np.exp(-inner), axis=1)


def currin(x: NDArray) -> NDArray:
    """Currin exponential on [0, 1]^2; the first factor is 1 at ``x2 = 0``."""
    x = np.atleast_2d(x)
    x1, x2 = x[:, 0], x[:, 1]
    with np.errstate(divide="ignore"):
        factor = 1.0 - np.exp(-1.0 / (2.0 * x2))
    num = 2300.0 * x1**3 + 1900.0 * x1**2 + 2092.0 * x1 + 60.0
    den = 100.0 * x1**3 + 500.0 * x1**2 + 4.0 * x1 + 20.0
    return factor * num / den


def _branin_currin(x: NDArray) -> NDArray:
    x = np.atleast_2d(x)
    scaled = np.column_stack([15.0 * x[:, 0] - 5.0, 15.0 * x[:, 1]])
    return np.column_stack([branin(scaled), currin(x)])


def dtlz1(x: NDArray, num_objectives: int = 2) -> NDArray:
    x = np.atleast_2d(x)
    M = num_objectives
    xm = x[:, M - 1 :]
    k = xm.shape[1]
    g = 100.0 * (k + np.sum((xm - 0.5) ** 2 - np.cos(20.0 * math.pi * (xm - 0.5)), axis=1))
    out = np.empty((x.shape[0], M))
    for i in range(M):
        f = 0.5 * (1.0 + g)
        f = f * np.prod(x[:, : M - 1 - i], axis=1)
        if i > 0:
            f = f * (1.0 - x[:, M - 1 - i])
        out[:, i] = f
    return out


def dtlz2(x: NDArray, num_objectives: int = 2) -> NDArray:
    x = np.atleast_2d(x)
    M = num_objectives
    g = np.sum((x[:, M - 1 :] - 0.5) ** 2, axis=1)
    angles = 0.5 * math.pi * x[:, : M - 1]
    out = np.empty((x.shape[0], M))
    for i in range(M):
        f = 1.0 + g
        f = f * np.prod(np.cos(angles[:, : M - 1 - i]), axis=1)
        if i > 0:
            f = f * np.sin(angles[:, M - 1 - i])
        out[:, i] = f
    return out


def _nn_draw(dim: int, seed: int, hidden: int = 50) -> Callable[[NDArray], NDArray]:
    rng = np.random.default_rng(seed)
    W1 = rng.standard_normal((dim, hidden))
    b1 = rng.standard_normal(hidden)
    W2 = rng.standard_normal((hidden, hidden))
    b2 = rng.standard_normal(hidden)
    W3 = rng.standard_normal((hidden, 1))
    b3 = rng.standard_normal(1)

    def f(x):
        h = np.maximum(np.atleast_2d(x) @ W1 + b1, 0.0)
        h = np.maximum(h @ W2 + b2, 0.0)
        return (h @ W3 + b3)[:, 0]

    return f


# ---------------------------------------------------------------------------
# problem container


@dataclass(frozen=True)
class Problem:
    """A box-constrained objective in the maximization convention.

    Attributes:
        name: Registry name.
        lower, upper: Raw bounds, shape ``(D,)``.
        num_objectives: K.
        fn: Batched map ``(N, D) -> (N, K)`` already in maximization form.
        optimum: Best achievable value (K=1), if known.
        ref_point: HV reference point in maximization form (K>1).
        noise_std: Observation-noise standard deviation.
    """

    name: str
    lower: NDArray
    upper: NDArray
    num_objectives: int
    fn: Callable[[NDArray], NDArray] = field(repr=False)
    optimum: float | None = None
    ref_point: NDArray | None = None
    noise_std: float = 0.0
    negated: bool = True

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(-1)
        hi = np.asarray(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape or not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise ValueError("bounds must be finite and of equal length")
        if np.any(hi <= lo):
            raise ValueError("bounds must satisfy lower < upper")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if self.ref_point is not None:
            object.__setattr__(self, "ref_point", np.asarray(self.ref_point, dtype=float))

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def bounds(self) -> NDArray:
        return np.vstack([self.lower, self.upper])

    def evaluate(self, x: ArrayLike) -> NDArray:
        """Noise-free objective values, ``(K,)`` for one point or ``(N, K)``."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if X.shape[1] != self.dim:
            raise ValueError(f"{self.name} expects {self.dim}-dimensional inputs")
        Y = np.asarray(self.fn(X), dtype=float).reshape(X.shape[0], self.num_objectives)
        return Y[0] if single else Y

    def canonical(self, y):
        """Map maximized values back to the textbook convention."""
        y = np.asarray(y, dtype=float)
        return -y if self.negated else y

    def in_bounds(self, x, tol: float = 1e-12) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))


# ---------------------------------------------------------------------------
# Sobol


class SobolStream:
    """Stateful Sobol generator on ``[0, 1)^D``.

    Unscrambled streams drop the all-zero first point, so the one-dimensional
    sequence starts 0.5, 0.75, 0.25. Scrambled streams (Owen scrambling,
    seeded) are used as drawn.
    """

    def __init__(self, dim: int, seed=None, scramble: bool = True):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = int(dim)
        self.scramble = bool(scramble)
        self._engine = qmc.Sobol(self.dim, scramble=self.scramble, seed=seed)
        if not self.scramble:
            self._engine.fast_forward(1)
        self.index = 0

    def draw(self, n: int) -> NDArray:
        if n < 1:
            raise ValueError("n must be >= 1")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # non power-of-two draws
            pts = self._engine.random(n)
        self.index += n
        return pts


def sobol_points(stream: SobolStream, n: int) -> NDArray:
    """Next ``n`` points of ``stream``."""
    return stream.draw(n)


# ---------------------------------------------------------------------------
# registry


def reference_points() -> dict:
    """Recorded reference points and maximum hypervolumes for K>1 problems."""
    path = resources.files("vbllbo").joinpath("data/reference_points.json")
    if not path.is_file():
        return {}
    return json.loads(path.read_text())


def _ref(name):
    entry = reference_points().get(name)
    return None if entry is None else np.asarray(entry["ref_point"], dtype=float)


def _neg(f):
    return lambda X: -f(X)


def _make_branin(opts):
    return Problem("branin", [-5.0, 0.0], [10.0, 15.0], 1, _neg(branin), optimum=-0.397887357729738)


def _make_ackley(opts):
    d = int(opts.get("dim", 2))
    return Problem("ackley", [-5.0] * d, [10.0] * d, 1, _neg(ackley), optimum=0.0)


def _make_hartmann6(opts):
    return Problem("hartmann6", [0.0] * 6, [1.0] * 6, 1, _neg(hartmann6), optimum=3.32237)


def _make_nn_draw(opts):
    d = int(opts.get("dim", 200))
    seed = int(opts.get("problem_seed", 0))
    return Problem("nn_draw", [0.0] * d, [1.0] * d, 1, _nn_draw(d, seed), negated=False)


def _make_branin_currin(opts):
    return Problem("branin_currin", [0.0, 0.0], [1.0, 1.0], 2, _neg(_branin_currin),
                   ref_point=_ref("branin_currin"))


def _make_dtlz(which):
    f = dtlz1 if which == 1 else dtlz2

    def make(opts):
        d = int(opts.get("dim", 5))
        k = int(opts.get("num_objectives", 2))
        if d < k:
            raise ValueError("DTLZ needs dim >= num_objectives")
        name = f"dtlz{which}"
        ref = _ref(name) if (d, k) == (5, 2) else None
        return Problem(name, [0.0] * d, [1.0] * d, k, _neg(lambda X: f(X, k)), ref_point=ref)

    return make


_REGISTRY = {
    "branin": _make_branin,
    "ackley": _make_ackley,
    "ackley2d": lambda o: _make_ackley({**o, "dim": 2}),
    "ackley5d": lambda o: _make_ackley({**o, "dim": 5}),
    "hartmann6": _make_hartmann6,
    "nn_draw": _make_nn_draw,
    "branin_currin": _make_branin_currin,
    "dtlz1": _make_dtlz(1),
    "dtlz2": _make_dtlz(2),
}


def list_problems() -> list[str]:
    return sorted(_REGISTRY)


def make_problem(name: str, options: dict | None = None) -> Problem:
    """Build a registered problem.

    Args:
        name: Registry name, see :func:`list_problems`.
        options: Optional settings: ``dim`` (Ackley, NN-draw, DTLZ),
            ``num_objectives`` (DTLZ), ``problem_seed`` (NN-draw),
            ``noise_std`` and ``ref_point`` (overrides the recorded one).
    """
    key = name.lower().replace("-", "_")
    if key not in _REGISTRY:
        raise UnknownProblem(name)
    opts = dict(options or {})
    problem = _REGISTRY[key](opts)
    updates = {}
    if opts.get("noise_std"):
        updates["noise_std"] = float(opts["noise_std"])
    if opts.get("ref_point") is not None:
        updates["ref_point"] = np.asarray(opts["ref_point"], dtype=float)
    if updates:
        from dataclasses import replace

        problem = replace(problem, **updates)
    return problem


def evaluate_noisy(problem: Problem, x_raw, rng: np.random.Generator) -> NDArray:
    """``evaluate(x)`` plus i.i.d. Gaussian noise of std ``problem.noise_std``."""
    x = np.asarray(x_raw, dtype=float)
    if not problem.in_bounds(x):
        raise OutOfBounds(f"{x} outside the bounds of {problem.name}")
    y = problem.evaluate(x)
    if problem.noise_std > 0:
        y = y + problem.noise_std * rng.standard_normal(y.shape)
    return y


def initial_design(problem: Problem, rng: np.random.Generator) -> Dataset:
    """Scrambled-Sobol initial data: D points if K=1, else 2(D+1)."""
    n = problem.dim if problem.num_objectives == 1 else 2 * (problem.dim + 1)
    stream = SobolStream(problem.dim, seed=int(rng.integers(2**63)))
    X = problem.lower + sobol_points(stream, n) * (problem.upper - problem.lower)
    Y = np.vstack([evaluate_noisy(problem, x, rng) for x in X])
    return Dataset(X, Y, problem.lower, problem.upper)
