"""Surrogate training: full ELBO fits, recursive conditioning, and the
continual-learning step that chooses between them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .backbone import AdamW, BackboneNet, backward, forward, init_backbone
from .head import (
    NonFiniteLoss,
    VbllHead,
    elbo_loss,
    log_predictive_density,
    predictive,
    recursive_update,
)

__all__ = [
    "Dataset",
    "Standardizer",
    "TrainConfig",
    "SurrogateModel",
    "EarlyStopping",
    "ReinitPolicy",
    "train_full",
    "warm_start_train",
    "full_loss",
    "condition_on",
    "decide_reinit",
    "bo_step",
    "save_model",
    "load_model",
]

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-8


@dataclass
class Dataset:
    """Observations in raw units plus the box used to normalize inputs."""

    X: NDArray
    Y: NDArray
    lower: NDArray
    upper: NDArray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float).reshape(-1)
        self.upper = np.asarray(self.upper, dtype=float).reshape(-1)
        D = self.lower.shape[0]
        self.X = np.asarray(self.X, dtype=float).reshape(-1, D)
        self.Y = np.asarray(self.Y, dtype=float)
        if self.Y.ndim == 1:
            self.Y = self.Y[:, None]
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValueError("X and Y have different numbers of rows")
        if np.any(self.upper <= self.lower):
            raise ValueError("bounds must satisfy lower < upper")
        if np.any(self.X < self.lower - 1e-12) or np.any(self.X > self.upper + 1e-12):
            raise ValueError("observation outside the bounds")

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def num_outputs(self) -> int:
        return self.Y.shape[1]

    def append(self, x, y) -> None:
        x = np.asarray(x, dtype=float).reshape(1, self.dim)
        y = np.asarray(y, dtype=float).reshape(1, self.num_outputs)
        if np.any(x < self.lower - 1e-12) or np.any(x > self.upper + 1e-12):
            raise ValueError("observation outside the bounds")
        self.X = np.vstack([self.X, x])
        self.Y = np.vstack([self.Y, y])

    def normalize(self, x) -> NDArray:
        return (np.asarray(x, dtype=float) - self.lower) / (self.upper - self.lower)

    def unnormalize(self, u) -> NDArray:
        return self.lower + np.asarray(u, dtype=float) * (self.upper - self.lower)


@dataclass
class Standardizer:
    """Per-output affine map to zero mean, unit variance."""

    mean: NDArray
    std: NDArray

    @classmethod
    def fit(cls, Y) -> "Standardizer":
        Y = np.asarray(Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        return cls(Y.mean(axis=0), np.maximum(Y.std(axis=0), STD_FLOOR))

    def transform(self, Y) -> NDArray:
        return (np.asarray(Y, dtype=float) - self.mean) / self.std

    def untransform(self, Ys) -> NDArray:
        return np.asarray(Ys, dtype=float) * self.std + self.mean

    def untransform_var(self, var) -> NDArray:
        return np.asarray(var, dtype=float) * self.std**2


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and prior settings for full model training."""

    widths: tuple[int, ...] = (128, 128, 128)
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    batch_size: int = 32
    max_epochs: int = 10_000
    patience: int = 100
    prior_scale: float = 1.0
    wishart_scale: float = 0.01
    dof: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1 or not self.widths or min(self.widths) < 1:
            raise ValueError("batch_size and widths must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class SurrogateModel:
    """Backbone plus VBLL head, with the transforms that tie it to raw data."""

    backbone: BackboneNet
    head: VbllHead
    standardizer: Standardizer
    lower: NDArray
    upper: NDArray
    fit_seconds: float = 0.0
    epochs: int = 0
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def input_dim(self) -> int:
        return self.backbone.input_dim

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    @property
    def num_outputs(self) -> int:
        return self.head.num_outputs

    def normalize(self, x) -> NDArray:
        return (np.asarray(x, dtype=float) - self.lower) / (self.upper - self.lower)

    def features(self, x_unit) -> NDArray:
        return forward(self.backbone, x_unit)[0]

    def predict_standardized(self, x_unit):
        """Predictive mean/variance in standardized output space."""
        return predictive(self.head, self.features(x_unit))

    def predict(self, x_raw):
        """Predictive mean/variance in raw output units."""
        mean, var = self.predict_standardized(self.normalize(x_raw))
        return self.standardizer.untransform(mean), self.standardizer.untransform_var(var)

    def log_density(self, x_raw, y_raw) -> float:
        """Log predictive density of a raw observation, in standardized space."""
        phi = self.features(self.normalize(x_raw))
        return log_predictive_density(self.head, phi, self.standardizer.transform(y_raw))


class EarlyStopping:
    """Tracks the best epoch average loss; signals a stop after ``patience``
    consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = -1
        self.best_state = None
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float, snapshot) -> bool:
        """Record ``loss`` for ``epoch``; ``snapshot()`` is called on improvement.

        Returns True when training should stop.
        """
        if loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.best_state = snapshot()
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _init_head(K: int, m: int, cfg: TrainConfig, rng: np.random.Generator) -> VbllHead:
    head = VbllHead.from_prior(K, m, cfg.prior_scale, cfg.wishart_scale, cfg.dof)
    head.mean = rng.normal(0.0, 1.0 / math.sqrt(m), size=(K, m))
    return head.sync_natural()


class _FlatState:
    """Backbone and head parameters packed into one contiguous buffer.

    The head's Cholesky factors are stored as log-diagonals plus the packed
    strictly-lower entries, so the optimizer works on unconstrained values.
    """

    def __init__(self, backbone: BackboneNet, head: VbllHead):
        K, m = head.mean.shape
        self.K, self.m = K, m
        self.rows, self.cols = np.tril_indices(m, k=-1)
        self.diag = np.arange(m)
        bb = backbone.params()
        shapes = [p.shape for p in bb] + [(K, m), (K, m), (K, len(self.rows)), (K,)]
        sizes = [int(np.prod(s)) for s in shapes]
        self.theta = np.empty(sum(sizes))
        self.grad = np.zeros_like(self.theta)
        self.views, self.grad_views = [], []
        offset = 0
        for shape, n in zip(shapes, sizes):
            self.views.append(self.theta[offset : offset + n].reshape(shape))
            self.grad_views.append(self.grad[offset : offset + n].reshape(shape))
            offset += n
        n_bb = len(bb)
        for view, p in zip(self.views[:n_bb], bb):
            view[...] = p
        self.backbone = BackboneNet(backbone.layer_dims, self.views[0:n_bb:2], self.views[1:n_bb:2])
        self.mean, self.logdiag, self.offdiag, self.log_sigma2 = self.views[n_bb:]
        self.mean[...] = head.mean
        self.logdiag[...] = np.log(np.diagonal(head.chol, axis1=-2, axis2=-1))
        self.offdiag[...] = head.chol[:, self.rows, self.cols]
        self.log_sigma2[...] = head.log_sigma2
        self.bb_grads = self.grad_views[:n_bb]
        self.g_mean, self.g_logdiag, self.g_offdiag, self.g_log_sigma2 = self.grad_views[n_bb:]
        self.n_backbone = n_bb
        self.work = head.copy()
        self.work.mean = self.mean
        self.work.log_sigma2 = self.log_sigma2
        self.work.chol = np.zeros_like(head.chol)

    def refresh_chol(self) -> NDArray:
        chol = self.work.chol
        chol[:, self.rows, self.cols] = self.offdiag
        chol[:, self.diag, self.diag] = np.exp(self.logdiag)
        return chol

    def set_head_grads(self, g: dict) -> None:
        g_chol = g["chol"]
        chol = self.work.chol
        self.g_mean[...] = g["mean"]
        self.g_logdiag[...] = g_chol[:, self.diag, self.diag] * chol[:, self.diag, self.diag]
        self.g_offdiag[...] = g_chol[:, self.rows, self.cols]
        self.g_log_sigma2[...] = g["log_sigma2"]

    def export(self, backbone: BackboneNet, head: VbllHead) -> VbllHead:
        """Copy the buffer back into ``backbone`` (in place) and a new head."""
        for p, view in zip(backbone.params(), self.views[: self.n_backbone]):
            p[...] = view
        out = head.copy()
        out.mean = self.mean.copy()
        out.chol = self.refresh_chol().copy()
        out.log_sigma2 = self.log_sigma2.copy()
        return out.sync_natural()


def _fused_stepper(state: _FlatState, opt: AdamW, head: VbllHead, n: int, cfg: TrainConfig):
    from ._fused import fused_step

    dims = np.asarray(state.backbone.layer_dims, dtype=np.int64)
    rows = state.rows.astype(np.int64)
    cols = state.cols.astype(np.int64)
    prior_shape = head.dof / 2.0 + 1.0

    def step(xb, yb):
        step_size, denom_corr = opt._coefficients()
        loss = fused_step(
            state.theta, state.grad, opt._m, opt._v, opt._decay, dims, rows, cols,
            np.ascontiguousarray(xb), np.ascontiguousarray(yb), float(n),
            head.prior_scale, head.wishart_scale, prior_shape, step_size, denom_corr,
            opt.beta1, opt.beta2, opt.eps, float(cfg.clip_norm),
        )
        if not math.isfinite(loss):
            raise NonFiniteLoss(f"ELBO loss is {loss}")
        return loss

    return step


def _fit(
    backbone: BackboneNet,
    head: VbllHead,
    X: NDArray,
    Y: NDArray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    max_epochs: int,
    engine: str = "fused",
):
    """Minibatch AdamW on the negative ELBO with training-loss early stopping.

    Mutates ``backbone`` in place and returns ``(head, epochs_run, history)``
    with parameters restored to the best epoch. ``engine="fused"`` runs each
    step as one compiled kernel; ``"numpy"`` composes the reference
    :func:`elbo_loss` and :func:`backward`. Both perform the same arithmetic.
    """
    if engine not in ("fused", "numpy"):
        raise ValueError(f"unknown engine {engine!r}")
    n = X.shape[0]
    batch = min(n, cfg.batch_size)
    state = _FlatState(backbone, head)
    opt = AdamW(
        state.views,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        decay_mask=[True] * state.n_backbone + [False] * 4,
    )
    stopper = EarlyStopping(cfg.patience)
    snapshot = state.theta.copy
    initial = snapshot()
    history: list[float] = []
    epoch = 0
    diverged = False
    full_batch = batch >= n
    step = _fused_stepper(state, opt, head, n, cfg) if engine == "fused" else None
    for epoch in range(1, max_epochs + 1):
        order = None if full_batch else rng.permutation(n)
        total = 0.0
        n_batches = 0
        try:
            for start in range(0, n, batch):
                if full_batch:
                    xb, yb = X, Y
                else:
                    idx = order[start : start + batch]
                    xb, yb = X[idx], Y[idx]
                if step is not None:
                    total += step(xb, yb)
                    n_batches += 1
                    continue
                state.refresh_chol()
                feats, tape = forward(state.backbone, xb)
                loss, g = elbo_loss(state.work, feats, yb, n)
                backward(state.backbone, tape, g["features"], out=state.bb_grads)
                state.set_head_grads(g)
                opt.step_flat(state.theta, state.grad, cfg.clip_norm)
                total += loss
                n_batches += 1
        except NonFiniteLoss:
            logger.warning("non-finite loss at epoch %d; keeping best parameters so far", epoch)
            diverged = True
            break
        avg = total / n_batches
        history.append(avg)
        if stopper.update(epoch, avg, snapshot):
            break
    if diverged and stopper.best_state is None:
        logger.warning("training diverged in the first epoch; returning initial parameters")
    state.theta[...] = stopper.best_state if stopper.best_state is not None else initial
    return state.export(backbone, head), epoch, history


def train_full(model_seed: int, data: Dataset, cfg: TrainConfig) -> SurrogateModel:
    """Fresh initialization from ``model_seed`` and full training on ``data``."""
    if len(data) < 1:
        raise ValueError("need at least one observation")
    t0 = time.perf_counter()
    rng = np.random.default_rng(model_seed)
    dims = (data.dim, *cfg.widths)
    backbone = init_backbone(dims, int(rng.integers(2**63)))
    head = _init_head(data.num_outputs, dims[-1], cfg, rng)
    standardizer = Standardizer.fit(data.Y)
    X = data.normalize(data.X)
    Y = standardizer.transform(data.Y)
    head, epochs, history = _fit(backbone, head, X, Y, cfg, rng, cfg.max_epochs)
    return SurrogateModel(
        backbone,
        head,
        standardizer,
        data.lower.copy(),
        data.upper.copy(),
        fit_seconds=time.perf_counter() - t0,
        epochs=epochs,
        history=history,
    )


def full_loss(model: SurrogateModel, data: Dataset) -> float:
    """Full-batch negative ELBO of ``model`` on ``data`` (model's standardizer)."""
    X = model.normalize(data.X)
    Y = model.standardizer.transform(data.Y)
    return elbo_loss(model.head, model.features(X), Y, len(data))[0]


def warm_start_train(
    model: SurrogateModel,
    data: Dataset,
    cfg: TrainConfig,
    max_epochs: int | None = None,
    seed: int | None = None,
) -> SurrogateModel:
    """Continue training from ``model``'s parameters with a fresh optimizer.

    The standardizer is refit on ``data``. The result never has a higher
    full-batch loss than the starting parameters under that standardizer.
    """
    max_epochs = cfg.max_epochs if max_epochs is None else int(max_epochs)
    if max_epochs <= 0:
        return model
    t0 = time.perf_counter()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    start = replace(model, backbone=model.backbone.copy(), head=model.head.copy(),
                    standardizer=Standardizer.fit(data.Y), history=[])
    X = data.normalize(data.X)
    Y = start.standardizer.transform(data.Y)
    backbone = start.backbone.copy()
    head, epochs, history = _fit(backbone, start.head, X, Y, cfg, rng, max_epochs)
    trained = replace(start, backbone=backbone, head=head, epochs=epochs, history=history)
    if full_loss(trained, data) > full_loss(start, data):
        trained = replace(start, epochs=epochs, history=history)
    trained.fit_seconds = model.fit_seconds + time.perf_counter() - t0
    return trained


def condition_on(model: SurrogateModel, x_raw, y_raw) -> SurrogateModel:
    """Recursive last-layer update on one raw observation.

    The standardizer and backbone are frozen; only the head changes. The
    returned model shares its backbone with ``model``.
    """
    t0 = time.perf_counter()
    phi = model.features(model.normalize(np.asarray(x_raw, dtype=float).reshape(-1)))
    y = model.standardizer.transform(np.asarray(y_raw, dtype=float).reshape(-1))
    head = recursive_update(model.head, phi, y)
    return replace(model, head=head, fit_seconds=model.fit_seconds + time.perf_counter() - t0)


@dataclass(frozen=True)
class ReinitPolicy:
    """When to retrain from scratch instead of conditioning recursively.

    ``kind`` is one of ``always``, ``periodic`` (every ``period`` steps),
    ``sigmoid`` (Bernoulli with a sigmoid-decaying probability centred at
    ``center``, default ``T/2``, with transition window ``window * T``), or
    ``event`` (retrain when the newest point's log predictive density falls
    below ``threshold``).
    """

    kind: str = "always"
    period: int = 1
    center: float | None = None
    window: float = 0.5
    threshold: float = 0.0

    KINDS = ("always", "periodic", "sigmoid", "event")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown reinit policy {self.kind!r}")
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if not 0.0 < self.window <= 1.0:
            raise ValueError("window must be in (0, 1]")

    @classmethod
    def always(cls):
        return cls("always")

    @classmethod
    def periodic(cls, period: int):
        return cls("periodic", period=int(period))

    @classmethod
    def sigmoid(cls, center: float | None = None, window: float = 0.5):
        return cls("sigmoid", center=center, window=window)

    @classmethod
    def event(cls, threshold: float = 0.0):
        return cls("event", threshold=float(threshold))

    def stretch(self, horizon: int) -> float:
        return 2.0 * math.log(9.0) / (horizon * self.window)

    def probability(self, t: float, horizon: int) -> float:
        """Retraining probability of the sigmoid schedule at step ``t``."""
        c = horizon / 2.0 if self.center is None else self.center
        z = self.stretch(horizon) * (c - t)
        # numerically stable logistic
        if z >= 0:
            return 1.0 / (1.0 + math.exp(-z))
        e = math.exp(z)
        return e / (1.0 + e)


def decide_reinit(
    policy: ReinitPolicy,
    model: SurrogateModel | None,
    t: int,
    horizon: int,
    last_obs=None,
    rng: np.random.Generator | None = None,
) -> bool:
    if t < 0:
        raise ValueError("t must be >= 0")
    if model is None:
        return True
    if policy.kind == "always":
        return True
    if policy.kind == "periodic":
        return t % policy.period == 0
    if policy.kind == "sigmoid":
        if rng is None:
            raise ValueError("sigmoid policy needs a generator")
        return bool(rng.random() < policy.probability(t, horizon))
    if last_obs is None:
        return True
    x, y = last_obs
    return model.log_density(x, y) < policy.threshold


def bo_step(
    model: SurrogateModel | None,
    policy: ReinitPolicy,
    data: Dataset,
    cfg: TrainConfig,
    t: int,
    horizon: int,
    rng: np.random.Generator,
) -> tuple[SurrogateModel, bool]:
    """One surrogate update of the continual-learning loop.

    Either retrains from a fresh seed drawn from ``rng`` on all of ``data``,
    or conditions the head on the newest observation only.
    """
    if len(data) == 0:
        raise ValueError("data must be non-empty")
    last = (data.X[-1], data.Y[-1])
    reinit = decide_reinit(policy, model, t, horizon, last, rng)
    if reinit:
        seed = int(rng.integers(2**63))
        new = train_full(seed, data, cfg)
        if model is not None:
            new.fit_seconds += model.fit_seconds
        return new, True
    return condition_on(model, *last), False


def save_model(path, model: SurrogateModel, cfg: TrainConfig | None = None) -> None:
    """Write a self-describing ``.npz`` checkpoint."""
    meta = {
        "layer_dims": list(model.backbone.layer_dims),
        "prior_scale": model.head.prior_scale,
        "wishart_scale": model.head.wishart_scale,
        "dof": model.head.dof,
        "fit_seconds": model.fit_seconds,
        "epochs": model.epochs,
        "config": None if cfg is None else cfg.to_dict(),
        "config_hash": None if cfg is None else cfg.config_hash(),
    }
    arrays = {f"W{i}": W for i, W in enumerate(model.backbone.weights)}
    arrays.update({f"b{i}": b for i, b in enumerate(model.backbone.biases)})
    arrays.update(
        head_mean=model.head.mean,
        head_chol=model.head.chol,
        head_q=model.head.q,
        head_log_sigma2=model.head.log_sigma2,
        y_mean=model.standardizer.mean,
        y_std=model.standardizer.std,
        lower=model.lower,
        upper=model.upper,
    )
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_model(path) -> SurrogateModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        n_layers = len(meta["layer_dims"]) - 1
        backbone = BackboneNet(
            tuple(meta["layer_dims"]),
            [z[f"W{i}"].copy() for i in range(n_layers)],
            [z[f"b{i}"].copy() for i in range(n_layers)],
        )
        head = VbllHead(
            mean=z["head_mean"].copy(),
            chol=z["head_chol"].copy(),
            q=z["head_q"].copy(),
            log_sigma2=z["head_log_sigma2"].copy(),
            prior_scale=meta["prior_scale"],
            wishart_scale=meta["wishart_scale"],
            dof=meta["dof"],
        )
        return SurrogateModel(
            backbone,
            head,
            Standardizer(z["y_mean"].copy(), z["y_std"].copy()),
            z["lower"].copy(),
            z["upper"].copy(),
            fit_seconds=meta["fit_seconds"],
            epochs=meta["epochs"],
        )
