"""Dense ELU feature network with hand-written backprop and an AdamW optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

__all__ = [
    "BackboneNet",
    "Tape",
    "elu",
    "init_backbone",
    "forward",
    "backward",
    "input_gradient",
    "clip_gradients",
    "global_norm",
    "AdamW",
]


def elu(a: NDArray) -> NDArray:
    """ELU with alpha = 1."""
    return np.where(a > 0, a, np.expm1(np.minimum(a, 0.0)))


def _elu_and_grad(a: NDArray) -> tuple[NDArray, NDArray]:
    # ELU'(a) = exp(min(a, 0)) on both branches
    d = np.exp(np.minimum(a, 0.0))
    return np.where(a > 0, a, d - 1.0), d


@dataclass
class BackboneNet:
    """Feed-forward feature extractor ``phi(x)``.

    ``weights[l]`` has shape ``(layer_dims[l], layer_dims[l + 1])`` and is
    applied as ``h @ W + b``. ELU follows every layer, including the last,
    so the features are the post-activation output of the final layer.
    """

    layer_dims: tuple[int, ...]
    weights: list[NDArray]
    biases: list[NDArray]

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("number of parameter arrays does not match layer_dims")
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (self.layer_dims[l], self.layer_dims[l + 1]) or b.shape != (self.layer_dims[l + 1],):
                raise ValueError(f"layer {l} has shapes {W.shape}, {b.shape}")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def feature_dim(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list[NDArray]:
        """Parameter arrays in the order ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def copy(self) -> "BackboneNet":
        return BackboneNet(
            self.layer_dims, [W.copy() for W in self.weights], [b.copy() for b in self.biases]
        )

    def __call__(self, x: ArrayLike) -> NDArray:
        return forward(self, x)[0]


@dataclass
class Tape:
    """Layer inputs and activation derivatives recorded by :func:`forward`."""

    inputs: list[NDArray] = field(default_factory=list)
    slopes: list[NDArray] = field(default_factory=list)
    squeeze: bool = False


def init_backbone(layer_dims, seed) -> BackboneNet:
    """Fan-in scaled uniform initialization, deterministic in ``seed``.

    Weights and biases of a layer with fan-in ``n`` are drawn from
    ``U(-1/sqrt(n), 1/sqrt(n))``.
    """
    layer_dims = tuple(int(d) for d in layer_dims)
    if len(layer_dims) < 2 or min(layer_dims) < 1:
        raise ValueError(f"need input and at least one layer of positive width, got {layer_dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return BackboneNet(layer_dims, weights, biases)


def forward(net: BackboneNet, x: ArrayLike) -> tuple[NDArray, Tape]:
    """Features for a single input ``(D,)`` or a batch ``(B, D)``."""
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    h = x[None, :] if squeeze else x
    if h.shape[-1] != net.input_dim:
        raise ValueError(f"expected inputs of dimension {net.input_dim}, got {h.shape[-1]}")
    tape = Tape(squeeze=squeeze)
    for W, b in zip(net.weights, net.biases):
        a = h @ W
        a += b
        tape.inputs.append(h)
        h, d = _elu_and_grad(a)
        tape.slopes.append(d)
    return (h[0] if squeeze else h), tape


def backward(
    net: BackboneNet,
    tape: Tape,
    grad_features: ArrayLike,
    input_grad: bool = False,
    out: list[NDArray] | None = None,
):
    """Gradients of ``sum(features * grad_features)`` w.r.t. every parameter.

    Args:
        net: The network used in the matching :func:`forward` call.
        tape: Record returned by that call.
        grad_features: Upstream gradient, same shape as the features.
        input_grad: Also return the gradient w.r.t. the inputs.
        out: Optional preallocated arrays (ordered like the parameters) that
            receive the gradients.

    Returns:
        A list of gradient arrays ordered like :meth:`BackboneNet.params`, and
        additionally the input gradient when ``input_grad`` is set.
    """
    g = np.asarray(grad_features, dtype=float)
    if tape.squeeze:
        g = g[None, :]
    grads: list[NDArray] = [None] * (2 * len(net.weights)) if out is None else out  # type: ignore[list-item]
    for l in range(len(net.weights) - 1, -1, -1):
        ga = g * tape.slopes[l]
        if out is None:
            grads[2 * l] = tape.inputs[l].T @ ga
            grads[2 * l + 1] = ga.sum(axis=0)
        else:
            np.matmul(tape.inputs[l].T, ga, out=out[2 * l])
            np.sum(ga, axis=0, out=out[2 * l + 1])
        if l > 0 or input_grad:
            g = ga @ net.weights[l].T
    if not input_grad:
        return grads
    return grads, (g[0] if tape.squeeze else g)


def input_gradient(net: BackboneNet, tape: Tape, grad_features: ArrayLike) -> NDArray:
    """Gradient w.r.t. the inputs only; skips the parameter gradients."""
    g = np.asarray(grad_features, dtype=float)
    if tape.squeeze:
        g = g[None, :]
    for l in range(len(net.weights) - 1, -1, -1):
        g = (g * tape.slopes[l]) @ net.weights[l].T
    return g[0] if tape.squeeze else g


def global_norm(grads: list[NDArray]) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))


def clip_gradients(grads: list[NDArray], max_norm: float) -> list[NDArray]:
    """Rescale the whole set so its global L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return [g.copy() for g in grads]
    scale = max_norm / norm
    return [g * scale for g in grads]


def _adamw_numpy(p, g, m, v, decay, b1, b2, step_size, denom_corr, eps, clip_scale):
    g = g * clip_scale
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    p *= decay
    p -= step_size * m / (np.sqrt(v) * denom_corr + eps)


def _load_kernel():
    try:
        import numba
    except ImportError:  # pragma: no cover - numba is a declared dependency
        return _adamw_numpy

    @numba.njit(cache=True, fastmath=True)
    def kernel(p, g, m, v, decay, b1, b2, step_size, denom_corr, eps, clip_scale):
        for i in range(p.shape[0]):
            gi = g[i] * clip_scale
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            p[i] = p[i] * decay[i] - step_size * mi / (np.sqrt(vi) * denom_corr + eps)

    return kernel


_KERNEL = None


class AdamW:
    """AdamW with bias correction and decoupled, per-array weight decay.

    ``step`` updates the parameter arrays in place, which keeps views held
    elsewhere (e.g. by a :class:`BackboneNet`) consistent. The moments live in
    one flat buffer, so callers that keep their parameters and gradients in
    flat buffers too can use the fused :meth:`step_flat`.
    """

    def __init__(
        self,
        params: list[NDArray],
        lr: float = 1e-3,
        weight_decay: float = 1e-4,
        decay_mask: list[bool] | None = None,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.decay_mask = [True] * len(params) if decay_mask is None else list(decay_mask)
        if len(self.decay_mask) != len(params):
            raise ValueError("decay_mask must have one flag per parameter array")
        self.step_count = 0
        sizes = [p.size for p in params]
        total = int(sum(sizes))
        self._m = np.zeros(total)
        self._v = np.zeros(total)
        self._decay = np.ones(total)
        self.m, self.v = [], []
        offset = 0
        for p, n, flag in zip(params, sizes, self.decay_mask):
            self.m.append(self._m[offset : offset + n].reshape(p.shape))
            self.v.append(self._v[offset : offset + n].reshape(p.shape))
            if flag:
                self._decay[offset : offset + n] = 1.0 - lr * weight_decay
            offset += n

    def _coefficients(self):
        self.step_count += 1
        t = self.step_count
        step_size = self.lr / (1.0 - self.beta1**t)
        denom_corr = 1.0 / np.sqrt(1.0 - self.beta2**t)
        return step_size, denom_corr

    def step(self, params: list[NDArray], grads: list[NDArray]) -> None:
        step_size, denom_corr = self._coefficients()
        for p, g, m, v, decay in zip(params, grads, self.m, self.v, self.decay_mask):
            factor = 1.0 - self.lr * self.weight_decay if decay else 1.0
            _adamw_numpy(p, g, m, v, factor, self.beta1, self.beta2, step_size, denom_corr, self.eps, 1.0)

    def step_flat(self, theta: NDArray, grad: NDArray, clip_norm: float | None = None) -> float:
        """Fused update of a flat parameter buffer laid out like the constructor's list.

        Args:
            theta: Flat parameters, updated in place.
            grad: Flat gradient, not modified.
            clip_norm: If given, the gradient is rescaled to at most this global norm.

        Returns:
            The global gradient norm before clipping.
        """
        global _KERNEL
        if _KERNEL is None:
            _KERNEL = _load_kernel()
        norm = float(np.sqrt(grad @ grad))
        scale = 1.0
        if clip_norm is not None and norm > clip_norm:
            scale = clip_norm / norm
        step_size, denom_corr = self._coefficients()
        _KERNEL(theta, grad, self._m, self._v, self._decay, self.beta1, self.beta2,
                step_size, denom_corr, self.eps, scale)
        return norm
