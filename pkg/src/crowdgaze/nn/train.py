"""SGD update rule with weight / gradient centralization, plus a tiny trainer."""
from __future__ import annotations

import numpy as np

from .layers import NonFiniteError, Sequential

STAT_PARAMS = ("running_mean", "running_var")


def centralize_weights(filters: np.ndarray) -> np.ndarray:
    """Subtract each output filter's own mean (4-D conv banks only)."""
    if filters.ndim < 2:
        return filters
    axes = tuple(range(1, filters.ndim))
    return filters - filters.mean(axis=axes, keepdims=True)


def centralize_gradient(grad: np.ndarray) -> np.ndarray:
    """Per-filter mean removal on conv gradients; other shapes pass through."""
    if grad.ndim != 4:
        return grad
    return grad - grad.mean(axis=(1, 2, 3), keepdims=True)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float, gc_enabled: bool = False) -> dict[str, np.ndarray]:
    """In-place params <- params - lr * g', g' optionally centralized.

    Rejects the whole step (no partial updates) on a non-finite gradient,
    naming the offending entry.
    """
    for name, grad in grads.items():
        if not np.isfinite(grad).all():
            raise NonFiniteError(f"non-finite gradient for {name!r}; step rejected")
    for name, param in params.items():
        if name.endswith(STAT_PARAMS):
            continue
        grad = grads[name]
        if gc_enabled:
            grad = centralize_gradient(grad)
        param -= (lr * grad).astype(param.dtype, copy=False)
    return params


def sgd_step_model(model: Sequential, lr: float, gc_enabled: bool = False) -> None:
    """sgd_step over every layer of a model, reporting the layer index on failure."""
    for i, layer in enumerate(model.layers):
        if not layer.params:
            continue
        try:
            sgd_step(layer.params, layer.grads, lr, gc_enabled)
        except NonFiniteError as e:
            raise NonFiniteError(f"layer {i}: {e}") from None
        if hasattr(layer, "_collect_params"):
            layer._collect_params()


class MomentumTrainer:
    """Classical-momentum SGD driving sgd_step with the velocity as gradient."""

    def __init__(self, model: Sequential, lr: float, momentum: float = 0.9,
                 gc_enabled: bool = True, clip: float | None = 5.0):
        self.model = model
        self.lr = lr
        self.momentum = momentum
        self.gc_enabled = gc_enabled
        self.clip = clip
        self._velocity: dict[tuple[int, str], np.ndarray] = {}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for i, layer in enumerate(self.model.layers):
            if not layer.params:
                continue
            vgrads = {}
            for name in layer.params:
                if name.endswith(STAT_PARAMS):
                    continue
                grad = layer.grads[name]
                if not np.isfinite(grad).all():
                    raise NonFiniteError(f"layer {i}: non-finite gradient for {name!r}")
                if self.gc_enabled:
                    grad = centralize_gradient(grad)
                if self.clip is not None:
                    norm = float(np.linalg.norm(grad))
                    if norm > self.clip:
                        grad = grad * (self.clip / norm)
                key = (i, name)
                vel = self._velocity.get(key)
                if vel is None:
                    vel = np.zeros_like(grad, dtype=np.float32)
                    self._velocity[key] = vel
                vel *= self.momentum
                vel += grad
                vgrads[name] = vel
            sgd_step(layer.params, vgrads, lr, gc_enabled=False)
            if hasattr(layer, "_collect_params"):
                layer._collect_params()
