"""Central finite-difference gradient probes.

Independent oracle for the analytic backward passes: perturbs single
elements of a layer input or parameter and differences the scalar loss
sum(G * forward(x)) for a fixed random G. Probing runs in float64.

Layers with discrete routing (relu masks, pool argmaxes, max-path winners)
are piecewise; a probe whose +/-h evaluations land on different branches is
not measuring a derivative, so such elements are redrawn.
"""
from __future__ import annotations

import numpy as np

from .layers import Layer


def fd_gradient(eval_scalar, arr: np.ndarray, index, h: float = 1e-3) -> float:
    """Central difference d eval_scalar / d arr[index]."""
    orig = arr[index]
    arr[index] = orig + h
    hi = eval_scalar()
    arr[index] = orig - h
    lo = eval_scalar()
    arr[index] = orig
    return (hi - lo) / (2.0 * h)


def relative_error(analytic: float, numeric: float) -> float:
    """|a - n| over max(|a|, |n|, 1); the 1 floors the scale for tiny grads."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1.0)


def _routing_stable(layer: Layer, x, arr, index, h, training) -> bool:
    """True when x-h and x+h keep the same discrete branch as x itself."""
    layer.forward(x, training=training)
    ref = layer.routing_state()
    if ref is None:
        return True
    ref = np.array(ref, copy=True)
    orig = arr[index]
    ok = True
    for delta in (h, -h):
        arr[index] = orig + delta
        layer.forward(x, training=training)
        if not np.array_equal(layer.routing_state(), ref):
            ok = False
            break
    arr[index] = orig
    return ok


def check_layer(layer: Layer, x: np.ndarray, rng: np.random.Generator,
                n_probes: int = 5, h: float = 1e-3, training: bool = True):
    """Probe input and parameter gradients of one layer.

    Returns the max relative error over all probed elements. The layer must
    be float64 for the stated h to be meaningful.
    """
    x = x.astype(np.float64)
    out = layer.forward(x, training=training)
    g = rng.standard_normal(out.shape)

    def loss() -> float:
        return float(np.sum(g * layer.forward(x, training=training)))

    layer.forward(x, training=training)
    dx = layer.backward(g.copy())
    param_grads = {name: grad.copy() for name, grad in layer.grads.items()}

    worst = 0.0

    def probe(arr: np.ndarray, grad: np.ndarray) -> float:
        local = 0.0
        done = 0
        candidates = list(rng.permutation(arr.size))
        for p in candidates:
            if done >= min(n_probes, arr.size):
                break
            idx = np.unravel_index(p, arr.shape)
            if not _routing_stable(layer, x, arr, idx, h, training):
                continue
            num = fd_gradient(loss, arr, idx, h)
            local = max(local, relative_error(float(grad[idx]), num))
            done += 1
        return local

    worst = max(worst, probe(x, dx))
    for name, arr in layer.params.items():
        if name.endswith(("running_mean", "running_var")):
            continue
        worst = max(worst, probe(arr, param_grads[name]))
    # restore the unperturbed forward cache
    layer.forward(x, training=training)
    return worst
