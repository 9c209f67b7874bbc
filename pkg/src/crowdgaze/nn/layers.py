"""Dense NCHW layer library with exact analytic backward passes.

Layers operate on plain numpy arrays (batch, channels, height, width) and
keep their forward cache on the instance, so usage is always
forward-then-backward on the same input. float32 is the pipeline dtype;
layers also work in float64, which the finite-difference checks rely on.

Batched matmuls go through 3-D ``np.matmul`` so every sample is reduced by
an identically-shaped GEMM: the values produced for one sample do not
depend on how many other samples share the batch. Padded-batch inference
depends on this.
"""
from __future__ import annotations

import numpy as np

LEAKY_MAX_LAMBDA = 0.1
TN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    """Input shape does not match what the layer was built for."""


class NonFiniteError(ValueError):
    """NaN or inf reached a layer input or a gradient."""


def _check_finite(x: np.ndarray, where: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {where}")


def _pair_shape(expected, actual) -> str:
    return f"expected {tuple(expected)}, got {tuple(actual)}"


class Layer:
    """Base class: parameters, gradients and the forward cache."""

    kind = "layer"

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _require_cache(self):
        if self._cache is None:
            raise RuntimeError(
                f"{self.kind}: backward called without a cached forward pass")
        return self._cache

    def routing_state(self) -> np.ndarray | None:
        """Discrete branch choices of the last forward (winner masks, argmaxes).

        Finite-difference probes are only derivative estimates while these
        stay constant; smooth layers return None.
        """
        return None

    def hyper(self) -> dict:
        """Constructor arguments needed to rebuild this layer."""
        return {}

    def __call__(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        return self.forward(x, training=training)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    """(B,C,H,W) -> (B, Ho*Wo, C*k*k) patch matrix plus output size."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(b, c, k, k, ho, wo),
        strides=(s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride),
    )
    cols = np.ascontiguousarray(windows.transpose(0, 4, 5, 1, 2, 3))
    return cols.reshape(b, ho * wo, c * k * k), ho, wo


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int, pad: int) -> np.ndarray:
    """Scatter-add the im2col gradient back onto the padded input."""
    b, c, h, w = x_shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    d6 = dcols.reshape(b, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + ho * stride:stride, kj:kj + wo * stride:stride] += d6[:, :, ki, kj]
    if pad:
        return dxp[:, :, pad:-pad, pad:-pad]
    return dxp


class Conv2d(Layer):
    """Cross-correlation with padding floor(k/2); stride 1 or 2."""

    kind = "conv"

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 dtype=np.float32, rng: np.random.Generator | None = None):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError(f"conv stride must be 1 or 2, got {stride}")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.pad = kernel // 2
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / (in_ch * kernel * kernel))
        self.params = {
            "weight": (rng.standard_normal((out_ch, in_ch, kernel, kernel)) * scale).astype(dtype),
            "bias": np.zeros(out_ch, dtype=dtype),
        }

    def hyper(self) -> dict:
        return {"in_ch": self.in_ch, "out_ch": self.out_ch,
                "kernel": self.kernel, "stride": self.stride}

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(
                f"conv input: {_pair_shape(('B', self.in_ch, 'H', 'W'), x.shape)}")
        _check_finite(x, "conv input")
        cols, ho, wo = _im2col(x, self.kernel, self.stride, self.pad)
        w2d = self.params["weight"].reshape(self.out_ch, -1).T
        out = np.matmul(cols, w2d) + self.params["bias"]
        self._cache = (x.shape, cols)
        return np.ascontiguousarray(
            out.transpose(0, 2, 1).reshape(x.shape[0], self.out_ch, ho, wo))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x_shape, cols = self._require_cache()
        b = dout.shape[0]
        dcols_out = dout.reshape(b, self.out_ch, -1).transpose(0, 2, 1)
        self.grads["bias"] = dcols_out.sum(axis=(0, 1)).astype(dout.dtype)
        dw = np.matmul(cols.transpose(0, 2, 1), dcols_out).sum(axis=0)
        self.grads["weight"] = dw.T.reshape(self.params["weight"].shape)
        w2d = self.params["weight"].reshape(self.out_ch, -1)
        dcols = np.matmul(dcols_out, w2d)
        return _col2im(dcols, x_shape, self.kernel, self.stride, self.pad)


class BatchNorm2d(Layer):
    """Per-channel batchnorm; batch stats in training, running stats at inference."""

    kind = "batchnorm"

    def __init__(self, ch: int, momentum: float = BN_MOMENTUM, eps: float = BN_EPS,
                 dtype=np.float32):
        super().__init__()
        self.ch = ch
        self.momentum = momentum
        self.eps = eps
        self.params = {
            "gamma": np.ones(ch, dtype=dtype),
            "beta": np.zeros(ch, dtype=dtype),
            "running_mean": np.zeros(ch, dtype=dtype),
            "running_var": np.ones(ch, dtype=dtype),
        }

    def hyper(self) -> dict:
        return {"ch": self.ch, "momentum": self.momentum, "eps": self.eps}

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.ch:
            raise ShapeError(
                f"batchnorm input: {_pair_shape(('B', self.ch, 'H', 'W'), x.shape)}")
        _check_finite(x, "batchnorm input")
        gamma = self.params["gamma"].reshape(1, -1, 1, 1)
        beta = self.params["beta"].reshape(1, -1, 1, 1)
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = self.momentum
            self.params["running_mean"] = (
                (1 - m) * self.params["running_mean"] + m * mean).astype(x.dtype)
            self.params["running_var"] = (
                (1 - m) * self.params["running_var"] + m * var).astype(x.dtype)
        else:
            mean = self.params["running_mean"]
            var = self.params["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        self._cache = (xhat, inv_std, training, x.shape)
        return gamma * xhat + beta

    def backward(self, dout: np.ndarray) -> np.ndarray:
        xhat, inv_std, training, x_shape = self._require_cache()
        gamma = self.params["gamma"].reshape(1, -1, 1, 1)
        self.grads["gamma"] = (dout * xhat).sum(axis=(0, 2, 3))
        self.grads["beta"] = dout.sum(axis=(0, 2, 3))
        self.grads["running_mean"] = np.zeros_like(self.params["running_mean"])
        self.grads["running_var"] = np.zeros_like(self.params["running_var"])
        dxhat = dout * gamma
        if not training:
            return dxhat * inv_std.reshape(1, -1, 1, 1)
        n = x_shape[0] * x_shape[2] * x_shape[3]
        dx = (dxhat
              - dxhat.mean(axis=(0, 2, 3), keepdims=True)
              - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True) / n)
        return dx * inv_std.reshape(1, -1, 1, 1)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        _check_finite(x, "relu input")
        self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        mask = self._require_cache()
        return dout * mask

    def routing_state(self):
        return self._cache


class ReLUTensorNorm(Layer):
    """ReLU followed by per-sample standardization over all activations.

    Each sample is shifted and scaled to mean 0 / unit variance across every
    element it owns (all channels and positions); disabled it is a plain ReLU.
    """

    kind = "relu_tn"

    def __init__(self, enabled: bool = True, eps: float = TN_EPS):
        super().__init__()
        self.enabled = enabled
        self.eps = eps

    def hyper(self) -> dict:
        return {"enabled": self.enabled, "eps": self.eps}

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        _check_finite(x, "relu_tn input")
        mask = x > 0
        z = np.maximum(x, 0)
        if not self.enabled:
            self._cache = (mask, None, None, None)
            return z
        axes = tuple(range(1, x.ndim))
        mean = z.mean(axis=axes, keepdims=True)
        var = z.var(axis=axes, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        y = (z - mean) * inv_std
        self._cache = (mask, y, inv_std, axes)
        return y

    def backward(self, dout: np.ndarray) -> np.ndarray:
        mask, y, inv_std, axes = self._require_cache()
        if y is None:
            return dout * mask
        n = int(np.prod([dout.shape[a] for a in axes]))
        dz = inv_std * (dout
                        - dout.mean(axis=axes, keepdims=True)
                        - y * (dout * y).sum(axis=axes, keepdims=True) / n)
        return dz * mask

    def routing_state(self):
        return self._cache[0] if self._cache is not None else None


class MaxPool2x2(Layer):
    """Non-overlapping 2x2 max pooling; odd edges keep a partial cell."""

    kind = "maxpool"

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        if x.ndim != 4:
            raise ShapeError(f"maxpool input: {_pair_shape(('B', 'C', 'H', 'W'), x.shape)}")
        _check_finite(x, "maxpool input")
        b, c, h, w = x.shape
        ph, pw = h % 2, w % 2
        neg = np.finfo(x.dtype).min
        xp = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), constant_values=neg)
        ho, wo = xp.shape[2] // 2, xp.shape[3] // 2
        cells = xp.reshape(b, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, 4)
        arg = cells.argmax(axis=-1)
        out = np.take_along_axis(cells, arg[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, (ph, pw), arg)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x_shape, (ph, pw), arg = self._require_cache()
        b, c, h, w = x_shape
        ho, wo = (h + ph) // 2, (w + pw) // 2
        dcells = np.zeros((b, c, ho, wo, 4), dtype=dout.dtype)
        np.put_along_axis(dcells, arg[..., None], dout[..., None], axis=-1)
        dxp = dcells.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
            b, c, ho * 2, wo * 2)
        return dxp[:, :, :h, :w]

    def routing_state(self):
        return self._cache[2] if self._cache is not None else None


class FullyConnected(Layer):
    """Affine map; flattens trailing dimensions of the input."""

    kind = "fully_connected"

    def __init__(self, in_features: int, out_features: int,
                 dtype=np.float32, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / in_features)
        self.params = {
            "weight": (rng.standard_normal((in_features, out_features)) * scale).astype(dtype),
            "bias": np.zeros(out_features, dtype=dtype),
        }

    def hyper(self) -> dict:
        return {"in_features": self.in_features, "out_features": self.out_features}

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        flat = x.reshape(x.shape[0], -1)
        if flat.shape[1] != self.in_features:
            raise ShapeError(
                f"fully_connected input: {_pair_shape(('B', self.in_features), flat.shape)}")
        _check_finite(flat, "fully_connected input")
        out = np.matmul(flat[:, None, :], self.params["weight"])[:, 0, :] + self.params["bias"]
        self._cache = (x.shape, flat)
        return out

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x_shape, flat = self._require_cache()
        self.grads["weight"] = flat.T @ dout
        self.grads["bias"] = dout.sum(axis=0)
        return (dout @ self.params["weight"].T).reshape(x_shape)


class LeakyMaxBlock(Layer):
    """Two-path block merged as max(F, S) + lambda * min(F, S).

    F is conv3x3 (+ batchnorm); S is the identity, or a 1x1 stride-2 conv
    when the block downscales or changes depth. Gradient goes 1 to the
    winning path and lambda to the loser; ties count as an F win.
    """

    kind = "leaky_max_block"

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1,
                 lam: float = LEAKY_MAX_LAMBDA, dtype=np.float32,
                 rng: np.random.Generator | None = None):
        super().__init__()
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.stride = stride
        self.lam = lam
        self.f_conv = Conv2d(in_ch, out_ch, 3, stride, dtype=dtype, rng=rng)
        self.f_bn = BatchNorm2d(out_ch, dtype=dtype)
        if stride != 1 or in_ch != out_ch:
            self.skip: Conv2d | None = Conv2d(in_ch, out_ch, 1, stride, dtype=dtype, rng=rng)
        else:
            self.skip = None
        self._collect_params()

    def _collect_params(self) -> None:
        self.params = {}
        for prefix, sub in self._subs():
            for name, arr in sub.params.items():
                self.params[f"{prefix}.{name}"] = arr

    def _subs(self):
        subs = [("f_conv", self.f_conv), ("f_bn", self.f_bn)]
        if self.skip is not None:
            subs.append(("skip", self.skip))
        return subs

    def hyper(self) -> dict:
        return {"in_ch": self.in_ch, "out_ch": self.out_ch,
                "stride": self.stride, "lam": self.lam}

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        f = self.f_bn.forward(self.f_conv.forward(x, training), training)
        s = self.skip.forward(x, training) if self.skip is not None else x
        f_wins = f >= s
        self._cache = f_wins
        return np.where(f_wins, f + self.lam * s, s + self.lam * f)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        f_wins = self._require_cache()
        df = np.where(f_wins, dout, self.lam * dout)
        ds = np.where(f_wins, self.lam * dout, dout)
        dx = self.f_conv.backward(self.f_bn.backward(df))
        if self.skip is not None:
            dx = dx + self.skip.backward(ds)
        else:
            dx = dx + ds
        self._sync_grads()
        return dx

    def _sync_grads(self) -> None:
        self.grads = {}
        for prefix, sub in self._subs():
            for name, arr in sub.grads.items():
                self.grads[f"{prefix}.{name}"] = arr

    def routing_state(self):
        return self._cache

    def set_param(self, name: str, value: np.ndarray) -> None:
        prefix, _, leaf = name.partition(".")
        for p, sub in self._subs():
            if p == prefix:
                sub.params[leaf] = value
                self._collect_params()
                return
        raise KeyError(name)


class Sequential:
    """Plain layer chain with whole-model forward/backward and param access."""

    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, training=training)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_params(self):
        """Yields (layer_index, layer, param_name, array)."""
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                yield i, layer, name, arr

    def set_param(self, layer_index: int, name: str, value: np.ndarray) -> None:
        layer = self.layers[layer_index]
        if isinstance(layer, LeakyMaxBlock) and "." in name:
            layer.set_param(name, value)
        else:
            layer.params[name] = value

    def __call__(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        return self.forward(x, training=training)
