"""Small float64 neural-network engine with hand-written backward rules.

A :class:`NeuralNet` is a sequential stack of layers described by
:class:`LayerSpec` values. All trainable parameters live in one flat vector
(``net.params``) and non-trainable state (batchnorm running statistics) in a
second one (``net.buffers``); layers only ever see slices of those vectors, so
optimizers can update ``params`` in place.

Activations are plain ``numpy.ndarray`` objects with a leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

DTYPE = np.float64

LAYER_KINDS = (
    "dense",
    "conv2d",
    "relu",
    "tanh",
    "flatten",
    "reshape",
    "maxpool2d",
    "upsample2d",
    "batchnorm2d",
)


class ShapeError(ValueError):
    """Raised when a layer receives an input of the wrong shape."""


class StateError(RuntimeError):
    """Raised when backward is requested without a cached training forward pass."""


@dataclass
class LayerSpec:
    kind: str
    options: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, **self.options}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> LayerSpec:
        d = dict(d)
        kind = d.pop("kind")
        if "shape" in d:
            d["shape"] = tuple(d["shape"])
        return cls(kind, d)


# Convenience constructors ----------------------------------------------------

def dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("dense", {"in_features": in_features, "out_features": out_features})


def conv2d(in_channels: int, out_channels: int, kernel: int, stride: int = 1, padding: str | int = "same") -> LayerSpec:
    return LayerSpec(
        "conv2d",
        {"in_channels": in_channels, "out_channels": out_channels, "kernel": kernel, "stride": stride, "padding": padding},
    )


def relu() -> LayerSpec:
    return LayerSpec("relu")


def tanh() -> LayerSpec:
    return LayerSpec("tanh")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def reshape(*shape: int) -> LayerSpec:
    return LayerSpec("reshape", {"shape": tuple(shape)})


def maxpool2d(kernel: int = 2) -> LayerSpec:
    return LayerSpec("maxpool2d", {"kernel": kernel})


def upsample2d(scale: int = 2) -> LayerSpec:
    return LayerSpec("upsample2d", {"scale": scale})


def batchnorm2d(channels: int, momentum: float = 0.9, eps: float = 1e-5) -> LayerSpec:
    return LayerSpec("batchnorm2d", {"channels": channels, "momentum": momentum, "eps": eps})


# Layer implementations -------------------------------------------------------
#
# Each layer gets its parameter slice ``p`` and buffer slice ``buf`` on every
# call. ``forward`` returns (output, cache); ``backward`` returns
# (param_grad or None, input_grad). Parameter gradients are skipped when
# ``need_dp`` is false.


class _Layer:
    n_params = 0
    n_buffers = 0

    def __init__(self, spec: LayerSpec, in_shape: tuple[int, ...]):
        self.spec = spec
        self.in_shape = in_shape
        self.out_shape = in_shape

    def init(self, p: np.ndarray, buf: np.ndarray, rng: np.random.Generator) -> None:
        pass

    def forward(self, p, buf, x, training):
        raise NotImplementedError

    def backward(self, p, cache, dy, need_dp):
        raise NotImplementedError


def _glorot(shape: tuple[int, ...], fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class _Dense(_Layer):
    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        self.n_in = int(spec.options["in_features"])
        self.n_out = int(spec.options["out_features"])
        if in_shape != (self.n_in,):
            raise ShapeError(f"expects input ({self.n_in},), got {in_shape}")
        self.out_shape = (self.n_out,)
        self.n_params = self.n_out * self.n_in + self.n_out

    def _split(self, p):
        w = p[: self.n_out * self.n_in].reshape(self.n_out, self.n_in)
        return w, p[self.n_out * self.n_in :]

    def init(self, p, buf, rng):
        w, b = self._split(p)
        w[...] = _glorot(w.shape, self.n_in, self.n_out, rng)
        b[...] = 0.0

    def forward(self, p, buf, x, training):
        w, b = self._split(p)
        return x @ w.T + b, x

    def backward(self, p, x, dy, need_dp, need_dx=True):
        w, _ = self._split(p)
        dp = np.concatenate([(dy.T @ x).ravel(), dy.sum(axis=0)]) if need_dp else None
        return dp, (dy @ w if need_dx else None)


class _Conv2d(_Layer):
    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        o = spec.options
        self.c_in, self.c_out = int(o["in_channels"]), int(o["out_channels"])
        self.k, self.stride = int(o["kernel"]), int(o.get("stride", 1))
        pad = o.get("padding", "same")
        if pad == "same":
            if self.k % 2 == 0:
                raise ShapeError("'same' padding needs an odd kernel")
            pad = (self.k - 1) // 2
        elif pad == "valid":
            pad = 0
        self.pad = int(pad)
        if len(in_shape) != 3 or in_shape[0] != self.c_in:
            raise ShapeError(f"expects input ({self.c_in}, H, W), got {in_shape}")
        _, h, w = in_shape
        ho = (h + 2 * self.pad - self.k) // self.stride + 1
        wo = (w + 2 * self.pad - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel {self.k} does not fit input {in_shape}")
        self.out_shape = (self.c_out, ho, wo)
        self.n_params = self.c_out * self.c_in * self.k * self.k + self.c_out

    def _split(self, p):
        n = self.c_out * self.c_in * self.k * self.k
        return p[:n].reshape(self.c_out, self.c_in * self.k * self.k), p[n:]

    def init(self, p, buf, rng):
        w, b = self._split(p)
        kk = self.k * self.k
        w[...] = _glorot(w.shape, self.c_in * kk, self.c_out * kk, rng)
        b[...] = 0.0

    def _cols(self, x):
        """Patch matrix laid out (B, C*k*k, Ho*Wo) so the output lands in NCHW order."""
        if self.pad:
            x = np.pad(x, ((0, 0), (0, 0), (self.pad, self.pad), (self.pad, self.pad)))
        _, ho, wo = self.out_shape
        k, s = self.k, self.stride
        cols = np.empty((x.shape[0], self.c_in, k, k, ho, wo), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = x[:, :, i : i + s * ho : s, j : j + s * wo : s]
        return cols.reshape(x.shape[0], self.c_in * k * k, ho * wo)

    def forward(self, p, buf, x, training):
        w, b = self._split(p)
        cols = self._cols(x)
        y = np.matmul(w, cols)
        y += b[:, None]
        return y.reshape((x.shape[0],) + self.out_shape), cols

    def backward(self, p, cols, dy, need_dp, need_dx=True):
        w, _ = self._split(p)
        batch = dy.shape[0]
        dyr = dy.reshape(batch, self.c_out, -1)
        dp = None
        if need_dp:
            dw = np.matmul(dyr, cols.transpose(0, 2, 1)).sum(axis=0)
            dp = np.concatenate([dw.ravel(), dyr.sum(axis=(0, 2))])
        if not need_dx:
            return dp, None
        _, ho, wo = self.out_shape
        k, s = self.k, self.stride
        dcols = np.matmul(w.T, dyr).reshape(batch, self.c_in, k, k, ho, wo)
        _, h, wd = self.in_shape
        dxp = np.zeros((batch, self.c_in, h + 2 * self.pad, wd + 2 * self.pad), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, i, j]
        if self.pad:
            dxp = dxp[:, :, self.pad : self.pad + h, self.pad : self.pad + wd]
        return dp, dxp


class _ReLU(_Layer):
    def forward(self, p, buf, x, training):
        return np.maximum(x, 0.0), x > 0

    def backward(self, p, mask, dy, need_dp):
        return None, dy * mask


class _Tanh(_Layer):
    def forward(self, p, buf, x, training):
        y = np.tanh(x)
        return y, y

    def backward(self, p, y, dy, need_dp):
        return None, dy * (1.0 - y * y)


class _Reshape(_Layer):
    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        if spec.kind == "flatten":
            self.out_shape = (int(np.prod(in_shape)),)
        else:
            self.out_shape = tuple(int(s) for s in spec.options["shape"])
            if np.prod(self.out_shape) != np.prod(in_shape):
                raise ShapeError(f"cannot reshape {in_shape} to {self.out_shape}")

    def forward(self, p, buf, x, training):
        return x.reshape((x.shape[0],) + self.out_shape), None

    def backward(self, p, cache, dy, need_dp):
        return None, dy.reshape((dy.shape[0],) + self.in_shape)


class _MaxPool2d(_Layer):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""

    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        self.k = int(spec.options.get("kernel", 2))
        if len(in_shape) != 3 or in_shape[1] < self.k or in_shape[2] < self.k:
            raise ShapeError(f"maxpool{self.k} cannot pool input {in_shape}")
        c, h, w = in_shape
        self.out_shape = (c, h // self.k, w // self.k)

    def forward(self, p, buf, x, training):
        k = self.k
        c, ho, wo = self.out_shape
        b = x.shape[0]
        win = x[:, :, : ho * k, : wo * k].reshape(b, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho, wo, k * k)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, idx

    def backward(self, p, idx, dy, need_dp):
        k = self.k
        c, ho, wo = self.out_shape
        b = dy.shape[0]
        dwin = np.zeros((b, c, ho, wo, k * k), dtype=DTYPE)
        np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
        dwin = dwin.reshape(b, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * k, wo * k)
        _, h, w = self.in_shape
        if (h, w) == (ho * k, wo * k):
            return None, dwin
        dx = np.zeros((b,) + self.in_shape, dtype=DTYPE)
        dx[:, :, : ho * k, : wo * k] = dwin
        return None, dx


class _Upsample2d(_Layer):
    """Nearest-neighbour upsampling by an integer factor."""

    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        self.s = int(spec.options.get("scale", 2))
        if len(in_shape) != 3:
            raise ShapeError(f"expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        self.out_shape = (c, h * self.s, w * self.s)

    def forward(self, p, buf, x, training):
        return x.repeat(self.s, axis=2).repeat(self.s, axis=3), None

    def backward(self, p, cache, dy, need_dp):
        c, h, w = self.in_shape
        return None, dy.reshape(dy.shape[0], c, h, self.s, w, self.s).sum(axis=(3, 5))


class _BatchNorm2d(_Layer):
    """Per-channel batch normalization.

    Training mode normalizes with batch statistics and folds them into the
    running averages held in ``buf`` (mean then var); eval mode uses the
    running averages. Only gamma and beta are trainable.
    """

    def __init__(self, spec, in_shape):
        super().__init__(spec, in_shape)
        self.c = int(spec.options["channels"])
        self.momentum = float(spec.options.get("momentum", 0.9))
        self.eps = float(spec.options.get("eps", 1e-5))
        if len(in_shape) != 3 or in_shape[0] != self.c:
            raise ShapeError(f"expects ({self.c}, H, W) input, got {in_shape}")
        self.n_params = 2 * self.c
        self.n_buffers = 2 * self.c

    def init(self, p, buf, rng):
        p[: self.c] = 1.0
        p[self.c :] = 0.0
        buf[: self.c] = 0.0
        buf[self.c :] = 1.0

    def forward(self, p, buf, x, training):
        gamma = p[: self.c].reshape(1, -1, 1, 1)
        beta = p[self.c :].reshape(1, -1, 1, 1)
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            buf[: self.c] = self.momentum * buf[: self.c] + (1 - self.momentum) * mean
            buf[self.c :] = self.momentum * buf[self.c :] + (1 - self.momentum) * var
        else:
            mean, var = buf[: self.c], buf[self.c :]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(1, -1, 1, 1)) * inv_std.reshape(1, -1, 1, 1)
        return gamma * xhat + beta, (xhat, inv_std)

    def backward(self, p, cache, dy, need_dp):
        xhat, inv_std = cache
        gamma = p[: self.c].reshape(1, -1, 1, 1)
        axes = (0, 2, 3)
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        dp = np.concatenate([dgamma, dbeta]) if need_dp else None
        n = dy.shape[0] * dy.shape[2] * dy.shape[3]
        dxhat = dy * gamma
        dx = (inv_std.reshape(1, -1, 1, 1) / n) * (
            n * dxhat
            - dxhat.sum(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
        )
        return dp, dx


_LAYER_TYPES = {
    "dense": _Dense,
    "conv2d": _Conv2d,
    "relu": _ReLU,
    "tanh": _Tanh,
    "flatten": _Reshape,
    "reshape": _Reshape,
    "maxpool2d": _MaxPool2d,
    "upsample2d": _Upsample2d,
    "batchnorm2d": _BatchNorm2d,
}


class NeuralNet:
    """Sequential network over a flat parameter vector.

    Args:
        input_shape: per-sample input shape, e.g. ``(1, 28, 28)`` or ``(100,)``.
        layers: layer descriptions, applied in order.

    Raises:
        ShapeError: if two adjacent layers disagree on shape; the message
            names the offending layer.
    """

    def __init__(self, input_shape: tuple[int, ...], layers: list[LayerSpec]):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.specs = list(layers)
        self._layers: list[_Layer] = []
        shape = self.input_shape
        for i, spec in enumerate(self.specs):
            if spec.kind not in _LAYER_TYPES:
                raise ShapeError(f"layer {i}: unknown kind {spec.kind!r}; expected one of {LAYER_KINDS}")
            try:
                layer = _LAYER_TYPES[spec.kind](spec, shape)
            except (KeyError, TypeError) as e:
                raise ShapeError(f"layer {i} ({spec.kind}): bad options {spec.options}: {e}") from e
            except ShapeError as e:
                raise ShapeError(f"layer {i} ({spec.kind}): {e}") from None
            self._layers.append(layer)
            shape = layer.out_shape
        self.output_shape = shape

        self.param_offsets: list[tuple[int, int]] = []
        self._buffer_offsets: list[tuple[int, int]] = []
        p = b = 0
        for layer in self._layers:
            self.param_offsets.append((p, p + layer.n_params))
            self._buffer_offsets.append((b, b + layer.n_buffers))
            p += layer.n_params
            b += layer.n_buffers
        self.params = np.zeros(p, dtype=DTYPE)
        self.buffers = np.zeros(b, dtype=DTYPE)
        self._cache: list | None = None
        # unseeded nets still get sane batchnorm defaults
        for layer, (s, e), (bs, be) in zip(self._layers, self.param_offsets, self._buffer_offsets):
            if isinstance(layer, _BatchNorm2d):
                layer.init(self.params[s:e], self.buffers[bs:be], None)

    @property
    def n_params(self) -> int:
        return self.params.size

    def layer_shapes(self) -> list[tuple[int, ...]]:
        return [layer.out_shape for layer in self._layers]

    def copy(self) -> NeuralNet:
        other = NeuralNet(self.input_shape, self.specs)
        other.params[:] = self.params
        other.buffers[:] = self.buffers
        return other

    def same_architecture(self, other: NeuralNet) -> bool:
        return self.input_shape == other.input_shape and [s.to_dict() for s in self.specs] == [
            s.to_dict() for s in other.specs
        ]

    def glorot_init(self, seed: int | np.random.Generator) -> NeuralNet:
        """Glorot-uniform weights, zero biases, unit batchnorm scale; in place."""
        rng = np.random.default_rng(seed)
        for layer, (s, e), (bs, be) in zip(self._layers, self.param_offsets, self._buffer_offsets):
            layer.init(self.params[s:e], self.buffers[bs:be], rng)
        return self

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        """Run the net on a batch; in training mode keep what backward needs."""
        x = np.asarray(x, dtype=DTYPE)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input: expected (B, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        caches = [] if training else None
        for layer, (s, e), (bs, be) in zip(self._layers, self.param_offsets, self._buffer_offsets):
            x, cache = layer.forward(self.params[s:e], self.buffers[bs:be], x, training)
            if training:
                caches.append(cache)
        self._cache = caches
        return x

    def backward(
        self, output_grad: np.ndarray, param_grads: bool = True, input_grad: bool = True
    ) -> tuple[np.ndarray | None, np.ndarray | None]:
        """Backpropagate ``output_grad`` through the last training forward pass.

        Returns the flat parameter gradient and the gradient with respect to
        the input batch; either is ``None`` when switched off.
        """
        if self._cache is None:
            raise StateError("backward called without a preceding forward(training=True)")
        dy = np.asarray(output_grad, dtype=DTYPE)
        grads = np.zeros_like(self.params) if param_grads else None
        for i in range(len(self._layers) - 1, -1, -1):
            layer = self._layers[i]
            s, e = self.param_offsets[i]
            if i == 0 and not input_grad:
                if isinstance(layer, (_Dense, _Conv2d)):
                    dp, _ = layer.backward(self.params[s:e], self._cache[i], dy, param_grads, need_dx=False)
                    if dp is not None:
                        grads[s:e] = dp
                return grads, None
            dp, dy = layer.backward(self.params[s:e], self._cache[i], dy, param_grads)
            if dp is not None:
                grads[s:e] = dp
        return grads, dy

    def __repr__(self) -> str:
        kinds = ",".join(s.kind for s in self.specs)
        return f"NeuralNet(in={self.input_shape}, out={self.output_shape}, params={self.n_params}, layers=[{kinds}])"
