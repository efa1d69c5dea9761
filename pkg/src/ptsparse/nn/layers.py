"""Layer primitives with explicit forward/backward rules.

All arithmetic is float64. Each layer is a small stateful object holding its
parameters; forward returns (output, cache) and backward consumes the cache.
Only Dense and Conv2d carry prunable weight tensors.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    """Input/mask shape incompatible with a layer; carries the layer index."""

    def __init__(self, layer_index: int, message: str):
        self.layer_index = layer_index
        super().__init__(f"layer {layer_index}: {message}")


class Layer:
    kind = "base"
    prunable = False

    def params(self) -> dict:
        return {}

    def spec(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x, mode="eval", weff=None):
        raise NotImplementedError

    def backward(self, gy, cache):
        """Returns (grad_input, {param_name: grad})."""
        raise NotImplementedError


class Dense(Layer):
    kind = "Dense"
    prunable = True

    def __init__(self, in_features: int, out_features: int, rng=None):
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            self.weight = np.zeros((out_features, in_features))
            self.bias = np.zeros(out_features)
        else:
            bound = 1.0 / np.sqrt(in_features)
            self.weight = rng.uniform(-bound, bound, (out_features, in_features))
            self.bias = rng.uniform(-bound, bound, out_features)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def spec(self):
        return {"kind": self.kind, "in_features": self.in_features,
                "out_features": self.out_features}

    def forward(self, x, mode="eval", weff=None):
        w = self.weight if weff is None else weff
        y = x @ w.T + self.bias
        return y, {"x": x}

    def backward(self, gy, cache):
        x = cache["x"]
        gw = gy.T @ x
        gb = gy.sum(axis=0)
        gx = gy @ (self.weight if cache.get("weff") is None else cache["weff"])
        return gx, {"weight": gw, "bias": gb}


def _im2col(x, kh, kw, stride, oh, ow):
    b, c, _, _ = x.shape
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    return cols.reshape(b, c * kh * kw, oh * ow)


def _col2im(gcols, x_shape, kh, kw, stride, oh, ow):
    b, c, h, w = x_shape
    gcols = gcols.reshape(b, c, kh, kw, oh, ow)
    gx = np.zeros(x_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, i, j]
    return gx


class Conv2d(Layer):
    kind = "Conv2d"
    prunable = True

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, rng=None):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if rng is None:
            self.weight = np.zeros(shape)
            self.bias = np.zeros(out_channels)
        else:
            fan_in = in_channels * kernel_size * kernel_size
            bound = 1.0 / np.sqrt(fan_in)
            self.weight = rng.uniform(-bound, bound, shape)
            self.bias = rng.uniform(-bound, bound, out_channels)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def spec(self):
        return {"kind": self.kind, "in_channels": self.in_channels,
                "out_channels": self.out_channels, "kernel_size": self.kernel_size,
                "stride": self.stride, "padding": self.padding}

    def _out_hw(self, h, w):
        k, s, p = self.kernel_size, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x, mode="eval", weff=None):
        w = self.weight if weff is None else weff
        k, s, p = self.kernel_size, self.stride, self.padding
        if p:
            x_p = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        else:
            x_p = x
        oh, ow = self._out_hw(x.shape[2], x.shape[3])
        cols = _im2col(x_p, k, k, s, oh, ow)
        wmat = w.reshape(self.out_channels, -1)
        y = np.matmul(wmat, cols) + self.bias[:, None]
        y = y.reshape(x.shape[0], self.out_channels, oh, ow)
        return y, {"cols": cols, "x_shape": x.shape, "xp_shape": x_p.shape,
                   "oh": oh, "ow": ow, "weff": weff}

    def backward(self, gy, cache):
        k, s, p = self.kernel_size, self.stride, self.padding
        b = gy.shape[0]
        oh, ow = cache["oh"], cache["ow"]
        gy_mat = gy.reshape(b, self.out_channels, oh * ow)
        cols = cache["cols"]
        gw = np.einsum("bol,bkl->ok", gy_mat, cols).reshape(self.weight.shape)
        gb = gy_mat.sum(axis=(0, 2))
        w = self.weight if cache.get("weff") is None else cache["weff"]
        wmat = w.reshape(self.out_channels, -1)
        gcols = np.matmul(wmat.T, gy_mat)
        gxp = _col2im(gcols, cache["xp_shape"], k, k, s, oh, ow)
        if p:
            gx = gxp[:, :, p:-p, p:-p]
        else:
            gx = gxp
        return gx, {"weight": gw, "bias": gb}


class BatchNorm(Layer):
    """Batch normalization over features (2-D input) or channels (4-D input).

    eval mode normalizes with stored running statistics; train mode uses batch
    statistics and folds them into the running values with momentum 0.1.
    Recalibration is driven externally through reset_stats/accumulate_stats.
    """

    kind = "BatchNorm"
    EPS = 1e-5
    MOMENTUM = 0.1

    def __init__(self, num_features: int):
        self.num_features = num_features
        self.gamma = np.ones(num_features)
        self.beta = np.zeros(num_features)
        self.running_mean = np.zeros(num_features)
        self.running_var = np.ones(num_features)
        self._acc = None  # (count, mean, m2) during recalibration

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta,
                "running_mean": self.running_mean, "running_var": self.running_var}

    def spec(self):
        return {"kind": self.kind, "num_features": self.num_features}

    def _axes(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bshape(self, x):
        return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)

    def reset_stats(self):
        self.running_mean = np.zeros(self.num_features)
        self.running_var = np.zeros(self.num_features)
        self._acc = (0, np.zeros(self.num_features), np.zeros(self.num_features))

    def accumulate_stats(self, x):
        # Chan parallel combine of (count, mean, M2); exact streaming moments.
        axes = self._axes(x)
        nb = int(np.prod([x.shape[a] for a in axes]))
        mb = x.mean(axis=axes)
        m2b = x.var(axis=axes) * nb
        n, m, m2 = self._acc
        tot = n + nb
        delta = mb - m
        m_new = m + delta * (nb / tot)
        m2_new = m2 + m2b + delta * delta * (n * nb / tot)
        self._acc = (tot, m_new, m2_new)
        self.running_mean = m_new
        self.running_var = m2_new / tot

    def forward(self, x, mode="eval", weff=None):
        shp = self._bshape(x)
        if mode == "eval":
            mean = self.running_mean
            var = self.running_var
            invstd = 1.0 / np.sqrt(var + self.EPS)
            xhat = (x - mean.reshape(shp)) * invstd.reshape(shp)
            y = self.gamma.reshape(shp) * xhat + self.beta.reshape(shp)
            return y, {"xhat": xhat, "invstd": invstd, "mode": mode}
        axes = self._axes(x)
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if mode == "recal":
            self.accumulate_stats(x)
        else:
            m = self.MOMENTUM
            self.running_mean = (1 - m) * self.running_mean + m * mean
            self.running_var = (1 - m) * self.running_var + m * var
        invstd = 1.0 / np.sqrt(var + self.EPS)
        xhat = (x - mean.reshape(shp)) * invstd.reshape(shp)
        y = self.gamma.reshape(shp) * xhat + self.beta.reshape(shp)
        n = int(np.prod([x.shape[a] for a in axes]))
        return y, {"xhat": xhat, "invstd": invstd, "mode": mode, "n": n}

    def backward(self, gy, cache):
        shp = self._bshape(gy)
        axes = self._axes(gy)
        xhat, invstd = cache["xhat"], cache["invstd"]
        ggamma = (gy * xhat).sum(axis=axes)
        gbeta = gy.sum(axis=axes)
        gxhat = gy * self.gamma.reshape(shp)
        if cache["mode"] == "eval":
            gx = gxhat * invstd.reshape(shp)
        else:
            n = cache["n"]
            s1 = gxhat.sum(axis=axes).reshape(shp)
            s2 = (gxhat * xhat).sum(axis=axes).reshape(shp)
            gx = (invstd.reshape(shp) / n) * (n * gxhat - s1 - xhat * s2)
        return gx, {"gamma": ggamma, "beta": gbeta}


class ReLU(Layer):
    kind = "ReLU"

    def forward(self, x, mode="eval", weff=None):
        y = np.maximum(x, 0.0)
        return y, {"pos": x > 0}

    def backward(self, gy, cache):
        return gy * cache["pos"], {}


class Flatten(Layer):
    kind = "Flatten"

    def forward(self, x, mode="eval", weff=None):
        return x.reshape(x.shape[0], -1), {"shape": x.shape}

    def backward(self, gy, cache):
        return gy.reshape(cache["shape"]), {}


class AvgPool(Layer):
    """Non-overlapping average pooling (kernel == stride)."""

    kind = "AvgPool"

    def __init__(self, kernel_size: int):
        self.kernel_size = kernel_size

    def spec(self):
        return {"kind": self.kind, "kernel_size": self.kernel_size}

    def forward(self, x, mode="eval", weff=None):
        k = self.kernel_size
        b, c, h, w = x.shape
        if h % k or w % k:
            raise ValueError(f"AvgPool input {h}x{w} not divisible by {k}")
        y = x.reshape(b, c, h // k, k, w // k, k).mean(axis=(3, 5))
        return y, {"shape": x.shape}

    def backward(self, gy, cache):
        k = self.kernel_size
        b, c, h, w = cache["shape"]
        gx = np.repeat(np.repeat(gy, k, axis=2), k, axis=3) / (k * k)
        return gx, {}


LAYER_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, BatchNorm, ReLU, Flatten, AvgPool)}


def layer_from_spec(spec: dict) -> Layer:
    kind = spec["kind"]
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    if kind == "Dense":
        return Dense(spec["in_features"], spec["out_features"])
    if kind == "Conv2d":
        return Conv2d(spec["in_channels"], spec["out_channels"], spec["kernel_size"],
                      spec["stride"], spec["padding"])
    if kind == "BatchNorm":
        return BatchNorm(spec["num_features"])
    if kind == "AvgPool":
        return AvgPool(spec["kernel_size"])
    return LAYER_KINDS[kind]()
