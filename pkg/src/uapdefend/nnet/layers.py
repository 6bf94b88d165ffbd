"""Layer set for the classifier and rectifier networks.

Minimal on purpose: same-padded convolution, ReLU, 2x2 max pooling,
identity-skip residual blocks, a flattening dense layer and a
softmax-cross-entropy head. Everything runs on NHWC numpy arrays, computes
in the network's dtype (float32 in production, float64 in gradient-check
tests) and exposes exact analytic backward passes.

Convolutions use im2col + BLAS matmul; the column matrix is rebuilt during
backward instead of cached, which keeps per-layer memory at one input copy.
"""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError


def _check_nhwc(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ValidationError(f"{what}: expected NHWC batch, got shape {x.shape}")


def _same_geometry(size: int, k: int, stride: int) -> tuple[int, int, int]:
    """Output size and (leading, trailing) padding for 'same' convolution."""
    out = -(-size // stride)
    pad = max((out - 1) * stride + k - size, 0)
    return out, pad // 2, pad - pad // 2


class Layer:
    kind = "layer"

    def forward_cached(self, x):
        raise NotImplementedError

    def forward(self, x):
        return self.forward_cached(x)[0]

    def backward(self, cache, grad_out, want_param_grads=True):
        """Returns (param_grads, grad_input). param_grads is {} for
        stateless layers or when want_param_grads is False."""
        raise NotImplementedError

    def params(self) -> dict:
        return {}

    def set_params(self, values: dict) -> None:
        for name, arr in values.items():
            cur = self.params()[name]
            if cur.shape != arr.shape:
                raise ValidationError(
                    f"{self.kind} parameter {name}: expected shape {cur.shape}, "
                    f"got {arr.shape}"
                )
        self._assign(values)

    def _assign(self, values: dict) -> None:
        pass

    def spec(self) -> dict:
        return {"kind": self.kind}

    def output_shape(self, input_shape):
        return input_shape


class ConvSame(Layer):
    """k x k convolution with 'same' padding; preserves H, W at stride 1."""

    kind = "conv_same"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, rng=None, dtype=np.float32):
        self.in_ch = int(in_ch)
        self.out_ch = int(out_ch)
        self.kernel = int(kernel)
        self.stride = int(stride)
        if rng is None:
            rng = np.random.default_rng(0)
        fan_in = self.kernel * self.kernel * self.in_ch
        std = np.sqrt(2.0 / fan_in)
        self.W = (rng.standard_normal((self.kernel, self.kernel, self.in_ch, self.out_ch)) * std).astype(dtype)
        self.b = np.zeros(self.out_ch, dtype=dtype)

    def params(self):
        return {"W": self.W, "b": self.b}

    def _assign(self, values):
        self.W = values.get("W", self.W)
        self.b = values.get("b", self.b)

    def spec(self):
        return {
            "kind": self.kind,
            "kernel": self.kernel,
            "stride": self.stride,
            "maps": self.out_ch,
        }

    def output_shape(self, input_shape):
        h, w, c = input_shape
        if c != self.in_ch:
            raise ValidationError(
                f"conv_same: expected {self.in_ch} input channels, got {c}"
            )
        oh, _, _ = _same_geometry(h, self.kernel, self.stride)
        ow, _, _ = _same_geometry(w, self.kernel, self.stride)
        return (oh, ow, self.out_ch)

    # Column buffers above this size make im2col memory-bound; per-offset
    # shifted GEMMs (stride 1 only) are faster there. The choice depends only
    # on shapes, so repeated calls stay bit-identical.
    _COL_BYTES_LIMIT = 32 * 1024 * 1024

    def _use_shifts(self, x) -> bool:
        n, h, w, _ = x.shape
        col_bytes = n * h * w * self.kernel * self.kernel * self.in_ch * x.dtype.itemsize
        return self.stride == 1 and col_bytes > self._COL_BYTES_LIMIT

    def _pad(self, x):
        n, h, w, _ = x.shape
        k, s = self.kernel, self.stride
        oh, pt, pb = _same_geometry(h, k, s)
        ow, pl, pr = _same_geometry(w, k, s)
        xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        return xp, (oh, ow, pt, pl)

    def _im2col(self, x):
        n = x.shape[0]
        k, s = self.kernel, self.stride
        xp, (oh, ow, pt, pl) = self._pad(x)
        cols = np.empty((n, oh, ow, k, k, self.in_ch), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j, :] = xp[:, i : i + oh * s : s, j : j + ow * s : s, :]
        return cols.reshape(n * oh * ow, k * k * self.in_ch), (oh, ow, pt, pl)

    def forward_cached(self, x):
        _check_nhwc(x, "conv_same")
        if x.shape[3] != self.in_ch:
            raise ValidationError(
                f"conv_same: expected {self.in_ch} input channels, got shape {x.shape}"
            )
        n = x.shape[0]
        k = self.kernel
        if self._use_shifts(x):
            xp, (oh, ow, _, _) = self._pad(x)
            wk = self.W.reshape(k * k, self.in_ch, self.out_ch)
            out = np.zeros((n * oh * ow, self.out_ch), dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    xv = np.ascontiguousarray(xp[:, i : i + oh, j : j + ow, :])
                    out += xv.reshape(-1, self.in_ch) @ wk[i * k + j]
            out += self.b
        else:
            cols, (oh, ow, _, _) = self._im2col(x)
            out = cols @ self.W.reshape(-1, self.out_ch) + self.b
        return out.reshape(n, oh, ow, self.out_ch), x

    def backward(self, cache, grad_out, want_param_grads=True):
        x = cache
        n, h, w, _ = x.shape
        k, s = self.kernel, self.stride
        oh, ow = grad_out.shape[1], grad_out.shape[2]
        g2 = grad_out.reshape(n * oh * ow, self.out_ch)
        grads = {}

        if self._use_shifts(x):
            xp, _ = self._pad(x)
            _, pt, pb = _same_geometry(h, k, s)
            _, pl, pr = _same_geometry(w, k, s)
            wk = self.W.reshape(k * k, self.in_ch, self.out_ch)
            gw = (
                np.empty((k * k, self.in_ch, self.out_ch), dtype=grad_out.dtype)
                if want_param_grads
                else None
            )
            gxp = np.zeros((n, h + pt + pb, w + pl + pr, self.in_ch), dtype=grad_out.dtype)
            for i in range(k):
                for j in range(k):
                    if want_param_grads:
                        xv = np.ascontiguousarray(xp[:, i : i + oh, j : j + ow, :])
                        gw[i * k + j] = xv.reshape(-1, self.in_ch).T @ g2
                    gxp[:, i : i + oh, j : j + ow, :] += (g2 @ wk[i * k + j].T).reshape(
                        n, oh, ow, self.in_ch
                    )
            if want_param_grads:
                grads["W"] = gw.reshape(self.W.shape)
                grads["b"] = g2.sum(axis=0)
            return grads, gxp[:, pt : pt + h, pl : pl + w, :]

        w2 = self.W.reshape(-1, self.out_ch)
        if want_param_grads:
            cols, _ = self._im2col(x)
            grads["W"] = (cols.T @ g2).reshape(self.W.shape)
            grads["b"] = g2.sum(axis=0)
        gcols = (g2 @ w2.T).reshape(n, oh, ow, k, k, self.in_ch)
        _, pt, pb = _same_geometry(h, k, s)
        _, pl, pr = _same_geometry(w, k, s)
        gxp = np.zeros((n, h + pt + pb, w + pl + pr, self.in_ch), dtype=grad_out.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, i : i + oh * s : s, j : j + ow * s : s, :] += gcols[:, :, :, i, j, :]
        grad_in = gxp[:, pt : pt + h, pl : pl + w, :]
        return grads, grad_in


class ReLU(Layer):
    kind = "relu"

    def forward_cached(self, x):
        mask = x > 0
        return np.where(mask, x, x.dtype.type(0)), mask

    def backward(self, cache, grad_out, want_param_grads=True):
        return {}, np.where(cache, grad_out, grad_out.dtype.type(0))


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; ties route the gradient to the first
    maximum (untestable by finite differences only on a measure-zero set)."""

    kind = "maxpool2"

    def output_shape(self, input_shape):
        h, w, c = input_shape
        if h % 2 or w % 2:
            raise ValidationError(f"maxpool2: H and W must be even, got {h}x{w}")
        return (h // 2, w // 2, c)

    def forward_cached(self, x):
        _check_nhwc(x, "maxpool2")
        n, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValidationError(f"maxpool2: H and W must be even, got shape {x.shape}")
        xs = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        xs = xs.reshape(n, h // 2, w // 2, c, 4)
        idx = xs.argmax(axis=-1)
        out = np.take_along_axis(xs, idx[..., None], axis=-1)[..., 0]
        return out, (idx, x.shape)

    def backward(self, cache, grad_out, want_param_grads=True):
        idx, (n, h, w, c) = cache
        g = np.zeros((n, h // 2, w // 2, c, 4), dtype=grad_out.dtype)
        np.put_along_axis(g, idx[..., None], grad_out[..., None], axis=-1)
        g = g.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return {}, g.reshape(n, h, w, c)


class Dense(Layer):
    """Fully connected layer; flattens any input to (N, features)."""

    kind = "dense"

    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        if rng is None:
            rng = np.random.default_rng(0)
        std = np.sqrt(2.0 / self.in_features)
        self.W = (rng.standard_normal((self.in_features, self.out_features)) * std).astype(dtype)
        self.b = np.zeros(self.out_features, dtype=dtype)

    def params(self):
        return {"W": self.W, "b": self.b}

    def _assign(self, values):
        self.W = values.get("W", self.W)
        self.b = values.get("b", self.b)

    def spec(self):
        return {"kind": self.kind, "units": self.out_features}

    def output_shape(self, input_shape):
        flat = int(np.prod(input_shape))
        if flat != self.in_features:
            raise ValidationError(
                f"dense: expected {self.in_features} input features, got {flat} "
                f"(shape {input_shape})"
            )
        return (self.out_features,)

    def forward_cached(self, x):
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != self.in_features:
            raise ValidationError(
                f"dense: expected {self.in_features} input features, got shape {x.shape}"
            )
        return x2 @ self.W + self.b, (x2, x.shape)

    def backward(self, cache, grad_out, want_param_grads=True):
        x2, in_shape = cache
        grads = {}
        if want_param_grads:
            grads["W"] = x2.T @ grad_out
            grads["b"] = grad_out.sum(axis=0)
        grad_in = (grad_out @ self.W.T).reshape(in_shape)
        return grads, grad_in


class ResidualBlock(Layer):
    """Two same-padded convolutions with an interior ReLU and an identity
    skip: y = x + conv2(relu(conv1(x))). With all-zero convolution weights
    the block is an exact identity."""

    kind = "residual_block"

    def __init__(self, channels, kernel=3, rng=None, dtype=np.float32):
        self.channels = int(channels)
        self.kernel = int(kernel)
        self.conv1 = ConvSame(channels, channels, kernel, 1, rng=rng, dtype=dtype)
        self.conv2 = ConvSame(channels, channels, kernel, 1, rng=rng, dtype=dtype)

    def params(self):
        out = {}
        for tag, conv in (("conv1", self.conv1), ("conv2", self.conv2)):
            for name, arr in conv.params().items():
                out[f"{tag}_{name}"] = arr
        return out

    def _assign(self, values):
        for tag, conv in (("conv1", self.conv1), ("conv2", self.conv2)):
            sub = {n[len(tag) + 1 :]: a for n, a in values.items() if n.startswith(tag + "_")}
            if sub:
                conv.set_params(sub)

    def spec(self):
        return {"kind": self.kind, "kernel": self.kernel, "maps": self.channels}

    def output_shape(self, input_shape):
        h, w, c = input_shape
        if c != self.channels:
            raise ValidationError(
                f"residual_block: expected {self.channels} channels, got {c}"
            )
        return input_shape

    def forward_cached(self, x):
        a, c1 = self.conv1.forward_cached(x)
        mask = a > 0
        r = np.where(mask, a, a.dtype.type(0))
        y, c2 = self.conv2.forward_cached(r)
        return y + x, (c1, mask, c2)

    def backward(self, cache, grad_out, want_param_grads=True):
        c1, mask, c2 = cache
        g2, grad_r = self.conv2.backward(c2, grad_out, want_param_grads)
        grad_a = np.where(mask, grad_r, grad_r.dtype.type(0))
        g1, grad_x = self.conv1.backward(c1, grad_a, want_param_grads)
        grads = {}
        if want_param_grads:
            for name, arr in g1.items():
                grads[f"conv1_{name}"] = arr
            for name, arr in g2.items():
                grads[f"conv2_{name}"] = arr
        return grads, grad_x + grad_out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stable under large logits."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns (loss, grad_logits); the gradient is (softmax - onehot) / N.
    """
    if logits.ndim != 2:
        raise ValidationError(f"softmax_xent: expected (N, K) logits, got {logits.shape}")
    n, k = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValidationError(
            f"softmax_xent: expected {n} labels, got shape {labels.shape}"
        )
    if labels.min() < 0 or labels.max() >= k:
        raise ValidationError(f"softmax_xent: labels out of range [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(n), labels]))
    p = softmax(logits)
    grad = p.copy()
    grad[np.arange(n), labels] -= 1
    grad /= n
    return loss, grad.astype(logits.dtype)


LAYER_KINDS = {
    "conv_same": ConvSame,
    "relu": ReLU,
    "maxpool2": MaxPool2,
    "dense": Dense,
    "residual_block": ResidualBlock,
}
