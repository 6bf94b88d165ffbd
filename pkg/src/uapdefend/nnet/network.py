"""Sequential network container: forward, exact gradients, fingerprints."""

from __future__ import annotations

import hashlib
from collections import OrderedDict

import numpy as np

from ..errors import NumericalError, ValidationError
from .layers import LAYER_KINDS, Layer, softmax_xent


def build_layers(input_shape, specs, rng, dtype=np.float32):
    """Instantiate layers from spec dicts, threading shapes through.

    Spec fields follow the checkpoint manifest: kind plus kernel/stride/maps
    for convolutions and residual blocks (residual blocks accept a `repeat`
    count), units for dense layers. Dense input width is inferred from the
    incoming shape.
    """
    layers = []
    shape = tuple(input_shape)
    for spec in specs:
        kind = spec["kind"]
        if kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {kind!r}")
        repeat = int(spec.get("repeat", 1))
        for _ in range(repeat):
            if kind == "conv_same":
                layer = LAYER_KINDS[kind](
                    in_ch=shape[2],
                    out_ch=int(spec["maps"]),
                    kernel=int(spec.get("kernel", 3)),
                    stride=int(spec.get("stride", 1)),
                    rng=rng,
                    dtype=dtype,
                )
            elif kind == "residual_block":
                maps = int(spec.get("maps", shape[2]))
                if maps != shape[2]:
                    raise ValidationError(
                        f"residual_block: {maps} maps requested but input has "
                        f"{shape[2]} channels"
                    )
                layer = LAYER_KINDS[kind](
                    channels=shape[2], kernel=int(spec.get("kernel", 3)),
                    rng=rng, dtype=dtype,
                )
            elif kind == "dense":
                layer = LAYER_KINDS[kind](
                    in_features=int(np.prod(shape)),
                    out_features=int(spec["units"]),
                    rng=rng,
                    dtype=dtype,
                )
            else:
                layer = LAYER_KINDS[kind]()
            shape = layer.output_shape(shape)
            layers.append(layer)
    return layers


class Network:
    """Ordered stack of layers over NHWC batches.

    Forward is a pure function of (parameters, input); finiteness is checked
    after every layer so numerical blowups abort with the offending layer
    named rather than propagating NaNs.
    """

    def __init__(self, input_shape, layers, dtype=np.float32, check_finite=True):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers: list[Layer] = list(layers)
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self._names = [f"{i:02d}_{layer.kind}" for i, layer in enumerate(self.layers)]

    @classmethod
    def from_specs(cls, input_shape, specs, seed=0, dtype=np.float32, check_finite=True):
        rng = np.random.default_rng(seed)
        layers = build_layers(input_shape, specs, rng, dtype=dtype)
        return cls(input_shape, layers, dtype=dtype, check_finite=check_finite)

    # -- shapes and specs ---------------------------------------------------

    def specs(self):
        return [layer.spec() for layer in self.layers]

    def output_shape(self):
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def _check_input(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ValidationError(
                f"network input: expected (N, {', '.join(map(str, self.input_shape))}),"
                f" got {tuple(x.shape)}"
            )

    def _check_values(self, arr, name, phase):
        if self.check_finite and not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite values after layer {name} during {phase}")

    # -- forward / backward -------------------------------------------------

    def forward_cached(self, x):
        self._check_input(x)
        x = np.ascontiguousarray(x, dtype=self.dtype)
        caches = []
        for name, layer in zip(self._names, self.layers):
            x, cache = layer.forward_cached(x)
            caches.append(cache)
            self._check_values(x, name, "forward")
        return x, caches

    def forward(self, x):
        return self.forward_cached(x)[0]

    def backward(self, caches, grad_out, want_param_grads=True, want_input_grad=True):
        """Backpropagate grad_out through the stack.

        Returns (param_grads, grad_input); param_grads maps qualified names
        like "03_residual_block/conv1_W" to arrays.
        """
        grads: dict[str, np.ndarray] = {}
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            name = self._names[i]
            need_input = want_input_grad or i > 0
            layer_grads, g_in = layer.backward(caches[i], g, want_param_grads)
            if want_param_grads:
                for pname, arr in layer_grads.items():
                    grads[f"{name}/{pname}"] = arr
            g = g_in if need_input else None
            if g is not None:
                self._check_values(g, name, "backward")
        return grads, g

    def loss_and_grads(self, x, labels, want_param_grads=True, want_input_grad=True):
        """Cross-entropy loss plus exact gradients for parameters and input."""
        logits, caches = self.forward_cached(x)
        loss, dlogits = softmax_xent(logits, labels)
        if self.check_finite and not np.isfinite(loss):
            raise NumericalError("non-finite values after layer softmax_xent during forward")
        grads, grad_in = self.backward(
            caches, dlogits, want_param_grads=want_param_grads,
            want_input_grad=want_input_grad,
        )
        return loss, grads, grad_in

    # -- parameters ----------------------------------------------------------

    def param_dict(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        for name, layer in zip(self._names, self.layers):
            for pname, arr in layer.params().items():
                out[f"{name}/{pname}"] = arr
        return out

    def load_param_dict(self, values: dict) -> None:
        own = self.param_dict()
        unknown = set(values) - set(own)
        if unknown:
            raise ValidationError(f"unknown parameters {sorted(unknown)}")
        for name, layer in zip(self._names, self.layers):
            sub = {
                k[len(name) + 1 :]: np.ascontiguousarray(v, dtype=self.dtype)
                for k, v in values.items()
                if k.startswith(name + "/")
            }
            if sub:
                layer.set_params(sub)

    def fingerprint(self) -> str:
        """SHA-256 over all parameter payloads in declaration order."""
        h = hashlib.sha256()
        for name, arr in self.param_dict().items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def num_params(self) -> int:
        return sum(a.size for a in self.param_dict().values())


def forward(model: Network, batch: np.ndarray) -> np.ndarray:
    """Module-level alias used by code that treats the network as opaque."""
    return model.forward(batch)


def gradients(model: Network, batch: np.ndarray, labels: np.ndarray):
    """(loss, parameter gradients, input gradient) for a labeled batch."""
    return model.loss_and_grads(batch, labels)
