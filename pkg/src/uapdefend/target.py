"""The targeted classifier: build, train, freeze, classify, and expose
per-class input gradients to the attack."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .nnet import Network, adam_step, init_adam, load_network, save_network
from .nnet.layers import softmax_xent

TARGET_SPECS = [
    {"kind": "conv_same", "kernel": 3, "stride": 1, "maps": 32},
    {"kind": "relu"},
    {"kind": "conv_same", "kernel": 3, "stride": 1, "maps": 32},
    {"kind": "relu"},
    {"kind": "maxpool2"},
    {"kind": "conv_same", "kernel": 3, "stride": 1, "maps": 64},
    {"kind": "relu"},
    {"kind": "maxpool2"},
    {"kind": "dense", "units": 256},
    {"kind": "relu"},
    {"kind": "dense", "units": None},  # filled with num_classes at build time
]


@dataclass
class TargetHyper:
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 12
    seed: int = 0


@dataclass
class TargetClassifier:
    net: Network
    num_classes: int
    input_shape: tuple
    frozen: bool = False
    meta: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        return self.net.fingerprint()


def build_target(input_shape, num_classes, seed=0) -> TargetClassifier:
    """Fixed reference architecture: two 32-map conv blocks, a 64-map block,
    two pooling stages, then dense-256 and a dense class head."""
    if num_classes < 1:
        raise ValidationError(f"num_classes must be >= 1, got {num_classes}")
    h, w, c = input_shape
    if h % 4 or w % 4:
        raise ValidationError(
            f"target input H, W must be divisible by 4 (two pools), got {h}x{w}"
        )
    specs = [dict(s) for s in TARGET_SPECS]
    specs[-1]["units"] = int(num_classes)
    net = Network.from_specs(input_shape, specs, seed=seed)
    return TargetClassifier(
        net=net,
        num_classes=int(num_classes),
        input_shape=tuple(input_shape),
        frozen=False,
        meta={"seed": int(seed)},
    )


def _batched_logits(net: Network, images: np.ndarray, chunk=256) -> np.ndarray:
    outs = [net.forward(images[i : i + chunk]) for i in range(0, len(images), chunk)]
    return np.concatenate(outs, axis=0)


def classify_batch(tc: TargetClassifier, images: np.ndarray) -> np.ndarray:
    """argmax over logits; ties resolve to the lowest class index."""
    if not tc.frozen:
        raise ValidationError("classify requires a frozen target; train it first")
    return np.argmax(_batched_logits(tc.net, images), axis=1)


def classify(tc: TargetClassifier, image: np.ndarray) -> int:
    return int(classify_batch(tc, image[None])[0])


def accuracy(tc: TargetClassifier, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(classify_batch(tc, images) == labels))


def train_target(tc: TargetClassifier, train_images, train_labels,
                 test_images, test_labels, hyper: TargetHyper):
    """Train with ADAM/cross-entropy, report test accuracy, then freeze.

    Refuses frozen models; a non-finite loss aborts the run.
    """
    if tc.frozen:
        raise ValidationError("target is frozen; training refused")
    rng = np.random.default_rng(hyper.seed)
    params = tc.net.param_dict()
    state = init_adam(params, lr=hyper.learning_rate, decay=1.0, decay_every=1 << 30)
    n = len(train_images)
    losses = []
    for _epoch in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            loss, grads, _ = tc.net.loss_and_grads(
                train_images[idx], train_labels[idx], want_input_grad=False
            )
            if not np.isfinite(loss):
                raise NumericalError("target training diverged: non-finite loss")
            params = adam_step(params, grads, state)
            tc.net.load_param_dict(params)
            losses.append(loss)
    tc.frozen = True
    test_acc = accuracy(tc, test_images, test_labels)
    tc.meta.update(
        {
            "epochs": hyper.epochs,
            "steps": state.step,
            "final_loss": losses[-1] if losses else None,
            "test_accuracy": test_acc,
        }
    )
    return tc, test_acc


def class_logit_gradients(tc: TargetClassifier, image: np.ndarray, class_ids) -> np.ndarray:
    """Input gradient of each requested class logit, one per class id.

    Implemented as a tiled batch with one-hot output gradients; rows are
    independent, so each row's input gradient is the exact per-class value.
    """
    if not tc.frozen:
        raise ValidationError("class_logit_gradients requires a frozen target")
    class_ids = list(class_ids)
    for k in class_ids:
        if not (0 <= int(k) < tc.num_classes):
            raise ValidationError(f"invalid class id {k} for {tc.num_classes} classes")
    batch = np.broadcast_to(image[None], (len(class_ids),) + tuple(image.shape))
    logits, caches = tc.net.forward_cached(np.ascontiguousarray(batch))
    grad_out = np.zeros_like(logits)
    grad_out[np.arange(len(class_ids)), class_ids] = 1.0
    _, grad_in = tc.net.backward(caches, grad_out, want_param_grads=False)
    return grad_in


def logits_and_class_gradients(tc: TargetClassifier, image: np.ndarray, class_ids):
    """(logits of image, per-class input gradients) in one forward pass."""
    if not tc.frozen:
        raise ValidationError("logits_and_class_gradients requires a frozen target")
    class_ids = list(class_ids)
    batch = np.broadcast_to(image[None], (len(class_ids),) + tuple(image.shape))
    logits, caches = tc.net.forward_cached(np.ascontiguousarray(batch))
    grad_out = np.zeros_like(logits)
    grad_out[np.arange(len(class_ids)), class_ids] = 1.0
    _, grad_in = tc.net.backward(caches, grad_out, want_param_grads=False)
    return logits[0], grad_in


def save_target(tc: TargetClassifier, path) -> None:
    meta = dict(tc.meta)
    meta.update(
        {
            "artifact": "target",
            "num_classes": tc.num_classes,
            "input_shape": list(tc.input_shape),
            "frozen": tc.frozen,
        }
    )
    save_network(tc.net, path, meta=meta)


def load_target(path) -> TargetClassifier:
    net, meta = load_network(path)
    if meta.get("artifact") != "target":
        raise ValidationError(f"checkpoint at {path} is not a target classifier")
    return TargetClassifier(
        net=net,
        num_classes=int(meta["num_classes"]),
        input_shape=tuple(meta["input_shape"]),
        frozen=bool(meta.get("frozen", False)),
        meta=meta,
    )
