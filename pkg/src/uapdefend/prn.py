"""Rectifier network: pre-input layers trained against the frozen target.

Topology: 3x3/64 same convolution, five identity-skip residual blocks at 64
maps, then 3x3/16 and 3x3/3 same convolutions emitting an image-shaped
output. Training minimizes cross-entropy of the joint network (rectifier
followed by the frozen target) against teacher labels, where the teacher
label is always the target's prediction on the clean image. Only rectifier
parameters are updated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import apply_perturbation
from .errors import NumericalError, ValidationError
from .nnet import Network, adam_step, init_adam, load_network, save_network
from .nnet.layers import softmax_xent
from .target import TargetClassifier, classify_batch

PRN_SPECS = [
    {"kind": "conv_same", "kernel": 3, "stride": 1, "maps": 64},
    {"kind": "residual_block", "kernel": 3, "maps": 64, "repeat": 5},
    {"kind": "conv_same", "kernel": 3, "stride": 1, "maps": 16},
    {"kind": "conv_same", "kernel": 3, "stride": 1, "maps": 3},
]


@dataclass
class PrnHyper:
    learning_rate: float = 0.01
    lr_decay: float = 0.9
    lr_decay_every: int = 1000
    batch_size: int = 64
    epochs: int = 5
    seed: int = 0
    clamp: bool = True


@dataclass
class PRNModel:
    net: Network
    target_fingerprint: str | None = None
    meta: dict = field(default_factory=dict)

    def fingerprint(self) -> str:
        return self.net.fingerprint()


@dataclass
class TrainingPair:
    image: np.ndarray
    teacher_label: int
    was_perturbed: bool
    perturbation_id: str | None


def build_prn(input_shape, seed=0) -> PRNModel:
    h, w, c = input_shape
    if c != 3:
        raise ValidationError(f"rectifier input must have 3 channels, got {c}")
    net = Network.from_specs(input_shape, PRN_SPECS, seed=seed)
    return PRNModel(net=net, meta={"seed": int(seed)})


def rectify(prn: PRNModel, images: np.ndarray, chunk=128) -> np.ndarray:
    """Raw rectifier output (what the classifier consumes, unclamped)."""
    single = images.ndim == 3
    batch = images[None] if single else images
    outs = [prn.net.forward(batch[i : i + chunk]) for i in range(0, len(batch), chunk)]
    out = np.concatenate(outs, axis=0)
    return out[0] if single else out


def rectify_export(prn: PRNModel, images: np.ndarray) -> np.ndarray:
    """Clamped-to-[0,255] copy of the rectified output, for export only."""
    return np.clip(rectify(prn, images), 0.0, 255.0)


def make_training_pair(image: np.ndarray, bank, norm_type: str,
                       rng: np.random.Generator, target: TargetClassifier,
                       clamp: bool = True, teacher_label=None) -> TrainingPair:
    """One training sample: perturbed with probability 0.5 by a uniformly
    chosen train-role perturbation; the teacher label always comes from the
    clean image."""
    train = bank.group(norm_type, role="train")
    if not train:
        raise ValidationError(f"bank has no train-role {norm_type} perturbations")
    if teacher_label is None:
        teacher_label = int(classify_batch(target, image[None])[0])
    if rng.random() < 0.5:
        pick = int(rng.integers(0, len(train)))
        perturbed = apply_perturbation(image, train[pick].rho, clamp=clamp)
        return TrainingPair(perturbed, teacher_label, True, train[pick].entry_id)
    return TrainingPair(image.astype(np.float32), teacher_label, False, None)


def joint_loss_and_prn_grads(prn: PRNModel, target: TargetClassifier,
                             batch: np.ndarray, teacher_labels: np.ndarray):
    """Cross-entropy of target(rectifier(batch)) against teacher labels and
    the gradients for rectifier parameters only. Target parameter gradients
    are never computed."""
    rectified, prn_caches = prn.net.forward_cached(batch)
    logits, tgt_caches = target.net.forward_cached(rectified)
    loss, dlogits = softmax_xent(logits, teacher_labels)
    _, d_rectified = target.net.backward(tgt_caches, dlogits, want_param_grads=False)
    prn_grads, _ = prn.net.backward(prn_caches, d_rectified, want_input_grad=False)
    return loss, prn_grads


def train_prn(prn: PRNModel, target: TargetClassifier, images: np.ndarray,
              bank, norm_type: str, hyper: PrnHyper, log=None) -> PRNModel:
    """Joint training with the frozen target; only rectifier parameters move.

    Aborts if the loss turns non-finite or the target's parameter hash
    changes during the run.
    """
    if not target.frozen:
        raise ValidationError("train_prn requires a frozen target")
    train_entries = bank.group(norm_type, role="train")
    if not train_entries:
        raise ValidationError(f"bank has no train-role {norm_type} perturbations")
    target_hash_before = target.fingerprint()
    images = np.asarray(images, dtype=np.float32)
    perts = np.stack([e.rho for e in train_entries]).astype(np.float32)
    teacher = classify_batch(target, images)

    rng = np.random.default_rng(hyper.seed)
    params = prn.net.param_dict()
    state = init_adam(
        params,
        lr=hyper.learning_rate,
        decay=hyper.lr_decay,
        decay_every=hyper.lr_decay_every,
    )
    n = len(images)
    epoch_losses = []
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        running = []
        for start in range(0, n, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            coins = rng.random(len(idx)) < 0.5
            picks = rng.integers(0, len(perts), size=len(idx))
            batch = images[idx].copy()
            if coins.any():
                batch[coins] = apply_perturbation(
                    batch[coins], perts[picks[coins]], clamp=hyper.clamp
                )
            loss, grads = joint_loss_and_prn_grads(prn, target, batch, teacher[idx])
            if not np.isfinite(loss):
                raise NumericalError("rectifier training diverged: non-finite loss")
            params = adam_step(params, grads, state)
            prn.net.load_param_dict(params)
            running.append(loss)
        epoch_losses.append(float(np.mean(running)) if running else None)
        if log is not None:
            log(f"epoch {epoch + 1}: joint loss {epoch_losses[-1]:.4f}")
    if target.fingerprint() != target_hash_before:
        raise NumericalError("target parameters changed during rectifier training")
    prn.target_fingerprint = target_hash_before
    prn.meta.update(
        {
            "norm_type": norm_type,
            "epochs": hyper.epochs,
            "steps": state.step,
            "epoch_losses": epoch_losses,
            "train_perturbation_ids": [e.entry_id for e in train_entries],
            "clamp": bool(hyper.clamp),
        }
    )
    return prn


def save_prn(prn: PRNModel, path, bank_hash: str | None = None) -> None:
    meta = dict(prn.meta)
    meta.update(
        {
            "artifact": "prn",
            "target_fingerprint": prn.target_fingerprint,
            "bank_hash": bank_hash,
        }
    )
    save_network(prn.net, path, meta=meta)


def load_prn(path) -> PRNModel:
    net, meta = load_network(path)
    if meta.get("artifact") != "prn":
        raise ValidationError(f"checkpoint at {path} is not a rectifier")
    return PRNModel(net=net, target_fingerprint=meta.get("target_fingerprint"), meta=meta)
