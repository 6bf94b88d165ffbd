"""Perturbation detector: linear SVM over log-abs 2D-DCT features of the
grayscaled rectifier input-output difference.

The feature map is F(I) = log(|DCT2(gray(I - R(I)))| + eps) flattened
row-major; the DCT is the orthonormal type-II transform. The SVM is trained
by deterministic full-batch subgradient descent on the L2-regularized hinge
loss with tail-averaged iterates; the retained model is the best averaged
iterate, so the recorded objective trace is non-increasing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft

from .data import apply_perturbation
from .errors import ValidationError
from .prn import PRNModel, rectify

LOG_EPS = 1e-10

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)


def gray(image: np.ndarray) -> np.ndarray:
    """Luma grayscale: 0.299 R + 0.587 G + 0.114 B."""
    image = np.asarray(image)
    if image.ndim < 1 or image.shape[-1] != 3:
        raise ValidationError(f"gray expects a 3-channel image, got shape {image.shape}")
    return image.astype(np.float64) @ GRAY_WEIGHTS


def dct2(matrix: np.ndarray) -> np.ndarray:
    """Orthonormal type-II 2D DCT (separable, rows then columns)."""
    return scipy.fft.dctn(np.asarray(matrix, dtype=np.float64), type=2, norm="ortho")


def idct2(matrix: np.ndarray) -> np.ndarray:
    return scipy.fft.idctn(np.asarray(matrix, dtype=np.float64), type=2, norm="ortho")


def feature_extract(prn: PRNModel, images: np.ndarray, eps: float = LOG_EPS) -> np.ndarray:
    """(N, H*W) features from the rectifier input-output difference."""
    single = images.ndim == 3
    batch = images[None] if single else np.asarray(images)
    diff = batch.astype(np.float32) - rectify(prn, batch)
    g = gray(diff)
    spectra = scipy.fft.dctn(g, type=2, norm="ortho", axes=(1, 2))
    feats = np.log(np.abs(spectra) + eps).reshape(len(batch), -1)
    return feats[0] if single else feats


@dataclass
class SvmHyper:
    C: float = 1.0
    iterations: int = 600
    eta0: float = 0.5
    average_tail: float = 0.5   # fraction of iterations joining the average
    eval_every: int = 10
    seed: int = 0


@dataclass
class DetectorModel:
    weights: np.ndarray
    bias: float
    feat_mean: np.ndarray
    feat_std: np.ndarray
    eps: float = LOG_EPS
    prn_fingerprint: str | None = None
    target_fingerprint: str | None = None
    norm_type: str | None = None
    meta: dict = field(default_factory=dict)

    def margin(self, features: np.ndarray) -> np.ndarray:
        x = (features - self.feat_mean) / self.feat_std
        return x @ self.weights + self.bias


def svm_objective(w, b, x, y, lam):
    margins = 1.0 - y * (x @ w + b)
    hinge = np.mean(np.maximum(margins, 0.0))
    return 0.5 * lam * float(w @ w) + float(hinge)


def train_svm(features: np.ndarray, labels: np.ndarray, hyper: SvmHyper = SvmHyper(),
              prn_fingerprint=None, target_fingerprint=None, norm_type=None) -> DetectorModel:
    """Linear SVM on standardized features; labels are 1 = perturbed,
    0 = clean. Deterministic: full-batch subgradient steps with a decaying
    rate, keeping the best tail-averaged iterate."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValidationError("SVM training needs both clean and perturbed examples")
    if not set(classes.tolist()) <= {0, 1}:
        raise ValidationError(f"labels must be 0 (clean) or 1 (perturbed), got {classes}")
    n, d = features.shape
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    x = (features - mean) / std
    y = np.where(labels == 1, 1.0, -1.0)

    lam = 1.0 / (hyper.C * n)
    w = np.zeros(d)
    b = 0.0
    w_sum = np.zeros(d)
    b_sum = 0.0
    avg_count = 0
    tail_start = int(hyper.iterations * (1.0 - hyper.average_tail))
    best = None
    trace = []
    for t in range(1, hyper.iterations + 1):
        margins = 1.0 - y * (x @ w + b)
        viol = margins > 0.0
        if viol.any():
            gw = lam * w - (x[viol].T @ y[viol]) / n
            gb = -float(y[viol].sum()) / n
        else:
            gw = lam * w
            gb = 0.0
        eta = hyper.eta0 / (1.0 + t / 100.0)
        w = w - eta * gw
        b = b - eta * gb
        if t > tail_start:
            w_sum += w
            b_sum += b
            avg_count += 1
        if t % hyper.eval_every == 0 or t == hyper.iterations:
            if avg_count:
                w_eval, b_eval = w_sum / avg_count, b_sum / avg_count
            else:
                w_eval, b_eval = w, b
            obj = svm_objective(w_eval, b_eval, x, y, lam)
            if best is None or obj < best[0]:
                best = (obj, w_eval.copy(), float(b_eval))
            trace.append(best[0])

    obj_final, w_final, b_final = best
    preds = (x @ w_final + b_final) > 0
    train_acc = float(np.mean(preds == (y > 0)))
    return DetectorModel(
        weights=w_final,
        bias=b_final,
        feat_mean=mean,
        feat_std=std,
        eps=LOG_EPS,
        prn_fingerprint=prn_fingerprint,
        target_fingerprint=target_fingerprint,
        norm_type=norm_type,
        meta={
            "objective": obj_final,
            "objective_trace": trace,
            "train_accuracy": train_acc,
            "C": hyper.C,
            "iterations": hyper.iterations,
            "n_train": n,
        },
    )


def detect(det: DetectorModel, prn: PRNModel, image: np.ndarray) -> tuple[bool, float]:
    """(is_perturbed, margin) for one image; the detector and rectifier must
    be a trained pair."""
    if det.prn_fingerprint is not None and det.prn_fingerprint != prn.fingerprint():
        raise ValidationError(
            "detector/rectifier fingerprint mismatch; they were not trained as a pair"
        )
    feats = feature_extract(prn, image, eps=det.eps)
    m = float(det.margin(feats[None])[0])
    return m > 0.0, m


def detect_batch(det: DetectorModel, prn: PRNModel, images: np.ndarray):
    if det.prn_fingerprint is not None and det.prn_fingerprint != prn.fingerprint():
        raise ValidationError(
            "detector/rectifier fingerprint mismatch; they were not trained as a pair"
        )
    feats = feature_extract(prn, images, eps=det.eps)
    margins = det.margin(feats)
    return margins > 0.0, margins


def build_training_features(prn: PRNModel, target, images: np.ndarray, bank,
                            norm_type: str, seed: int, clamp: bool = True):
    """Balanced (equal-probability) clean/perturbed feature set from the
    train-role perturbations."""
    train = bank.group(norm_type, role="train")
    if not train:
        raise ValidationError(f"bank has no train-role {norm_type} perturbations")
    rng = np.random.default_rng(seed)
    perts = np.stack([e.rho for e in train]).astype(np.float32)
    coins = rng.random(len(images)) < 0.5
    picks = rng.integers(0, len(perts), size=len(images))
    batch = np.asarray(images, dtype=np.float32).copy()
    if coins.any():
        batch[coins] = apply_perturbation(batch[coins], perts[picks[coins]], clamp=clamp)
    feats = feature_extract(prn, batch)
    labels = coins.astype(np.int64)
    return feats, labels, [train[p].entry_id for p in picks]


# -- serialization -----------------------------------------------------------


def save_detector(det: DetectorModel, path) -> None:
    doc = {
        "format": "uapdefend-detector-v1",
        "weights": det.weights.tolist(),
        "bias": det.bias,
        "feat_mean": det.feat_mean.tolist(),
        "feat_std": det.feat_std.tolist(),
        "eps": det.eps,
        "prn_fingerprint": det.prn_fingerprint,
        "target_fingerprint": det.target_fingerprint,
        "norm_type": det.norm_type,
        "meta": det.meta,
    }
    Path(path).write_text(json.dumps(doc))


def load_detector(path) -> DetectorModel:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"no detector file at {path}")
    doc = json.loads(path.read_text())
    if doc.get("format") != "uapdefend-detector-v1":
        raise ValidationError(f"unexpected detector format at {path}")
    return DetectorModel(
        weights=np.asarray(doc["weights"], dtype=np.float64),
        bias=float(doc["bias"]),
        feat_mean=np.asarray(doc["feat_mean"], dtype=np.float64),
        feat_std=np.asarray(doc["feat_std"], dtype=np.float64),
        eps=float(doc["eps"]),
        prn_fingerprint=doc.get("prn_fingerprint"),
        target_fingerprint=doc.get("target_fingerprint"),
        norm_type=doc.get("norm_type"),
        meta=doc.get("meta", {}),
    )
