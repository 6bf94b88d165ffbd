"""Test protocols, the four defense metrics, and the end-to-end defend path.

Protocol A mixes the whole test split; Protocol B first restricts to the
images the target classifies correctly in clean form. Either way each entry
is independently perturbed with probability 0.5 by a uniformly drawn
test-role perturbation, so both clean and perturbed queries are equally
likely, which is what makes the detector evaluation fair.

Metrics, with acc(.) the target's ground-truth accuracy on a set:

    rectifier gain        (acc(rectified perturbed) - acc(perturbed))
                          / acc(rectified perturbed) * 100
    rectifier restoration acc(everything rectified) / acc(clean) * 100
    detection rate        detector accuracy on the mixed set * 100
    defense rate          acc(rectified only when detected) / acc(clean) * 100
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import apply_perturbation
from .detector import DetectorModel, detect_batch
from .errors import ValidationError
from .prn import PRNModel, rectify
from .target import TargetClassifier, classify_batch
from .util import sha256_array, sha256_json


@dataclass
class ProtocolSet:
    protocol: str                   # "a" | "b"
    seed: int
    clean_images: np.ndarray        # (N, H, W, C) float32
    realized_images: np.ndarray     # clean or perturbed per entry
    gt_labels: np.ndarray           # ground-truth labels
    target_clean_preds: np.ndarray  # target predictions on the clean images
    was_perturbed: np.ndarray       # bool per entry
    perturbation_ids: list          # entry id or None per entry
    test_perturbation_ids: list     # ids of the test-role perturbations used
    norm_type: str

    def content_hash(self) -> str:
        return sha256_json(
            {
                "protocol": self.protocol,
                "seed": self.seed,
                "realized": sha256_array(self.realized_images),
                "perturbed": self.was_perturbed.astype(np.uint8).tolist(),
                "ids": self.perturbation_ids,
            }
        )


@dataclass
class DefenseVerdict:
    detected: bool
    label: int
    used_rectified: bool


@dataclass
class EvalReport:
    prn_gain: float | None
    prn_restoration: float | None
    detection_rate: float | None
    defense_rate: float | None
    undefended_relative: float | None
    protocol: str
    norm_train: str
    norm_test: str
    counts: dict
    undefined_metrics: list
    config_hash: str | None = None
    bank_hash: str | None = None
    fingerprints: dict = field(default_factory=dict)
    seed: int | None = None
    test_perturbation_ids: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "metrics": {
                "prn_gain": self.prn_gain,
                "prn_restoration": self.prn_restoration,
                "detection_rate": self.detection_rate,
                "defense_rate": self.defense_rate,
                "undefended_relative": self.undefended_relative,
            },
            "protocol": self.protocol,
            "norm_train": self.norm_train,
            "norm_test": self.norm_test,
            "counts": self.counts,
            "undefined_metrics": self.undefined_metrics,
            "config_hash": self.config_hash,
            "bank_hash": self.bank_hash,
            "fingerprints": self.fingerprints,
            "seed": self.seed,
            "test_perturbation_ids": self.test_perturbation_ids,
        }


def build_protocol(images: np.ndarray, gt_labels: np.ndarray,
                   target: TargetClassifier, bank, norm_type: str,
                   protocol: str, seed: int, clamp: bool = True) -> ProtocolSet:
    """Assemble a protocol test set from the test split and the bank's
    test-role real perturbations."""
    protocol = protocol.lower()
    if protocol not in ("a", "b"):
        raise ValidationError(f"protocol must be 'a' or 'b', got {protocol!r}")
    test_perts = bank.group(norm_type, origin="real", role="test")
    if not test_perts:
        raise ValidationError(
            f"bank has no test-role real {norm_type} perturbations"
        )
    images = np.asarray(images, dtype=np.float32)
    gt_labels = np.asarray(gt_labels)
    clean_preds = classify_batch(target, images)
    if protocol == "b":
        keep = clean_preds == gt_labels
        if not keep.any():
            raise ValidationError(
                "protocol B is empty: the target classifies no test image correctly"
            )
        images = images[keep]
        gt_labels = gt_labels[keep]
        clean_preds = clean_preds[keep]
    n = len(images)
    rng = np.random.default_rng(seed)
    coins = rng.random(n) < 0.5
    picks = rng.integers(0, len(test_perts), size=n)
    perts = np.stack([e.rho for e in test_perts]).astype(np.float32)
    realized = images.copy()
    if coins.any():
        realized[coins] = apply_perturbation(images[coins], perts[picks[coins]], clamp=clamp)
    ids = [test_perts[p].entry_id if c else None for c, p in zip(coins, picks)]
    return ProtocolSet(
        protocol=protocol,
        seed=int(seed),
        clean_images=images,
        realized_images=realized,
        gt_labels=gt_labels,
        target_clean_preds=clean_preds,
        was_perturbed=coins,
        perturbation_ids=ids,
        test_perturbation_ids=[e.entry_id for e in test_perts],
        norm_type=norm_type,
    )


def defend(image: np.ndarray, det: DetectorModel, prn: PRNModel,
           target: TargetClassifier) -> DefenseVerdict:
    """Detector-gated classification of a single query image."""
    detected, _margin = detect_batch(det, prn, image[None])
    detected = bool(detected[0])
    if detected:
        label = int(classify_batch(target, rectify(prn, image[None]))[0])
    else:
        label = int(classify_batch(target, image[None])[0])
    return DefenseVerdict(detected=detected, label=label, used_rectified=detected)


def _ratio(num: float, den: float, name: str, undefined: list):
    if den == 0.0:
        undefined.append(name)
        return None
    return num / den * 100.0


def metrics(pset: ProtocolSet, prn: PRNModel, det: DetectorModel,
            target: TargetClassifier, norm_train: str | None = None) -> EvalReport:
    """The four defense metrics over a protocol set."""
    if len(pset.gt_labels) == 0:
        raise ValidationError("protocol set is empty")
    gt = pset.gt_labels
    perturbed = pset.was_perturbed

    rectified = rectify(prn, pset.realized_images)
    preds_raw = classify_batch(target, pset.realized_images)
    preds_rect = classify_batch(target, rectified)
    preds_clean = classify_batch(target, pset.clean_images)
    detected, _ = detect_batch(det, prn, pset.realized_images)

    acc_clean = float(np.mean(preds_clean == gt))
    acc_mixed_raw = float(np.mean(preds_raw == gt))
    acc_rect_all = float(np.mean(preds_rect == gt))
    if perturbed.any():
        acc_pert_raw = float(np.mean(preds_raw[perturbed] == gt[perturbed]))
        acc_pert_rect = float(np.mean(preds_rect[perturbed] == gt[perturbed]))
    else:
        acc_pert_raw = acc_pert_rect = 0.0

    final = np.where(detected, preds_rect, preds_raw)
    acc_defended = float(np.mean(final == gt))

    undefined: list = []
    gain = _ratio(acc_pert_rect - acc_pert_raw, acc_pert_rect, "prn_gain", undefined)
    restoration = _ratio(acc_rect_all, acc_clean, "prn_restoration", undefined)
    detection = float(np.mean(detected == perturbed)) * 100.0
    defense = _ratio(acc_defended, acc_clean, "defense_rate", undefined)
    undefended = _ratio(acc_mixed_raw, acc_clean, "undefended_relative", undefined)

    return EvalReport(
        prn_gain=gain,
        prn_restoration=restoration,
        detection_rate=detection,
        defense_rate=defense,
        undefended_relative=undefended,
        protocol=pset.protocol,
        norm_train=norm_train or pset.norm_type,
        norm_test=pset.norm_type,
        counts={
            "entries": int(len(gt)),
            "perturbed": int(perturbed.sum()),
            "clean": int((~perturbed).sum()),
            "acc_clean": acc_clean,
            "acc_perturbed_raw": acc_pert_raw,
            "acc_perturbed_rectified": acc_pert_rect,
            "acc_mixed_raw": acc_mixed_raw,
            "acc_rectified_all": acc_rect_all,
            "acc_defended": acc_defended,
        },
        undefined_metrics=undefined,
        fingerprints={
            "target": target.fingerprint(),
            "prn": prn.fingerprint(),
            "detector_prn": det.prn_fingerprint,
        },
        seed=pset.seed,
        test_perturbation_ids=pset.test_perturbation_ids,
    )


def cross_eval(pset: ProtocolSet, prn: PRNModel, det: DetectorModel,
               target: TargetClassifier, norm_train: str) -> EvalReport:
    """Same metrics with components trained on one norm type and the
    protocol built on the other; the report labels both."""
    return metrics(pset, prn, det, target, norm_train=norm_train)


def save_report(report: EvalReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))


def report_csv(report: EvalReport) -> str:
    """One-row CSV matching the summary-table layout."""
    d = report.to_dict()
    cols = [
        "protocol", "norm_train", "norm_test",
        "prn_gain", "prn_restoration", "detection_rate", "defense_rate",
    ]
    vals = [
        d["protocol"], d["norm_train"], d["norm_test"],
        *(f"{d['metrics'][k]:.1f}" if d["metrics"][k] is not None else "undefined"
          for k in cols[3:]),
    ]
    return ",".join(cols) + "\n" + ",".join(str(v) for v in vals) + "\n"
