"""Dataset ingestion, splits, crops and the norm statistics behind the
perturbation budget.

Two on-disk layouts are supported:

* a directory per class containing PNG images, class ids assigned by sorted
  directory name;
* a container: ``index.json`` (shape, labels, class names, payload checksum)
  next to ``images.bin`` holding raw uint8 pixels in NHWC order.

Images are handled as float32 in the pixel domain [0, 255] throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .util import sha256_bytes

SPLIT_NAMES = ("target_train", "uap_train", "defense_train", "test")

DATASET_FORMAT = "uapdefend-dataset-v1"


@dataclass
class NormStats:
    mean_l2: float
    mean_linf: float

    def __post_init__(self):
        if not (self.mean_l2 > 0 and self.mean_linf > 0):
            raise ValidationError("norm statistics must be strictly positive")


@dataclass
class LabeledDataset:
    images: np.ndarray              # (N, H, W, C) float32, pixel domain [0, 255]
    labels: np.ndarray              # (N,) int64 in [0, num_classes)
    num_classes: int
    splits: dict = field(default_factory=dict)   # split name -> index array
    class_names: list | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValidationError(f"images must be NHWC, got shape {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ValidationError("labels and images length mismatch")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValidationError(
                f"labels must lie in [0, {self.num_classes}), got "
                f"range [{self.labels.min()}, {self.labels.max()}]"
            )
        seen = set()
        for name, idx in self.splits.items():
            overlap = seen & set(int(i) for i in idx)
            if overlap:
                raise ValidationError(f"split {name} overlaps another split")
            seen.update(int(i) for i in idx)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def split(self, name: str):
        """(images, labels) views for a named split."""
        if name not in self.splits:
            raise ValidationError(f"unknown split {name!r}; have {sorted(self.splits)}")
        idx = self.splits[name]
        return self.images[idx], self.labels[idx]


def split_sizes(n: int, fractions) -> list[int]:
    """Partition n items by fractions using cumulative rounding, so the
    sizes sum to n exactly and (0.4, 0.2, 0.2, 0.2) of 100 gives
    (40, 20, 20, 20)."""
    fr = np.asarray(fractions, dtype=np.float64)
    if np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValidationError(f"split fractions must be >= 0 and sum to 1, got {fractions}")
    bounds = np.rint(np.cumsum(fr) * n).astype(int)
    sizes = np.diff(np.concatenate([[0], bounds]))
    return [int(s) for s in sizes]


def assign_splits(n: int, fractions, seed: int) -> dict:
    """Seeded random permutation partitioned into the four pipeline splits."""
    if len(fractions) != len(SPLIT_NAMES):
        raise ValidationError(
            f"expected {len(SPLIT_NAMES)} split fractions {SPLIT_NAMES}, got {fractions}"
        )
    sizes = split_sizes(n, fractions)
    perm = np.random.default_rng(seed).permutation(n)
    splits = {}
    start = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        splits[name] = np.sort(perm[start : start + size])
        start += size
    return splits


def _load_container(root: Path):
    index = json.loads((root / "index.json").read_text())
    if index.get("format") != DATASET_FORMAT:
        raise ValidationError(f"unexpected dataset format in {root / 'index.json'}")
    payload_path = root / index["payload"]
    if not payload_path.exists():
        raise ValidationError(f"dataset payload missing: {payload_path}")
    payload = payload_path.read_bytes()
    if sha256_bytes(payload) != index["sha256"]:
        raise ValidationError(f"dataset payload corrupted (checksum): {payload_path}")
    h, w, c = index["shape"]
    n = index["count"]
    if len(payload) != n * h * w * c:
        raise ValidationError(f"dataset payload corrupted (size): {payload_path}")
    images = np.frombuffer(payload, dtype=np.uint8).reshape(n, h, w, c).astype(np.float32)
    labels = np.asarray(index["labels"], dtype=np.int64)
    return images, labels, index.get("classes")


def _load_png_tree(root: Path):
    from PIL import Image

    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ValidationError(f"no class directories under {root}")
    images, labels = [], []
    shape = None
    for class_id, cdir in enumerate(class_dirs):
        files = sorted(cdir.glob("*.png"))
        for f in files:
            try:
                arr = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32)
            except Exception as exc:
                raise ValidationError(f"unreadable image {f}: {exc}") from exc
            if shape is None:
                shape = arr.shape
            elif arr.shape != shape:
                raise ValidationError(
                    f"ragged dataset: {f} has shape {arr.shape}, expected {shape}"
                )
            images.append(arr)
            labels.append(class_id)
    if not images:
        raise ValidationError(f"empty dataset: no PNG files under {root}")
    return (
        np.stack(images),
        np.asarray(labels, dtype=np.int64),
        [d.name for d in class_dirs],
    )


def load_dataset(source_path, split_fractions=(0.4, 0.2, 0.2, 0.2), seed=0) -> LabeledDataset:
    """Load either supported layout and assign the four pipeline splits.

    Ordering and split assignment are deterministic given the seed.
    """
    root = Path(source_path)
    if not root.exists():
        raise ValidationError(f"dataset path does not exist: {root}")
    if (root / "index.json").exists():
        images, labels, class_names = _load_container(root)
    else:
        images, labels, class_names = _load_png_tree(root)
    if len(images) == 0:
        raise ValidationError(f"empty dataset at {root}")
    num_classes = int(labels.max()) + 1 if class_names is None else len(class_names)
    splits = assign_splits(len(images), split_fractions, seed)
    return LabeledDataset(
        images=images,
        labels=labels,
        num_classes=num_classes,
        splits=splits,
        class_names=class_names,
    )


def save_container(path, images_u8: np.ndarray, labels, class_names) -> None:
    """Write the container layout (index.json + raw uint8 payload)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if images_u8.dtype != np.uint8:
        raise ValidationError("container payload must be uint8")
    payload = np.ascontiguousarray(images_u8).tobytes()
    (path / "images.bin").write_bytes(payload)
    index = {
        "format": DATASET_FORMAT,
        "shape": list(images_u8.shape[1:]),
        "count": int(images_u8.shape[0]),
        "dtype": "uint8",
        "labels": [int(l) for l in labels],
        "classes": list(class_names),
        "payload": "images.bin",
        "sha256": sha256_bytes(payload),
    }
    (path / "index.json").write_text(json.dumps(index))


def corner_crops(image: np.ndarray, crop_hw) -> list:
    """Four corner crops plus the center crop, each crop_hw x C."""
    ch, cw = crop_hw
    h, w = image.shape[0], image.shape[1]
    if ch > h or cw > w:
        raise ValidationError(f"crop {crop_hw} larger than image {h}x{w}")
    oy, ox = (h - ch) // 2, (w - cw) // 2
    return [
        image[:ch, :cw],
        image[:ch, w - cw :],
        image[h - ch :, :cw],
        image[h - ch :, w - cw :],
        image[oy : oy + ch, ox : ox + cw],
    ]


def norm_stats(images: np.ndarray) -> NormStats:
    """Means of the per-image l2 and l-inf norms over a split."""
    if len(images) == 0:
        raise ValidationError("norm_stats: empty split")
    flat = images.reshape(len(images), -1).astype(np.float64)
    return NormStats(
        mean_l2=float(np.mean(np.linalg.norm(flat, axis=1))),
        mean_linf=float(np.mean(np.max(np.abs(flat), axis=1))),
    )


def xi_for(norm_type: str, stats: NormStats, fraction: float = 0.04) -> float:
    """Perturbation budget as a fraction of the mean image norm."""
    if norm_type == "l2":
        return fraction * stats.mean_l2
    if norm_type == "linf":
        return fraction * stats.mean_linf
    raise ValidationError(f"unknown norm type {norm_type!r}")


def apply_perturbation(images: np.ndarray, rho: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Perturbed-image construction; clamping to [0, 255] is configurable."""
    out = images.astype(np.float32) + rho.astype(np.float32)
    if clamp:
        np.clip(out, 0.0, 255.0, out=out)
    return out
