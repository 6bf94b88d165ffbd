"""Procedural 10-class texture dataset for desk-scale runs.

All classes live in a shared spatial-frequency band and differ mostly by
orientation or pattern family, with per-image color, phase, frequency and
noise jitter. A small CNN learns the task well, while the shared band gives
images common vulnerable directions, the regime in which image-agnostic
perturbations exist.

Class map (base frequency ~3.2 cycles per image at 32x32):

    0-5  sine gratings at 0, 30, 60, 90, 120, 150 degrees
    6    concentric rings
    7    checkerboard (cell ~5 px)
    8    plaid (horizontal + vertical gratings)
    9    gaussian blobs
"""

from __future__ import annotations

import numpy as np

from .data import save_container

CLASS_NAMES = [
    "grating_000",
    "grating_030",
    "grating_060",
    "grating_090",
    "grating_120",
    "grating_150",
    "rings",
    "checker",
    "plaid",
    "blobs",
]

_BASE_FREQ = 3.2
_FREQ_JITTER = 0.12
_ANGLE_JITTER = 8.0          # degrees around each grating orientation
_CONTRAST = (35.0, 80.0)     # per-channel pattern amplitude
_NOISE_SIGMA = (2.0, 6.0)    # light pixel noise; heavier noise would train
                             # the classifier into additive-perturbation
                             # robustness and mask the attack surface


def _colors(rng, count, contrast):
    """Base color and contrast amplitude; moderate contrast keeps decision
    margins small relative to the perturbation budget."""
    c1 = rng.uniform(45.0, 205.0, size=(count, 1, 1, 3))
    sign = rng.choice([-1.0, 1.0], size=(count, 1, 1, 3))
    gap = rng.uniform(contrast[0], contrast[1], size=(count, 1, 1, 3))
    c2 = np.clip(c1 + sign * gap, 15.0, 235.0)
    return c1, c2


def _grating(yy, xx, theta_deg, freq, phase):
    t = np.deg2rad(theta_deg)
    coord = xx * np.cos(t) + yy * np.sin(t)
    return np.sin(2 * np.pi * freq * coord + phase)


def _pattern(class_id, rng, count, hw, angle_jitter=_ANGLE_JITTER):
    h, w = hw
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = yy[None] / h
    xx = xx[None] / w
    phase = rng.uniform(0.0, 2 * np.pi, size=(count, 1, 1))
    freq = _BASE_FREQ * (1.0 + rng.uniform(-_FREQ_JITTER, _FREQ_JITTER, size=(count, 1, 1)))

    if class_id in range(6):
        theta = 30.0 * class_id + rng.uniform(-angle_jitter, angle_jitter, size=(count, 1, 1))
        p = _grating(yy, xx, theta, freq, phase)
    elif class_id == 6:
        cy = 0.5 + rng.uniform(-0.2, 0.2, size=(count, 1, 1))
        cx = 0.5 + rng.uniform(-0.2, 0.2, size=(count, 1, 1))
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        p = np.sin(2 * np.pi * freq * r + phase)
    elif class_id == 7:
        cell = h / (2.0 * freq)
        oy = rng.uniform(0.0, 16.0, size=(count, 1, 1))
        ox = rng.uniform(0.0, 16.0, size=(count, 1, 1))
        iy = np.floor((yy * h + oy) / cell)
        ix = np.floor((xx * w + ox) / cell)
        p = np.where((iy + ix) % 2 < 1, 1.0, -1.0)
    elif class_id == 8:
        ph2 = rng.uniform(0.0, 2 * np.pi, size=(count, 1, 1))
        p = 0.5 * (
            _grating(yy, xx, 0.0, freq, phase) + _grating(yy, xx, 90.0, freq, ph2)
        )
    elif class_id == 9:
        p = np.zeros((count, h, w))
        sigma = 0.55 / _BASE_FREQ
        for _ in range(3):
            cy = rng.uniform(0.1, 0.9, size=(count, 1, 1))
            cx = rng.uniform(0.1, 0.9, size=(count, 1, 1))
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            p += np.exp(-d2 / (2 * sigma**2))
        p = np.clip(p, 0.0, 1.0) * 2.0 - 1.0
    else:
        raise ValueError(f"unknown class id {class_id}")
    return 0.5 * (p + 1.0)


def make_class_images(class_id, count, rng, hw=(32, 32)) -> np.ndarray:
    """uint8 NHWC images of one class."""
    c1, c2 = _colors(rng, count)
    p = _pattern(class_id, rng, count, hw)[..., None]
    img = c1 + p * (c2 - c1)
    sigma = rng.uniform(6.0, 12.0, size=(count, 1, 1, 1))
    img = img + rng.standard_normal(img.shape) * sigma
    return np.clip(img, 0.0, 255.0).astype(np.uint8)


def generate_dataset(path, n_per_class=1000, seed=0, hw=(32, 32)) -> None:
    """Generate the container layout at `path` with interleaved classes."""
    rng = np.random.default_rng(np.random.Philox(key=np.uint64(seed)))
    per_class = [
        make_class_images(cid, n_per_class, rng, hw=hw)
        for cid in range(len(CLASS_NAMES))
    ]
    images = np.stack(per_class, axis=1).reshape(
        n_per_class * len(CLASS_NAMES), hw[0], hw[1], 3
    )
    labels = np.tile(np.arange(len(CLASS_NAMES)), n_per_class)
    save_container(path, images, labels, CLASS_NAMES)
