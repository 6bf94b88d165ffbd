"""Universal perturbation generation and the perturbation bank.

The outer loop walks the generation images in a seeded shuffle; every image
whose prediction is still unchanged under the current perturbation gets a
minimal-norm fooling vector (iterative linearization over the top competing
classes) added, followed by Euclidean back-projection onto the configured
lp ball. The outer loop re-measures the fooling ratio once per full pass and
stops when the target ratio is reached.

Accepted perturbations are kept mutually diverse (normalized dot bounded)
and split into disjoint train/test roles.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import apply_perturbation
from .errors import ValidationError
from .target import (
    TargetClassifier,
    classify,
    classify_batch,
    logits_and_class_gradients,
)
from .util import cosine, sha256_bytes, vector_norm

NORM_TYPES = ("l2", "linf")

BANK_FORMAT = "uapdefend-bank-v1"

# Relative margin applied before float32 storage so that quantized payloads
# still satisfy the budget check on reload.
STORAGE_MARGIN = 1e-6


@dataclass
class InnerSolverParams:
    max_iter: int = 50
    overshoot: float = 0.02
    top_k: int = 10


@dataclass
class Perturbation:
    rho: np.ndarray                 # image-shaped float32
    norm_type: str                  # "l2" | "linf"
    xi: float
    delta_measured: float | None    # None for unscreened synthetic entries
    origin: str                     # "real" | "synthetic"
    seed: int
    role: str | None = None         # "train" | "test" | None
    meta: dict = field(default_factory=dict)
    coeffs: list | None = None      # synthetic walk coefficient trace

    @property
    def entry_id(self) -> str:
        return sha256_bytes(np.ascontiguousarray(self.rho, dtype="<f4").tobytes())

    def norm(self) -> float:
        return vector_norm(self.rho, self.norm_type)


@dataclass
class PerturbationBank:
    entries: list
    target_fingerprint: str
    delta_target: float
    diversity_bound: float = 0.15
    meta: dict = field(default_factory=dict)

    def group(self, norm_type: str, origin=None, role=None) -> list:
        out = []
        for e in self.entries:
            if e.norm_type != norm_type:
                continue
            if origin is not None and e.origin != origin:
                continue
            if role is not None and e.role != role:
                continue
            out.append(e)
        return out

    def validate(self) -> None:
        """Re-checks every bank invariant (budget, diversity, fooling ratio
        floor, role rules) against the stored payloads."""
        for e in self.entries:
            if e.norm_type not in NORM_TYPES:
                raise ValidationError(f"bank entry has unknown norm type {e.norm_type!r}")
            if e.origin == "real":
                if e.norm() > e.xi + 1e-6:
                    raise ValidationError(
                        f"bank entry {e.entry_id[:12]} violates budget: "
                        f"|rho|_{e.norm_type} = {e.norm():.8g} > xi = {e.xi:.8g}"
                    )
                if e.delta_measured is None or e.delta_measured < self.delta_target:
                    raise ValidationError(
                        f"real bank entry {e.entry_id[:12]} below the fooling "
                        f"ratio target {self.delta_target}"
                    )
            else:
                # Synthetic walks terminate at norm >= xi with overshoot
                # bounded by one step: xi <= norm < 2 * xi.
                if not (e.xi <= e.norm() < 2.0 * e.xi):
                    raise ValidationError(
                        f"synthetic bank entry {e.entry_id[:12]} outside walk "
                        f"bounds: |rho|_{e.norm_type} = {e.norm():.8g}, xi = {e.xi:.8g}"
                    )
            if e.origin == "synthetic" and e.role == "test":
                raise ValidationError("synthetic perturbations cannot take the test role")
        for norm_type in NORM_TYPES:
            reals = self.group(norm_type, origin="real")
            for i in range(len(reals)):
                for j in range(i + 1, len(reals)):
                    d = cosine(reals[i].rho, reals[j].rho)
                    if d > self.diversity_bound + 1e-6:
                        raise ValidationError(
                            f"bank diversity violated for {norm_type}: "
                            f"normalized dot {d:.4f} > {self.diversity_bound}"
                        )


def project_lp(v: np.ndarray, xi: float, norm_type: str) -> np.ndarray:
    """Euclidean projection onto the lp ball of radius xi (p in {2, inf}).

    Computed in float64. Idempotent exactly: vectors already inside the ball
    (up to a few ulp of radius measurement) are returned unchanged.
    """
    if xi <= 0:
        raise ValidationError(f"projection radius must be positive, got {xi}")
    v = np.asarray(v, dtype=np.float64)
    if norm_type == "l2":
        n = float(np.linalg.norm(v.ravel()))
        if n <= xi * (1.0 + 4e-16):
            return v.copy()
        return v * (xi / n)
    if norm_type == "linf":
        return np.clip(v, -xi, xi)
    raise ValidationError(f"unknown norm type {norm_type!r}")


def min_fooling_vector(tc: TargetClassifier, image: np.ndarray,
                       params: InnerSolverParams = InnerSolverParams(),
                       rng_unused=None):
    """Minimal-norm vector that flips the prediction on one image.

    Iterative linearization over the top competing classes (ranked once at
    the starting point); the accumulated vector is scaled by (1 + overshoot)
    to cross the boundary, and that scaled vector is what gets verified and
    returned. Returns None when the solver fails to flip the label within
    max_iter iterations.
    """
    if not tc.frozen:
        raise ValidationError("min_fooling_vector requires a frozen target")
    x = np.asarray(image, dtype=np.float32)
    logits0, _ = logits_and_class_gradients(tc, x, [0])
    orig = int(np.argmax(logits0))
    ranked = np.argsort(-logits0, kind="stable")
    competitors = [int(k) for k in ranked if int(k) != orig][: max(params.top_k - 1, 1)]

    r_total = np.zeros_like(x, dtype=np.float64)
    overshoot = 1.0 + params.overshoot
    for _ in range(params.max_iter):
        x_adv = (x + overshoot * r_total).astype(np.float32)
        logits, grads = logits_and_class_gradients(tc, x_adv, [orig] + competitors)
        if int(np.argmax(logits)) != orig:
            return (overshoot * r_total).astype(np.float32)
        g = grads.astype(np.float64)
        w = g[1:] - g[0]
        f = logits[competitors].astype(np.float64) - float(logits[orig])
        w_norms = np.sqrt(np.sum(w.reshape(len(w), -1) ** 2, axis=1))
        scores = np.abs(f) / np.maximum(w_norms, 1e-12)
        best = int(np.argmin(scores))
        if w_norms[best] < 1e-12:
            return None
        step = (np.abs(f[best]) + 1e-4) / (w_norms[best] ** 2)
        r_total += step * w[best]
    x_adv = (x + overshoot * r_total).astype(np.float32)
    if classify(tc, x_adv) != orig:
        return (overshoot * r_total).astype(np.float32)
    return None


def fooling_ratio(tc: TargetClassifier, images: np.ndarray, rho: np.ndarray,
                  clamp: bool = True, clean_labels=None) -> float:
    """Fraction of images whose predicted label changes when rho is added."""
    if len(images) == 0:
        raise ValidationError("fooling_ratio: empty image set")
    if clean_labels is None:
        clean_labels = classify_batch(tc, images)
    pert_labels = classify_batch(tc, apply_perturbation(images, rho, clamp=clamp))
    return float(np.mean(pert_labels != clean_labels))


def compute_uap(tc: TargetClassifier, images: np.ndarray, norm_type: str,
                xi: float, delta_target: float, max_epochs: int = 20,
                seed: int = 0, inner: InnerSolverParams = InnerSolverParams(),
                clamp: bool = True, log=None) -> Perturbation:
    """Iterative universal-perturbation computation on a generation set.

    Deterministic given the seed: the shuffle order is the only randomness.
    The returned perturbation carries its measured fooling ratio; if the
    target ratio is not reached within max_epochs the perturbation is
    returned with converged=False in its metadata.
    """
    if not (0.0 < delta_target <= 1.0):
        raise ValidationError(f"delta target must be in (0, 1], got {delta_target}")
    if norm_type not in NORM_TYPES:
        raise ValidationError(f"unknown norm type {norm_type!r}")
    images = np.asarray(images, dtype=np.float32)
    n = len(images)
    if n == 0:
        raise ValidationError("compute_uap: empty generation set")
    rng = np.random.default_rng(seed)
    clean_labels = classify_batch(tc, images)
    # Slightly shrunken projection radius keeps the float32-stored payload
    # inside the budget check on reload.
    xi_gen = xi * (1.0 - STORAGE_MARGIN)
    rho = np.zeros(images.shape[1:], dtype=np.float32)
    delta = 0.0
    epochs_used = 0
    images_seen = 0
    solved = 0
    for epoch in range(max_epochs):
        order = rng.permutation(n)
        for idx in order:
            images_seen += 1
            xp = apply_perturbation(images[idx], rho, clamp=clamp)
            if classify(tc, xp) != clean_labels[idx]:
                continue
            dv = min_fooling_vector(tc, xp, params=inner)
            if dv is None:
                continue
            solved += 1
            rho = project_lp(
                rho.astype(np.float64) + dv.astype(np.float64), xi_gen, norm_type
            ).astype(np.float32)
        epochs_used = epoch + 1
        delta = fooling_ratio(tc, images, rho, clamp=clamp, clean_labels=clean_labels)
        if log is not None:
            log(f"epoch {epochs_used}: fooling ratio {delta:.3f}")
        if delta >= delta_target:
            break
    return Perturbation(
        rho=rho,
        norm_type=norm_type,
        xi=float(xi),
        delta_measured=float(delta),
        origin="real",
        seed=int(seed),
        meta={
            "epochs_used": epochs_used,
            "images_seen": images_seen,
            "inner_solved": solved,
            "converged": bool(delta >= delta_target),
            "delta_target": float(delta_target),
            "overshoot": inner.overshoot,
            "max_iter": inner.max_iter,
            "top_k": inner.top_k,
            "clamp": bool(clamp),
            "generation_set_size": int(n),
        },
    )


def diverse_subset(candidates: list, accepted: list, bound: float) -> list:
    """Filter candidates (in order) against accepted + earlier picks."""
    kept = []
    for cand in candidates:
        pool = [e for e in accepted + kept if e.norm_type == cand.norm_type]
        if all(cosine(cand.rho, e.rho) <= bound + 1e-6 for e in pool):
            kept.append(cand)
    return kept


def assign_roles(entries: list, train_count: int, test_count: int, seed: int) -> None:
    """Random disjoint train/test role assignment within a norm-type group."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(entries))
    for pos, idx in enumerate(order):
        entries[idx].role = "test" if pos < test_count else "train"


def build_bank(tc: TargetClassifier, images: np.ndarray, xi_by_type: dict,
               delta_target: float = 0.8, train_count: int = 8,
               test_count: int = 2, diversity_bound: float = 0.15,
               max_epochs: int = 20, seed: int = 0,
               inner: InnerSolverParams = InnerSolverParams(),
               clamp: bool = True, attempt_factor: int = 3,
               norm_types=NORM_TYPES, workers: int = 1, log=None) -> PerturbationBank:
    """Generate a diverse bank of real perturbations for each norm type.

    Candidates get distinct derived seeds (shuffle order differs per
    attempt); non-converged candidates and candidates too similar to an
    accepted entry are rejected. Candidate generation may run in parallel
    processes; results are identical to the sequential order because
    acceptance always walks candidates by attempt index.
    """
    count = train_count + test_count
    bank = PerturbationBank(
        entries=[],
        target_fingerprint=tc.fingerprint(),
        delta_target=float(delta_target),
        diversity_bound=float(diversity_bound),
    )
    for norm_type in norm_types:
        xi = float(xi_by_type[norm_type])
        accepted: list = []
        attempts = 0
        budget = attempt_factor * count
        while len(accepted) < count and attempts < budget:
            wave = min(max(workers, 1), budget - attempts, count - len(accepted) + 1)
            cand_seeds = [seed + 7919 * (attempts + i) for i in range(wave)]
            candidates = _generate_candidates(
                tc, images, norm_type, xi, delta_target, max_epochs,
                cand_seeds, inner, clamp, workers, log,
            )
            attempts += wave
            converged = [c for c in candidates if c.meta["converged"]]
            accepted.extend(
                diverse_subset(converged, accepted, diversity_bound)[: count - len(accepted)]
            )
        if len(accepted) < count:
            warnings.warn(
                f"bank for {norm_type}: only {len(accepted)}/{count} diverse "
                f"perturbations within {budget} attempts"
            )
        n_test = min(test_count, max(len(accepted) - 1, 0))
        assign_roles(accepted, len(accepted) - n_test, n_test, seed=seed + 31)
        bank.entries.extend(accepted)
    bank.meta = {
        "train_count": train_count,
        "test_count": test_count,
        "seed": int(seed),
        "clamp": bool(clamp),
    }
    bank.validate()
    return bank


def _generate_candidates(tc, images, norm_type, xi, delta_target, max_epochs,
                         seeds, inner, clamp, workers, log):
    if workers <= 1 or len(seeds) == 1:
        out = []
        for s in seeds:
            if log is not None:
                log(f"generating {norm_type} candidate seed={s}")
            out.append(
                compute_uap(tc, images, norm_type, xi, delta_target,
                            max_epochs=max_epochs, seed=s, inner=inner,
                            clamp=clamp)
            )
        return out
    from . import parallel

    return parallel.compute_uaps(
        tc, images, norm_type, xi, delta_target, max_epochs, seeds, inner,
        clamp, workers, log,
    )


# -- bank serialization ------------------------------------------------------


def save_bank(bank: PerturbationBank, path) -> str:
    """Write manifest + per-entry float32 payloads; returns the bank hash."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, e in enumerate(bank.entries):
        payload = np.ascontiguousarray(e.rho, dtype="<f4").tobytes()
        fname = f"rho_{i:03d}.bin"
        (path / fname).write_bytes(payload)
        entries.append(
            {
                "id": e.entry_id,
                "norm_type": e.norm_type,
                "xi": e.xi,
                "delta_measured": e.delta_measured,
                "origin": e.origin,
                "seed": e.seed,
                "role": e.role,
                "meta": e.meta,
                "coeffs": e.coeffs,
                "shape": list(e.rho.shape),
                "dtype": "<f4",
                "file": fname,
                "sha256": sha256_bytes(payload),
            }
        )
    manifest = {
        "format": BANK_FORMAT,
        "target_fingerprint": bank.target_fingerprint,
        "delta_target": bank.delta_target,
        "diversity_bound": bank.diversity_bound,
        "meta": bank.meta,
        "entries": entries,
    }
    text = json.dumps(manifest, indent=1, sort_keys=True)
    (path / "manifest.json").write_text(text)
    return sha256_bytes(text.encode("utf-8"))


def bank_hash(path) -> str:
    return sha256_bytes((Path(path) / "manifest.json").read_bytes())


def load_bank(path, validate: bool = True) -> PerturbationBank:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise ValidationError(f"no bank manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != BANK_FORMAT:
        raise ValidationError(f"unexpected bank format at {mpath}")
    entries = []
    for spec in manifest["entries"]:
        payload = (path / spec["file"]).read_bytes()
        if sha256_bytes(payload) != spec["sha256"]:
            raise ValidationError(f"bank payload corrupted: {path / spec['file']}")
        rho = np.frombuffer(payload, dtype="<f4").reshape(spec["shape"]).copy()
        entries.append(
            Perturbation(
                rho=rho,
                norm_type=spec["norm_type"],
                xi=spec["xi"],
                delta_measured=spec["delta_measured"],
                origin=spec["origin"],
                seed=spec["seed"],
                role=spec["role"],
                meta=spec["meta"],
                coeffs=spec.get("coeffs"),
            )
        )
    bank = PerturbationBank(
        entries=entries,
        target_fingerprint=manifest["target_fingerprint"],
        delta_target=manifest["delta_target"],
        diversity_bound=manifest["diversity_bound"],
        meta=manifest.get("meta", {}),
    )
    if validate:
        bank.validate()
    return bank
