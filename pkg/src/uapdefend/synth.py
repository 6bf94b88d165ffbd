"""Synthetic perturbation generation by random walks in the positive
orthant of the span of the real perturbations.

A walk repeatedly adds z * p_hat, with z drawn uniformly from [0, xi] and
p_hat a uniformly chosen l2-normalized real perturbation, until the walk's
norm reaches xi:

* l-inf variant: walk while the l-inf norm is below xi; accept the result
  only if its l2 norm reaches the mean l2 norm of the real set;
* l2 variant: walk while the l2 norm is below xi; accept unconditionally.

Each walk owns a Philox stream keyed by (seed, walk_index), drawing the step
size before the basis index, so traces are reproducible and independent of
scheduling. The accumulated coefficient per basis element is recorded for
the nonnegative-combination audit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .uap import Perturbation, PerturbationBank
from .util import cosine, l2_norm

# Hard cap on walk length; hit only for degenerate inputs (e.g. a basis
# vector of zeros), which should abort rather than spin.
_MAX_STEPS = 1_000_000


@dataclass
class SynthConfig:
    eta: int                 # number of samples to generate
    xi: float                # norm threshold terminating each walk
    norm_type: str           # "l2" | "linf"
    seed: int = 0

    def __post_init__(self):
        if self.eta < 1:
            raise ValidationError(f"eta must be >= 1, got {self.eta}")
        if self.xi <= 0:
            raise ValidationError(f"xi must be positive, got {self.xi}")
        if self.norm_type not in ("l2", "linf"):
            raise ValidationError(f"unknown norm type {self.norm_type!r}")


def walk_rng(seed: int, walk_index: int) -> np.random.Generator:
    """Counter-based stream for one walk: Philox keyed by (seed, index)."""
    key = np.array([seed, walk_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _normalized_basis(perturbations):
    rhos = [np.asarray(p, dtype=np.float32) for p in perturbations]
    if not rhos:
        raise ValidationError("synthetic generation needs a non-empty real set")
    shape = rhos[0].shape
    norms = []
    basis = []
    for r in rhos:
        if r.shape != shape:
            raise ValidationError(
                f"real perturbations must share a shape; got {r.shape} vs {shape}"
            )
        n = l2_norm(r)
        if n == 0.0:
            raise NumericalError("degenerate real perturbation with zero norm")
        norms.append(n)
        basis.append((r.astype(np.float64) / n).astype(np.float32))
    return basis, float(np.mean(norms))


def _one_walk(basis, xi, mode, rng):
    rho = np.zeros_like(basis[0])
    coeffs = np.zeros(len(basis), dtype=np.float64)
    steps = 0
    while True:
        norm = float(np.max(np.abs(rho))) if mode == "linf" else l2_norm(rho)
        if norm >= xi:
            break
        if steps >= _MAX_STEPS:
            raise NumericalError("synthetic walk failed to terminate (degenerate basis)")
        z = np.float32(rng.uniform(0.0, 1.0) * xi)
        i = int(rng.integers(0, len(basis)))
        rho = rho + z * basis[i]
        coeffs[i] += float(z)
        steps += 1
    return rho, coeffs, steps


def _generate(perturbations, cfg: SynthConfig, mode: str):
    basis, l2_threshold = _normalized_basis(perturbations)
    out = []
    walk_index = 0
    attempts = 0
    while len(out) < cfg.eta:
        if attempts >= 1000 * (len(out) + 1):
            raise NumericalError(
                f"synthetic acceptance rate below 1/1000 "
                f"({len(out)} accepted in {attempts} attempts); degenerate real set"
            )
        rng = walk_rng(cfg.seed, walk_index)
        rho, coeffs, steps = _one_walk(basis, cfg.xi, mode, rng)
        accepted = mode == "l2" or l2_norm(rho) >= l2_threshold
        if accepted:
            out.append(
                Perturbation(
                    rho=rho,
                    norm_type=cfg.norm_type,
                    xi=float(cfg.xi),
                    delta_measured=None,
                    origin="synthetic",
                    seed=int(cfg.seed),
                    role="train",
                    meta={
                        "walk_index": walk_index,
                        "steps": steps,
                        "l2_threshold": l2_threshold,
                        "prng": "philox keyed by (seed, walk_index)",
                    },
                    coeffs=[float(c) for c in coeffs],
                )
            )
        walk_index += 1
        attempts += 1
    return out


def synth_linf(perturbations, cfg: SynthConfig):
    """l-inf walk with the mean-l2 acceptance threshold."""
    if cfg.norm_type != "linf":
        raise ValidationError("synth_linf requires cfg.norm_type == 'linf'")
    return _generate(perturbations, cfg, "linf")


def synth_l2(perturbations, cfg: SynthConfig):
    """l2 walk; every terminated walk is selected directly."""
    if cfg.norm_type != "l2":
        raise ValidationError("synth_l2 requires cfg.norm_type == 'l2'")
    return _generate(perturbations, cfg, "l2")


def nearest_match(rho_s: np.ndarray, perturbations) -> tuple[int, float]:
    """Index and normalized dot of the closest real perturbation; ties go
    to the lowest index."""
    if len(perturbations) == 0:
        raise ValidationError("nearest_match: empty real set")
    sims = np.array([cosine(rho_s, p) for p in perturbations])
    idx = int(np.argmax(sims))
    return idx, float(sims[idx])


def extend_bank(bank: PerturbationBank, synthetic) -> PerturbationBank:
    """Append synthetic perturbations as train-only entries."""
    if not synthetic:
        return bank
    shape = bank.entries[0].rho.shape if bank.entries else synthetic[0].rho.shape
    for s in synthetic:
        if s.origin != "synthetic":
            raise ValidationError("extend_bank only accepts synthetic entries")
        if s.role == "test":
            raise ValidationError("synthetic perturbations cannot take the test role")
        if s.rho.shape != shape:
            raise ValidationError(
                f"synthetic shape {s.rho.shape} does not match bank shape {shape}"
            )
        s.role = "train"
        bank.entries.append(s)
    return bank
