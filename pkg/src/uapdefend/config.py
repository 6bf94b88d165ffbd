"""Declarative run configuration: one flat JSON file drives every stage.

Every downstream module reads its hyperparameters from this config, and the
config hash is stamped into every artifact manifest, so any artifact is
reproducible from (config, seed) alone.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ValidationError
from .util import derive_seed, sha256_json

NORM_TYPES = ("l2", "linf")


@dataclass
class RunConfig:
    # data
    data_root: str = "data"
    artifacts_dir: str = "artifacts"
    image_shape: list = field(default_factory=lambda: [32, 32, 3])
    num_classes: int = 10
    split_fractions: list = field(default_factory=lambda: [0.4, 0.2, 0.2, 0.2])
    corner_crop_size: int | None = None   # default off below 64x64 inputs
    clamp: bool = True
    # seeds
    seed: int = 0
    # perturbation budget: fraction of the mean image norm, or explicit values
    xi_rule: str = "relative"             # "relative" | "absolute"
    xi_fraction: float = 0.04
    xi_l2: float | None = None
    xi_linf: float | None = None
    # universal perturbation generation
    delta_target: float = 0.8
    uap_max_epochs: int = 20
    inner_max_iter: int = 50
    inner_overshoot: float = 0.02
    inner_top_k: int = 10
    bank_train_count: int = 8
    bank_test_count: int = 2
    diversity_bound: float = 0.15
    attempt_factor: int = 3
    workers: int = 1
    # synthetic extension
    synth_count: int = 42
    # target training
    target_epochs: int = 12
    target_lr: float = 1e-3
    target_batch: int = 64
    # rectifier training
    prn_epochs: int = 5
    prn_lr: float = 0.01
    prn_lr_decay: float = 0.9
    prn_lr_decay_every: int = 1000
    prn_batch: int = 64
    # detector training
    svm_c: float = 1.0
    svm_iterations: int = 600
    svm_eta0: float = 0.5

    def __post_init__(self):
        if self.xi_rule not in ("relative", "absolute"):
            raise ValidationError(f"xi_rule must be relative/absolute, got {self.xi_rule!r}")
        if self.xi_rule == "absolute" and (self.xi_l2 is None or self.xi_linf is None):
            raise ValidationError("absolute xi_rule requires xi_l2 and xi_linf")
        if not (0.0 < self.delta_target <= 1.0):
            raise ValidationError(f"delta_target must be in (0, 1], got {self.delta_target}")
        if len(self.split_fractions) != 4:
            raise ValidationError("split_fractions must list 4 values")
        if self.bank_train_count < 1 or self.bank_test_count < 1:
            raise ValidationError("bank needs at least one train and one test perturbation")

    # -- derived -------------------------------------------------------------

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def config_hash(self) -> str:
        return sha256_json(asdict(self))

    # -- io -------------------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config file {path} is not valid JSON: {exc}") from exc
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())
