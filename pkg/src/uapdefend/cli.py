"""Command-line entry point orchestrating the pipeline stages.

Commands: train-target, gen-uap, gen-synth, train-prn, train-detector,
evaluate, defend, full-pipeline. Each command validates the artifacts it
depends on (by manifest hash / fingerprint) before running and names the
producing command when something is missing.

Exit codes: 0 success, 2 validation failure, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import detector as det_mod
from . import evaluation as eval_mod
from . import prn as prn_mod
from . import synth as synth_mod
from . import target as target_mod
from . import uap as uap_mod
from .config import NORM_TYPES, RunConfig
from .errors import NumericalError, ValidationError
from .util import sha256_json

COMMANDS = (
    "train-target",
    "gen-uap",
    "gen-synth",
    "train-prn",
    "train-detector",
    "evaluate",
    "defend",
    "full-pipeline",
)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


class Pipeline:
    """Stage runner bound to one config and its artifact directory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.artifacts = Path(cfg.artifacts_dir)
        self.artifacts.mkdir(parents=True, exist_ok=True)
        self._dataset = None

    # -- artifact paths -------------------------------------------------------

    def target_path(self) -> Path:
        return self.artifacts / "target"

    def bank_path(self) -> Path:
        return self.artifacts / "bank"

    def prn_path(self, norm: str) -> Path:
        return self.artifacts / f"prn_{norm}"

    def detector_path(self, norm: str) -> Path:
        return self.artifacts / f"detector_{norm}.json"

    def report_path(self, norm_test: str, protocol: str, norm_train: str) -> Path:
        name = f"report_{norm_test}_prot{protocol}"
        if norm_train != norm_test:
            name += f"_train-{norm_train}"
        return self.artifacts / "reports" / f"{name}.json"

    # -- inputs ----------------------------------------------------------------

    def dataset(self):
        if self._dataset is None:
            self._dataset = data_mod.load_dataset(
                self.cfg.data_root,
                split_fractions=self.cfg.split_fractions,
                seed=self.cfg.stage_seed("data"),
            )
        return self._dataset

    def xi_by_type(self) -> dict:
        if self.cfg.xi_rule == "absolute":
            return {"l2": float(self.cfg.xi_l2), "linf": float(self.cfg.xi_linf)}
        images, _ = self.dataset().split("uap_train")
        stats = data_mod.norm_stats(images)
        return {
            nt: data_mod.xi_for(nt, stats, self.cfg.xi_fraction) for nt in NORM_TYPES
        }

    # -- artifact loading with dependency messages -----------------------------

    def load_target(self):
        path = self.target_path()
        if not (path / "manifest.json").exists():
            raise ValidationError(
                f"no trained target at {path}; run train-target first"
            )
        tc = target_mod.load_target(path)
        if tc.meta.get("config_hash") not in (None, self.cfg.config_hash()):
            raise ValidationError(
                f"target at {path} was trained under a different config; "
                f"re-run train-target"
            )
        return tc

    def load_bank(self, need_synth=False, norm=None):
        path = self.bank_path()
        if not (path / "manifest.json").exists():
            raise ValidationError(f"no perturbation bank at {path}; run gen-uap first")
        bank = uap_mod.load_bank(path)
        tc_fp = self.load_target().fingerprint()
        if bank.target_fingerprint != tc_fp:
            raise ValidationError(
                "bank was generated against a different target; re-run gen-uap"
            )
        norms = [norm] if norm else list(NORM_TYPES)
        for nt in norms:
            if need_synth and not bank.group(nt, origin="synthetic"):
                raise ValidationError(
                    f"bank has no synthetic {nt} perturbations; run gen-synth first"
                )
        return bank

    def load_prn(self, norm: str):
        path = self.prn_path(norm)
        if not (path / "manifest.json").exists():
            raise ValidationError(f"no trained rectifier at {path}; run train-prn first")
        prn = prn_mod.load_prn(path)
        if prn.target_fingerprint != self.load_target().fingerprint():
            raise ValidationError(
                f"rectifier at {path} was trained against a different target; "
                f"re-run train-prn"
            )
        return prn

    def load_detector(self, norm: str):
        path = self.detector_path(norm)
        if not path.exists():
            raise ValidationError(f"no detector at {path}; run train-detector first")
        det = det_mod.load_detector(path)
        if det.prn_fingerprint != self.load_prn(norm).fingerprint():
            raise ValidationError(
                f"detector at {path} does not match the current rectifier; "
                f"re-run train-detector"
            )
        return det

    # -- stages -----------------------------------------------------------------

    def train_target(self):
        ds = self.dataset()
        tc = target_mod.build_target(
            ds.image_shape, ds.num_classes, seed=self.cfg.stage_seed("target-init")
        )
        tr_x, tr_y = ds.split("target_train")
        te_x, te_y = ds.split("test")
        hyper = target_mod.TargetHyper(
            learning_rate=self.cfg.target_lr,
            batch_size=self.cfg.target_batch,
            epochs=self.cfg.target_epochs,
            seed=self.cfg.stage_seed("target-train"),
        )
        _log(f"training target: {len(tr_x)} images, {hyper.epochs} epochs")
        tc, acc = target_mod.train_target(tc, tr_x, tr_y, te_x, te_y, hyper)
        tc.meta["config_hash"] = self.cfg.config_hash()
        target_mod.save_target(tc, self.target_path())
        _log(f"target test accuracy: {acc:.3f}")
        return acc

    def gen_uap(self, norms=None):
        tc = self.load_target()
        images, _ = self.dataset().split("uap_train")
        xi = self.xi_by_type()
        inner = uap_mod.InnerSolverParams(
            max_iter=self.cfg.inner_max_iter,
            overshoot=self.cfg.inner_overshoot,
            top_k=self.cfg.inner_top_k,
        )
        bank = uap_mod.build_bank(
            tc,
            images,
            xi,
            delta_target=self.cfg.delta_target,
            train_count=self.cfg.bank_train_count,
            test_count=self.cfg.bank_test_count,
            diversity_bound=self.cfg.diversity_bound,
            max_epochs=self.cfg.uap_max_epochs,
            seed=self.cfg.stage_seed("bank"),
            inner=inner,
            clamp=self.cfg.clamp,
            attempt_factor=self.cfg.attempt_factor,
            norm_types=tuple(norms or NORM_TYPES),
            workers=self.cfg.workers,
            log=_log,
        )
        bank.meta["config_hash"] = self.cfg.config_hash()
        bank.meta["xi_by_type"] = xi
        uap_mod.save_bank(bank, self.bank_path())
        for nt in norms or NORM_TYPES:
            group = bank.group(nt, origin="real")
            _log(
                f"bank {nt}: {len(group)} real perturbations, "
                f"fooling ratios {[round(e.delta_measured, 3) for e in group]}"
            )

    def gen_synth(self, norms=None):
        bank = self.load_bank()
        xi = self.xi_by_type()
        for nt in norms or NORM_TYPES:
            reals = [e.rho for e in bank.group(nt, origin="real", role="train")]
            if not reals:
                raise ValidationError(
                    f"bank has no train-role real {nt} perturbations; run gen-uap first"
                )
            cfg = synth_mod.SynthConfig(
                eta=self.cfg.synth_count,
                xi=xi[nt],
                norm_type=nt,
                seed=self.cfg.stage_seed(f"synth-{nt}"),
            )
            gen = synth_mod.synth_linf if nt == "linf" else synth_mod.synth_l2
            synth_mod.extend_bank(bank, gen(reals, cfg))
            _log(f"bank {nt}: +{self.cfg.synth_count} synthetic perturbations")
        uap_mod.save_bank(bank, self.bank_path())

    def train_prn(self, norms=None):
        tc = self.load_target()
        for nt in norms or NORM_TYPES:
            bank = self.load_bank(need_synth=True, norm=nt)
            images, _ = self.dataset().split("defense_train")
            prn = prn_mod.build_prn(
                self.dataset().image_shape, seed=self.cfg.stage_seed(f"prn-init-{nt}")
            )
            hyper = prn_mod.PrnHyper(
                learning_rate=self.cfg.prn_lr,
                lr_decay=self.cfg.prn_lr_decay,
                lr_decay_every=self.cfg.prn_lr_decay_every,
                batch_size=self.cfg.prn_batch,
                epochs=self.cfg.prn_epochs,
                seed=self.cfg.stage_seed(f"prn-train-{nt}"),
                clamp=self.cfg.clamp,
            )
            _log(f"training rectifier ({nt}): {len(images)} images, {hyper.epochs} epochs")
            prn = prn_mod.train_prn(prn, tc, images, bank, nt, hyper, log=_log)
            prn.meta["config_hash"] = self.cfg.config_hash()
            prn_mod.save_prn(
                prn, self.prn_path(nt), bank_hash=uap_mod.bank_hash(self.bank_path())
            )

    def train_detector(self, norms=None):
        tc = self.load_target()
        for nt in norms or NORM_TYPES:
            bank = self.load_bank(norm=nt)
            prn = self.load_prn(nt)
            images, _ = self.dataset().split("defense_train")
            _log(f"training detector ({nt}): extracting features for {len(images)} images")
            feats, labels, _ids = det_mod.build_training_features(
                prn, tc, images, bank, nt,
                seed=self.cfg.stage_seed(f"detector-data-{nt}"),
                clamp=self.cfg.clamp,
            )
            hyper = det_mod.SvmHyper(
                C=self.cfg.svm_c,
                iterations=self.cfg.svm_iterations,
                eta0=self.cfg.svm_eta0,
                seed=self.cfg.stage_seed(f"detector-train-{nt}"),
            )
            det = det_mod.train_svm(
                feats, labels, hyper,
                prn_fingerprint=prn.fingerprint(),
                target_fingerprint=tc.fingerprint(),
                norm_type=nt,
            )
            det.meta["config_hash"] = self.cfg.config_hash()
            det_mod.save_detector(det, self.detector_path(nt))
            _log(f"detector ({nt}) train accuracy: {det.meta['train_accuracy']:.3f}")

    def evaluate(self, norm_test: str, protocol: str, norm_train: str | None = None,
                 dump_pairs: bool = False):
        norm_train = norm_train or norm_test
        tc = self.load_target()
        bank = self.load_bank(norm=norm_test)
        prn = self.load_prn(norm_train)
        det = self.load_detector(norm_train)
        images, labels = self.dataset().split("test")
        pset = eval_mod.build_protocol(
            images, labels, tc, bank, norm_test, protocol,
            seed=self.cfg.stage_seed(f"protocol-{protocol}-{norm_test}"),
            clamp=self.cfg.clamp,
        )
        report = eval_mod.metrics(pset, prn, det, tc, norm_train=norm_train)
        report.config_hash = self.cfg.config_hash()
        report.bank_hash = uap_mod.bank_hash(self.bank_path())
        path = self.report_path(norm_test, protocol, norm_train)
        path.parent.mkdir(parents=True, exist_ok=True)
        eval_mod.save_report(report, path)
        path.with_suffix(".csv").write_text(eval_mod.report_csv(report))
        if dump_pairs:
            self._dump_pairs(pset, prn, path.with_suffix(""))
        _log(f"report written to {path}")
        for k, v in report.to_dict()["metrics"].items():
            _log(f"  {k}: {v if v is None else round(v, 1)}")
        return report

    def _dump_pairs(self, pset, prn, outdir: Path, limit: int = 8):
        from PIL import Image

        outdir.mkdir(parents=True, exist_ok=True)
        idx = np.flatnonzero(pset.was_perturbed)[:limit]
        rect = prn_mod.rectify_export(prn, pset.realized_images[idx])
        for n, i in enumerate(idx):
            pert = np.clip(pset.realized_images[i], 0, 255).astype(np.uint8)
            Image.fromarray(pert).save(outdir / f"pair{n:02d}_perturbed.png")
            Image.fromarray(rect[n].astype(np.uint8)).save(
                outdir / f"pair{n:02d}_rectified.png"
            )

    def defend_one(self, image_path: str, norm: str):
        from PIL import Image

        tc = self.load_target()
        prn = self.load_prn(norm)
        det = self.load_detector(norm)
        arr = np.asarray(Image.open(image_path).convert("RGB"), dtype=np.float32)
        if arr.shape != tuple(self.cfg.image_shape):
            raise ValidationError(
                f"image shape {arr.shape} does not match config {self.cfg.image_shape}"
            )
        verdict = eval_mod.defend(arr, det, prn, tc)
        print(
            json.dumps(
                {
                    "detected": verdict.detected,
                    "label": verdict.label,
                    "used_rectified": verdict.used_rectified,
                }
            )
        )

    def full_pipeline(self):
        self.train_target()
        self.gen_uap()
        self.gen_synth()
        self.train_prn()
        self.train_detector()
        for nt in NORM_TYPES:
            for prot in ("a", "b"):
                self.evaluate(nt, prot)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uapdefend",
        description="Defense pipeline against universal adversarial perturbations",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="run config JSON")
    parser.add_argument("--artifacts", help="override the config's artifact directory")
    parser.add_argument("--seed", type=int, help="override the config's master seed")
    parser.add_argument("--norm", choices=list(NORM_TYPES), help="restrict to one norm type")
    parser.add_argument("--protocol", choices=["a", "b"], help="evaluation protocol")
    parser.add_argument("--train-norm", choices=list(NORM_TYPES),
                        help="components' training norm for cross evaluation")
    parser.add_argument("--image", help="image path for the defend command")
    parser.add_argument("--dump-pairs", action="store_true",
                        help="write perturbed/rectified PNG pairs next to the report")
    return parser


def run(args) -> int:
    cfg = RunConfig.from_file(args.config)
    if args.artifacts:
        cfg.artifacts_dir = args.artifacts
    if args.seed is not None:
        cfg.seed = args.seed
    pipe = Pipeline(cfg)
    norms = [args.norm] if args.norm else None

    if args.command == "train-target":
        pipe.train_target()
    elif args.command == "gen-uap":
        pipe.gen_uap(norms)
    elif args.command == "gen-synth":
        pipe.gen_synth(norms)
    elif args.command == "train-prn":
        pipe.train_prn(norms)
    elif args.command == "train-detector":
        pipe.train_detector(norms)
    elif args.command == "evaluate":
        norm_test = args.norm or "l2"
        protocols = [args.protocol] if args.protocol else ["a", "b"]
        for prot in protocols:
            pipe.evaluate(norm_test, prot, norm_train=args.train_norm,
                          dump_pairs=args.dump_pairs)
    elif args.command == "defend":
        if not args.image:
            raise ValidationError("defend requires --image")
        pipe.defend_one(args.image, args.norm or "l2")
    elif args.command == "full-pipeline":
        pipe.full_pipeline()
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ValidationError as exc:
        _log(f"validation error: {exc}")
        return 2
    except NumericalError as exc:
        _log(f"numerical abort: {exc}")
        return 3


if __name__ == "__main__":
    sys.exit(main())
