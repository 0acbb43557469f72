"""Command-line entry point: generate-data, train, predict, evaluate, study.

Settings resolve as: command-line flag > experiment spec file > desk defaults.
Exit codes: 0 success, 1 usage error, 2 runtime failure.  On failure a
one-line diagnostic goes to stderr and, when an output directory is known,
``error.json`` is written there.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from . import io as case_io
from .inference import DEFAULT_OVERLAP, DEFAULT_SIGMA_SCALE, binarize, sliding_window_predict
from .metrics import aggregate, evaluate_case, format_table, write_metrics_csv, write_report_json
from .model import FoldModel
from .phantom import PhantomConfig, generate_cohort
from .training import StrategyId, derive_seed, make_folds, run_study, strategy_preset, train_fold
from .volume import CaseRecord

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
log = logging.getLogger("autopet_lab")

STRATEGY_OVERRIDE_KEYS = ("epochs", "batches_per_epoch", "patch_size", "initial_lr", "momentum",
                          "foreground_oversample_fraction", "augmentation_count_per_fold", "val_patches",
                          "features_per_stage", "blocks_per_stage_encoder", "deep_supervision")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


@dataclass
class ExperimentSpec:
    dataset: str = None
    output_dir: str = None
    strategies: list = field(default_factory=lambda: [s.value for s in StrategyId])
    k: int = 5
    seed: int = 0
    scale: str = "desk"
    overrides: dict = field(default_factory=dict)
    phantom: dict = field(default_factory=dict)
    overlap: float = DEFAULT_OVERLAP
    sigma_scale: float = DEFAULT_SIGMA_SCALE
    threshold: float = 0.5

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown experiment spec keys: {sorted(unknown)}")
        return cls(**raw)

    def validate(self, need_dataset=True):
        if need_dataset:
            if not self.dataset or not os.path.isdir(self.dataset):
                raise UsageError(f"dataset directory not found: {self.dataset}")
        if not self.output_dir:
            raise UsageError("no output directory given")
        bad = [s for s in self.strategies if s not in StrategyId.__members__]
        if bad:
            raise UsageError(f"unknown strategies {bad}; known: {list(StrategyId.__members__)}")
        bad = set(self.overrides) - set(STRATEGY_OVERRIDE_KEYS)
        if bad:
            raise UsageError(f"unsupported overrides {sorted(bad)}")
        if self.k < 2:
            raise UsageError("k must be >= 2")
        return self

    def strategy_configs(self):
        return [strategy_preset(s, scale=self.scale, **self.overrides) for s in self.strategies]


def _add_common_spec_flags(p):
    p.add_argument("--spec", help="experiment spec JSON file")
    p.add_argument("--dataset", help="dataset directory (overrides spec)")
    p.add_argument("--out", dest="output_dir", help="output directory (overrides spec)")
    p.add_argument("--strategies", nargs="+", choices=[s.value for s in StrategyId],
                   help="strategy presets to run (overrides spec)")
    p.add_argument("--k", type=int, help="number of folds (overrides spec)")
    p.add_argument("--seed", type=int, help="global seed (overrides spec)")
    p.add_argument("--epochs", type=int, help="epochs per fold (overrides spec)")
    p.add_argument("--batches-per-epoch", type=int, help="iterations per epoch (overrides spec)")
    p.add_argument("--augmentation-count", type=int, help="CRAVEMIX pool size per fold (overrides spec)")
    p.add_argument("--scale", choices=["desk", "full"], help="preset scale (overrides spec)")
    p.add_argument("--jobs", type=int, default=1, help="parallel strategy jobs")


def resolve_spec(args):
    spec = ExperimentSpec.load(args.spec) if args.spec else ExperimentSpec()
    for name in ("dataset", "output_dir", "strategies", "k", "seed", "scale"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(spec, name, value)
    spec.overrides = dict(spec.overrides)
    for flag, key in (("epochs", "epochs"), ("batches_per_epoch", "batches_per_epoch"),
                      ("augmentation_count", "augmentation_count_per_fold")):
        value = getattr(args, flag, None)
        if value is not None:
            spec.overrides[key] = value
    if "patch_size" in spec.overrides:
        spec.overrides["patch_size"] = tuple(spec.overrides["patch_size"])
    return spec


def build_parser():
    parser = _Parser(prog="autopet-lab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", help="write a synthetic phantom dataset")
    p.add_argument("--config", help="PhantomConfig JSON file (fields of PhantomConfig)")
    p.add_argument("--positive", type=int, required=True, help="number of lesion-bearing cases")
    p.add_argument("--negative", type=int, required=True, help="number of negative controls")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=0, help="global seed")

    p = sub.add_parser("train", help="train fold models for one strategy")
    _add_common_spec_flags(p)
    p.add_argument("--strategy", choices=[s.value for s in StrategyId], help="strategy to train "
                   "(default: first strategy of the spec)")
    p.add_argument("--fold", type=int, help="train only this fold (default: all folds)")

    p = sub.add_parser("predict", help="sliding-window ensemble prediction")
    p.add_argument("--checkpoints", nargs="+", required=True, help="fold checkpoint files")
    p.add_argument("--case", nargs="+", required=True, help="case directories holding ct.nii.gz and pet.nii.gz")
    p.add_argument("--out", required=True, help="output directory; writes <case_id>/pred_*.nii.gz")
    p.add_argument("--overlap", type=float, default=DEFAULT_OVERLAP, help="tile overlap fraction")
    p.add_argument("--sigma-scale", type=float, default=DEFAULT_SIGMA_SCALE, help="Gaussian sigma / patch")
    p.add_argument("--threshold", type=float, default=0.5, help="foreground probability threshold")

    p = sub.add_parser("evaluate", help="score predicted masks against a dataset")
    p.add_argument("--pred-dir", required=True, help="directory with <case_id>/pred_mask.nii.gz")
    p.add_argument("--dataset", required=True, help="dataset directory with dataset.json")
    p.add_argument("--out", required=True, help="output directory for metrics.csv and report.json")
    p.add_argument("--connectivity", type=int, choices=[6, 18, 26], default=26, help="component connectivity")

    p = sub.add_parser("study", help="cross-validated comparison of strategies (Dice, FN, FP per strategy)")
    _add_common_spec_flags(p)
    return parser


def cmd_generate_data(args):
    cfg = PhantomConfig()
    if args.config:
        with open(args.config) as fh:
            cfg = PhantomConfig.from_dict(json.load(fh))
    if args.positive < 0 or args.negative < 0:
        raise UsageError("case counts must be non-negative")
    cases = generate_cohort(cfg, args.positive, args.negative, seed=derive_seed(args.seed, "dataset"))
    os.makedirs(args.out, exist_ok=True)
    for case in cases:
        case_io.save_case(case, args.out)
    case_io.write_manifest(args.out, cases, extra={"seed": args.seed, "phantom": json.loads(json.dumps(asdict(cfg)))})
    print(f"wrote {len(cases)} cases ({args.positive} positive, {args.negative} negative) to {args.out}")
    return EXIT_OK


def _progress(verbose):
    if not verbose:
        return None
    return lambda row: log.info("epoch %d loss %.4f", row["epoch"], row["train_loss"])


def cmd_train(args):
    spec = resolve_spec(args)
    if args.strategy:
        spec.strategies = [args.strategy]
    spec.validate()
    strategy = spec.strategy_configs()[0]
    sid = strategy.strategy_id.value
    strategy = strategy.replace(rng_seed=derive_seed(spec.seed, "strategy", sid))
    cases = case_io.load_dataset(spec.dataset)
    folds = make_folds([c.case_id for c in cases], [c.has_lesion for c in cases], spec.k,
                       derive_seed(spec.seed, "folds"))
    os.makedirs(spec.output_dir, exist_ok=True)
    with open(os.path.join(spec.output_dir, "folds.json"), "w") as fh:
        json.dump(folds.to_dict(), fh, indent=2, sort_keys=True)
    todo = range(spec.k) if args.fold is None else [args.fold]
    if args.fold is not None and not 0 <= args.fold < spec.k:
        raise UsageError(f"--fold must lie in [0, {spec.k})")
    from . import cravemix
    by_id = {c.case_id: c for c in cases}
    for fold in todo:
        pool = []
        if strategy.augmentation_count_per_fold:
            train_cases = [by_id[c] for c in folds.training_ids(fold)]
            pool, recipes = cravemix.generate_augmented_set(train_cases, strategy.augmentation_count_per_fold,
                                                            derive_seed(spec.seed, "cravemix", sid, fold),
                                                            return_recipes=True)
            cravemix.write_augmented_set(pool, recipes, os.path.join(spec.output_dir, sid, "augmented", str(fold)))
        fold_dir = os.path.join(spec.output_dir, sid, f"fold_{fold}")
        train_fold(strategy, fold, cases, folds, pool, fold_dir, _progress(args.verbose))
        print(f"{sid} fold {fold}: checkpoint written to {fold_dir}")
    return EXIT_OK


def _load_case_for_prediction(directory):
    paths = {k: os.path.join(directory, v) for k, v in case_io.CHANNEL_FILES.items()}
    case_id = os.path.basename(os.path.normpath(directory))
    if os.path.exists(paths["label"]):
        return case_io.load_case(paths["ct"], paths["pet"], paths["label"], case_id=case_id)
    ct, pet = case_io.load_volume(paths["ct"]), case_io.load_volume(paths["pet"])
    return CaseRecord(case_id, ct, pet, ct.with_data(np.zeros(ct.shape, dtype=np.uint8)))


def cmd_predict(args):
    models = [FoldModel.load(p) for p in args.checkpoints]
    for directory in args.case:
        case = _load_case_for_prediction(directory)
        prob = sliding_window_predict(models, case, overlap=args.overlap, sigma_scale=args.sigma_scale)
        out = os.path.join(args.out, case.case_id)
        os.makedirs(out, exist_ok=True)
        case_io.save_volume(prob, os.path.join(out, "pred_prob.nii.gz"), np.float32)
        case_io.save_volume(binarize(prob, args.threshold), os.path.join(out, "pred_mask.nii.gz"), np.uint8)
        print(f"{case.case_id}: ensemble of {len(models)} model(s) -> {out}")
    return EXIT_OK


def cmd_evaluate(args):
    cases = case_io.load_dataset(args.dataset)
    per_case = []
    for case in cases:
        path = os.path.join(args.pred_dir, case.case_id, "pred_mask.nii.gz")
        pred = case_io.load_volume(path)
        per_case.append(evaluate_case(pred, case, connectivity=args.connectivity))
    report = aggregate(per_case)
    os.makedirs(args.out, exist_ok=True)
    write_metrics_csv(per_case, os.path.join(args.out, "metrics.csv"))
    write_report_json(report, os.path.join(args.out, "report.json"))
    table = format_table([("prediction", report.groups["all"])], title="Evaluation")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_study(args):
    spec = resolve_spec(args).validate()
    cases = case_io.load_dataset(spec.dataset)
    report = run_study(cases, spec.strategy_configs(), spec.k, spec.seed, spec.output_dir, spec.overlap,
                       spec.sigma_scale, spec.threshold, progress=_progress(args.verbose), jobs=args.jobs)
    sys.stdout.write(report.table())
    return EXIT_OK


COMMANDS = {"generate-data": cmd_generate_data, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "study": cmd_study}


def _write_error(args, exc, code):
    record = {"command": getattr(args, "command", None), "error": type(exc).__name__, "message": str(exc),
              "exit_code": code}
    out = getattr(args, "output_dir", None) or getattr(args, "out", None)
    if out:
        try:
            os.makedirs(out, exist_ok=True)
            with open(os.path.join(out, "error.json"), "w") as fh:
                json.dump(record, fh, indent=2)
        except OSError:
            pass
    sys.stderr.write(f"autopet-lab {record['command']}: {record['error']}: {record['message']}\n")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _write_error(args, exc, EXIT_USAGE)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 2
        _write_error(args, exc, EXIT_RUNTIME)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
