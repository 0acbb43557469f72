"""Strategy presets, stratified folds, patch sampling, fold training and the study runner."""
import csv
import enum
import hashlib
import json
import logging
import math
import os
import time
import zlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from . import cravemix
from .inference import DEFAULT_OVERLAP, DEFAULT_SIGMA_SCALE, binarize, sliding_window_predict
from .losses import DiceMode, LossConfig, combined_loss, deep_supervision_loss
from .metrics import aggregate, evaluate_case, format_table, write_metrics_csv
from .model import FoldModel, ModelCheckpoint, ModelConfig, build_model, save_checkpoint
from .preprocessing import CaseNormalizer, NormalizationMode, write_norm_stats
from .volume import extract_patch

log = logging.getLogger(__name__)

FULL_AUGMENTATION_COUNT = 350
DESK_AUGMENTATION_COUNT = 20


class StrategyId(str, enum.Enum):
    BASELINE = "BASELINE"
    ZSCORE = "ZSCORE"
    BRATS2020 = "BRATS2020"
    CRAVEMIX = "CRAVEMIX"


class LeakageError(RuntimeError):
    pass


class TrainingDivergence(RuntimeError):
    pass


def derive_seed(seed, *names):
    """Independent named sub-stream of ``seed`` (e.g. ``derive_seed(s, "folds")``)."""
    words = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(n).encode()) for n in names]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


@dataclass(frozen=True)
class StrategyConfig:
    strategy_id: StrategyId
    normalization: NormalizationMode = NormalizationMode.CT_SCHEME_BOTH
    loss: LossConfig = field(default_factory=LossConfig)
    batch_size: int = 2
    augmentation_count_per_fold: int = 0
    patch_size: tuple = (32, 32, 32)
    epochs: int = 1000
    batches_per_epoch: int = 250
    initial_lr: float = 1e-2
    lr_exponent: float = 0.9
    momentum: float = 0.99
    weight_decay: float = 3e-5
    grad_clip: float = 12.0
    foreground_oversample_fraction: float = 0.33
    mirror: bool = True
    rng_seed: int = 0
    features_per_stage: tuple = (8, 16, 32, 64)
    blocks_per_stage_encoder: tuple = (1, 1, 1, 1)
    deep_supervision: bool = False
    val_patches: int = 4

    def __post_init__(self):
        object.__setattr__(self, "strategy_id", StrategyId(self.strategy_id))
        object.__setattr__(self, "normalization", NormalizationMode(self.normalization))
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig.from_dict(self.loss))
        for name in ("patch_size", "features_per_stage", "blocks_per_stage_encoder"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.batch_size < 1 or self.epochs < 1 or self.batches_per_epoch < 1:
            raise ValueError("batch_size, epochs and batches_per_epoch must be >= 1")
        if not 0 <= self.foreground_oversample_fraction <= 1:
            raise ValueError("foreground_oversample_fraction must lie in [0, 1]")
        if self.augmentation_count_per_fold < 0:
            raise ValueError("augmentation_count_per_fold must be >= 0")
        self._check_preset()

    def _check_preset(self):
        sid, norm, dice = self.strategy_id, self.normalization, self.loss.dice_mode
        want_norm = (NormalizationMode.CT_FOR_CT_ZSCORE_FOR_PET if sid is StrategyId.ZSCORE
                     else NormalizationMode.CT_SCHEME_BOTH)
        want_dice = DiceMode.BATCH if sid is StrategyId.BRATS2020 else DiceMode.PER_SAMPLE
        want_batch = 5 if sid is StrategyId.BRATS2020 else 2
        problems = []
        if norm is not want_norm:
            problems.append(f"normalization {norm.value} (expected {want_norm.value})")
        if dice is not want_dice:
            problems.append(f"dice mode {dice.value} (expected {want_dice.value})")
        if self.batch_size != want_batch:
            problems.append(f"batch size {self.batch_size} (expected {want_batch})")
        if sid is StrategyId.CRAVEMIX and self.augmentation_count_per_fold < 1:
            problems.append("CRAVEMIX needs a positive augmentation pool")
        if sid is not StrategyId.CRAVEMIX and self.augmentation_count_per_fold != 0:
            problems.append(f"{sid.value} must not use lesion-mixing augmentation")
        if problems:
            raise ValueError(f"strategy {sid.value} violates its preset: " + "; ".join(problems))

    def model_config(self, rng_seed=None):
        return ModelConfig(n_stages=len(self.features_per_stage), features_per_stage=self.features_per_stage,
                           blocks_per_stage_encoder=self.blocks_per_stage_encoder, patch_size=self.patch_size,
                           deep_supervision=self.deep_supervision,
                           rng_seed=self.rng_seed if rng_seed is None else rng_seed)

    def replace(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        d = asdict(self)
        d["strategy_id"] = self.strategy_id.value
        d["normalization"] = self.normalization.value
        d["loss"] = self.loss.to_dict()
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


DESK_SCHEDULE = dict(patch_size=(32, 32, 32), epochs=10, batches_per_epoch=50,
                     features_per_stage=(8, 16, 32, 64), blocks_per_stage_encoder=(1, 1, 1, 1))


def strategy_preset(strategy_id, scale="full", **overrides):
    """One of the four experiment presets.

    ``scale="full"`` keeps the 192^3 patch and the 350-case augmentation
    pool; ``scale="desk"`` swaps in the CPU-sized schedule and a 20-case pool.
    """
    sid = StrategyId(strategy_id)
    kw = {"strategy_id": sid}
    if sid is StrategyId.ZSCORE:
        kw["normalization"] = NormalizationMode.CT_FOR_CT_ZSCORE_FOR_PET
    if sid is StrategyId.BRATS2020:
        kw["batch_size"] = 5
        kw["loss"] = LossConfig(dice_mode=DiceMode.BATCH)
    if sid is StrategyId.CRAVEMIX:
        kw["augmentation_count_per_fold"] = FULL_AUGMENTATION_COUNT
    if scale == "full":
        kw.update(patch_size=(192, 192, 192), features_per_stage=(32, 64, 128, 256, 320, 320),
                  blocks_per_stage_encoder=(1, 3, 4, 6, 6, 6))
    elif scale == "desk":
        kw.update(DESK_SCHEDULE)
        if sid is StrategyId.CRAVEMIX:
            kw["augmentation_count_per_fold"] = DESK_AUGMENTATION_COUNT
    else:
        raise ValueError(f"unknown scale {scale!r}")
    kw.update(overrides)
    return StrategyConfig(**kw)


@dataclass
class FoldSplit:
    k: int
    assignments: dict

    def validation_ids(self, fold):
        return [cid for cid, f in self.assignments.items() if f == fold]

    def training_ids(self, fold):
        return [cid for cid, f in self.assignments.items() if f != fold]

    def to_dict(self):
        return {"k": self.k, "assignments": dict(self.assignments)}


def make_folds(case_ids, lesion_flags, k=5, seed=0):
    """Stratified k-fold split: positives dealt round-robin, negatives continue the deal."""
    case_ids = list(case_ids)
    lesion_flags = list(lesion_flags)
    if len(case_ids) != len(lesion_flags):
        raise ValueError("case_ids and lesion_flags differ in length")
    if len(set(case_ids)) != len(case_ids):
        raise ValueError("duplicate case ids")
    if k < 2:
        raise ValueError("k must be >= 2")
    if len(case_ids) < k:
        raise ValueError(f"fewer cases ({len(case_ids)}) than folds ({k})")
    rng = np.random.default_rng(seed)
    pos = sorted(c for c, f in zip(case_ids, lesion_flags) if f)
    neg = sorted(c for c, f in zip(case_ids, lesion_flags) if not f)
    assignments = {}
    slot = 0
    for group in (pos, neg):
        for i in rng.permutation(len(group)):
            assignments[group[i]] = slot % k
            slot += 1
    return FoldSplit(k, {c: assignments[c] for c in case_ids})


def _flip(arrays, rng):
    flips = [ax for ax in range(3) if rng.random() < 0.5]
    if not flips:
        return arrays
    return [np.flip(a, axis=tuple(a.ndim - 3 + ax for ax in flips)).copy() for a in arrays]


def sample_training_batch(cases, strategy, rng, return_meta=False, batch_size=None, oversample=None,
                          mirror=None):
    """Draw ``strategy.batch_size`` patches from already-normalized ``cases``.

    The first ``ceil(fraction * batch_size)`` patches are centred on a random
    foreground voxel whenever the drawn case has one; the rest are centred
    uniformly over the volume.  The keyword overrides serve fixed
    validation probes.
    """
    cases = list(cases)
    if not cases:
        raise ValueError("empty training pool")
    batch_size = strategy.batch_size if batch_size is None else batch_size
    oversample = strategy.foreground_oversample_fraction if oversample is None else oversample
    mirror = strategy.mirror if mirror is None else mirror
    n_fg = math.ceil(oversample * batch_size)
    images, targets, meta = [], [], []
    for b in range(batch_size):
        case = cases[int(rng.integers(len(cases)))]
        forced = b < n_fg and case.has_lesion
        if forced:
            fg = np.argwhere(case.label.data)
            center = tuple(int(v) for v in fg[int(rng.integers(len(fg)))])
        else:
            center = tuple(int(rng.integers(n)) for n in case.shape)
        ct, pet, label, _ = extract_patch(case, center, strategy.patch_size)
        image = np.stack([ct, pet]).astype(np.float32)
        if mirror:
            image, label = _flip([image, label], rng)
        images.append(image)
        targets.append(label)
        meta.append({"case_id": case.case_id, "center": center, "foreground_forced": forced})
    out = (np.stack(images), np.stack(targets).astype(np.uint8))
    return out + (meta,) if return_meta else out


@dataclass
class TrainingLog:
    strategy_id: str
    fold_index: int
    batch_size: int
    dice_mode: str
    val_dice_level: str = "patch"
    epochs: list = field(default_factory=list)
    observed_batch_sizes: set = field(default_factory=set)
    training_case_ids: set = field(default_factory=set)
    norm_source_ids: tuple = ()
    augmentation_pool_size: int = 0
    augmentation_parent_ids: set = field(default_factory=set)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_dice", "val_dice_level",
                                                    "learning_rate", "wall_clock_s"])
            writer.writeheader()
            for row in self.epochs:
                writer.writerow(dict(row, val_dice="" if row["val_dice"] is None else row["val_dice"],
                                     val_dice_level=self.val_dice_level))
        return path

    def summary(self):
        return {
            "batch_size": self.batch_size,
            "observed_batch_sizes": sorted(self.observed_batch_sizes),
            "dice_mode": self.dice_mode,
            "augmentation_pool_size": self.augmentation_pool_size,
            "n_training_cases": len(self.training_case_ids),
            "initial_train_loss": self.epochs[0]["train_loss"] if self.epochs else None,
            "final_train_loss": self.epochs[-1]["train_loss"] if self.epochs else None,
        }


def audit_leakage(validation_ids, norm_source_ids=(), pool=(), patch_case_ids=()):
    """Raise :class:`LeakageError` if any validation case feeds training."""
    val = set(validation_ids)
    if val & set(norm_source_ids):
        raise LeakageError(f"validation cases used for normalization statistics: {sorted(val & set(norm_source_ids))}")
    for case in pool:
        bad = val & (set(case.parents) | {case.case_id})
        if bad:
            raise LeakageError(f"augmented case {case.case_id} was built from validation cases {sorted(bad)}")
    if val & set(patch_case_ids):
        raise LeakageError(f"validation cases sampled as training patches: {sorted(val & set(patch_case_ids))}")


def make_optimizer(params, strategy):
    """SGD with Nesterov momentum, as used for every strategy."""
    return torch.optim.SGD(params, lr=strategy.initial_lr, momentum=strategy.momentum, nesterov=True,
                           weight_decay=strategy.weight_decay)


def poly_lr(strategy, epoch):
    return strategy.initial_lr * (1 - epoch / strategy.epochs) ** strategy.lr_exponent


def _fixed_validation_patches(val_cases, strategy, seed):
    if not val_cases or strategy.val_patches < 1:
        return None
    rng = np.random.default_rng(seed)
    return sample_training_batch(val_cases, strategy, rng, batch_size=strategy.val_patches,
                                 oversample=0.5, mirror=False)


def _patch_dice(model, images, targets):
    probs = model.predict_proba(images)
    pred = probs[:, 1] > 0.5
    t = targets.astype(bool)
    denom = pred.sum() + t.sum()
    return 1.0 if denom == 0 else float(2.0 * (pred & t).sum() / denom)


def train_fold(strategy, fold, cases, folds=None, augmented_pool=None, out_dir=None, progress=None):
    """Train one model; ``fold=None`` trains on every case (no validation split).

    Returns ``(checkpoint, log)``.  Serial runs are bit-reproducible in
    ``(strategy.rng_seed, fold)``.
    """
    cases = list(cases)
    by_id = {c.case_id: c for c in cases}
    if fold is None:
        train_ids, val_ids, fold_index, n_folds = [c.case_id for c in cases], [], 0, 1
    else:
        if folds is None:
            raise ValueError("a FoldSplit is required when training a specific fold")
        if not 0 <= fold < folds.k:
            raise ValueError(f"fold {fold} outside [0, {folds.k})")
        train_ids, val_ids = folds.training_ids(fold), folds.validation_ids(fold)
        fold_index, n_folds = fold, folds.k
    train_cases = [by_id[c] for c in train_ids]
    val_cases = [by_id[c] for c in val_ids]
    pool = list(augmented_pool or [])

    if strategy.strategy_id is StrategyId.CRAVEMIX and len(pool) != strategy.augmentation_count_per_fold:
        raise ValueError(f"CRAVEMIX expects a pre-generated pool of {strategy.augmentation_count_per_fold} "
                         f"cases, got {len(pool)}")
    if strategy.strategy_id is not StrategyId.CRAVEMIX and pool:
        raise ValueError(f"{strategy.strategy_id.value} does not use an augmentation pool")

    normalizer = CaseNormalizer(strategy.normalization).fit(train_cases)
    record = normalizer.record_
    audit_leakage(val_ids, normalizer.source_case_ids_, pool)

    train_norm = normalizer.transform(train_cases) + normalizer.transform(pool)
    val_norm = normalizer.transform(val_cases)

    seed_key = "all" if fold is None else fold
    model = build_model(strategy.model_config(derive_seed(strategy.rng_seed, "model", seed_key)))
    sample_rng = np.random.default_rng(derive_seed(strategy.rng_seed, "sampling", seed_key))
    val_batch = _fixed_validation_patches(val_norm, strategy, derive_seed(strategy.rng_seed, "val", seed_key))
    opt = make_optimizer(model.parameters(), strategy)

    tlog = TrainingLog(strategy.strategy_id.value, fold_index, strategy.batch_size,
                       strategy.loss.dice_mode.value, "patch" if val_batch is not None else "none",
                       norm_source_ids=normalizer.source_case_ids_, augmentation_pool_size=len(pool))
    tlog.augmentation_parent_ids = {p for c in pool for p in c.parents}
    t0 = time.perf_counter()
    for epoch in range(strategy.epochs):
        lr = poly_lr(strategy, epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        model.train()
        losses = []
        for _ in range(strategy.batches_per_epoch):
            images, targets, meta = sample_training_batch(train_norm, strategy, sample_rng, return_meta=True)
            tlog.observed_batch_sizes.add(int(images.shape[0]))
            tlog.training_case_ids.update(m["case_id"] for m in meta)
            x = torch.from_numpy(images)
            y = torch.from_numpy(targets).long()
            opt.zero_grad()
            out = model(x)
            if isinstance(out, list):
                loss = deep_supervision_loss(out, y, strategy.loss)
            else:
                loss = combined_loss(out, y, strategy.loss, from_logits=True)
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch} "
                                         f"(strategy {strategy.strategy_id.value}, fold {fold_index})")
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), strategy.grad_clip)
            opt.step()
            losses.append(float(loss.detach()))
        val_dice = _patch_dice(model, *val_batch) if val_batch is not None else None
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_dice": val_dice,
               "learning_rate": lr, "wall_clock_s": round(time.perf_counter() - t0, 3)}
        tlog.epochs.append(row)
        if progress:
            progress(row)
        log.debug("strategy %s fold %s epoch %d loss %.4f", strategy.strategy_id.value, fold_index, epoch,
                  row["train_loss"])

    # patches must only ever come from training cases or their mixes
    audit_leakage(val_ids, patch_case_ids={cid for cid in tlog.training_case_ids if cid in by_id})
    checkpoint = ModelCheckpoint.from_model(model, strategy.strategy_id.value, record, fold_index, n_folds,
                                            extra={"strategy": strategy.to_dict()})
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(checkpoint, os.path.join(out_dir, "checkpoint.ckpt"))
        write_norm_stats(record, os.path.join(out_dir, "norm_stats.json"))
        tlog.write_csv(os.path.join(out_dir, "training_log.csv"))
    return checkpoint, tlog


@dataclass
class StudyReport:
    k: int
    rows: dict
    per_case: dict
    training: dict

    def table(self):
        return format_table([(sid, self.rows[sid]) for sid in self.rows], title=f"{self.k}-Fold Cross-Validation")

    def to_dict(self):
        return {"k": self.k, "strategies": list(self.rows), "columns": ["dice", "fn_volume_ml", "fp_volume_ml"],
                "rows": self.rows, "training": self.training,
                "per_case": {sid: [asdict(m) for m in ms] for sid, ms in self.per_case.items()}}


def file_sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _run_strategy(cases, folds, strategy, seed, out_dir, overlap, sigma_scale, threshold, progress=None):
    by_id = {c.case_id: c for c in cases}
    sid = strategy.strategy_id.value
    strategy = strategy.replace(rng_seed=derive_seed(seed, "strategy", sid))
    metrics, fold_info = [], []
    for fold in range(folds.k):
        fold_dir = os.path.join(out_dir, sid, f"fold_{fold}") if out_dir else None
        train_cases = [by_id[c] for c in folds.training_ids(fold)]
        pool = []
        if strategy.augmentation_count_per_fold:
            pool, recipes = cravemix.generate_augmented_set(
                train_cases, strategy.augmentation_count_per_fold,
                derive_seed(seed, "cravemix", sid, fold), return_recipes=True)
            if out_dir:
                cravemix.write_augmented_set(pool, recipes, os.path.join(out_dir, sid, "augmented", str(fold)))
        checkpoint, tlog = train_fold(strategy, fold, cases, folds, pool, fold_dir, progress)
        fold_model = FoldModel(checkpoint)
        fold_metrics = []
        for cid in folds.validation_ids(fold):
            prob = sliding_window_predict([fold_model], by_id[cid], overlap=overlap, sigma_scale=sigma_scale)
            fold_metrics.append(evaluate_case(binarize(prob, threshold), by_id[cid]))
        metrics.extend(fold_metrics)
        info = {"fold": fold, "n_validation": len(fold_metrics), **tlog.summary()}
        if fold_metrics:
            info["aggregate"] = aggregate(fold_metrics).groups["all"]
        fold_info.append(info)
    metrics.sort(key=lambda m: m.case_id)
    agg = aggregate(metrics).groups["all"]
    row = {"dice": agg["dice"], "fn_volume_ml": agg["fn_volume_ml"], "fp_volume_ml": agg["fp_volume_ml"]}
    return sid, row, metrics, {"strategy": strategy.to_dict(), "folds": fold_info}


def run_study(cases, strategies, k=5, seed=0, out_dir=None, overlap=DEFAULT_OVERLAP,
              sigma_scale=DEFAULT_SIGMA_SCALE, threshold=0.5, progress=None, jobs=1):
    """Cross-validate every strategy and aggregate Dice / FN / FP per strategy.

    Row values are case-averaged over all validation cases (each case is
    validated exactly once).  With ``jobs > 1`` strategies train in separate
    processes; every strategy draws from its own seed stream, so the report
    does not depend on ``jobs``.
    """
    cases = list(cases)
    strategies = list(strategies)
    if not strategies:
        raise ValueError("no strategies given")
    if len({s.strategy_id for s in strategies}) != len(strategies):
        raise ValueError("duplicate strategy ids in study")
    folds = make_folds([c.case_id for c in cases], [c.has_lesion for c in cases], k,
                       derive_seed(seed, "folds"))
    args = (overlap, sigma_scale, threshold)
    if jobs > 1 and len(strategies) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_strategy, cases, folds, s, seed, out_dir, *args) for s in strategies]
            results = [f.result() for f in futures]
    else:
        results = [_run_strategy(cases, folds, s, seed, out_dir, *args, progress=progress) for s in strategies]
    rows = {sid: row for sid, row, _, _ in results}
    per_case = {sid: ms for sid, _, ms, _ in results}
    training = {sid: info for sid, _, _, info in results}
    report = StudyReport(k, rows, per_case, training)
    if out_dir:
        write_study_outputs(report, folds, out_dir)
    return report


def write_study_outputs(report, folds, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(dict(report.to_dict(), folds=folds.to_dict()), fh, indent=2, sort_keys=True)
    per_case, extra = [], {}
    for sid, ms in report.per_case.items():
        for m in ms:
            row_id = f"{sid}/{m.case_id}"
            per_case.append(replace(m, case_id=row_id))
            extra[row_id] = {"strategy_id": sid, "fold": folds.assignments[m.case_id]}
    if per_case:
        write_metrics_csv(per_case, os.path.join(out_dir, "metrics.csv"), extra)
    with open(os.path.join(out_dir, "table.txt"), "w") as fh:
        fh.write(report.table())
    return out_dir
