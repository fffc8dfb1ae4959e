"""K-fold cross-validation over the baseline, direct-mask diffusion and
discrepancy-correction arms.

Run directory layout::

    <run_dir>/<arm>/fold<k>/checkpoints/model.pt
                           preds/<case_id>.npz
                           scores.csv
                           split.json
                           integrity.json
                           config.snapshot
"""
from __future__ import annotations

import csv
import io
import json
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import io as caseio
from .config import ExperimentConfig, dump_config
from .diffusion import (
    DiffusionTrainConfig,
    TargetMode,
    build_denoiser,
    make_training_case,
    sample,
    save_denoiser,
    train_diffusion,
)
from .discrepancy import apply_correction, binarize_discrepancy
from .metrics import REPORT_REGIONS, evaluate_case
from .phantom import RegionMask, to_regions, znorm_rescale
from .segmenter import (
    TrainConfig,
    binarize,
    build_segmenter,
    load_segmenter,
    predict,
    save_segmenter,
    train_segmenter,
)

log = logging.getLogger(__name__)

SCORE_COLUMNS = ("case_id", "region", "dice", "hd95", "sentinel_flag")


class LeakageError(AssertionError):
    """A model saw ground truth from its own test fold."""


class MissingCheckpoint(FileNotFoundError):
    pass


def make_folds(case_ids, k, seed):
    """Seeded shuffle followed by round-robin assignment; returns {case_id: fold}."""
    case_ids = list(case_ids)
    if len(set(case_ids)) != len(case_ids):
        raise ValueError("duplicate case ids")
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(case_ids):
        raise ValueError(f"cannot split {len(case_ids)} cases into {k} folds")
    order = np.random.default_rng(seed).permutation(len(case_ids))
    return {case_ids[j]: i % k for i, j in enumerate(order)}


def fold_split(assignment, fold):
    test = sorted(c for c, f in assignment.items() if f == fold)
    train = sorted(c for c, f in assignment.items() if f != fold)
    return train, test


def derive_seed(base, fold, arm, case_id=None):
    entropy = [int(base), int(fold), zlib.crc32(arm.encode())]
    if case_id is not None:
        entropy.append(zlib.crc32(str(case_id).encode()))
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


@dataclass
class StudyData:
    ids: list
    vols: dict
    gts: dict

    @classmethod
    def load(cls, data_dir):
        ids = caseio.list_cases(data_dir)
        vols, gts = {}, {}
        for cid in ids:
            vol, labels = caseio.read_case(Path(data_dir) / cid)
            vols[cid] = znorm_rescale(vol)
            gts[cid] = to_regions(labels)
        return cls(ids, vols, gts)


def arm_dir(cfg: ExperimentConfig, arm, fold):
    return Path(cfg.run_dir) / arm / f"fold{fold}"


def write_scores(path, scores):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCORE_COLUMNS)
    for sc in scores:
        for region in REPORT_REGIONS:
            writer.writerow([sc.case_id, region, repr(float(sc.dice[region])), repr(float(sc.hd95[region])), int(sc.sentinel[region])])
    Path(path).write_text(buf.getvalue())


def read_scores(path):
    from .metrics import CaseScores

    by_case = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            sc = by_case.setdefault(row["case_id"], CaseScores({}, {}, {}, row["case_id"]))
            sc.dice[row["region"]] = float(row["dice"])
            sc.hd95[row["region"]] = float(row["hd95"])
            sc.sentinel[row["region"]] = bool(int(row["sentinel_flag"]))
    return [by_case[c] for c in sorted(by_case)]


def _audit(train_ids, test_ids, arm, fold):
    overlap = set(train_ids) & set(test_ids)
    if overlap:
        raise LeakageError(f"{arm} fold {fold}: training cases {sorted(overlap)} are in the test fold")


def _finish(out, cfg, arm, fold, train_ids, test_ids, masks, data, extra_integrity=None):
    """Write predictions, scores, split and integrity records for one arm/fold."""
    scores, integrity = [], {}
    for cid in test_ids:
        mask = masks[cid]
        caseio.write_prediction(out / "preds", cid, mask)
        scores.append(evaluate_case(mask, data.gts[cid], data.vols[cid].spacing, cfg.metrics, case_id=cid))
        integrity[cid] = {
            "binary": bool(np.isin(mask.channels, (0, 1)).all()),
            "nesting_violations": mask.nesting_violations(),
        }
    if extra_integrity:
        for cid, rec in extra_integrity.items():
            integrity[cid].update(rec)
    write_scores(out / "scores.csv", scores)
    (out / "split.json").write_text(json.dumps({"arm": arm, "fold": fold, "train_ids": train_ids, "test_ids": test_ids}, indent=1))
    (out / "integrity.json").write_text(json.dumps(integrity, indent=1, sort_keys=True))
    (out / "config.snapshot").write_text(dump_config(cfg))
    return scores


def run_arm(arm, assignment, fold, cfg: ExperimentConfig, data: StudyData | None = None):
    """Train one arm on the out-of-fold cases and score it on fold ``fold``."""
    data = data or StudyData.load(cfg.data_dir)
    train_ids, test_ids = fold_split(assignment, fold)
    _audit(train_ids, test_ids, arm, fold)
    out = arm_dir(cfg, arm, fold)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    torch.manual_seed(derive_seed(cfg.seed, fold, arm))

    if arm == "Baseline":
        model = build_segmenter(cfg.segmenter, derive_seed(cfg.seed, fold, "Baseline:init"))
        bt = cfg.baseline_train
        hyper = TrainConfig(epochs=bt.epochs, lr=bt.lr, weight_decay=bt.weight_decay, seed=derive_seed(cfg.seed, fold, "Baseline:train"))
        model, trace = train_segmenter(model, [(data.vols[c], data.gts[c]) for c in train_ids], hyper)
        save_segmenter(model, out / "checkpoints" / "model.pt", {"train_ids": train_ids, "loss_trace": trace})
        masks = {c: binarize(predict(model, data.vols[c]), cfg.threshold) for c in test_ids}
        return _finish(out, cfg, arm, fold, train_ids, test_ids, masks, data)

    base_ckpt = arm_dir(cfg, "Baseline", fold) / "checkpoints" / "model.pt"
    if not base_ckpt.exists():
        raise MissingCheckpoint(f"{arm} fold {fold} needs the Baseline checkpoint at {base_ckpt}")
    baseline_ids = torch.load(base_ckpt, map_location="cpu", weights_only=False).get("train_ids")
    if sorted(baseline_ids or []) != train_ids:
        raise LeakageError(f"{arm} fold {fold}: baseline was trained on a different split")
    baseline = load_segmenter(base_ckpt)
    soft = {c: predict(baseline, data.vols[c]) for c in data.ids if c in set(train_ids) | set(test_ids)}

    dcfg = cfg.denoiser_config(arm)
    model = build_denoiser(dcfg, derive_seed(cfg.seed, fold, arm + ":init"))
    model.baseline_state = torch.load(base_ckpt, map_location="cpu", weights_only=False)
    cases = [make_training_case(dcfg, data.vols[c], soft[c], data.gts[c], c, cfg.threshold) for c in train_ids]
    dt = cfg.diffusion_train
    hyper = DiffusionTrainConfig(
        steps=dt.steps, lr=dt.lr, weight_decay=dt.weight_decay, seed=derive_seed(cfg.seed, fold, arm + ":train"), loss=cfg.loss_weights
    )
    model, trace = train_diffusion(model, cases, hyper)
    save_denoiser(model, out / "checkpoints" / "model.pt", {"train_ids": train_ids, "loss_trace": trace})

    masks, extra = {}, {}
    for cid in test_ids:
        s = sample(model, data.vols[cid], soft[cid], dcfg.sample_steps, derive_seed(cfg.seed, fold, arm, cid), cfg.threshold)
        if dcfg.target_mode is TargetMode.DISCREPANCY:
            upred = binarize(soft[cid], cfg.threshold)
            delta = binarize_discrepancy(s, cfg.threshold)
            caseio.write_prediction(out / "delta", cid, RegionMask(delta.channels, delta.spacing), soft=s.probs)
            masks[cid] = apply_correction(upred, delta)
            extra[cid] = {"flipped_voxels": int(delta.channels.sum()), "baseline_nesting_violations": upred.nesting_violations()}
        else:
            masks[cid] = binarize(s, cfg.threshold)
    return _finish(out, cfg, arm, fold, train_ids, test_ids, masks, data, extra)


def leakage_audit(run_dir):
    """Check every split.json under ``run_dir``; returns the number checked."""
    n = 0
    for split in sorted(Path(run_dir).glob("*/fold*/split.json")):
        rec = json.loads(split.read_text())
        _audit(rec["train_ids"], rec["test_ids"], rec["arm"], rec["fold"])
        n += 1
    return n


def run_crossval(cfg: ExperimentConfig):
    data = StudyData.load(cfg.data_dir)
    assignment = make_folds(data.ids, cfg.folds, cfg.seed)
    root = Path(cfg.run_dir)
    root.mkdir(parents=True, exist_ok=True)
    (root / "folds.json").write_text(json.dumps(assignment, indent=1, sort_keys=True))
    (root / "config.snapshot").write_text(dump_config(cfg))
    arms = ["Baseline"] + [a for a in cfg.arms if a != "Baseline"] if "Baseline" in cfg.arms else list(cfg.arms)
    results = {}
    for fold in range(cfg.folds):
        for arm in arms:
            log.info("running %s fold %d", arm, fold)
            results[(arm, fold)] = run_arm(arm, assignment, fold, cfg, data)
    leakage_audit(root)
    return results
