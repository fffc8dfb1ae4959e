"""Command line entry point: ``discrefine <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from . import io as caseio
from .config import ExperimentConfig, load_config
from .diffusion import (
    DenoiserConfig,
    DiffusionTrainConfig,
    TargetMode,
    build_denoiser,
    load_denoiser,
    make_training_case,
    sample,
    save_denoiser,
    train_diffusion,
)
from .discrepancy import apply_correction
from .harness import SCORE_COLUMNS, StudyData, run_crossval
from .metrics import REPORT_REGIONS, MetricConventions, aggregate, evaluate_case
from .phantom import PhantomSpec, to_regions, znorm_rescale
from .report import report
from .segmenter import (
    TrainConfig,
    binarize,
    build_segmenter,
    predict,
    save_segmenter,
    segmenter_from_state,
    train_segmenter,
)

log = logging.getLogger("discrefine")


def _triple(text, cast):
    parts = [cast(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return tuple(parts)


def _load_cfg(path) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    return load_config(path)


def cmd_gen_data(args):
    spec = PhantomSpec(dims=args.dims, seed=args.seed, tumor_count=args.tumors)
    ids = caseio.generate_dataset(args.out, args.cases, spec)
    print(f"wrote {len(ids)} cases to {args.out}")


def cmd_train_baseline(args):
    cfg = _load_cfg(args.config)
    data = StudyData.load(args.data)
    model = build_segmenter(cfg.segmenter, args.seed)
    bt = cfg.baseline_train
    hyper = TrainConfig(epochs=args.epochs or bt.epochs, lr=bt.lr, weight_decay=bt.weight_decay, seed=args.seed)
    model, trace = train_segmenter(model, [(data.vols[c], data.gts[c]) for c in data.ids], hyper)
    save_segmenter(model, args.out, {"train_ids": data.ids, "loss_trace": trace})
    print(json.dumps({"epochs": len(trace), "final_loss": trace[-1]}))


_VARIANTS = {"pred": "pred", "concat": "concat", "masked": "masked"}
_TARGETS = {"mask": TargetMode.DIRECT_MASK, "discrepancy": TargetMode.DISCREPANCY}


def cmd_train_diffusion(args):
    cfg = _load_cfg(args.config)
    data = StudyData.load(args.data)
    base_state = torch.load(args.baseline, map_location="cpu", weights_only=False)
    baseline = segmenter_from_state(base_state)
    dcfg = DenoiserConfig(variant=_VARIANTS[args.variant], target_mode=_TARGETS[args.target], **cfg.denoiser)
    model = build_denoiser(dcfg, args.seed)
    model.baseline_state = base_state
    cases = [
        make_training_case(dcfg, data.vols[c], predict(baseline, data.vols[c]), data.gts[c], c, cfg.threshold) for c in data.ids
    ]
    dt = cfg.diffusion_train
    hyper = DiffusionTrainConfig(steps=args.steps or dt.steps, lr=dt.lr, weight_decay=dt.weight_decay, seed=args.seed, loss=cfg.loss_weights)
    model, trace = train_diffusion(model, cases, hyper)
    save_denoiser(model, args.out, {"train_ids": data.ids, "loss_trace": trace})
    print(json.dumps({"steps": len(trace), "final_loss": trace[-1]}))


def cmd_sample(args):
    model = load_denoiser(args.model)
    if model.baseline_state is None:
        sys.exit("denoiser checkpoint carries no baseline model")
    baseline = segmenter_from_state(model.baseline_state)
    case_dir = Path(args.case)
    vol, _ = caseio.read_case(case_dir)
    vol = znorm_rescale(vol)
    soft = predict(baseline, vol)
    s = sample(model, vol, soft, args.steps, args.seed, args.threshold)
    case_id = case_dir.name
    out_mask = binarize(s, args.threshold)
    caseio.write_prediction(args.out, case_id, out_mask, soft=s.probs)
    if args.baseline_out:
        caseio.write_prediction(args.baseline_out, case_id, binarize(soft, args.threshold), soft=soft.probs)
    print(f"{model.config.target_mode.value} sample for {case_id} written to {args.out}")


def cmd_refine(args):
    ids = caseio.list_predictions(args.baseline_pred)
    n = 0
    for cid in ids:
        delta_path = Path(args.delta) / f"{cid}.npz"
        if not delta_path.exists():
            log.warning("no discrepancy for %s, skipping", cid)
            continue
        upred = caseio.read_prediction(args.baseline_pred, cid)
        delta = caseio.read_prediction(args.delta, cid)
        caseio.write_prediction(args.out, cid, apply_correction(upred, delta))
        n += 1
    print(f"refined {n} cases into {args.out}")


def cmd_evaluate(args):
    conv = MetricConventions()
    rows, scores = [], []
    for cid in caseio.list_predictions(args.pred):
        pred = caseio.read_prediction(args.pred, cid)
        _, labels = caseio.read_case(Path(args.gt) / cid)
        gt = to_regions(labels)
        spacing = args.spacing or gt.spacing
        sc = evaluate_case(pred, gt, spacing, conv, case_id=cid)
        scores.append(sc)
        for region in REPORT_REGIONS:
            rows.append([cid, region, repr(sc.dice[region]), repr(sc.hd95[region]), int(sc.sentinel[region])])
    if not scores:
        sys.exit(f"no predictions in {args.pred}")
    summary = aggregate(scores)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCORE_COLUMNS)
        w.writerows(rows)
        w.writerow([])
        w.writerow(["# summary", "region", "dice_mean", "hd95_mean", "hd95_excluded"])
        for region in REPORT_REGIONS:
            w.writerow(["# summary", region, repr(summary["dice"][region]), repr(summary["hd95"][region]), summary["hd95_excluded"][region]])
        w.writerow(["# summary", "Avg", repr(summary["dice"]["Avg"]), repr(summary["hd95"]["Avg"]), summary["excluded_count"]])
    print(f"scored {len(scores)} cases -> {args.out}")


def cmd_crossval(args):
    cfg = load_config(args.config)
    run_crossval(cfg)
    print(report([cfg.run_dir], "md"))


def cmd_report(args):
    text = report(args.runs, args.format)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser():
    p = argparse.ArgumentParser(prog="discrefine", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic phantom cases")
    g.add_argument("--out", required=True)
    g.add_argument("--cases", type=int, required=True)
    g.add_argument("--dims", type=lambda s: _triple(s, int), default=(32, 32, 32))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tumors", type=int, default=1)
    g.set_defaults(func=cmd_gen_data)

    b = sub.add_parser("train-baseline", help="train the baseline segmenter on every case in DIR")
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--config")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--epochs", type=int)
    b.set_defaults(func=cmd_train_baseline)

    d = sub.add_parser("train-diffusion", help="train a conditional denoiser on top of a baseline")
    d.add_argument("--data", required=True)
    d.add_argument("--baseline", required=True)
    d.add_argument("--variant", choices=sorted(_VARIANTS), default="concat")
    d.add_argument("--target", choices=sorted(_TARGETS), default="discrepancy")
    d.add_argument("--out", required=True)
    d.add_argument("--config")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--steps", type=int)
    d.set_defaults(func=cmd_train_diffusion)

    s = sub.add_parser("sample", help="sample a mask or discrepancy for one case")
    s.add_argument("--model", required=True)
    s.add_argument("--case", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--baseline-out")
    s.add_argument("--threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_sample)

    r = sub.add_parser("refine", help="flip baseline voxels marked by discrepancy masks")
    r.add_argument("--baseline-pred", required=True)
    r.add_argument("--delta", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("evaluate", help="Dice and HD95 per case and region")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--spacing", type=lambda s: _triple(s, float))
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("crossval", help="run the full k-fold study")
    c.add_argument("--config", required=True)
    c.set_defaults(func=cmd_crossval)

    rp = sub.add_parser("report", help="tabulate finished runs")
    rp.add_argument("--runs", nargs="+", required=True)
    rp.add_argument("--format", choices=("md", "csv"), default="md")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args.func(args)


if __name__ == "__main__":
    main()
