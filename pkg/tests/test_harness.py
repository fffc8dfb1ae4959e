import json
from collections import Counter

import numpy as np
import pytest

from discrefine import harness
from discrefine import io as caseio
from discrefine.config import ExperimentConfig, StepBudget, config_from_dict, dump_config, load_config
from discrefine.discrepancy import discrepancy_target
from discrefine.harness import (
    LeakageError,
    MissingCheckpoint,
    StudyData,
    derive_seed,
    fold_split,
    leakage_audit,
    make_folds,
    read_scores,
    run_arm,
    run_crossval,
)
from discrefine.phantom import PhantomSpec
from discrefine.segmenter import SegmenterConfig, SoftPrediction

TINY_SPEC = PhantomSpec(dims=(16, 16, 16), radius_range={"ncr": (0.8, 1.4), "et": (1.6, 2.3), "ed": (2.5, 3.4)}, encoder_depth=2)


def tiny_config(tmp_path, data_dir, **kw):
    base = dict(
        data_dir=str(data_dir),
        run_dir=str(tmp_path / "runs"),
        folds=2,
        seed=3,
        segmenter=SegmenterConfig(levels=2, base_width=4),
        baseline_train=StepBudget(epochs=1, lr=1e-2),
        denoiser={"levels": 2, "base_width": 4, "time_dim": 8, "sample_steps": 2},
        diffusion_train=StepBudget(steps=3, lr=1e-3),
    )
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    caseio.generate_dataset(root, 6, TINY_SPEC)
    return root


# ------------------------------------------------------------------ folds


def test_folds_even_split():
    folds = make_folds([f"c{i}" for i in range(10)], 5, 0)
    assert Counter(folds.values()) == {f: 2 for f in range(5)}


def test_folds_remainder():
    folds = make_folds([f"c{i}" for i in range(11)], 5, 0)
    assert sorted(Counter(folds.values()).values()) == [2, 2, 2, 2, 3]


def test_folds_deterministic_and_seed_sensitive():
    ids = [f"c{i}" for i in range(20)]
    assert make_folds(ids, 5, 1) == make_folds(ids, 5, 1)
    assert make_folds(ids, 5, 1) != make_folds(ids, 5, 2)


@pytest.mark.parametrize("n,k", [(3, 5), (4, 1)])
def test_folds_errors(n, k):
    with pytest.raises(ValueError):
        make_folds([f"c{i}" for i in range(n)], k, 0)


def test_folds_cover_every_case_once():
    ids = [f"c{i}" for i in range(13)]
    assignment = make_folds(ids, 4, 7)
    tests = [fold_split(assignment, f)[1] for f in range(4)]
    assert sorted(sum(tests, [])) == sorted(ids)
    for f in range(4):
        train, test = fold_split(assignment, f)
        assert not set(train) & set(test)


def test_derive_seed_depends_on_every_part():
    seeds = {derive_seed(0, 0, "Baseline"), derive_seed(1, 0, "Baseline"), derive_seed(0, 1, "Baseline"), derive_seed(0, 0, "ReDiffiNet")}
    assert len(seeds) == 4
    assert derive_seed(0, 0, "A", "x") == derive_seed(0, 0, "A", "x") != derive_seed(0, 0, "A", "y")


# ------------------------------------------------------------------ config


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(folds=3, arms=["Baseline", "ReDiffiNet"], denoiser={"sample_steps": 4})
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


@pytest.mark.parametrize(
    "raw",
    [
        {"folds": 5},
        {"schema_version": 2},
        {"schema_version": 1, "folds": 1},
        {"schema_version": 1, "arms": []},
        {"schema_version": 1, "arms": ["ReDiffiNet"]},
        {"schema_version": 1, "arms": ["Baseline", "Other"]},
        {"schema_version": 1, "colour": "red"},
        {"schema_version": 1, "denoiser": {"variant": "pred"}},
    ],
)
def test_config_rejects(raw):
    with pytest.raises(ValueError):
        config_from_dict(raw)


def test_arm_denoiser_configs():
    cfg = ExperimentConfig(rediffinet_variant="masked")
    assert cfg.denoiser_config("UADiff-PredOnly").variant.value == "pred"
    assert cfg.denoiser_config("UADiff-Concat").target_mode.value == "mask"
    red = cfg.denoiser_config("ReDiffiNet")
    assert (red.variant.value, red.target_mode.value) == ("masked", "discrepancy")


# ------------------------------------------------------------------ runs


def test_diffusion_arm_needs_baseline_checkpoint(tmp_path, tiny_data):
    cfg = tiny_config(tmp_path, tiny_data)
    assignment = make_folds(caseio.list_cases(tiny_data), 2, 0)
    with pytest.raises(MissingCheckpoint):
        run_arm("ReDiffiNet", assignment, 0, cfg)


def test_perfect_discrepancy_gives_perfect_scores(tmp_path, tiny_data, monkeypatch):
    cfg = tiny_config(tmp_path, tiny_data)
    data = StudyData.load(tiny_data)
    assignment = make_folds(data.ids, 2, 0)
    run_arm("Baseline", assignment, 0, cfg, data)

    def oracle_sample(model, vol, soft, steps, seed, threshold):
        upred = (soft.probs >= threshold).astype(np.uint8)
        cid = next(c for c in data.ids if data.vols[c] is vol)
        return SoftPrediction(discrepancy_target(upred, data.gts[cid]).channels.astype(np.float32), vol.spacing)

    monkeypatch.setattr(harness, "sample", oracle_sample)
    scores = run_arm("ReDiffiNet", assignment, 0, cfg, data)
    _, test_ids = fold_split(assignment, 0)
    assert [s.case_id for s in scores] == test_ids
    for sc in scores:
        assert all(v == 1.0 for v in sc.dice.values())
        assert all(v == 0.0 for v in sc.hd95.values())


def test_baseline_scores_only_test_fold(tmp_path, tiny_data):
    cfg = tiny_config(tmp_path, tiny_data)
    assignment = make_folds(caseio.list_cases(tiny_data), 2, 0)
    run_arm("Baseline", assignment, 1, cfg)
    out = tmp_path / "runs" / "Baseline" / "fold1"
    _, test_ids = fold_split(assignment, 1)
    assert [s.case_id for s in read_scores(out / "scores.csv")] == test_ids
    assert caseio.list_predictions(out / "preds") == test_ids


def test_leakage_is_detected(tmp_path, tiny_data):
    cfg = tiny_config(tmp_path, tiny_data)
    data = StudyData.load(tiny_data)
    assignment = make_folds(data.ids, 2, 0)
    run_arm("Baseline", assignment, 0, cfg, data)
    # a baseline trained on another split must not feed this fold's diffusion arm
    other = {c: 1 - f for c, f in assignment.items()}
    with pytest.raises(LeakageError):
        run_arm("ReDiffiNet", other, 0, cfg, data)
    split = tmp_path / "runs" / "Baseline" / "fold0" / "split.json"
    rec = json.loads(split.read_text())
    rec["train_ids"].append(rec["test_ids"][0])
    split.write_text(json.dumps(rec))
    with pytest.raises(LeakageError):
        leakage_audit(tmp_path / "runs")


@pytest.mark.slow
def test_tiny_crossval_end_to_end(tmp_path, tiny_data):
    cfg = tiny_config(tmp_path, tiny_data, arms=["Baseline", "UADiff-Masked", "ReDiffiNet"])
    results = run_crossval(cfg)
    assert set(results) == {(a, f) for a in cfg.arms for f in range(2)}
    root = tmp_path / "runs"
    assert leakage_audit(root) == 6
    for arm in cfg.arms:
        for f in range(2):
            out = root / arm / f"fold{f}"
            for name in ("scores.csv", "split.json", "integrity.json", "config.snapshot", "checkpoints/model.pt"):
                assert (out / name).exists(), (arm, f, name)
            integrity = json.loads((out / "integrity.json").read_text())
            assert all(rec["binary"] for rec in integrity.values())
    assert (root / "ReDiffiNet" / "fold0" / "delta").is_dir()
    first = (root / "ReDiffiNet" / "fold1" / "scores.csv").read_bytes()
    cfg2 = tiny_config(tmp_path, tiny_data, arms=["Baseline", "UADiff-Masked", "ReDiffiNet"], run_dir=str(tmp_path / "again"))
    run_crossval(cfg2)
    assert (tmp_path / "again" / "ReDiffiNet" / "fold1" / "scores.csv").read_bytes() == first
