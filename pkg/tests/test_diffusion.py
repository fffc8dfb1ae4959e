import numpy as np
import pytest
import torch

from discrefine.diffusion import (
    ArchitectureMismatch,
    ConditioningVariant,
    DenoiserConfig,
    DiffusionCase,
    DiffusionTrainConfig,
    TargetMode,
    build_conditioning,
    build_denoiser,
    ddim_timesteps,
    denoise_step,
    load_denoiser,
    make_schedule,
    make_training_case,
    mask_condition,
    q_sample,
    sample,
    sample_from_condition,
    save_denoiser,
    to_signed,
    train_diffusion,
)
from discrefine.discrepancy import apply_correction, binarize_discrepancy
from discrefine.losses import compound_loss
from discrefine.phantom import MultiContrastVolume, RegionMask
from discrefine.segmenter import SegmenterConfig, SoftPrediction, TrainConfig, binarize, build_segmenter, predict, train_segmenter
from gradcheck import sampled_param_gradcheck
from oracles import alpha_bar_oracle

ALPHA_BAR_1000 = 4.0358297653756835e-05  # exact rational product, frozen


def tiny_cfg(**kw):
    kw.setdefault("levels", 2)
    kw.setdefault("base_width", 4)
    kw.setdefault("time_dim", 8)
    return DenoiserConfig(**kw)


# ------------------------------------------------------------------ schedule


def test_alpha_bar_end_of_schedule():
    sched = make_schedule(1000, 1e-4, 0.02)
    assert sched.alpha_bar(1000) == pytest.approx(ALPHA_BAR_1000, rel=1e-6)
    assert alpha_bar_oracle(1000, 1e-4, 0.02, 1000) == pytest.approx(ALPHA_BAR_1000, rel=1e-10)


def test_single_step_schedule():
    assert make_schedule(1, 1e-4, 0.02).alpha_bar(1) == pytest.approx(1 - 1e-4)


@pytest.mark.parametrize("args", [(1000, 0.02, 1e-4), (0, 1e-4, 0.02), (10, 0.0, 0.1), (10, 0.1, 1.0)])
def test_schedule_validation(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


@pytest.mark.parametrize("T,lo,hi", [(1000, 1e-4, 0.02), (50, 1e-3, 0.5), (7, 0.01, 0.01)])
def test_alpha_bar_strictly_decreasing(T, lo, hi):
    ab = make_schedule(T, lo, hi).alpha_bars
    assert np.all(np.diff(ab) < 0) and ab[0] < 1


def test_alpha_bar_matches_oracle_at_several_steps():
    sched = make_schedule()
    for t in (1, 250, 500, 1000):
        assert sched.alpha_bar(t) == pytest.approx(alpha_bar_oracle(1000, 1e-4, 0.02, t), rel=1e-9)


# ------------------------------------------------------------------ forward process


def test_q_sample_zero_noise_weight():
    x0 = np.random.default_rng(0).integers(0, 2, (3, 4, 4, 4)).astype(float)
    eps = np.random.default_rng(1).standard_normal(x0.shape)
    assert np.array_equal(q_sample(x0, 0, eps, make_schedule()), to_signed(x0))


@pytest.mark.parametrize("t", [1, 500, 1000])
def test_q_sample_zero_eps(t):
    sched = make_schedule()
    out = q_sample(np.ones((3, 2, 2, 2)), t, np.zeros((3, 2, 2, 2)), sched)
    assert np.allclose(out, np.sqrt(sched.alpha_bar(t)))


def test_q_sample_errors():
    sched = make_schedule()
    with pytest.raises(ValueError):
        q_sample(np.ones((3, 2, 2, 2)), 1001, np.zeros((3, 2, 2, 2)), sched)
    with pytest.raises(ValueError):
        q_sample(np.ones((3, 2, 2, 2)), 5, np.zeros((3, 2, 2, 1)), sched)


def test_q_sample_works_on_tensors():
    sched = make_schedule()
    x0 = torch.ones(1, 3, 2, 2, 2)
    out = q_sample(x0, 10, torch.zeros_like(x0), sched)
    assert torch.allclose(out, torch.full_like(x0, sched.alpha_bar(10) ** 0.5))


# ------------------------------------------------------------------ conditioning


def _vol(value=0.8, n=4):
    return MultiContrastVolume(np.full((4, n, n, n), value, np.float32))


def test_mask_condition_golden():
    pred = np.zeros((3, 4, 4, 4), np.uint8)
    pred[0, :2] = 1
    out = mask_condition(_vol(), RegionMask(pred)).data
    assert np.all(out[:, :2] == np.float32(0.8))
    assert np.all(out[:, 2:] == np.float32(0.8) * np.float32(0.2))


def test_mask_condition_all_zero_prediction():
    rng = np.random.default_rng(0)
    vol = MultiContrastVolume(rng.random((4, 4, 4, 4)).astype(np.float32))
    out = mask_condition(vol, RegionMask(np.zeros((3, 4, 4, 4), np.uint8))).data
    assert np.array_equal(out, vol.data * np.float32(0.2))


def test_mask_condition_shape_mismatch():
    with pytest.raises(ValueError):
        mask_condition(_vol(n=4), RegionMask(np.zeros((3, 4, 4, 2), np.uint8)))


@pytest.mark.parametrize("variant,channels", [("pred", 3), ("concat", 7), ("masked", 4)])
def test_conditioning_channels(variant, channels):
    cond = build_conditioning(variant, _vol(n=32), RegionMask(np.zeros((3, 32, 32, 32), np.uint8)))
    assert cond.shape == (channels, 32, 32, 32)
    assert ConditioningVariant(variant).channels == channels


def test_unknown_variant():
    with pytest.raises(ValueError):
        build_conditioning("stacked", _vol(), RegionMask(np.zeros((3, 4, 4, 4), np.uint8)))


@pytest.mark.parametrize("variant", list(ConditioningVariant))
def test_denoiser_input_channels(variant):
    model = build_denoiser(tiny_cfg(variant=variant), 0)
    assert model.du_encoder.blocks[0].conv1.in_channels == variant.channels + 3
    assert model.xi.blocks[0].conv1.in_channels == variant.channels


# ------------------------------------------------------------------ denoiser


def test_xi_levels_match_du_levels():
    model = build_denoiser(DenoiserConfig(), 0)
    cond = torch.zeros(1, 7, 32, 32, 32)
    feats = model.condition_features(cond)
    h = torch.zeros(1, 10, 32, 32, 32)
    for f, block in zip(feats, model.du_encoder.blocks):
        h = block(h)
        assert f.shape == h.shape


def test_injection_shape_mismatch_is_reported():
    model = build_denoiser(tiny_cfg(), 0)
    model.condition_features = lambda cond: [torch.zeros(1, 1, 1, 1, 1)] * 2
    with pytest.raises(ArchitectureMismatch):
        model(torch.zeros(1, 7, 8, 8, 8), torch.zeros(1, 3, 8, 8, 8), torch.tensor([1]))


def test_denoise_step_contract():
    model = build_denoiser(DenoiserConfig(), 0)
    rng = np.random.default_rng(0)
    cond = rng.random((7, 32, 32, 32)).astype(np.float32)
    x_t = rng.standard_normal((3, 32, 32, 32)).astype(np.float32)
    a = denoise_step(model, cond, x_t, 500)
    b = denoise_step(model, cond, x_t, 500)
    assert a.signed.shape == (3, 32, 32, 32)
    assert np.array_equal(a.signed, b.signed)
    assert np.allclose(a.probs, (a.signed + 1) / 2)
    ablated = denoise_step(model, cond, x_t, 500, feature_scale=0.0)
    assert np.abs(ablated.signed - a.signed).max() > 0


@pytest.mark.parametrize("t", [0, 1001])
def test_denoise_step_rejects_bad_t(t):
    model = build_denoiser(tiny_cfg(), 0)
    with pytest.raises(ValueError):
        denoise_step(model, np.zeros((7, 8, 8, 8)), np.zeros((3, 8, 8, 8)), t)


def test_denoise_step_rejects_wrong_channels():
    model = build_denoiser(tiny_cfg(), 0)
    with pytest.raises(ValueError):
        denoise_step(model, np.zeros((4, 8, 8, 8)), np.zeros((3, 8, 8, 8)), 3)


def test_time_embedding_is_deterministic():
    model = build_denoiser(tiny_cfg(), 0)
    with torch.no_grad():
        assert torch.equal(model.time_embedding(torch.tensor([7])), model.time_embedding(torch.tensor([7])))
        assert not torch.equal(model.time_embedding(torch.tensor([7])), model.time_embedding(torch.tensor([8])))


def test_denoiser_gradient_finite_differences():
    model = build_denoiser(tiny_cfg(base_width=2, activation="silu"), 3).double()
    g = torch.Generator().manual_seed(0)
    cond = torch.rand(1, 7, 8, 8, 8, generator=g, dtype=torch.float64)
    target = (torch.rand(1, 3, 8, 8, 8, generator=g, dtype=torch.float64) > 0.7).double()
    x_t = q_sample(target, 300, torch.randn(target.shape, generator=g, dtype=torch.float64), model.schedule)

    def loss_fn():
        return compound_loss(torch.sigmoid(2 * model(cond, x_t, torch.tensor([300]))), target)

    errors = sampled_param_gradcheck(model, loss_fn, n_params=12, seed=1)
    assert len(errors) >= 10
    assert max(e[-1] for e in errors) < 1e-2, errors


# ------------------------------------------------------------------ sampling


def test_ddim_timesteps():
    assert ddim_timesteps(1000, 10) == [1000, 900, 800, 700, 600, 500, 400, 300, 200, 100]
    assert ddim_timesteps(1000, 1) == [1000]
    assert ddim_timesteps(3, 3) == [3, 2, 1]
    with pytest.raises(ValueError):
        ddim_timesteps(1000, 1001)
    with pytest.raises(ValueError):
        ddim_timesteps(1000, 0)


def test_single_step_sample_is_one_shot_prediction():
    model = build_denoiser(tiny_cfg(), 0)
    cond = np.random.default_rng(0).random((7, 8, 8, 8)).astype(np.float32)
    out = sample_from_condition(model, cond, 1, seed=5)
    noise = torch.randn((1, 3, 8, 8, 8), generator=torch.Generator().manual_seed(5), dtype=torch.float64).float()
    expected = denoise_step(model, cond, noise[0].numpy(), 1000).probs
    assert np.allclose(out, expected, atol=1e-6)


def test_sampling_is_seeded_and_in_range():
    model = build_denoiser(tiny_cfg(), 0)
    vol = MultiContrastVolume(np.random.default_rng(0).random((4, 8, 8, 8)).astype(np.float32))
    soft = SoftPrediction(np.random.default_rng(1).random((3, 8, 8, 8)))
    a = sample(model, vol, soft, steps=4, seed=3)
    b = sample(model, vol, soft, steps=4, seed=3)
    c = sample(model, vol, soft, steps=4, seed=4)
    assert np.array_equal(a.probs, b.probs)
    assert not np.array_equal(a.probs, c.probs)
    assert a.probs.min() >= 0 and a.probs.max() <= 1
    with pytest.raises(ValueError):
        sample(model, vol, soft, steps=1001)


# ------------------------------------------------------------------ training


def _case(seed=0, n=8, zero_target=False):
    rng = np.random.default_rng(seed)
    target = np.zeros((3, n, n, n), np.float32) if zero_target else (rng.random((3, n, n, n)) > 0.7).astype(np.float32)
    return DiffusionCase(rng.random((7, n, n, n)).astype(np.float32), target, f"c{seed}")


def test_zero_learning_rate_with_fixed_draws_gives_constant_trace():
    model = build_denoiser(tiny_cfg(), 0)

    def fixed(schedule, shape, gen):
        return 400, torch.ones(shape, dtype=torch.float64) * 0.3

    _, trace = train_diffusion(model, [_case()], DiffusionTrainConfig(steps=4, lr=0.0), sampler=fixed)
    assert len(set(trace)) == 1


def test_training_is_seeded():
    traces = []
    for _ in range(2):
        model = build_denoiser(tiny_cfg(), 0)
        _, tr = train_diffusion(model, [_case(0), _case(1)], DiffusionTrainConfig(steps=5, lr=1e-3, seed=4))
        traces.append(tr)
    assert traces[0] == traces[1]


def test_training_rejects_empty_set():
    with pytest.raises(ValueError):
        train_diffusion(build_denoiser(tiny_cfg(), 0), [], DiffusionTrainConfig(steps=1))


def test_make_training_case_targets(phantom32):
    vol, gt, _ = phantom32
    perfect = SoftPrediction(gt.channels.astype(np.float32), gt.spacing)
    disc = make_training_case(DenoiserConfig(), vol, perfect, gt)
    direct = make_training_case(DenoiserConfig(target_mode="mask"), vol, perfect, gt)
    assert disc.target.sum() == 0
    assert np.array_equal(direct.target, gt.channels)
    assert disc.cond.shape == (7, 32, 32, 32)


@pytest.mark.slow
def test_perfect_baseline_learns_empty_discrepancy(phantom32):
    vol, gt, _ = phantom32
    cfg = DenoiserConfig(target_mode=TargetMode.DISCREPANCY)
    perfect = SoftPrediction(gt.channels.astype(np.float32), gt.spacing)
    case = make_training_case(cfg, vol, perfect, gt)
    model = build_denoiser(cfg, 0)
    model, _ = train_diffusion(model, [case], DiffusionTrainConfig(steps=400, lr=3e-3))
    assert sample(model, vol, perfect, seed=0).probs.mean() < 0.01


def test_checkpoint_round_trip(tmp_path):
    model = build_denoiser(tiny_cfg(variant="masked", target_mode="mask"), 1)
    model.baseline_state = {"kind": "segmenter"}
    save_denoiser(model, tmp_path / "d.pt")
    loaded = load_denoiser(tmp_path / "d.pt")
    assert loaded.config == model.config
    assert loaded.baseline_state == {"kind": "segmenter"}
    cond, x = np.ones((4, 8, 8, 8)), np.zeros((3, 8, 8, 8))
    assert np.array_equal(denoise_step(model, cond, x, 9).signed, denoise_step(loaded, cond, x, 9).signed)


@pytest.mark.slow
def test_overfit_discrepancy_single_case(phantom32):
    vol, gt, _ = phantom32
    seg = build_segmenter(SegmenterConfig(), 0)
    seg, _ = train_segmenter(seg, [(vol, gt)], TrainConfig(epochs=15, lr=1e-2))
    soft = predict(seg, vol)
    upred = binarize(soft)
    cfg = DenoiserConfig()
    model = build_denoiser(cfg, 0)
    model, _ = train_diffusion(model, [make_training_case(cfg, vol, soft, gt)], DiffusionTrainConfig(steps=500, lr=3e-3))
    corrected = apply_correction(upred, binarize_discrepancy(sample(model, vol, soft, seed=0)))
    assert (corrected.channels == gt.channels).mean() >= 0.99
