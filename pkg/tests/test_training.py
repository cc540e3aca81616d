import math

import numpy as np
import pytest
import torch

from oracles import bce_loop
from ipt_detect.dataset import FrameLabelMatrix, n_frames_for, rasterize_labels
from ipt_detect.evaluation import frame_metrics
from ipt_detect.model import ConfigError, ModelConfig
from ipt_detect.pipeline import ClipSet, track_clips
from ipt_detect.synth import random_fixture_spec, synth_fixture
from ipt_detect.training import (
    LOG_HEADER,
    TrainConfig,
    TrainingDiverged,
    build_model,
    class_weights,
    clip_gradients,
    cosine_lr,
    global_grad_norm,
    load_checkpoint,
    train,
    weighted_bce,
)

TINY = ModelConfig(channels_per_branch=[4, 8, 16])


@pytest.fixture(scope="module")
def fixture_clips():
    rng = np.random.default_rng(7)
    sets = []
    for i in range(3):
        wave, notes = synth_fixture(random_fixture_spec(rng, duration=15.0))
        labels = rasterize_labels(notes, n_frames_for(len(wave)))
        sets.append(track_clips(wave, labels, f"t{i}"))
    return ClipSet.concat(sets)


# --- class weights ----------------------------------------------------------


def _labels_with(pos_counts, n_frames):
    m = np.zeros((7, n_frames), dtype=np.uint8)
    for c, k in enumerate(pos_counts):
        m[c, :k] = 1
    return [FrameLabelMatrix(m)]


def test_class_weight_ratio():
    w = class_weights(_labels_with([100, 500, 10, 1000, 1, 250, 999], 1000))
    assert w[0] == 9
    assert w[1] == 1
    assert w[2] == 20  # 990 / 10 = 99 clamped
    assert w[3] == 1  # fewer negatives than positives clamps up to 1
    assert w[5] == 3


def test_class_weight_clamp():
    w = class_weights(_labels_with([10] * 7, 10010), w_max=20)
    assert np.all(w == 20)


def test_class_weight_masks():
    m = np.zeros((7, 20), dtype=np.uint8)
    m[:, :5] = 1
    mask = np.zeros(20, dtype=bool)
    mask[:10] = True
    assert np.all(class_weights([m], [mask]) == 1)


def test_class_weight_missing_class():
    with pytest.raises(ValueError, match="glissando"):
        class_weights(_labels_with([5, 5, 5, 5, 0, 5, 5], 20))


# --- loss -------------------------------------------------------------------


def test_bce_ln2():
    d = torch.float64
    loss = weighted_bce(torch.tensor([[0.5]], dtype=d), torch.tensor([[1.0]], dtype=d), torch.tensor([1.0], dtype=d))
    assert loss.item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_perfect_prediction():
    y = (torch.rand(7, 40, generator=torch.Generator().manual_seed(0)) < 0.3).double()
    w = torch.arange(1, 8, dtype=torch.double) * 2
    assert weighted_bce(y, y, w).item() <= 1e-6 * w.max().item()


def test_bce_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = int(rng.integers(1, 20))
        p = rng.random((7, t))
        p[rng.random((7, t)) < 0.05] = 0.0  # exercise the clamp
        y = (rng.random((7, t)) < 0.4).astype(float)
        w = rng.uniform(1, 20, 7)
        mask = rng.random(t) < 0.8
        mask[0] = True
        got = weighted_bce(torch.tensor(p), torch.tensor(y), torch.tensor(w), torch.tensor(mask)).item()
        assert got == pytest.approx(bce_loop(p.tolist(), y.tolist(), w.tolist(), mask.tolist()), abs=1e-9)


def test_bce_nan_raises():
    p = torch.full((7, 3), 0.5)
    p[2, 1] = float("nan")
    with pytest.raises(FloatingPointError):
        weighted_bce(p, torch.zeros(7, 3), torch.ones(7))


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        weighted_bce(torch.rand(7, 3), torch.zeros(7, 4), torch.ones(7))


def test_masked_frames_contribute_nothing():
    rng = np.random.default_rng(1)
    p = torch.tensor(rng.random((2, 7, 30)))
    y = torch.tensor((rng.random((2, 7, 30)) < 0.3).astype(float))
    w = torch.tensor(rng.uniform(1, 5, 7))
    mask = torch.ones(2, 30, dtype=torch.bool)
    mask[1, 20:] = False
    padded = weighted_bce(p, y, w, mask)
    # scramble the padded region: the loss must not move
    p2, y2 = p.clone(), y.clone()
    p2[1, :, 20:] = 0.999
    y2[1, :, 20:] = 0.0
    assert weighted_bce(p2, y2, w, mask).item() == padded.item()
    flat_p = torch.cat([p[0], p[1, :, :20]], dim=1)
    flat_y = torch.cat([y[0], y[1, :, :20]], dim=1)
    assert padded.item() == pytest.approx(weighted_bce(flat_p, flat_y, w).item(), abs=1e-12)
    # and the metrics agree between padded and unpadded layouts
    pred = (p.numpy() >= 0.5).astype(np.uint8)
    a = frame_metrics(np.concatenate(list(pred), axis=1), np.concatenate(list(y.numpy()), axis=1),
                      mask.numpy().reshape(-1))[:3]
    b = frame_metrics((flat_p.numpy() >= 0.5).astype(np.uint8), flat_y.numpy())[:3]
    assert a == b


# --- schedule and clipping --------------------------------------------------


def test_cosine_schedule():
    assert cosine_lr(0, 100, 0.01) == 0.01
    assert cosine_lr(50, 100, 0.01) == pytest.approx(0.005)
    assert abs(cosine_lr(100, 100, 0.01)) <= 1e-9
    lrs = [cosine_lr(s, 100, 0.01) for s in range(101)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_clip_30_to_3():
    p = torch.nn.Parameter(torch.zeros(4))
    p.grad = torch.tensor([18.0, 24.0, 0.0, 0.0])  # norm 30
    assert clip_gradients([p], 3.0) == pytest.approx(30.0)
    assert global_grad_norm([p]) == pytest.approx(3.0, abs=1e-6)
    np.testing.assert_allclose(p.grad.numpy(), [1.8, 2.4, 0, 0], rtol=1e-6)


def test_clip_leaves_small_gradients():
    p = torch.nn.Parameter(torch.zeros(2))
    p.grad = torch.tensor([0.3, 0.4])
    clip_gradients([p], 3.0)
    assert torch.equal(p.grad, torch.tensor([0.3, 0.4]))


# --- config -----------------------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [dict(initial_lr=0), dict(momentum=1.0), dict(batch_size=0), dict(grad_clip_l2=-1),
     dict(lr_schedule="step"), dict(epochs=0)],
)
def test_train_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs)


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.initial_lr, c.momentum, c.batch_size, c.grad_clip_l2, c.lr_schedule) == (
        0.01, 0.9, 10, 3.0, "cosine")


# --- loop -------------------------------------------------------------------


def test_loss_decreases_and_clipping_holds(fixture_clips, tmp_path):
    cfg = TrainConfig(epochs=3, seed=0, batch_size=2)
    model = build_model(TINY, seed=0)
    res = train(model, fixture_clips, fixture_clips.subset(range(3)), cfg, run_dir=tmp_path)
    steps = math.ceil(len(fixture_clips) / cfg.batch_size)
    losses = np.array(res.step_losses).reshape(3, steps)
    assert np.median(losses[2]) < np.median(losses[0])
    assert len(res.clipped_norms) == 3 * steps
    assert max(res.clipped_norms) <= 3 + 1e-6
    log = (tmp_path / "train_log.csv").read_text().splitlines()
    assert log[0] == LOG_HEADER and len(log) == 4
    assert (tmp_path / "checkpoints" / "best.pt").exists()
    best, payload = load_checkpoint(res.best_checkpoint, TINY)
    assert payload["epoch"] == res.best_epoch


def test_clipping_is_exercised(fixture_clips):
    cfg = TrainConfig(epochs=1, seed=0, batch_size=5, grad_clip_l2=0.5)
    res = train(build_model(TINY, seed=0), fixture_clips, fixture_clips.subset([0]), cfg)
    assert max(res.grad_norms) > 0.5
    assert max(res.clipped_norms) <= 0.5 + 1e-6


def test_determinism(fixture_clips):
    runs = []
    for _ in range(2):
        model = build_model(TINY, seed=3)
        res = train(model, fixture_clips, fixture_clips.subset([0]), TrainConfig(epochs=1, seed=3))
        runs.append(res.step_losses)
    np.testing.assert_allclose(runs[0], runs[1], rtol=0, atol=1e-6)


def test_best_state_restored(fixture_clips):
    model = build_model(TINY, seed=0)
    valid = fixture_clips.subset(range(2))
    res = train(model, fixture_clips, valid, TrainConfig(epochs=2, seed=0))
    from ipt_detect.training import evaluate_clips

    assert evaluate_clips(model, valid)[2] == pytest.approx(res.best_f1)


def test_divergence_reports_last_checkpoint(fixture_clips, tmp_path):
    model = build_model(TINY, seed=0)
    steps_per_epoch = math.ceil(len(fixture_clips) / 10)
    calls = {"n": 0}

    def poison(mod, inp, out):
        if mod.training:
            calls["n"] += 1
            if calls["n"] > steps_per_epoch:
                return out * float("nan")
        return out

    model.register_forward_hook(poison)
    with pytest.raises(TrainingDiverged) as err:
        train(model, fixture_clips, fixture_clips.subset([0]), TrainConfig(epochs=3), run_dir=tmp_path)
    assert err.value.last_checkpoint == tmp_path / "checkpoints" / "best.pt"
    assert err.value.last_checkpoint.exists()


def test_empty_split_rejected(fixture_clips):
    empty = fixture_clips.subset([])
    with pytest.raises(ValueError):
        train(build_model(TINY), empty, fixture_clips, TrainConfig(epochs=1))
