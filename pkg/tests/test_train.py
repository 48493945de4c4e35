import math

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_decoder, tiny_encoder, tiny_train_config
from heightformer import data as D
from heightformer.config import AugmentConfig, DecoderConfig, EncoderConfig, SynthSpec
from heightformer.model import HeightFormer, count_parameters, load_checkpoint, save_checkpoint
from heightformer.train import (
    NumericError,
    benchmark,
    feather_weights,
    lr_schedule,
    predict,
    scenes_to_tiles,
    load_scenes,
    train,
)


# -- schedule ------------------------------------------------------------------

def test_lr_schedule_examples():
    total = 800
    assert lr_schedule(0, total, 1e-5) == 0.0
    assert lr_schedule(total // 8, total, 1e-5) == 1e-5
    assert lr_schedule(total, total, 1e-5) == 0.0
    assert lr_schedule(50, total, 1e-5) == pytest.approx(0.5e-5)
    assert lr_schedule(450, total, 1e-5) == pytest.approx(0.5e-5)


def test_lr_schedule_floor_of_warmup():
    # 10 // 8 = 1 warmup step
    assert lr_schedule(1, 10, 1.0) == 1.0
    assert lr_schedule(2, 10, 1.0) == pytest.approx(8 / 9)


def test_lr_schedule_rejects_out_of_range():
    with pytest.raises(ValueError):
        lr_schedule(11, 10, 1.0)
    with pytest.raises(ValueError):
        lr_schedule(-1, 10, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(8, 5000))
def test_lr_schedule_continuous_with_peak_at_boundary(total):
    lrs = np.array([lr_schedule(s, total, 1.0) for s in range(total + 1)])
    warm = total // 8
    assert lrs.argmax() == warm and lrs.max() == 1.0
    # piecewise linear: step sizes bounded by the steeper of the two slopes
    assert np.abs(np.diff(lrs)).max() <= max(1 / warm, 1 / (total - warm)) + 1e-12
    assert (lrs >= 0).all()


# -- training loop -------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_tiles():
    cfg = tiny_train_config(n_bins=4)
    scenes, _ = load_scenes(cfg)
    return scenes_to_tiles(scenes, cfg.data.tile)


def test_same_seed_runs_identical(tiny_tiles):
    cfg = tiny_train_config(n_bins=4, max_steps=4)
    a = train(cfg, tiles=tiny_tiles, val_tiles=[])
    b = train(cfg, tiles=tiny_tiles, val_tiles=[])
    assert a.losses == b.losses
    probe = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(0))
    a.model.eval(), b.model.eval()
    with torch.no_grad():
        assert torch.equal(a.model(probe).heights.values, b.model(probe).heights.values)


def test_worker_count_does_not_change_trace(tiny_tiles):
    cfg = tiny_train_config(n_bins=4, max_steps=3, augment=AugmentConfig(crop_size=64))
    serial = train(cfg, tiles=tiny_tiles, val_tiles=[])
    cfg.workers = 2
    threaded = train(cfg, tiles=tiny_tiles, val_tiles=[])
    assert serial.losses == threaded.losses


def test_resume_matches_uninterrupted(tiny_tiles, tmp_path):
    cfg = tiny_train_config(n_bins=4, max_steps=5)
    full = train(cfg, tiles=tiny_tiles, val_tiles=[])
    k = 3
    part = train(cfg, tmp_path, tiles=tiny_tiles, val_tiles=[], stop_at=k)
    assert part.step == k
    resumed = train(cfg, tmp_path / "r", tiles=tiny_tiles, val_tiles=[], resume=tmp_path / "last.pt")
    assert abs(resumed.losses[k] - full.losses[k]) < 1e-6
    assert resumed.step == 5 and len(resumed.losses) == 5


def test_train_writes_log_checkpoints_and_validation(tiny_tiles, tmp_path):
    cfg = tiny_train_config(n_bins=4, max_steps=2, batch_size=2)
    ckpt = train(cfg, tmp_path, tiles=tiny_tiles, val_tiles=tiny_tiles[:1])
    assert (tmp_path / "last.pt").is_file() and (tmp_path / "best.pt").is_file()
    assert len((tmp_path / "train_log.jsonl").read_text().splitlines()) == 2
    assert ckpt.validation and "rel" in ckpt.validation[0]
    lrs = [h["lr"] for h in ckpt.history]
    assert lrs == [lr_schedule(s, 2, cfg.lr) for s in (1, 2)]


def test_empty_dataset_rejected():
    with pytest.raises(D.DataError, match="empty"):
        train(tiny_train_config(n_bins=4), tiles=[], val_tiles=[])


def test_nonfinite_loss_aborts_with_dump(tiny_tiles, tmp_path):
    cfg = tiny_train_config(n_bins=4, max_steps=6, lr=1e30, grad_clip=0.0)
    with pytest.raises(NumericError, match="non-finite"):
        train(cfg, tmp_path, tiles=tiny_tiles, val_tiles=[])
    dump = torch.load(tmp_path / "nonfinite_batch.pt")
    assert set(dump) == {"image", "dsm", "mask", "step"}


# -- checkpoint ----------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = tiny_train_config(n_bins=4)
    model = HeightFormer.from_config(cfg).eval()
    probe = torch.rand(2, 3, 64, 64, generator=torch.Generator().manual_seed(1))
    with torch.no_grad():
        before = model(probe)
    save_checkpoint(tmp_path / "m.pt", model, cfg, step=7, history=[{"loss": 1.0}])
    loaded, cfg2, payload = load_checkpoint(tmp_path / "m.pt")
    with torch.no_grad():
        after = loaded.eval()(probe)
    assert torch.equal(before.heights.values, after.heights.values)
    assert torch.equal(before.bins.logits, after.bins.logits)
    assert payload["step"] == 7 and cfg2 == cfg


def test_same_seed_models_identical():
    cfg = tiny_train_config(n_bins=4)
    a, b = HeightFormer.from_config(cfg), HeightFormer.from_config(cfg)
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


# -- parameter accounting --------------------------------------------------------

def test_count_single_linear():
    total, _ = count_parameters(nn.Linear(7, 5))
    assert total == 7 * 5 + 5


def test_count_breakdown_sums_to_total():
    model = HeightFormer(tiny_encoder(4), tiny_decoder(4))
    total, parts = count_parameters(model, depth=1)
    assert sum(parts.values()) == total
    assert set(parts) == {"encoder", "decoder"}


def test_default_parameter_count_in_band():
    total, parts = count_parameters(HeightFormer(EncoderConfig(), DecoderConfig()), depth=1)
    assert 35_000_000 <= total <= 60_000_000
    small, _ = count_parameters(HeightFormer(EncoderConfig(n_bins=1), DecoderConfig(n_bins=1)))
    assert small < total


# -- stitched prediction -------------------------------------------------------

def test_feather_weights_positive_and_flat_interior():
    w = feather_weights(16, 4)
    assert (w > 0).all() and w[8, 8] == 1.0 and w[0, 0] < w[2, 2]
    assert (feather_weights(8, 0) == 1).all()


def _scene(size, value=None, seed=0):
    if value is None:
        return D.synth_scene(SynthSpec(size=(size, size), seed=seed))
    img = np.full((size, size, 3), 0.5, np.float32)
    dsm = np.full((size, size), value, np.float32)
    return D.ScenePair(img, dsm, np.ones((size, size), bool), (0.0, 40.0))


def test_predict_single_tile_equals_forward():
    model = HeightFormer(tiny_encoder(4), tiny_decoder(4)).eval()
    scene = _scene(64)
    out = predict(model, scene, tile=64, overlap=16)
    x = torch.from_numpy(scene.image.transpose(2, 0, 1).copy())[None]
    with torch.no_grad():
        direct = model(x).heights.values[0].double().numpy()
    assert out.origins == [(0, 0)]
    np.testing.assert_array_equal(out.heights, direct)


def test_predict_grid_for_1024_scene():
    model = HeightFormer(tiny_encoder(2), tiny_decoder(2)).eval()
    out = predict(model, _scene(1024, value=5.0), tile=512, overlap=64)
    assert sorted({r for r, _ in out.origins}) == [0, 448, 512]
    assert len(out.origins) == 9 and len(out.bins) == 9
    assert out.heights.shape == (1024, 1024)


def test_predict_small_scene_padded():
    model = HeightFormer(tiny_encoder(2), tiny_decoder(2)).eval()
    out = predict(model, _scene(40, value=3.0), tile=64, overlap=8)
    assert out.heights.shape == (40, 40) and len(out.origins) == 1


def test_constant_scene_seams_continuous_after_overfit():
    # a few steps on one constant tile, then stitch a larger constant scene
    cfg = tiny_train_config(n_bins=4, max_steps=30, batch_size=1, lr=2e-3)
    tile = D.crop_grid(_scene(64, value=12.0), 64)
    ckpt = train(cfg, tiles=tile, val_tiles=[])
    out = predict(ckpt, _scene(160, value=12.0), tile=64, overlap=16)
    h = out.heights
    seams = sorted({o for r, c in out.origins for o in (r, c) if o > 0})
    interior = h[24:40, 24:40]
    seam_rows = np.concatenate([h[s - 2:s + 2].ravel() for s in seams])
    assert abs(seam_rows.mean() - interior.mean()) < 1e-3 * 40
    # neighbouring rows across each seam start differ no more than within a tile interior
    jumps = [np.abs(h[s] - h[s - 1]).max() for s in seams]
    assert max(jumps) < 1e-3 * 40


def test_predict_rejects_bad_overlap():
    model = HeightFormer(tiny_encoder(2), tiny_decoder(2))
    with pytest.raises(ValueError):
        predict(model, _scene(64, value=1.0), tile=64, overlap=64)


# -- benchmark -----------------------------------------------------------------

def test_benchmark_report():
    model = HeightFormer(tiny_encoder(2), tiny_decoder(2))
    rep = benchmark(model, 64, repetitions=1)
    assert len(rep["samples_s"]) == 1
    assert rep["parameters"] == count_parameters(model)[0]
    assert rep["median_s"] > 0 and math.isfinite(rep["fps"]) and "torch" in rep["hardware"]


def test_benchmark_larger_area_slower():
    model = HeightFormer(tiny_encoder(2), tiny_decoder(2))
    small = benchmark(model, 64, repetitions=5)["median_s"]
    large = benchmark(model, 256, repetitions=5)["median_s"]
    assert large > small
