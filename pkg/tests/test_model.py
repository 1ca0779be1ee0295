from __future__ import annotations

import numpy as np
import pytest

from swgformer.gradsuite import reduced_model_config
from swgformer.model import (WINDOW_GROUPS, ModelConfig, NumericalError, SwGFormer, TrainConfig, accdoa_decode,
                             accdoa_encode, accdoa_loss, decoded_to_rows, desk_config, load_checkpoint,
                             load_config, full_config, parse_config_text, predict, save_checkpoint, train_loop)
from swgformer.numerics import Tensor


def small_model(seed=0, **kw):
    cfg = reduced_model_config()
    for k, v in kw.items():
        setattr(cfg, k, v)
    return SwGFormer(cfg, np.random.default_rng(seed))


def random_batch(cfg, n, rng):
    X = rng.standard_normal((n, cfg.frames, cfg.n_mels, cfg.in_channels))
    Y = np.zeros((n, cfg.label_frames, cfg.n_classes, 3))
    for i in range(n):
        for l in range(cfg.label_frames):
            v = rng.standard_normal(3)
            Y[i, l, rng.integers(cfg.n_classes)] = v / np.linalg.norm(v)
    return X, Y


# --- configuration ----------------------------------------------------------------------

def test_full_config_dimensions():
    cfg = full_config()
    assert (cfg.n_msconv, cfg.n_blocks, cfg.k, cfg.n_classes) == (4, 5, 24, 13)
    assert cfg.window_group == WINDOW_GROUPS["B"] == (5, 5, 25, 25, 25)
    assert (cfg.n_freq_post, cfg.n_chan_post, cfg.d_model, cfg.hidden) == (4, 128, 512, 256)
    desk = desk_config()
    assert (desk.d_model, desk.n_blocks, desk.window_group, desk.n_classes) == (64, 2, (5, 25), 4)


@pytest.mark.parametrize("group", "ABCDEFG")
def test_window_groups_valid(group):
    assert full_config(window_group=group).window_group == WINDOW_GROUPS[group]


def test_window_group_h_rejected():
    with pytest.raises(ValueError, match="length mismatch"):
        full_config(window_group="H")
    with pytest.raises(ValueError, match="does not divide"):
        full_config(window_group=(5, 5, 7, 25, 25))


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        full_config(msconv_channels=(64, 64, 128, 125))
    with pytest.raises(ValueError, match="k=512"):
        full_config(k=512)
    with pytest.raises(ValueError, match="aggregator"):
        full_config(aggregator="edge")


def test_config_file(tmp_path):
    text = "# desk overrides\nk = 18\nwindow_group = 5,25\naggregator = sage_mean\nlr = 0.001\nmodule_order = FF-SwG-MHSA-FF\n"
    (tmp_path / "c.cfg").write_text(text)
    cfg, train = load_config(tmp_path / "c.cfg")
    assert (cfg.k, cfg.window_group, cfg.aggregator) == (18, (5, 25), "sage_mean")
    assert cfg.module_order == ("FF", "SwG", "MHSA", "FF") and train.lr == 1e-3
    with pytest.raises(ValueError, match="unknown key 'd_ff'"):
        parse_config_text("k = 4\nd_ff = 3\n")
    with pytest.raises(ValueError, match="key=value"):
        parse_config_text("k 4\n")


# --- forward ------------------------------------------------------------------------------

def test_full_config_output_shape():
    model = SwGFormer(full_config(), np.random.default_rng(0), dtype=np.float32)
    out = predict(model, np.random.default_rng(1).standard_normal((1, 250, 64, 7)))
    assert out.shape == (1, 50, 13, 3)
    assert np.all(np.abs(out) < 1)


def test_forward_bounds_and_determinism(rng):
    model = small_model()
    cfg = model.cfg
    X = rng.standard_normal((2, cfg.frames, cfg.n_mels, 7)) * 50
    a, b = predict(model, X), predict(small_model(), X)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (2, cfg.label_frames, cfg.n_classes, 3)
    assert np.all(np.abs(a) < 1) and np.all(np.linalg.norm(a, axis=-1) <= np.sqrt(3))
    single = model(Tensor(X[0]))
    assert single.shape == (cfg.label_frames, cfg.n_classes, 3)
    with pytest.raises(ValueError, match="does not match config"):
        model(np.zeros((1, cfg.frames, cfg.n_mels, 4)))


# --- ACCDOA -------------------------------------------------------------------------------

def test_encode_axis_cases():
    t = accdoa_encode([(0, 0, 0, 0.0, 0.0), (1, 1, 0, 90.0, 0.0), (2, 2, 0, 10.0, 90.0)], 3, 4)
    np.testing.assert_allclose(t[0, 0], [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(t[1, 1], [0, 1, 0], atol=1e-15)
    np.testing.assert_allclose(t[2, 2], [0, 0, 1], atol=1e-15)
    assert np.count_nonzero(np.linalg.norm(t, axis=-1)) == 3
    assert not np.any(accdoa_encode([], 13, 50))


def test_encode_rejects_duplicates():
    with pytest.raises(ValueError, match="frame 3, class 1"):
        accdoa_encode([(3, 1, 0, 0.0, 0.0), (3, 1, 1, 50.0, 0.0)], 2, 5)


def test_decode_examples():
    pred = np.zeros((1, 2, 3))
    pred[0, 0] = [0.9, 0, 0]
    pred[0, 1] = [0.1, 0.1, 0.1]
    (frame,) = accdoa_decode(pred, 0.5)
    assert len(frame) == 1 and frame[0][0] == 0
    np.testing.assert_allclose(frame[0][1], [1, 0, 0])
    assert decoded_to_rows([frame]) == [(0, 0, 0, 0.0, 0.0)]
    with pytest.raises(ValueError):
        accdoa_decode(pred, 2.0)


def test_encode_decode_roundtrip(rng):
    rows = []
    for l in range(50):
        for c in rng.choice(13, size=rng.integers(0, 4), replace=False):
            rows.append((l, int(c), 0, float(rng.integers(-180, 180)), float(rng.integers(-89, 90))))
    rows.sort()
    back = decoded_to_rows(accdoa_decode(accdoa_encode(rows, 13, 50), 0.5))
    assert [r[:3] for r in back] == [r[:3] for r in rows]
    np.testing.assert_allclose([r[3:] for r in back], [r[3:] for r in rows], atol=1e-9)


def test_loss_values():
    target = accdoa_encode([(0, 0, 0, 30.0, 10.0)], 13, 50)
    M = target.size
    assert accdoa_loss(Tensor(target), target).item() == 0.0
    assert abs(accdoa_loss(Tensor(np.zeros_like(target)), target).item() - 1 / M) < 1e-15
    with pytest.raises(ValueError):
        accdoa_loss(Tensor(np.zeros((2, 3))), np.zeros((3, 2)))


# --- training -----------------------------------------------------------------------------

def test_zero_lr_keeps_parameters(rng):
    model = small_model()
    before = {n: p.data.copy() for n, p in model.named_parameters()}
    X, Y = random_batch(model.cfg, 4, rng)
    train_loop(model, (X, Y), None, TrainConfig(lr=0.0, batch_size=2, epochs=3, dtype="float64"))
    for n, p in model.named_parameters():
        assert p.data.tobytes() == before[n].tobytes(), n


def test_one_batch_memorization(rng):
    model = small_model()
    X, Y = random_batch(model.cfg, 4, rng)
    res = train_loop(model, (X, Y), None, TrainConfig(lr=1e-3, batch_size=4, epochs=200))
    assert res.steps == 200
    assert res.step_losses[-1] < 0.1 * res.step_losses[0]


def test_fixed_seed_trajectory(rng):
    X, Y = random_batch(reduced_model_config(), 6, rng)
    runs = [train_loop(small_model(seed=3), (X, Y), None, TrainConfig(batch_size=3, epochs=3, seed=5)).step_losses
            for _ in range(2)]
    assert len(runs[0]) == 6 and runs[0] == runs[1]


def test_training_log_and_checkpoint(tmp_path, rng):
    model = small_model()
    X, Y = random_batch(model.cfg, 4, rng)
    cfg = TrainConfig(lr=1e-3, batch_size=2, epochs=2, log_path=str(tmp_path / "log.csv"),
                      checkpoint_path=str(tmp_path / "ck.swgt"))
    res = train_loop(model, (X, Y), (X[:2], Y[:2]), cfg)
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,ER,F20,LE,LR,SELD" and len(lines) == 3
    assert res.report is not None
    loaded = load_checkpoint(tmp_path / "ck.swgt", dtype=np.float32)
    assert loaded.cfg == model.cfg
    np.testing.assert_array_equal(predict(loaded, X), predict(model, X))


def test_checkpoint_roundtrip_float64(tmp_path, rng):
    model = small_model(seed=4)
    save_checkpoint(tmp_path / "m.swgt", model)
    back = load_checkpoint(tmp_path / "m.swgt")
    X = rng.standard_normal((1, 50, 16, 7))
    # parameters pass through float32 on disk
    model.astype(np.float32).astype(np.float64)
    np.testing.assert_array_equal(predict(back, X), predict(model, X))


def test_nan_loss_aborts(rng):
    model = small_model()
    X, Y = random_batch(model.cfg, 2, rng)
    X[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError, match="lr=0.001.*grad norms"):
        train_loop(model, (X, Y), None, TrainConfig(lr=1e-3, batch_size=2, epochs=1))


def test_step_and_time_caps(rng):
    model = small_model()
    X, Y = random_batch(model.cfg, 8, rng)
    assert train_loop(model, (X, Y), None, TrainConfig(batch_size=2, epochs=10, max_steps=3)).steps == 3
    assert train_loop(model, (X, Y), None, TrainConfig(batch_size=2, epochs=10), time_budget=0.0).steps == 1
