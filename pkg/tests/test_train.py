import numpy as np
import pytest

from colornormnet.errors import ConfigError, DataError, RejectionBudgetError
from colornormnet.model import build_model, weights_to_bytes
from colornormnet.raster import from_uint8
from colornormnet.synthetic import generate_corpus
from colornormnet.tensor_core import Rng
from colornormnet.train import (PatchSet, TrainConfig, evaluate_offset_recovery, perturb, sample_patches,
                                split_holdout, synthesize_pair, train)


@pytest.fixture(scope="module")
def small_patches():
    imgs = [from_uint8(i) for i in generate_corpus(12, 32, 5)]
    return sample_patches(imgs, 24, 16, Rng(1))


def test_zero_offsets_identity():
    t = Rng(0).uniform_array(5 * 5 * 3).reshape(5, 5, 3).astype(np.float32)
    assert perturb(t, 0.0, 0.0).tobytes() == t.tobytes()


def test_green_channel_untouched_over_many_draws():
    r = Rng(3)
    imgs = Rng(4).uniform_array(1000 * 4 * 4 * 3).reshape(1000, 4, 4, 3).astype(np.float32)
    for t in imgs:
        s, e1, e2 = synthesize_pair(t, r)
        assert s[..., 1].tobytes() == t[..., 1].tobytes()
        assert abs(e1) <= 0.2 and abs(e2) <= 0.2
        np.testing.assert_array_equal(s[..., 0], t[..., 0] + np.float32(e1))


def test_no_clamping():
    t = np.full((1, 1, 3), 0.9, np.float32)
    s = perturb(t, 0.15, -0.95)
    assert s[0, 0, 0] == np.float32(0.9) + np.float32(0.15)
    assert s[0, 0, 0] > 1.0 and s[0, 0, 2] < 0.0


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(iterations=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(offset_range=0.5).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()


def test_sample_patches_large_image():
    img = from_uint8(generate_corpus(1, 2048, 3)[0])
    ps = sample_patches([img], 1000, 256, Rng(0))
    assert ps.patches.shape == (1000, 256, 256, 3)
    y, x = ps.tags[17][1:]
    np.testing.assert_array_equal(ps.patches[17], img[y:y + 256, x:x + 256])


def test_sample_patches_errors_and_geometry():
    with pytest.raises(RejectionBudgetError, match="0.0%"):
        sample_patches([np.ones((8, 8, 3), np.float32)], 3, 4, Rng(0))
    with pytest.raises(DataError):
        sample_patches([np.zeros((8, 8, 3), np.float32)], 3, 9, Rng(0))
    img = Rng(2).uniform_array(6 * 6 * 3).reshape(6, 6, 3).astype(np.float32) * 0.5
    ps = sample_patches([img], 4, 6, Rng(0))
    assert all(t == (0, 0, 0) for t in ps.tags)
    assert all((p == img).all() for p in ps.patches)


def test_generator_passes_tissue_filter():
    imgs = [from_uint8(i) for i in generate_corpus(200, 64, 1)]
    lum = [float(i.reshape(-1, 3).mean(0) @ [0.299, 0.587, 0.114]) for i in imgs]
    assert np.mean(np.array(lum) <= 0.9) >= 0.9


def test_split_holdout_partitions():
    tr, ho = split_holdout(50, 0.1, Rng(0))
    assert len(ho) == 5 and sorted(tr + ho) == list(range(50))


def test_training_deterministic_and_logged(small_patches):
    cfg = TrainConfig(batch_size=4, patch_size=16, iterations=6, seed=3)
    m1, log1 = train(small_patches, cfg)
    m2, log2 = train(small_patches, cfg)
    assert weights_to_bytes(m1) == weights_to_bytes(m2)
    assert log1.to_csv(with_timing=False) == log2.to_csv(with_timing=False)
    assert [e.iteration for e in log1.entries] == list(range(1, 7))
    assert log1.entries[-1].holdout_loss is not None
    assert all(e.holdout_loss is None for e in log1.entries[:-1])
    assert m1.mode == "infer"


def test_train_log_csv_format(small_patches):
    _, log = train(small_patches, TrainConfig(batch_size=2, patch_size=16, iterations=2, seed=0))
    lines = log.to_csv().splitlines()
    assert lines[0] == "iteration,loss,holdout_loss,millis"
    first = lines[1].split(",")
    assert first[0] == "1" and first[2] == "" and float(first[3]) > 0
    assert lines[2].split(",")[2] != ""


def test_training_lowers_holdout_loss(small_patches):
    _, log = train(small_patches, TrainConfig(batch_size=8, patch_size=16, iterations=60, seed=1))
    assert log.final_holdout < log.initial_holdout


def test_zero_head_offset_recovery():
    m = build_model()
    m.head.weights[...] = 0
    m.head.bias[...] = 0
    m.eval()
    ps = PatchSet(Rng(0).uniform_array(20 * 8 * 8 * 3).reshape(20, 8, 8, 3).astype(np.float32))
    mae = evaluate_offset_recovery(m, ps, 1000, Rng(1))
    assert abs(mae[0] - 0.1) < 0.01 and abs(mae[2] - 0.1) < 0.01 and mae[1] == 0.0
    assert evaluate_offset_recovery(m, ps, 50, Rng(1), offset_range=0.0).tolist() == [0.0, 0.0, 0.0]
    with pytest.raises(ValueError):
        evaluate_offset_recovery(m.train(), ps, 5, Rng(1))
