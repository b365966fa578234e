import numpy as np
import pytest

from colornormnet import layers as L
from colornormnet.errors import (BadMagicError, ChecksumError, ConfigError, MalformedWeightsError,
                                 ShapeMismatchError, UnsupportedVersionError)
from colornormnet.model import (ArchSpec, BlockSpec, build_model, forward, forward_backward, load_weights,
                                parameter_count, receptive_field, save_weights, weights_from_bytes,
                                weights_to_bytes)
from colornormnet.tensor_core import Rng


def batch(seed, n, h, w):
    return Rng(seed).uniform_array(n * 3 * h * w).reshape(n, 3, h, w).astype(np.float32)


def test_reference_structure(model):
    assert len(model.blocks) == 4
    assert sum(len(b) for b in model.blocks) == 12
    assert [b[0].conv.dilation for b in model.blocks] == [1, 2, 4, 1]
    assert all(l.conv.out_ch == 3 for b in model.blocks for l in b)
    assert [l.conv.in_ch for l in model.blocks[0]] == [3, 6, 9]
    assert model.head.weights.shape == (3, 3, 3, 3) and model.head.bias.shape == (3,)


def test_parameter_counts(model):
    assert parameter_count(model) == 2136
    assert parameter_count(model, include_batchnorm=False) == 2064
    single = L.ConvParams(np.zeros((3, 3, 3, 3)), np.zeros(3), 1)
    assert single.weights.size + single.bias.size == 84


def test_receptive_field(model):
    assert receptive_field(model) == 51


def test_spec_validation():
    with pytest.raises(ConfigError):
        build_model(ArchSpec(blocks=[BlockSpec(dilation=1)] * 3))
    with pytest.raises(ConfigError):
        build_model(ArchSpec(blocks=[BlockSpec(dilation=d) for d in (1, 1, 4, 1)]))
    with pytest.raises(ConfigError):
        build_model(ArchSpec(blocks=[BlockSpec(dilation=d, growth=4) for d in (1, 2, 4, 1)]))


def test_init_deterministic_and_bounded():
    a = build_model(ArchSpec(), Rng(3))
    b = build_model(ArchSpec(), Rng(3))
    assert weights_to_bytes(a) == weights_to_bytes(b)
    w = a.blocks[1][2].conv.weights
    assert np.abs(w).max() <= np.sqrt(6 / 81)
    assert not a.blocks[0][0].conv.bias.any()
    assert (a.blocks[0][0].bn.gamma == 1).all() and not a.blocks[0][0].bn.beta.any()


@pytest.mark.parametrize("size", [(2, 256, 256), (1, 73, 91), (1, 1, 1), (1, 7, 7)])
def test_output_shape(model, size):
    n, h, w = size
    x = batch(0, n, h, w)
    assert forward(model.eval(), x).shape == x.shape
    if n * h * w > 1:
        assert forward(model.train(), x).shape == x.shape


def test_zero_head_outputs_zero(zero_head_model):
    assert not forward(zero_head_model, batch(1, 2, 19, 23)).any()


def test_infer_is_pure(model):
    model.eval()
    x = batch(2, 2, 33, 40)
    assert forward(model, x).tobytes() == forward(model, x).tobytes()


def test_train_and_infer_forward_agree_with_matching_stats(model):
    # with running stats equal to the batch stats, infer mode reproduces train mode
    x = batch(3, 4, 16, 16)
    for block in model.blocks:
        for layer in block:
            layer.bn.momentum = 1.0
    model.train()
    y_train = forward(model, x)
    model.eval()
    np.testing.assert_allclose(forward(model, x), y_train, atol=2e-4)


def test_rejects_bad_input_shape(model):
    with pytest.raises(ShapeMismatchError):
        forward(model.eval(), np.zeros((1, 4, 5, 5), np.float32))


def test_zero_head_identity_loss_and_head_grads(model):
    model.head.weights[...] = 0
    model.head.bias[...] = 0
    x = batch(4, 2, 12, 12)
    loss, grads = forward_backward(model.train(), x, x)
    assert loss == 0.0
    assert not grads["head.w"].any() and not grads["head.b"].any()


def test_doubling_lambda_shifts_loss(model):
    x = batch(5, 2, 10, 10)
    t = batch(6, 2, 10, 10)
    model.train()
    l1, _ = forward_backward(model, x, t, lam=0.1)
    out = x + forward(model.train(), x)
    l2, _ = forward_backward(model, x, t, lam=0.2)
    assert l2 - l1 == pytest.approx(0.1 * float(np.mean((out.astype(np.float64) - t) ** 2)), rel=1e-4)


def test_end_to_end_gradients():
    from colornormnet.verify import check_model
    assert check_model(Rng(11)) < 1e-3


def test_input_gradient_matches_finite_differences(model):
    x = batch(7, 2, 8, 8).astype(np.float64)
    t = batch(8, 2, 8, 8).astype(np.float64)
    m64 = model.astype(np.float64).train()
    _, _, gx = forward_backward(m64, x, t, with_input_grad=True)
    r = Rng(9)
    for _ in range(10):
        i = r.integers(x.size)
        xp, xm = x.copy(), x.copy()
        xp.reshape(-1)[i] += 1e-6
        xm.reshape(-1)[i] -= 1e-6
        num = (forward_backward(m64, xp, t)[0] - forward_backward(m64, xm, t)[0]) / 2e-6
        assert L.rel_error(gx.reshape(-1)[i], num) < 1e-3


def test_weights_round_trip(model, tmp_path):
    model.blocks[2][1].bn.running_mean[...] = [0.5, -1.25, 3.0]
    path = tmp_path / "m.cnrm"
    save_weights(model, path)
    loaded = load_weights(path)
    assert loaded.mode == "infer"
    assert weights_to_bytes(loaded) == path.read_bytes()
    x = batch(10, 1, 30, 30)
    assert forward(loaded, x).tobytes() == forward(model.eval(), x).tobytes()


def test_weights_corruption_detected(model):
    blob = bytearray(weights_to_bytes(model))
    flipped = bytearray(blob)
    flipped[200] ^= 0x01
    with pytest.raises(ChecksumError):
        weights_from_bytes(bytes(flipped))
    with pytest.raises(BadMagicError):
        weights_from_bytes(b"XXXX" + bytes(blob[4:]))
    bad_version = bytearray(blob)
    bad_version[4] = 9
    with pytest.raises(UnsupportedVersionError):
        weights_from_bytes(bytes(bad_version))


def test_weights_header_payload_mismatch(model):
    import struct
    import zlib
    blob = weights_to_bytes(model)
    short = blob[:-4 - 12]  # drop three float32 values
    short += struct.pack("<I", zlib.crc32(short) & 0xFFFFFFFF)
    with pytest.raises(MalformedWeightsError):
        weights_from_bytes(short)


def test_large_input_finite(model):
    x = batch(12, 1, 1024, 1024)
    assert np.isfinite(forward(model.eval(), x)).all()
