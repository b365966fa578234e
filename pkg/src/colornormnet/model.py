"""ColorNormNet: four three-filter dense blocks feeding a linear offset head."""
from __future__ import annotations

import copy
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as K
from . import layers as L
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    MalformedWeightsError,
    NonFiniteError,
    ShapeMismatchError,
    UnsupportedVersionError,
)
from .tensor_core import Rng

MAGIC = b"CNRM"
FORMAT_VERSION = 1
DEFAULT_LAMBDA = 0.1


@dataclass
class BlockSpec:
    layers: int = 3
    growth: int = 3
    kernel: int = 3
    dilation: int = 1


@dataclass
class HeadSpec:
    kernel: int = 3
    out_ch: int = 3


@dataclass
class ArchSpec:
    blocks: list = field(default_factory=lambda: [BlockSpec(dilation=d) for d in (1, 2, 4, 1)])
    head: HeadSpec = field(default_factory=HeadSpec)
    lrelu_slope: float = L.LRELU_SLOPE

    def validate(self) -> None:
        if len(self.blocks) != 4:
            raise ConfigError(f"architecture needs exactly 4 dense blocks, got {len(self.blocks)}")
        for i, b in enumerate(self.blocks, 1):
            if b.growth != 3:
                raise ConfigError(f"block {i}: growth must be 3, got {b.growth}")
            if b.layers < 1:
                raise ConfigError(f"block {i}: needs at least one layer")
            if b.kernel < 1 or b.kernel % 2 == 0:
                raise ConfigError(f"block {i}: kernel must be odd, got {b.kernel}")
            dilated = i in (2, 3)
            if (b.dilation > 1) != dilated or b.dilation < 1:
                raise ConfigError(
                    f"block {i}: dilation {b.dilation} violates the schedule "
                    "(blocks 2 and 3 dilated, blocks 1 and 4 undilated)")
        if self.head.kernel % 2 == 0 or self.head.out_ch != 3:
            raise ConfigError("head must be an odd-kernel convolution with 3 outputs")
        if not 0 < self.lrelu_slope < 1:
            raise ConfigError(f"leaky ReLU slope must lie in (0, 1), got {self.lrelu_slope}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        try:
            return cls(
                blocks=[BlockSpec(**b) for b in d["blocks"]],
                head=HeadSpec(**d["head"]),
                lrelu_slope=float(d["lrelu_slope"]),
            )
        except (KeyError, TypeError) as exc:
            raise MalformedWeightsError(f"bad architecture header: {exc}") from None


@dataclass
class DenseLayer:
    conv: L.ConvParams
    bn: L.BatchNormParams


@dataclass
class Model:
    spec: ArchSpec
    blocks: list  # list[list[DenseLayer]]
    head: L.ConvParams
    mode: str = "train"

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "infer"
        return self

    def parameters(self) -> dict:
        """Trainable tensors keyed by name. Values are the live arrays."""
        out = {}
        for bi, block in enumerate(self.blocks, 1):
            for li, layer in enumerate(block, 1):
                pre = f"b{bi}.l{li}"
                out[f"{pre}.conv.w"] = layer.conv.weights
                out[f"{pre}.conv.b"] = layer.conv.bias
                out[f"{pre}.bn.gamma"] = layer.bn.gamma
                out[f"{pre}.bn.beta"] = layer.bn.beta
        out["head.w"] = self.head.weights
        out["head.b"] = self.head.bias
        return out

    def astype(self, dtype) -> "Model":
        m = copy.deepcopy(self)
        for block in m.blocks:
            for layer in block:
                layer.conv.weights = layer.conv.weights.astype(dtype)
                layer.conv.bias = layer.conv.bias.astype(dtype)
                for name in ("gamma", "beta", "running_mean", "running_var"):
                    setattr(layer.bn, name, getattr(layer.bn, name).astype(dtype))
        m.head.weights = m.head.weights.astype(dtype)
        m.head.bias = m.head.bias.astype(dtype)
        return m

    def convs(self) -> list:
        return [layer.conv for block in self.blocks for layer in block] + [self.head]


def _kaiming(rng: Rng, out_ch: int, in_ch: int, k: int) -> np.ndarray:
    bound = float(np.sqrt(6.0 / (in_ch * k * k)))
    return rng.uniform_array(out_ch * in_ch * k * k, -bound, bound).astype(np.float32).reshape(out_ch, in_ch, k, k)


def build_model(spec: ArchSpec | None = None, rng: Rng | None = None) -> Model:
    spec = spec or ArchSpec()
    spec.validate()
    rng = rng or Rng(0)
    blocks = []
    for b in spec.blocks:
        layers = []
        for j in range(b.layers):
            in_ch = 3 + b.growth * j
            conv = L.ConvParams(
                _kaiming(rng, b.growth, in_ch, b.kernel),
                np.zeros(b.growth, np.float32),
                b.dilation,
            )
            layers.append(DenseLayer(conv, L.BatchNormParams.fresh(b.growth)))
        blocks.append(layers)
    last = spec.blocks[-1].growth
    head = L.ConvParams(
        _kaiming(rng, spec.head.out_ch, last, spec.head.kernel),
        np.zeros(spec.head.out_ch, np.float32),
        1,
    )
    return Model(spec, blocks, head)


def parameter_count(model: Model, include_batchnorm: bool = True) -> int:
    n = sum(c.weights.size + c.bias.size for c in model.convs())
    if include_batchnorm:
        n += sum(l.bn.gamma.size + l.bn.beta.size for block in model.blocks for l in block)
    return n


def receptive_field(model: Model) -> int:
    return 1 + sum(c.dilation * (c.k - 1) for c in model.convs())


# -- forward / backward ---------------------------------------------------------
#
# Activations live in zero-bordered buffers. Each dense block owns one buffer
# whose channels are [block input | layer 1 | layer 2 | ...], so the input of
# layer j is simply the leading 3 + 3*j channels and no concatenation copies
# are made. ``rect`` marks the window holding real pixels; everything outside
# it is forced to zero after every layer, which reproduces zero same-padding.

def border_width(model: Model) -> int:
    return max(c.dilation * (c.k - 1) // 2 for c in model.convs())


def _check_input(model: Model, x: np.ndarray):
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeMismatchError(f"model expects (N,3,H,W) input, got shape {x.shape}")


def run_infer(model: Model, buf: np.ndarray, rect) -> np.ndarray:
    """Inference pass over a block buffer whose channels 0..2 hold the input.

    ``buf`` must be float32 with at least 3 + 3*layers channels and a zero
    frame of border_width(model) around ``rect``; it is overwritten. Returns
    the (N, 3, Hp, Wp) offset buffer, zero outside ``rect``.
    """
    slope = buf.dtype.type(model.spec.lrelu_slope)
    y0, y1, x0, x1 = rect
    for block in model.blocks:
        for j, layer in enumerate(block):
            n_in = 3 + 3 * j
            bn = layer.bn
            dt = buf.dtype
            inv_std = (1.0 / np.sqrt(bn.running_var.astype(dt) + dt.type(bn.eps))).astype(dt)
            args = (bn.running_mean.astype(dt), inv_std, bn.gamma.astype(dt), bn.beta.astype(dt), slope)
            conv = layer.conv
            if conv.out_ch == 3 and conv.weights.shape[2] == 3:
                K.conv_bn_lrelu_infer_3x3(K.flat(buf), n_in, conv.weights.astype(dt, copy=False),
                                          conv.bias.astype(dt, copy=False), conv.dilation,
                                          buf.shape[3], K.flat(buf), n_in, *args)
                L.zero_outside(buf, rect, n_in, n_in + 3)
            else:
                L.conv_into(buf, n_in, conv, buf, n_in, rect)
                K.bn_lrelu_infer(buf, n_in, *args[:4], slope, y0, y1, x0, x1)
        last = 3 * len(block)
        buf[:, 0:3] = buf[:, last:last + 3]
    out = np.empty((buf.shape[0], 3) + buf.shape[2:], dtype=buf.dtype)
    L.conv_into(buf, 3, model.head, out, 0, rect)
    return out


def _block_channels(model: Model) -> int:
    return 3 + 3 * max(len(b) for b in model.blocks)


def _pad_input(model: Model, x: np.ndarray, channels: int):
    n, _, h, w = x.shape
    bw = border_width(model)
    buf = np.zeros((n, channels, h + 2 * bw, w + 2 * bw), dtype=x.dtype)
    buf[:, :3, bw:bw + h, bw:bw + w] = x
    return buf, (bw, bw + h, bw, bw + w)


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Predict the additive offset field for a (N,3,H,W) batch."""
    _check_input(model, x)
    if model.mode == "infer":
        buf, rect = _pad_input(model, x.astype(np.float32), _block_channels(model))
        out = run_infer(model, buf, rect)
    else:
        out, _, rect = _train_forward(model, x)
    y0, y1, x0, x1 = rect
    return out[:, :, y0:y1, x0:x1].copy()


def _train_forward(model: Model, x: np.ndarray):
    slope = model.spec.lrelu_slope
    h, rect = _pad_input(model, x, 3)
    tape = []
    for block in model.blocks:
        buf = np.zeros((h.shape[0], 3 + 3 * len(block)) + h.shape[2:], dtype=x.dtype)
        buf[:, :3] = h
        steps = []
        for j, layer in enumerate(block):
            n_in = 3 + 3 * j
            c = np.empty((h.shape[0], 3) + h.shape[2:], dtype=x.dtype)
            L.conv_into(buf, n_in, layer.conv, c, 0, rect)
            b, cache = L.batchnorm_forward(c, layer.bn, "train", rect)
            buf[:, n_in:n_in + 3] = L.leaky_relu(b, slope)
            steps.append((b, cache))
        tape.append((buf, steps))
        h = np.ascontiguousarray(buf[:, -3:])
    out = np.empty_like(h)
    L.conv_into(h, 3, model.head, out, 0, rect)
    tape.append(h)
    return out, tape, rect


def forward_backward(model: Model, x: np.ndarray, target: np.ndarray, lam: float = DEFAULT_LAMBDA,
                     with_input_grad: bool = False):
    """Loss of ``x + forward(x)`` against ``target`` and gradients for every parameter.

    Returns (loss, grads) or (loss, grads, grad_x) when ``with_input_grad``.
    """
    if model.mode != "train":
        raise ValueError("forward_backward requires a model in train mode")
    _check_input(model, x)
    if target.shape != x.shape:
        raise ShapeMismatchError(f"target shape {target.shape} != input shape {x.shape}")
    out, tape, rect = _train_forward(model, x)
    y0, y1, x0, x1 = rect
    loss, g_pred = L.loss_l1l2(x + out[:, :, y0:y1, x0:x1], target, lam)
    slope = model.spec.lrelu_slope

    grads = {}
    head_in = tape.pop()
    g = np.zeros_like(out)
    g[:, :, y0:y1, x0:x1] = g_pred
    g_in = np.zeros_like(head_in)
    grads["head.w"], grads["head.b"] = L.conv_backward_into(head_in, model.head, g, 0, g_in, rect)
    for bi in range(len(model.blocks), 0, -1):
        block = model.blocks[bi - 1]
        buf, steps = tape[bi - 1]
        gbuf = np.zeros_like(buf)
        gbuf[:, -3:] = g_in
        for li in range(len(block), 0, -1):
            layer = block[li - 1]
            n_in = 3 * li
            b, cache = steps[li - 1]
            ga = L.leaky_relu_backward(b, gbuf[:, n_in:n_in + 3], slope)
            gc, gg, gb = L.batchnorm_backward(cache, ga)
            gw, gbias = L.conv_backward_into(buf, layer.conv, np.ascontiguousarray(gc), 0, gbuf, rect)
            pre = f"b{bi}.l{li}"
            grads[f"{pre}.conv.w"] = gw
            grads[f"{pre}.conv.b"] = gbias
            grads[f"{pre}.bn.gamma"] = gg
            grads[f"{pre}.bn.beta"] = gb
        g_in = np.ascontiguousarray(gbuf[:, :3])
    if with_input_grad:
        # identity skip of x + f(x)
        return loss, grads, g_pred + g_in[:, :, y0:y1, x0:x1]
    return loss, grads


# -- weight file -----------------------------------------------------------------

def _tensors_in_order(model: Model) -> list:
    out = []
    for block in model.blocks:
        for layer in block:
            out += [layer.conv.weights, layer.conv.bias, layer.bn.gamma, layer.bn.beta,
                    layer.bn.running_mean, layer.bn.running_var]
    out += [model.head.weights, model.head.bias]
    return out


def weights_to_bytes(model: Model) -> bytes:
    tensors = _tensors_in_order(model)
    for t in tensors:
        if not np.all(np.isfinite(t)):
            raise NonFiniteError("refusing to save a model with non-finite values")
    header = model.spec.to_json().encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<II", FORMAT_VERSION, len(header))
    body += header
    for t in tensors:
        body += np.ascontiguousarray(t, dtype="<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    return bytes(body)


def weights_from_bytes(blob: bytes) -> Model:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise BadMagicError("not a ColorNormNet weight file (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"weight file version {version} is not supported (expected {FORMAT_VERSION})")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise ChecksumError("weight file CRC32 mismatch")
    start = 12 + hlen
    if start > len(blob) - 4:
        raise MalformedWeightsError("header length runs past end of file")
    try:
        spec = ArchSpec.from_dict(json.loads(blob[12:start].decode("utf-8")))
        spec.validate()
    except (ValueError, ConfigError) as exc:
        raise MalformedWeightsError(f"bad architecture header: {exc}") from None
    model = build_model(spec, Rng(0))
    tensors = _tensors_in_order(model)
    need = sum(t.size for t in tensors) * 4
    payload = blob[start:-4]
    if len(payload) != need:
        raise MalformedWeightsError(
            f"payload holds {len(payload)} bytes but the architecture needs {need}")
    values = np.frombuffer(payload, dtype="<f4")
    pos = 0
    for t in tensors:
        t[...] = values[pos:pos + t.size].reshape(t.shape)
        pos += t.size
    return model.eval()


def save_weights(model: Model, dest) -> None:
    Path(dest).write_bytes(weights_to_bytes(model))


def load_weights(source) -> Model:
    return weights_from_bytes(Path(source).read_bytes())
