"""Finite-difference verification suite for every layer and the whole model."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .model import ArchSpec, build_model, forward_backward
from .tensor_core import Rng

LAYER_TOL = 1e-4
MODEL_TOL = 1e-3
# pre-batchnorm conv biases have an exactly-zero true gradient; their float32
# value is rounding noise and only needs to stay negligible
STRUCTURAL_ZERO_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def _away_from_zero(rng: Rng, shape, lo=0.05, hi=1.0) -> np.ndarray:
    mag = rng.uniform_array(int(np.prod(shape)), lo, hi)
    sign = np.where(rng.uniform_array(mag.size) < 0.5, -1.0, 1.0)
    return (mag * sign).reshape(shape)


def check_conv(dilation: int, rng: Rng) -> float:
    x = rng.uniform_array(2 * 2 * 9 * 9, -1, 1).reshape(2, 2, 9, 9)
    w = rng.uniform_array(3 * 2 * 9, -1, 1).reshape(3, 2, 3, 3)
    b = rng.uniform_array(3, -1, 1)

    def fwd(d):
        return L.conv2d_forward(d["x"], L.ConvParams(d["w"], d["b"], dilation))

    def bwd(d, g):
        gx, gw, gb = L.conv2d_backward(d["x"], L.ConvParams(d["w"], d["b"], dilation), g)
        return {"x": gx, "w": gw, "b": gb}

    return L.gradient_check(fwd, bwd, {"x": x, "w": w, "b": b}, rng)


def check_batchnorm(rng: Rng) -> float:
    x = rng.uniform_array(4 * 3 * 5 * 5, -2, 2).reshape(4, 3, 5, 5)
    gamma = rng.uniform_array(3, 0.5, 1.5)
    beta = rng.uniform_array(3, -0.5, 0.5)

    def params(d):
        p = L.BatchNormParams.fresh(3, dtype=np.float64)
        p.gamma, p.beta = d["gamma"], d["beta"]
        return p

    def fwd(d):
        return L.batchnorm_forward(d["x"], params(d), "train")[0]

    def bwd(d, g):
        _, cache = L.batchnorm_forward(d["x"], params(d), "train")
        gx, gg, gb = L.batchnorm_backward(cache, g)
        return {"x": gx, "gamma": gg, "beta": gb}

    return L.gradient_check(fwd, bwd, {"x": x, "gamma": gamma, "beta": beta}, rng, h=1e-5)


def check_leaky_relu(rng: Rng) -> float:
    x = _away_from_zero(rng, (2, 3, 6, 6))
    return L.gradient_check(lambda d: L.leaky_relu(d["x"]),
                            lambda d, g: {"x": L.leaky_relu_backward(d["x"], g)},
                            {"x": x}, rng)


def check_concat(rng: Rng) -> float:
    a = rng.uniform_array(2 * 3 * 4 * 4, -1, 1).reshape(2, 3, 4, 4)
    b = rng.uniform_array(2 * 6 * 4 * 4, -1, 1).reshape(2, 6, 4, 4)

    def bwd(d, g):
        ga, gb = L.split_channels(g, [3, 6])
        return {"a": ga, "b": gb}

    return L.gradient_check(lambda d: L.concat_channels([d["a"], d["b"]]), bwd, {"a": a, "b": b}, rng)


def check_loss(rng: Rng) -> float:
    target = rng.uniform_array(2 * 3 * 5 * 5).reshape(2, 3, 5, 5)
    pred = target + _away_from_zero(rng, target.shape, 0.01, 0.3)
    return L.gradient_check(lambda d: np.array(L.loss_l1l2(d["pred"], target)[0]),
                            lambda d, g: {"pred": L.loss_l1l2(d["pred"], target)[1] * g},
                            {"pred": pred}, rng, h=1e-6)


def check_model(rng: Rng, per_tensor: int = 4, h: float = 1e-6) -> float:
    """32-bit analytic gradients of the full model against 64-bit central differences."""
    model = build_model(ArchSpec(), rng.child())
    x = rng.uniform_array(2 * 3 * 8 * 8).reshape(2, 3, 8, 8).astype(np.float32)
    target = rng.uniform_array(x.size).reshape(x.shape).astype(np.float32)
    _, grads = forward_backward(model, x, target)
    m64 = model.astype(np.float64)
    params = m64.parameters()
    x64, t64 = x.astype(np.float64), target.astype(np.float64)
    worst = 0.0
    for name in sorted(params):
        g = grads[name].reshape(-1)
        if ".conv.b" in name and not name.startswith("head"):
            worst = max(worst, float(np.abs(g).max()) / STRUCTURAL_ZERO_TOL * MODEL_TOL)
            continue
        arr = params[name].reshape(-1)
        picks = rng.u64_array(per_tensor) % np.uint64(arr.size)
        for i in sorted(set(int(p) for p in picks)):
            saved = arr[i]
            arr[i] = saved + h
            lp = forward_backward(m64, x64, t64)[0]
            arr[i] = saved - h
            lm = forward_backward(m64, x64, t64)[0]
            arr[i] = saved
            worst = max(worst, float(L.rel_error(g[i], (lp - lm) / (2 * h))))
    return worst


def run_suite(seed: int = 0) -> list:
    rng = Rng(seed)
    checks = [
        ("conv dilation 1", lambda r: check_conv(1, r), LAYER_TOL),
        ("conv dilation 2", lambda r: check_conv(2, r), LAYER_TOL),
        ("conv dilation 4", lambda r: check_conv(4, r), LAYER_TOL),
        ("batchnorm", check_batchnorm, LAYER_TOL),
        ("leaky relu", check_leaky_relu, LAYER_TOL),
        ("concat", check_concat, LAYER_TOL),
        ("loss", check_loss, LAYER_TOL),
        ("model end-to-end", check_model, MODEL_TOL),
    ]
    results = []
    for name, fn, tol in checks:
        t0 = time.perf_counter()
        err = fn(rng.child())
        results.append(CheckResult(name, err, tol, time.perf_counter() - t0))
    return results
