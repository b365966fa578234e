"""Self-supervised training: perturb R and B of target patches, learn to undo it."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import ConfigError, DataError, NonFiniteError, RejectionBudgetError
from .model import ArchSpec, Model, build_model, forward, forward_backward
from .tensor_core import Rng

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)
MAX_MEAN_LUMINANCE = 0.9
HOLDOUT_EVERY = 50


@dataclass
class TrainConfig:
    batch_size: int = 128
    patch_size: int = 256
    lr: float = 0.001
    lam: float = 0.1
    iterations: int = 1000
    seed: int = 0
    offset_range: float = 0.2
    holdout_fraction: float = 0.1

    def validate(self) -> None:
        if not 0 < self.offset_range < 0.5:
            raise ConfigError(f"offset_range must lie in (0, 0.5), got {self.offset_range}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be non-negative, got {self.lam}")
        if not 0 < self.holdout_fraction < 1:
            raise ConfigError(f"holdout_fraction must lie in (0, 1), got {self.holdout_fraction}")


@dataclass
class PatchSet:
    patches: np.ndarray  # (P, H, W, 3) float32 in [0, 1]
    tags: list = field(default_factory=list)  # (source index, y, x)

    def __len__(self) -> int:
        return self.patches.shape[0]

    def subset(self, idx) -> "PatchSet":
        idx = list(idx)
        tags = [self.tags[i] for i in idx] if self.tags else []
        return PatchSet(self.patches[idx], tags)


@dataclass
class LogEntry:
    iteration: int
    loss: float
    holdout_loss: float | None
    millis: float


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)
    initial_holdout: float | None = None

    @property
    def final_holdout(self) -> float | None:
        for e in reversed(self.entries):
            if e.holdout_loss is not None:
                return e.holdout_loss
        return None

    def to_csv(self, with_timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "loss", "holdout_loss", "millis"])
        for e in self.entries:
            w.writerow([
                e.iteration,
                repr(e.loss),
                "" if e.holdout_loss is None else repr(e.holdout_loss),
                f"{e.millis:.3f}" if with_timing else "",
            ])
        return buf.getvalue()


def perturb(target: np.ndarray, eps1: float, eps2: float) -> np.ndarray:
    """Add eps1 to R and eps2 to B of an (..., 3) image; G is copied bit-exactly, nothing is clamped."""
    source = np.array(target, dtype=np.float32, copy=True)
    source[..., 0] += np.float32(eps1)
    source[..., 2] += np.float32(eps2)
    return source


def draw_offsets(rng: Rng, offset_range: float):
    if offset_range == 0:
        return 0.0, 0.0
    eps1 = rng.uniform(-offset_range, offset_range)
    eps2 = rng.uniform(-offset_range, offset_range)
    return eps1, eps2


def synthesize_pair(target: np.ndarray, rng: Rng, offset_range: float = 0.2):
    """Returns (source, eps1, eps2) with independent Unif(-range, range) offsets on R and B."""
    eps1, eps2 = draw_offsets(rng, offset_range)
    return perturb(target, eps1, eps2), eps1, eps2


def mean_luminance(patch: np.ndarray) -> float:
    return float(patch.reshape(-1, 3).mean(axis=0) @ LUMA)


def sample_patches(images: list, n: int, size: int, rng: Rng) -> PatchSet:
    """Draw ``n`` size x size patches at uniform positions, redrawing near-white ones."""
    if not images:
        raise DataError("no images to sample patches from")
    for k, img in enumerate(images):
        if img.shape[0] < size or img.shape[1] < size:
            raise DataError(f"image {k} is {img.shape[1]}x{img.shape[0]}, smaller than patch size {size}")
    patches = np.empty((n, size, size, 3), dtype=np.float32)
    tags = []
    attempts = 0
    budget = 100 * n
    while len(tags) < n:
        if attempts >= budget:
            rate = len(tags) / max(attempts, 1)
            raise RejectionBudgetError(
                f"accepted {len(tags)} of {attempts} candidate patches ({rate:.1%}); "
                f"budget of {budget} attempts exhausted")
        attempts += 1
        k = rng.integers(len(images))
        img = images[k]
        y = rng.integers(img.shape[0] - size + 1)
        x = rng.integers(img.shape[1] - size + 1)
        patch = img[y:y + size, x:x + size]
        if mean_luminance(patch) > MAX_MEAN_LUMINANCE:
            continue
        patches[len(tags)] = patch
        tags.append((k, y, x))
    log.debug("sampled %d patches in %d attempts", n, attempts)
    return PatchSet(patches, tags)


def split_holdout(n: int, fraction: float, rng: Rng):
    """Deterministic shuffle, then the first ceil(fraction*n) indices are held out."""
    if n < 2:
        raise DataError(f"need at least 2 patches to hold some out, got {n}")
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.integers(i + 1)
        order[i], order[j] = order[j], order[i]
    k = min(max(1, math.ceil(fraction * n)), n - 1)
    return sorted(order[k:]), sorted(order[:k])


def to_batch(images: np.ndarray) -> np.ndarray:
    """(N, H, W, 3) -> contiguous (N, 3, H, W)."""
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


def holdout_loss(model: Model, sources: np.ndarray, targets: np.ndarray, lam: float, chunk: int = 32) -> float:
    """Mean loss of the model in inference mode over a fixed perturbed set."""
    mode = model.mode
    model.eval()
    try:
        total = 0.0
        for s in range(0, sources.shape[0], chunk):
            x = sources[s:s + chunk]
            loss, _ = L.loss_l1l2(x + forward(model, x), targets[s:s + chunk], lam)
            total += loss * x.shape[0]
        return total / sources.shape[0]
    finally:
        model.mode = mode


def train(patches: PatchSet, cfg: TrainConfig, spec: ArchSpec | None = None, callback=None):
    """Train a fresh model. Returns (model, TrainLog); fully determined by cfg.seed."""
    cfg.validate()
    if len(patches) < 2:
        raise DataError("training needs at least 2 patches")
    rng = Rng(cfg.seed)
    model = build_model(spec or ArchSpec(), rng.child())
    train_idx, hold_idx = split_holdout(len(patches), cfg.holdout_fraction, rng.child())

    hold_rng = rng.child()
    hold_targets = to_batch(patches.patches[hold_idx])
    hold_sources = hold_targets.copy()
    for k in range(len(hold_idx)):
        e1, e2 = draw_offsets(hold_rng, cfg.offset_range)
        hold_sources[k, 0] += np.float32(e1)
        hold_sources[k, 2] += np.float32(e2)

    batch_rng = rng.child()
    state = L.AdamState(lr=cfg.lr)
    params = model.parameters()
    tlog = TrainLog(initial_holdout=holdout_loss(model, hold_sources, hold_targets, cfg.lam))
    model.train()
    pool = patches.patches
    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        pick = [train_idx[batch_rng.integers(len(train_idx))] for _ in range(cfg.batch_size)]
        target = to_batch(pool[pick])
        source = target.copy()
        for k in range(cfg.batch_size):
            e1, e2 = draw_offsets(batch_rng, cfg.offset_range)
            source[k, 0] += np.float32(e1)
            source[k, 2] += np.float32(e2)
        loss, grads = forward_backward(model, source, target, cfg.lam)
        if not math.isfinite(loss):
            raise NonFiniteError(f"non-finite training loss at iteration {it}")
        L.adam_step(params, grads, state)
        hold = None
        if it % HOLDOUT_EVERY == 0 or it == cfg.iterations:
            hold = holdout_loss(model, hold_sources, hold_targets, cfg.lam)
        entry = LogEntry(it, loss, hold, (time.perf_counter() - t0) * 1000.0)
        tlog.entries.append(entry)
        if callback is not None:
            callback(entry)
    return model.eval(), tlog


def evaluate_offset_recovery(model: Model, patches: PatchSet, trials: int, rng: Rng,
                             offset_range: float = 0.2, chunk: int = 64) -> np.ndarray:
    """Per-channel MAE between the global predicted offset and the true correction (-eps1, 0, -eps2)."""
    if model.mode != "infer":
        raise ValueError("evaluate_offset_recovery needs a model in infer mode")
    errors = np.zeros(3)
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        idx = [rng.integers(len(patches)) for _ in range(m)]
        target = to_batch(patches.patches[idx])
        source = target.copy()
        truth = np.zeros((m, 3))
        for k in range(m):
            e1, e2 = draw_offsets(rng, offset_range)
            source[k, 0] += np.float32(e1)
            source[k, 2] += np.float32(e2)
            truth[k] = (-e1, 0.0, -e2)
        predicted = forward(model, source).mean(axis=(2, 3), dtype=np.float64)
        errors += np.abs(predicted - truth).sum(axis=0)
        done += m
    return errors / trials
