"""Classical stain-normalization baselines: Macenko and Reinhard.

Both double as independent oracles for the learned model. Percentiles use
the nearest-rank definition throughout, so results do not depend on how the
pixels are ordered or partitioned.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DegenerateStainError, InsufficientTissueError
from .raster import from_uint8, to_uint8

I0 = 255.0
OD_THRESHOLD = 0.15  # beta
ANGLE_PERCENTILE = 1.0  # alpha
CONC_PERCENTILE = 99.0
MIN_TISSUE_PIXELS = 100
JACOBI_TOL = 1e-10

RGB_TO_LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)
_LAB_BASIS = np.array([[1.0, 1.0, 1.0], [1.0, 1.0, -2.0], [1.0, -1.0, 0.0]])
LOGLMS_TO_LAB = np.diag([1 / math.sqrt(3), 1 / math.sqrt(6), 1 / math.sqrt(2)]) @ _LAB_BASIS
LAB_TO_LOGLMS = _LAB_BASIS.T @ np.diag([math.sqrt(3) / 3, math.sqrt(6) / 6, math.sqrt(2) / 2])
LMS_FLOOR = 1e-6


@dataclass
class StainModel:
    stain_matrix: np.ndarray  # (3, 2): hematoxylin, eosin
    max_conc: np.ndarray  # (2,)

    def to_json(self) -> str:
        return json.dumps({
            "kind": "macenko",
            "stain_matrix": self.stain_matrix.tolist(),
            "max_conc": self.max_conc.tolist(),
        }, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "StainModel":
        m = np.array(d["stain_matrix"], dtype=np.float64)
        c = np.array(d["max_conc"], dtype=np.float64)
        if m.shape != (3, 2) or c.shape != (2,):
            raise DataError("stain model needs a 3x2 stain_matrix and 2 max_conc values")
        return cls(m, c)


@dataclass
class LabStats:
    mean: np.ndarray  # (3,) l, alpha, beta
    std: np.ndarray

    def to_json(self) -> str:
        return json.dumps({"kind": "reinhard", "mean": self.mean.tolist(), "std": self.std.tolist()}, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "LabStats":
        mean = np.array(d["mean"], dtype=np.float64)
        std = np.array(d["std"], dtype=np.float64)
        if mean.shape != (3,) or std.shape != (3,) or np.any(std < 0):
            raise DataError("lab stats need 3 means and 3 non-negative standard deviations")
        return cls(mean, std)


def save_stats(stats, dest) -> None:
    Path(dest).write_text(stats.to_json() + "\n", encoding="utf-8")


def load_stats(source):
    """Read a StainModel or LabStats JSON file (dispatching on ``kind``)."""
    try:
        d = json.loads(Path(source).read_text(encoding="utf-8"))
        kind = d.get("kind")
    except (ValueError, AttributeError) as exc:
        raise DataError(f"cannot parse stats file {source}: {exc}") from None
    if kind == "macenko":
        return StainModel.from_dict(d)
    if kind == "reinhard":
        return LabStats.from_dict(d)
    raise DataError(f"stats file {source} has unknown kind {kind!r}")


# -- shared numerics ------------------------------------------------------------

def percentile(values: np.ndarray, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    n = values.shape[0]
    rank = min(max(math.ceil(p / 100.0 * n), 1), n)
    return float(np.partition(values, rank - 1)[rank - 1])


def jacobi_eigh(a: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = 100):
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors-as-columns) sorted by descending eigenvalue.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = max(abs(a[i, j]) for i in range(n) for j in range(n) if i != j)
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if a[p, q] == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]


# -- Macenko ----------------------------------------------------------------------

def rgb_to_od(pixels: np.ndarray) -> np.ndarray:
    """8-bit RGB -> optical density, flooring intensities at 1."""
    i = np.maximum(np.asarray(pixels, dtype=np.float64), 1.0)
    return -np.log10(i / I0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(I0 * np.power(10.0, -np.asarray(od, dtype=np.float64))), 0, 255).astype(np.uint8)


def _tissue_covariance(codes: np.ndarray, od_table: np.ndarray) -> np.ndarray:
    """Covariance of tissue OD built from intensity histograms.

    With 8-bit inputs every OD value comes from a 256-entry table, so the
    sums reduce to histogram contractions whose order is fixed regardless of
    pixel order.
    """
    n = codes.shape[0]
    mean = np.array([np.bincount(codes[:, c], minlength=256) @ od_table for c in range(3)]) / n
    cov = np.empty((3, 3))
    for a in range(3):
        for b in range(a, 3):
            joint = np.bincount(codes[:, a].astype(np.int64) * 256 + codes[:, b], minlength=65536)
            s = od_table @ joint.reshape(256, 256) @ od_table
            cov[a, b] = cov[b, a] = (s - n * mean[a] * mean[b]) / (n - 1)
    return cov


def _unit_nonneg(v: np.ndarray) -> np.ndarray:
    if v.sum() < 0:
        v = -v
    v = np.maximum(v, 0.0)
    return v / np.linalg.norm(v)


def _pixels_u8(image: np.ndarray) -> np.ndarray:
    return to_uint8(np.asarray(image)).reshape(-1, 3)


def estimate_stain_macenko(image: np.ndarray) -> StainModel:
    """Fit a two-stain model to an ImageRGB (float [0,1] or uint8)."""
    codes = _pixels_u8(image)
    od_table = rgb_to_od(np.arange(256))
    od = od_table[codes]
    keep = np.all(od >= OD_THRESHOLD, axis=1)
    n_tissue = int(keep.sum())
    if n_tissue < MIN_TISSUE_PIXELS:
        raise InsufficientTissueError(
            f"only {n_tissue} tissue pixels with every OD channel >= {OD_THRESHOLD}; need {MIN_TISSUE_PIXELS}")
    tissue = od[keep]
    vals, vecs = jacobi_eigh(_tissue_covariance(codes[keep], od_table))
    if vals[1] <= 1e-4 * vals[0]:
        raise DegenerateStainError(
            f"OD covariance is rank-deficient (eigenvalues {vals[0]:.3g}, {vals[1]:.3g}); "
            "image appears to hold a single stain")
    plane = vecs[:, :2].copy()
    for k in range(2):
        # deterministic sign: largest-magnitude component positive
        if plane[np.argmax(np.abs(plane[:, k])), k] < 0:
            plane[:, k] = -plane[:, k]
    proj = tissue @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo = percentile(phi, ANGLE_PERCENTILE)
    hi = percentile(phi, 100.0 - ANGLE_PERCENTILE)
    v_lo = _unit_nonneg(plane @ np.array([math.cos(lo), math.sin(lo)]))
    v_hi = _unit_nonneg(plane @ np.array([math.cos(hi), math.sin(hi)]))
    # hematoxylin absorbs more red than eosin
    if v_lo[0] >= v_hi[0]:
        stains = np.stack([v_lo, v_hi], axis=1)
    else:
        stains = np.stack([v_hi, v_lo], axis=1)
    if abs(float(stains[:, 0] @ stains[:, 1])) > math.cos(math.radians(0.5)):
        raise DegenerateStainError("estimated stain directions coincide")
    conc = np.linalg.pinv(stains) @ tissue.T
    max_conc = np.array([percentile(conc[0], CONC_PERCENTILE), percentile(conc[1], CONC_PERCENTILE)])
    if np.any(max_conc <= 0):
        raise DegenerateStainError(f"non-positive stain concentration scale {max_conc}")
    return StainModel(stains, max_conc)


def normalize_macenko(source: np.ndarray, target: StainModel) -> np.ndarray:
    """Re-render ``source`` with the target's stain vectors and concentration scales."""
    src_model = estimate_stain_macenko(source)
    codes = _pixels_u8(source)
    od = rgb_to_od(np.arange(256))[codes]
    conc = np.linalg.pinv(src_model.stain_matrix) @ od.T
    conc *= (target.max_conc / src_model.max_conc)[:, None]
    out = od_to_rgb((target.stain_matrix @ conc).T)
    return from_uint8(out.reshape(np.shape(source)[:2] + (3,)))


# -- Reinhard ----------------------------------------------------------------------

def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """RGB in [0,1] -> Ruderman l-alpha-beta, float64, same leading shape."""
    lms = np.asarray(image, dtype=np.float64) @ RGB_TO_LMS.T
    return np.log10(np.maximum(lms, LMS_FLOOR)) @ LOGLMS_TO_LAB.T


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    lms = np.power(10.0, np.asarray(lab, dtype=np.float64) @ LAB_TO_LOGLMS.T)
    return lms @ LMS_TO_RGB.T


def lab_stats(image: np.ndarray) -> LabStats:
    lab = rgb_to_lab(image).reshape(-1, 3)
    return LabStats(lab.mean(axis=0), lab.std(axis=0))


def normalize_reinhard(source: np.ndarray, target: LabStats) -> np.ndarray:
    lab = rgb_to_lab(source)
    flat = lab.reshape(-1, 3)
    if flat.shape[0] == 0:
        raise DataError("cannot normalize an empty image")
    mu = flat.mean(axis=0)
    sigma = flat.std(axis=0)
    out = (lab - mu) * (target.std / np.maximum(sigma, 1e-6)) + target.mean
    flat_sigma = sigma < 1e-6
    if np.any(flat_sigma):
        out[..., flat_sigma] = target.mean[flat_sigma]
    return np.clip(lab_to_rgb(out), 0.0, 1.0).astype(np.float32)
