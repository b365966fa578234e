"""Whole-image normalization: tiling, tile-wise ColorNormNet inference, benchmarking."""
from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import _kernels as K
from .baselines import LabStats, StainModel, estimate_stain_macenko, lab_stats, normalize_macenko, normalize_reinhard
from .errors import ConfigError, DataError, NonFiniteError
from .model import Model, border_width, build_model, receptive_field, run_infer
from .raster import decode_ppm, encode_ppm, from_uint8

log = logging.getLogger(__name__)

DEFAULT_MAX_PIXELS = 16_000_000
DEFAULT_TILE = 2048
FIXED_POINT_BITS = 32
OFFSET_LIMIT = 16.0
METHODS = ("colornormnet_global", "colornormnet_pixel", "reinhard", "macenko")
MIN_BENCH_PIXELS = 10_000_000


@dataclass
class TileGrid:
    tile_size: int
    tiles: list  # (x, y, tile) with tile an (tile_size, tile_size, 3) array
    padded_width: int
    padded_height: int
    width: int
    height: int


def tile(image: np.ndarray, tile_size: int) -> TileGrid:
    """Reflect-pad on the right/bottom to a multiple of tile_size and cut into tiles."""
    if tile_size < 1:
        raise ValueError(f"tile_size must be >= 1, got {tile_size}")
    h, w = image.shape[:2]
    ph = -(-h // tile_size) * tile_size
    pw = -(-w // tile_size) * tile_size
    canvas = np.pad(image, ((0, ph - h), (0, pw - w), (0, 0)), mode="reflect")
    tiles = [(x, y, canvas[y:y + tile_size, x:x + tile_size].copy())
             for y in range(0, ph, tile_size) for x in range(0, pw, tile_size)]
    return TileGrid(tile_size, tiles, pw, ph, w, h)


def stitch(grid: TileGrid) -> np.ndarray:
    first = grid.tiles[0][2]
    canvas = np.empty((grid.padded_height, grid.padded_width) + first.shape[2:], dtype=first.dtype)
    ts = grid.tile_size
    for x, y, t in grid.tiles:
        canvas[y:y + ts, x:x + ts] = t
    return canvas[:grid.height, :grid.width].copy()


@contextlib.contextmanager
def threads(n: int | None):
    if n is None:
        yield
        return
    prev = K.get_threads()
    K.set_threads(n)
    try:
        yield
    finally:
        K.set_threads(prev)


def _infer_region(model: Model, image: np.ndarray, y0: int, y1: int, x0: int, x1: int, halo: int) -> np.ndarray:
    """Offsets for image[y0:y1, x0:x1] as (3, y1-y0, x1-x0).

    The region is widened by ``halo`` real pixels where the image has them.
    Positions past the image edge are kept at zero after every layer, so each
    pixel sees exactly what a whole-image pass would show it.
    """
    h, w = image.shape[:2]
    bw = border_width(model)
    ry0, ry1 = max(0, y0 - halo), min(h, y1 + halo)
    rx0, rx1 = max(0, x0 - halo), min(w, x1 + halo)
    # pad so the buffer also covers halo positions beyond the image edge
    top, bottom = halo - (y0 - ry0), halo - (ry1 - y1)
    left, right = halo - (x0 - rx0), halo - (rx1 - x1)
    bh = (ry1 - ry0) + top + bottom + 2 * bw
    bwid = (rx1 - rx0) + left + right + 2 * bw
    channels = 3 + 3 * max(len(b) for b in model.blocks)
    # layer outputs are fully written (frame included) before they are read,
    # so only the input channels need a zero frame
    buf = np.empty((1, channels, bh, bwid), dtype=np.float32)
    buf[0, :3] = 0.0
    oy, ox = bw + top, bw + left
    buf[0, :3, oy:oy + (ry1 - ry0), ox:ox + (rx1 - rx0)] = image[ry0:ry1, rx0:rx1].transpose(2, 0, 1)
    rect = (oy, oy + (ry1 - ry0), ox, ox + (rx1 - rx0))
    out = run_infer(model, buf, rect)
    cy, cx = oy + (y0 - ry0), ox + (x0 - rx0)
    return out[0, :, cy:cy + (y1 - y0), cx:cx + (x1 - x0)]


def _regions(h: int, w: int, max_pixels: int, tile_size: int | None):
    if tile_size is None:
        if h * w <= max_pixels:
            yield 0, h, 0, w
            return
        tile_size = DEFAULT_TILE
    # tile cores over the reflect-padded canvas, clipped to real pixels so
    # padding never enters the offset average
    for y in range(0, h, tile_size):
        for x in range(0, w, tile_size):
            yield y, min(y + tile_size, h), x, min(x + tile_size, w)


def predict_offsets(model: Model, image: np.ndarray, max_pixels: int = DEFAULT_MAX_PIXELS,
                    tile_size: int | None = None, keep_field: bool = True):
    """Run the model over a whole (H, W, 3) image, tile-wise when it is large.

    Returns (field or None, global_offset). The field is (H, W, 3) float32.
    The global offset is the per-channel mean, accumulated exactly in fixed
    point so it does not depend on tiling or thread count.
    """
    image = np.asarray(image, dtype=np.float32)
    h, w = image.shape[:2]
    halo = (receptive_field(model) - 1) // 2
    field = np.empty((h, w, 3), dtype=np.float32) if keep_field else None
    sums = [0, 0, 0]
    scale = float(2 ** FIXED_POINT_BITS)
    for y0, y1, x0, x1 in _regions(h, w, max_pixels, tile_size):
        off = _infer_region(model, image, y0, y1, x0, x1, halo)
        row_sums = np.empty(off.shape[:2], dtype=np.int64)  # each row fits comfortably in int64
        if K.fixed_point_row_sums(off, scale, OFFSET_LIMIT, row_sums):
            if not np.all(np.isfinite(off)):
                raise NonFiniteError("model produced non-finite offsets")
            raise NonFiniteError(f"offsets outside the fixed-point accumulator range (|offset| >= {OFFSET_LIMIT:g})")
        for c in range(3):
            sums[c] += sum(int(v) for v in row_sums[c])
        if keep_field:
            field[y0:y1, x0:x1] = off.transpose(1, 2, 0)
    mean = np.array([s / scale / (h * w) for s in sums], dtype=np.float32)
    return field, mean


def normalize_colornormnet(model: Model, image: np.ndarray, mode: str = "global",
                           max_pixels: int = DEFAULT_MAX_PIXELS, tile_size: int | None = None) -> np.ndarray:
    """Apply the learned correction; 'global' adds one offset per channel, 'pixel' the full field."""
    if mode not in ("global", "pixel"):
        raise ConfigError(f"unknown mode {mode!r}; expected 'global' or 'pixel'")
    if model.mode != "infer":
        raise ValueError("normalize_colornormnet needs a model in infer mode")
    image = np.ascontiguousarray(image, dtype=np.float32)
    field, offset = predict_offsets(model, image, max_pixels, tile_size, keep_field=(mode == "pixel"))
    out = np.empty(image.shape, dtype=np.float32)
    K.add_clip(image.reshape(-1, 3), (offset[None, :] if mode == "global" else field.reshape(-1, 3)),
               out.reshape(-1, 3))
    return out


# -- throughput benchmark ------------------------------------------------------------

@dataclass
class ThroughputReport:
    method: str
    pixels: int
    seconds: float
    threads: int
    files: int = 0
    output_digest: str = ""

    @property
    def seconds_per_gigapixel(self) -> float:
        return self.seconds * 1e9 / self.pixels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seconds_per_gigapixel"] = self.seconds_per_gigapixel
        return d


def report_json(reports: list) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2)


def report_table(reports: list) -> str:
    rows = [("Method", "Time (seconds)")]
    rows += [(r.method, f"{r.seconds_per_gigapixel:.0f}") for r in reports]
    wm = max(len(a) for a, _ in rows)
    wt = max(len(b) for _, b in rows)
    lines = [f"| {a:<{wm}} | {b:>{wt}} |" for a, b in rows]
    lines.insert(1, f"|{'-' * (wm + 2)}|{'-' * (wt + 2)}|")
    extra = ", ".join(f"{r.method}: {r.pixels / 1e6:.1f} MPix in {r.seconds:.2f} s, {r.threads} thread(s)"
                      for r in reports)
    return "\n".join(lines) + "\nTime is extrapolated to one gigapixel (" + extra + ")."


def list_corpus(corpus) -> list:
    if isinstance(corpus, (str, Path)):
        path = Path(corpus)
        if not path.is_dir():
            raise DataError(f"corpus directory {path} does not exist")
        return sorted(path.glob("*.ppm"))
    return [Path(p) for p in corpus]


def _ppm_pixels(path: Path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(64)
    parts = head.split()
    if len(parts) < 3 or parts[0] != b"P6":
        raise DataError(f"{path} is not a P6 PPM")
    return int(parts[1]) * int(parts[2])


def benchmark(method: str, corpus, n_threads: int = 1, model: Model | None = None,
              target=None, out_dir=None, min_pixels: int = MIN_BENCH_PIXELS) -> ThroughputReport:
    """Time end-to-end normalization (decode, normalize, encode) of every PPM in the corpus."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
    files = list_corpus(corpus)
    pixels = sum(_ppm_pixels(p) for p in files)
    if pixels < min_pixels:
        raise DataError(f"benchmark corpus holds {pixels} pixels; at least {min_pixels} are required")
    if method.startswith("colornormnet"):
        model = (model or build_model()).eval()
        mode = method.split("_", 1)[1]
        work = lambda img: normalize_colornormnet(model, img, mode)
    elif method == "reinhard":
        stats = target if isinstance(target, LabStats) else lab_stats(from_uint8(decode_ppm(files[0].read_bytes())))
        work = lambda img: normalize_reinhard(img, stats)
    else:
        stains = target if isinstance(target, StainModel) else estimate_stain_macenko(decode_ppm(files[0].read_bytes()))
        work = lambda img: normalize_macenko(img, stains)
    out_dir = Path(out_dir) if out_dir is not None else None

    def one(path: Path) -> bytes:
        blob = encode_ppm(work(from_uint8(decode_ppm(path.read_bytes()))))
        if out_dir is not None:
            (out_dir / path.name).write_bytes(blob)
        return hashlib.sha256(blob).digest()

    t0 = time.perf_counter()
    if method.startswith("colornormnet"):
        with threads(n_threads):
            digests = [one(p) for p in files]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            digests = list(pool.map(one, files))
    seconds = time.perf_counter() - t0
    digest = hashlib.sha256(b"".join(digests)).hexdigest()
    log.info("%s: %d files, %.1f MPix, %.2f s", method, len(files), pixels / 1e6, seconds)
    return ThroughputReport(method, pixels, seconds, n_threads, len(files), digest)
