"""Command-line front end: train, normalize, synthesize, benchmark, gradcheck.

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import pipeline, synthetic, verify
from .baselines import LabStats, StainModel, estimate_stain_macenko, lab_stats, load_stats, save_stats
from .errors import ColorNormError, ConfigError, DataError
from .model import load_weights, save_weights
from .raster import read_ppm, write_ppm
from .tensor_core import Rng
from .train import TrainConfig, sample_patches, train

log = logging.getLogger("colornormnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
NORMALIZE_METHODS = ("colornormnet", "reinhard", "macenko")
PATCH_STREAM = 0x70617463


@dataclass
class RunConfig:
    """Training run description; mirrors TrainConfig plus inputs and outputs."""
    target_images: list = field(default_factory=list)
    corpus_dir: str | None = None
    output_weights: str = "colornormnet.cnrm"
    output_log: str | None = None
    patches: int = 1000
    mode: str = "global"
    threads: int = 1
    batch_size: int = 128
    patch_size: int = 256
    lr: float = 0.001
    lam: float = 0.1
    iterations: int = 1000
    seed: int = 0
    offset_range: float = 0.2
    holdout_fraction: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(repr(k) for k in unknown)}")
        cfg = cls(**d)
        if not isinstance(cfg.target_images, list):
            raise ConfigError("target_images must be a list of paths")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except ValueError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(d)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.patch_size, self.lr, self.lam, self.iterations,
                           self.seed, self.offset_range, self.holdout_fraction)

    def image_paths(self) -> list:
        paths = [Path(p) for p in self.target_images]
        if self.corpus_dir is not None:
            paths += pipeline.list_corpus(self.corpus_dir)
        return paths

    def validate(self) -> None:
        self.train_config().validate()
        if self.mode not in ("global", "pixel"):
            raise ConfigError(f"mode must be 'global' or 'pixel', got {self.mode!r}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if self.patches < 2:
            raise ConfigError(f"patches must be >= 2, got {self.patches}")
        paths = self.image_paths()
        if not paths:
            raise DataError("no target images: set target_images or corpus_dir")
        for p in paths:
            if not p.is_file():
                raise DataError(f"target image {p} does not exist")
        for out in (self.output_weights, self.output_log):
            if out is not None and not Path(out).resolve().parent.is_dir():
                raise DataError(f"output directory for {out} does not exist")


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    for key in ("output_weights", "output_log", "iterations", "seed", "batch_size", "patch_size",
                "patches", "lr", "threads"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    if args.target:
        cfg.target_images = list(args.target)
    cfg.validate()
    if cfg.output_log is None:
        cfg.output_log = str(Path(cfg.output_weights).with_suffix(".csv"))
    images = [read_ppm(p) for p in cfg.image_paths()]
    tc = cfg.train_config()
    # patch sampling gets its own stream so it does not mirror the model-init stream
    patches = sample_patches(images, cfg.patches, tc.patch_size, Rng(tc.seed ^ PATCH_STREAM))

    def progress(entry):
        if entry.holdout_loss is not None:
            log.info("iteration %d: loss %.5f holdout %.5f", entry.iteration, entry.loss, entry.holdout_loss)

    with pipeline.threads(cfg.threads):
        model, tlog = train(patches, tc, callback=progress)
    save_weights(model, cfg.output_weights)
    Path(cfg.output_log).write_text(tlog.to_csv(), encoding="utf-8")
    print(f"final holdout loss {tlog.final_holdout:.6f} (initial {tlog.initial_holdout:.6f})")
    return EXIT_OK


def cmd_normalize(args) -> int:
    if args.method not in NORMALIZE_METHODS:
        raise ConfigError(f"unknown method {args.method!r}; valid methods: {', '.join(NORMALIZE_METHODS)}")
    src = Path(args.input)
    if not src.is_file():
        raise DataError(f"input {src} does not exist")
    if args.method == "colornormnet":
        if not args.weights:
            raise ConfigError("--weights is required for method colornormnet")
        model = load_weights(args.weights)
        with pipeline.threads(args.threads):
            out = pipeline.normalize_colornormnet(model, read_ppm(src), args.mode,
                                                  tile_size=args.tile_size)
    else:
        if not args.stats:
            raise ConfigError(f"--stats is required for method {args.method}")
        stats = load_stats(args.stats)
        image = read_ppm(src)
        if args.method == "reinhard":
            if not isinstance(stats, LabStats):
                raise DataError(f"{args.stats} does not hold Reinhard statistics")
            from .baselines import normalize_reinhard
            out = normalize_reinhard(image, stats)
        else:
            if not isinstance(stats, StainModel):
                raise DataError(f"{args.stats} does not hold a Macenko stain model")
            from .baselines import normalize_macenko
            out = normalize_macenko(image, stats)
    write_ppm(out, args.output)
    return EXIT_OK


def cmd_fit_stats(args) -> int:
    image = read_ppm(args.input)
    stats = lab_stats(image) if args.method == "reinhard" else estimate_stain_macenko(image)
    save_stats(stats, args.output)
    return EXIT_OK


def cmd_synthesize(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    if args.n < 1 or args.size < 1:
        raise ConfigError("--n and --size must be positive")
    rng = Rng(args.seed)
    width = len(str(args.n - 1))
    for i in range(args.n):
        img = synthetic.generate_image(args.size, args.size, rng.child())
        try:
            write_ppm(img, out / f"synth_{i:0{width}d}.ppm")
        except OSError as exc:
            raise DataError(f"cannot write to {out}: {exc}") from None
    return EXIT_OK


def cmd_benchmark(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in pipeline.METHODS:
            raise ConfigError(f"unknown method {m!r}; valid methods: {', '.join(pipeline.METHODS)}")
    files = pipeline.list_corpus(args.corpus)
    if not files:
        raise DataError(f"corpus {args.corpus} holds no PPM files")
    model = load_weights(args.weights) if args.weights else None
    target = load_stats(args.stats) if args.stats else None
    reports = [pipeline.benchmark(m, files, args.threads, model=model, target=target,
                                  min_pixels=args.min_pixels) for m in methods]
    print(pipeline.report_table(reports))
    if args.json:
        Path(args.json).write_text(pipeline.report_json(reports) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = verify.run_suite(args.seed)
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:<18} max rel err {r.error:.3e} (tol {r.tol:.0e}) {r.seconds:6.2f}s  {status}")
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="colornormnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on target-domain images")
    t.add_argument("--config", help="JSON run config")
    t.add_argument("--target", nargs="*", help="target PPM images (override config)")
    t.add_argument("--output-weights", dest="output_weights")
    t.add_argument("--output-log", dest="output_log")
    t.add_argument("--iterations", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--patch-size", dest="patch_size", type=int)
    t.add_argument("--patches", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--threads", type=int)
    t.set_defaults(func=cmd_train)

    n = sub.add_parser("normalize", help="normalize one PPM image")
    n.add_argument("input")
    n.add_argument("output")
    n.add_argument("--method", default="colornormnet")
    n.add_argument("--weights")
    n.add_argument("--stats", help="target statistics JSON for reinhard/macenko")
    n.add_argument("--mode", choices=("global", "pixel"), default="global")
    n.add_argument("--tile-size", dest="tile_size", type=int)
    n.add_argument("--threads", type=int, default=1)
    n.set_defaults(func=cmd_normalize)

    f = sub.add_parser("fit-stats", help="fit reinhard/macenko target statistics from an image")
    f.add_argument("input")
    f.add_argument("output")
    f.add_argument("--method", choices=("reinhard", "macenko"), required=True)
    f.set_defaults(func=cmd_fit_stats)

    s = sub.add_parser("synthesize", help="write procedurally generated two-stain images")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synthesize)

    b = sub.add_parser("benchmark", help="time normalization methods over a PPM corpus")
    b.add_argument("--methods", default="colornormnet_global,macenko")
    b.add_argument("--corpus", required=True)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--weights")
    b.add_argument("--stats")
    b.add_argument("--json", help="also write the report as JSON here")
    b.add_argument("--min-pixels", dest="min_pixels", type=int, default=pipeline.MIN_BENCH_PIXELS)
    b.set_defaults(func=cmd_benchmark)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer and the model")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ColorNormError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code if exc.exit_code != 1 else EXIT_DATA
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
