"""Command-line experiment harness.

Subcommands: ``convert``, ``train``, ``sweep``, ``map``.  Settings come from
built-in defaults, then an optional ``key = value`` config file, then flags.

Exit status: 0 success, 1 usage/configuration, 2 data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import logging
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as D
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigurationError, ConversionError, DataError, MgrnetError, StructuralError
from .model import AblationVariant, ModelConfig, build_variant
from .train import EvalReport, TrainConfig, evaluate, train, write_trace

log = logging.getLogger("mgrnet")

# class id 1..16 -> RGB; background (0) is black
PALETTE = (
    (255, 0, 0), (0, 255, 0), (0, 0, 255), (255, 255, 0),
    (0, 255, 255), (255, 0, 255), (192, 192, 192), (128, 128, 128),
    (128, 0, 0), (128, 128, 0), (0, 128, 0), (128, 0, 128),
    (0, 128, 128), (0, 0, 128), (255, 165, 0), (139, 69, 19),
)
SYNTHETIC = "synthetic"


@dataclasses.dataclass
class ExperimentConfig:
    dataset: str = SYNTHETIC
    preset: str = ""
    pca_cap: int = 0
    variance_target: float = 0.9999
    patch_size: int = 11
    train_fraction: float = 0.2
    epochs: int = 500
    batch_size: int = 64
    learning_rate: float = 1e-3
    eval_every: int = 10
    variant: str = "FULL"
    kernel_sizes: str = "1,3,5"
    conv_channels: int = 32
    conv_depth: int = 1
    graph_channels: int = 64
    residual_channels: int = 64
    out: str = "runs/experiment"
    seed: int = 0

    def __post_init__(self):
        AblationVariant.parse(self.variant)
        if self.preset and self.preset not in D.PCA_CAPS:
            raise ConfigurationError(f"unknown preset {self.preset!r}; choose from {sorted(D.PCA_CAPS)}")
        D.SplitSpec(self.train_fraction, self.seed)

    @property
    def kernels(self) -> tuple[int, ...]:
        try:
            return tuple(int(k) for k in self.kernel_sizes.split(","))
        except ValueError:
            raise ConfigurationError(f"kernel_sizes must be comma-separated ints, got {self.kernel_sizes!r}") from None

    @property
    def pca_limit(self) -> Optional[int]:
        if self.pca_cap > 0:
            return self.pca_cap
        return D.PCA_CAPS.get(self.preset)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            rng_seed=self.seed,
            eval_every=self.eval_every,
        )

    def model_config(self, in_channels: int, num_classes: int) -> ModelConfig:
        return ModelConfig(
            in_channels=in_channels,
            num_classes=num_classes,
            patch_size=self.patch_size,
            kernel_sizes=self.kernels,
            conv_channels=self.conv_channels,
            conv_depth=self.conv_depth,
            graph_channels=self.graph_channels,
            residual_channels=self.residual_channels,
            variant=AblationVariant.parse(self.variant),
            seed=self.seed,
        )


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
_CASTS = {"int": int, "float": float, "str": str}


def _coerce(key: str, value: str):
    if key not in _FIELD_TYPES:
        raise ConfigurationError(f"unknown config key {key!r}")
    try:
        return _CASTS[_FIELD_TYPES[key]](value)
    except ValueError:
        raise ConfigurationError(f"config key {key!r}: cannot parse {value!r} as {_FIELD_TYPES[key]}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are an error."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            values[key] = _coerce(key, value)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{source}:{lineno}: {exc}") from None
    return values


def resolve_config(config_path: Optional[str], overrides: dict) -> ExperimentConfig:
    """Defaults, then the config file, then non-``None`` overrides."""
    values = {}
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigurationError(f"config file {config_path} not found")
        values.update(parse_config_text(path.read_text(), str(path)))
    for key, value in overrides.items():
        if value is not None:
            values[key] = _coerce(key, str(value)) if isinstance(value, str) else value
    return ExperimentConfig(**values)


# ---------------------------------------------------------------------------
# experiment steps


def load_dataset(cfg: ExperimentConfig) -> tuple[D.HsiCube, D.LabelRaster]:
    if cfg.dataset == SYNTHETIC:
        return D.make_synthetic_scene()
    cube, labels = D.load_cube(f"{cfg.dataset}.hsic", f"{cfg.dataset}.hsil")
    if cfg.preset:
        D.check_benchmark(cube, labels, cfg.preset)
    return cube, labels


def prepare(cfg: ExperimentConfig):
    cube, labels = load_dataset(cfg)
    pca = D.fit_pca(cube, cfg.variance_target, cfg.pca_limit)
    log.info("PCA kept %d of %d bands (%.6f of variance)", pca.dims, cube.bands, pca.explained_ratio)
    reduced = D.apply_pca(cube, pca)
    return cube, labels, pca, reduced


def run_experiment(cfg: ExperimentConfig, out_dir: Path) -> dict:
    """PCA, patches, split, train, evaluate; writes checkpoint, traces and the report."""
    _, labels, pca, reduced = prepare(cfg)
    patches = D.extract_patches(reduced, labels, cfg.patch_size)
    train_set, test_set = D.stratified_split(patches, D.SplitSpec(cfg.train_fraction, cfg.seed))
    log.info("%d training / %d test samples", len(train_set), len(test_set))
    model = build_variant(cfg.variant, cfg.model_config(pca.dims, labels.num_classes))
    result = train(model, train_set, cfg.train_config(), test_set=test_set if len(test_set) else None)
    if not len(test_set):
        log.warning("no test samples left at train_fraction=%s; reporting on the training set", cfg.train_fraction)
    report = evaluate(model, test_set if len(test_set) else train_set)

    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint.mgr", model.named_parameters())
    write_trace(out_dir / "trace.tsv", result.trace)
    (out_dir / "loss.tsv").write_text("".join(f"{r.epoch}\t{r.loss:.6f}\n" for r in result.trace))
    (out_dir / "report.txt").write_text(report.to_text())
    return {"report": report, "epochs": len(result.trace), "train": len(train_set), "test": len(test_set)}


def render_ppm(class_map: np.ndarray, palette: Sequence[tuple[int, int, int]] = PALETTE) -> bytes:
    """Binary P6 image; class 0 is black, class c uses ``palette[c - 1]``."""
    n_classes = int(class_map.max()) if class_map.size else 0
    if n_classes > len(palette):
        raise ConfigurationError(f"palette has {len(palette)} colours, map needs {n_classes}")
    lut = np.array([(0, 0, 0), *palette], dtype=np.uint8)
    h, w = class_map.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + lut[class_map].tobytes()


# ---------------------------------------------------------------------------
# subcommands


def cmd_convert(args) -> int:
    cube_rows = _read_csv(args.csv_cube, float)
    label_rows = _read_csv(args.csv_labels, int)
    n_pix = args.height * args.width
    if len(cube_rows) != n_pix:
        raise ConversionError(f"{args.csv_cube}: {len(cube_rows)} pixel rows, expected {args.height}x{args.width}={n_pix}")
    if len(label_rows) != n_pix:
        raise ConversionError(f"{args.csv_labels}: {len(label_rows)} rows, expected {n_pix}")
    bands = len(cube_rows[0])
    for lineno, row in enumerate(cube_rows, 1):
        if len(row) != bands:
            raise ConversionError(f"{args.csv_cube}:{lineno}: {len(row)} columns, expected {bands}")
    for lineno, row in enumerate(label_rows, 1):
        if len(row) != 1:
            raise ConversionError(f"{args.csv_labels}:{lineno}: expected one label per line")
    pixels = np.asarray(cube_rows, dtype=np.float32)
    flat_labels = np.asarray([r[0] for r in label_rows], dtype=np.int64)
    if np.any(flat_labels < 0) or np.any(flat_labels > 65535):
        raise ConversionError(f"{args.csv_labels}: labels must fit in u16")
    num_classes = args.num_classes or int(flat_labels.max())
    cube = D.HsiCube(pixels.T.reshape(bands, args.height, args.width))
    labels = D.LabelRaster(flat_labels.reshape(args.height, args.width), num_classes)
    D.write_cube(f"{args.out_prefix}.hsic", cube)
    D.write_labels(f"{args.out_prefix}.hsil", labels)
    print(f"cube {cube.height}x{cube.width}x{cube.bands}, {num_classes} classes")
    for c, count in enumerate(labels.class_counts(), 1):
        print(f"class {c}\t{count}")
    print(f"total\t{int(labels.class_counts().sum())}")
    return 0


def _read_csv(path, cast) -> list[list]:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                rows.append([cast(cell) for cell in row])
            except ValueError:
                raise ConversionError(f"{path}:{lineno}: non-numeric cell in {row!r}") from None
    if not rows:
        raise ConversionError(f"{path}: no data rows")
    return rows


def cmd_train(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    summary = run_experiment(cfg, out)
    report: EvalReport = summary["report"]
    print(f"OA {report.oa:.6f}  AA {report.aa:.6f}  Kappa {report.kappa:.6f}  -> {out}")
    return 0


SWEEP_HEADER = "index\tvalue\tseed\tstatus\tepochs\tOA\tAA\tKappa"


def cmd_sweep(cfg: ExperimentConfig, axis: str, values: Sequence[str], jobs: int = 1) -> int:
    if not values:
        raise ConfigurationError("sweep needs at least one value")
    key = {"fractions": "train_fraction", "epochs": "epochs"}.get(axis)
    if key is None:
        raise ConfigurationError(f"unknown sweep axis {axis!r}")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)

    def run(i: int, raw: str) -> str:
        seed = cfg.seed + i
        try:
            run_cfg = dataclasses.replace(cfg, **{key: _coerce(key, raw)}, seed=seed)
            summary = run_experiment(run_cfg, out / f"run{i}")
            r = summary["report"]
            return f"{i}\t{raw}\t{seed}\tok\t{summary['epochs']}\t{r.oa:.6f}\t{r.aa:.6f}\t{r.kappa:.6f}"
        except MgrnetError as exc:
            log.error("sweep run %d (%s=%s) failed: %s", i, key, raw, exc)
            return f"{i}\t{raw}\t{seed}\tfailed: {exc}\t0\tnan\tnan\tnan"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run, range(len(values)), values))
    else:
        rows = [run(i, v) for i, v in enumerate(values)]
    table = SWEEP_HEADER + "\n" + "".join(row + "\n" for row in rows)
    (out / "sweep.tsv").write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_map(cfg: ExperimentConfig, checkpoint: str, image: Optional[str]) -> int:
    cube, labels, pca, reduced = prepare(cfg)
    model = build_variant(cfg.variant, cfg.model_config(pca.dims, labels.num_classes))
    try:
        model.load_state_dict(load_checkpoint(checkpoint))
    except StructuralError as exc:
        raise DataError(f"checkpoint {checkpoint} does not fit this dataset/config: {exc}") from None
    rows, cols = np.nonzero(labels.labels)
    patches = D.pixel_patches(reduced, np.stack([rows, cols], axis=1), cfg.patch_size)
    class_map = np.zeros((cube.height, cube.width), dtype=np.int64)
    for start in range(0, len(patches), 256):
        idx = np.arange(start, min(start + 256, len(patches)))
        class_map[rows[idx], cols[idx]] = model.predict(patches.batch(idx, dtype=model.dtype)) + 1
    target = Path(image) if image else Path(cfg.out) / "map.ppm"
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(render_ppm(class_map))
    print(f"wrote {cube.width}x{cube.height} map to {target}")
    return 0


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--dataset", help="container prefix (PREFIX.hsic / PREFIX.hsil) or 'synthetic'")
    p.add_argument("--variant", help="FULL, NC, NG, NR, G16, G36 or G64")
    p.add_argument("--train-fraction", type=float, dest="train_fraction")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mgrnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("convert", help="CSV exports -> HSIC/HSIL containers")
    p.add_argument("csv_cube")
    p.add_argument("csv_labels")
    p.add_argument("out_prefix")
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--num-classes", type=int, dest="num_classes")

    p = sub.add_parser("train", help="run one experiment")
    _experiment_flags(p)

    p = sub.add_parser("sweep", help="one experiment per value of a training-fraction or epoch axis")
    _experiment_flags(p)
    p.add_argument("--axis", choices=("fractions", "epochs"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs (capped by MGRNET_THREADS)")

    p = sub.add_parser("map", help="render a classification map as binary PPM")
    _experiment_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help="output .ppm path (default OUT/map.ppm)")
    return parser


def _thread_cap() -> Optional[int]:
    raw = os.environ.get("MGRNET_THREADS")
    if not raw:
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"MGRNET_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigurationError("MGRNET_THREADS must be at least 1")
    return value


def _origin(exc: BaseException) -> str:
    frames = [f for f in traceback.extract_tb(exc.__traceback__) if f"{os.sep}mgrnet{os.sep}" in f.filename]
    return Path(frames[-1].filename).stem if frames else "mgrnet"


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cap = _thread_cap()
        limits = contextlib.nullcontext()
        if cap is not None:
            from threadpoolctl import threadpool_limits

            limits = threadpool_limits(limits=cap)
        with limits:
            if args.command == "convert":
                return cmd_convert(args)
            overrides = {k: getattr(args, k) for k in ("dataset", "variant", "train_fraction", "epochs", "seed", "out")}
            cfg = resolve_config(args.config, overrides)
            if args.command == "train":
                return cmd_train(cfg)
            if args.command == "sweep":
                jobs = min(args.jobs, cap) if cap else args.jobs
                return cmd_sweep(cfg, args.axis, [v.strip() for v in args.values.split(",") if v.strip()], jobs)
            return cmd_map(cfg, args.checkpoint, args.image)
    except MgrnetError as exc:
        print(f"mgrnet {args.command} [{_origin(exc)}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mgrnet {args.command} [{_origin(exc)}]: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
