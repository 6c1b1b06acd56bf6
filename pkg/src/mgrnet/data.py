"""Hyperspectral cubes, label rasters, PCA, patch extraction and stratified splits."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    BadMagicError,
    ConfigurationError,
    DataError,
    FitError,
    NonFiniteDataError,
    PayloadMismatchError,
    StructuralError,
)

CUBE_MAGIC = b"HSIC0001"
LABEL_MAGIC = b"HSIL0001"

# Labeled-sample counts per class for the three benchmark scenes (class 1 first).
BENCHMARK_CLASS_COUNTS = {
    "indian_pines": (46, 237, 1428, 483, 830, 730, 28, 478, 20, 972, 2455, 593, 205, 1265, 386, 93),
    "pavia_university": (6631, 18649, 2099, 3064, 1345, 5029, 1330, 3682, 947),
    "salinas": (2009, 3726, 1976, 1394, 2678, 3959, 3579, 11271, 6203, 3278, 1068, 1927, 916, 1070, 7268, 1807),
}
BENCHMARK_SHAPES = {
    "indian_pines": (145, 145, 200),
    "pavia_university": (610, 340, 103),
    "salinas": (512, 217, 204),
}
# Retained PCA dimensions reported for each scene; used as upper bounds on the variance rule.
PCA_CAPS = {"indian_pines": 100, "pavia_university": 50, "salinas": 29}

PathLike = Union[str, Path]


@dataclass
class HsiCube:
    """Band-sequential reflectance cube; ``values`` has shape ``(bands, height, width)``."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise StructuralError(f"cube values must be (bands, height, width), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteDataError("cube contains non-finite values")

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def pixels(self) -> np.ndarray:
        """Row-major pixel spectra as an ``(height * width, bands)`` array."""
        return self.values.reshape(self.bands, -1).T


@dataclass
class LabelRaster:
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise StructuralError(f"labels must be 2-d, got {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise DataError(f"label ids must lie in [0, {self.num_classes}]")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def class_counts(self) -> np.ndarray:
        """Pixel count for classes 1..C (background excluded)."""
        return np.bincount(self.labels.ravel(), minlength=self.num_classes + 1)[1:]


# ---------------------------------------------------------------------------
# containers


def write_cube(path: PathLike, cube: HsiCube) -> None:
    header = CUBE_MAGIC + struct.pack("<III", cube.height, cube.width, cube.bands)
    Path(path).write_bytes(header + np.ascontiguousarray(cube.values, dtype="<f4").tobytes())


def write_labels(path: PathLike, labels: LabelRaster) -> None:
    header = LABEL_MAGIC + struct.pack("<III", labels.height, labels.width, labels.num_classes)
    Path(path).write_bytes(header + np.ascontiguousarray(labels.labels, dtype="<u2").tobytes())


def _read_header(blob: bytes, magic: bytes, path: PathLike) -> tuple[int, int, int]:
    if blob[:8] != magic:
        raise BadMagicError(f"{path}: expected magic {magic!r}, found {blob[:8]!r}")
    if len(blob) < 20:
        raise PayloadMismatchError(f"{path}: header truncated")
    return struct.unpack_from("<III", blob, 8)


def read_cube(path: PathLike) -> HsiCube:
    blob = Path(path).read_bytes()
    h, w, b = _read_header(blob, CUBE_MAGIC, path)
    expected = 20 + 4 * h * w * b
    if len(blob) != expected:
        raise PayloadMismatchError(f"{path}: header says {h}x{w}x{b} ({expected} bytes), file has {len(blob)}")
    values = np.frombuffer(blob, dtype="<f4", offset=20).reshape(b, h, w).astype(np.float32)
    return HsiCube(values)


def read_labels(path: PathLike) -> LabelRaster:
    blob = Path(path).read_bytes()
    h, w, c = _read_header(blob, LABEL_MAGIC, path)
    expected = 20 + 2 * h * w
    if len(blob) != expected:
        raise PayloadMismatchError(f"{path}: header says {h}x{w} ({expected} bytes), file has {len(blob)}")
    labels = np.frombuffer(blob, dtype="<u2", offset=20).reshape(h, w).astype(np.int64)
    return LabelRaster(labels, c)


def load_cube(cube_path: PathLike, label_path: PathLike) -> tuple[HsiCube, LabelRaster]:
    cube = read_cube(cube_path)
    labels = read_labels(label_path)
    if (labels.height, labels.width) != (cube.height, cube.width):
        raise PayloadMismatchError(
            f"label raster {labels.height}x{labels.width} does not match cube {cube.height}x{cube.width}"
        )
    return cube, labels


def check_benchmark(cube: HsiCube, labels: LabelRaster, name: str) -> None:
    """Raise DataError unless dims and per-class counts match the published scene."""
    if name not in BENCHMARK_CLASS_COUNTS:
        raise ConfigurationError(f"unknown benchmark {name!r}")
    if (cube.height, cube.width, cube.bands) != BENCHMARK_SHAPES[name]:
        raise DataError(f"{name}: cube is {cube.height}x{cube.width}x{cube.bands}, expected {BENCHMARK_SHAPES[name]}")
    counts = tuple(int(c) for c in labels.class_counts())
    if counts != BENCHMARK_CLASS_COUNTS[name]:
        raise DataError(f"{name}: class counts {counts} differ from {BENCHMARK_CLASS_COUNTS[name]}")


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaModel:
    mean: np.ndarray  # (bands,)
    components: np.ndarray  # (bands, d), orthonormal columns
    explained_ratio: float
    eigenvalues: np.ndarray = field(repr=False)  # full spectrum, descending

    @property
    def bands(self) -> int:
        return self.components.shape[0]

    @property
    def dims(self) -> int:
        return self.components.shape[1]


def fit_pca(cube: HsiCube, variance_target: float = 0.9999, max_components: Optional[int] = None) -> PcaModel:
    """Keep the fewest components reaching ``variance_target``, then clip to ``max_components``.

    Every pixel (labeled or not) contributes.  Component signs are fixed so
    the largest-magnitude loading of each is positive.
    """
    if not 0 < variance_target <= 1:
        raise ConfigurationError(f"variance_target must lie in (0, 1], got {variance_target}")
    if cube.bands < 2:
        raise ConfigurationError("PCA needs at least two bands")
    if max_components is not None and max_components < 1:
        raise ConfigurationError(f"max_components must be positive, got {max_components}")
    X = cube.pixels().astype(np.float64)
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / X.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise FitError("degenerate covariance: all pixel spectra are identical")
    cumulative = np.cumsum(evals) / total
    d = int(np.argmax(cumulative >= variance_target * (1 - 1e-12))) + 1
    if max_components is not None:
        d = min(d, max_components)
    comps = evecs[:, :d].copy()
    flip = np.sign(comps[np.argmax(np.abs(comps), axis=0), np.arange(d)])
    comps *= np.where(flip == 0, 1.0, flip)
    return PcaModel(mean=mean, components=comps, explained_ratio=float(cumulative[d - 1]), eigenvalues=evals)


def apply_pca(cube: HsiCube, model: PcaModel) -> HsiCube:
    if model.bands != cube.bands:
        raise StructuralError(f"PCA model expects {model.bands} bands, cube has {cube.bands}")
    proj = (cube.pixels().astype(np.float64) - model.mean) @ model.components
    return HsiCube(proj.T.reshape(model.dims, cube.height, cube.width))


def reconstruct(reduced: HsiCube, model: PcaModel) -> HsiCube:
    x = reduced.pixels() @ model.components.T + model.mean
    return HsiCube(x.T.reshape(model.bands, reduced.height, reduced.width))


# ---------------------------------------------------------------------------
# patches and splits


class PatchSet:
    """Per-pixel patches backed by one mirror-padded cube.

    Patches are strided views into the padded cube, materialised on demand by
    :meth:`batch`, so a full scene never needs ``n * d * p * p`` memory.
    ``targets`` are 0-based class ids.
    """

    def __init__(self, padded: np.ndarray, coords: np.ndarray, targets: np.ndarray, patch_size: int, num_classes: int):
        self.padded = padded
        self.coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        self.targets = np.asarray(targets, dtype=np.int64)
        self.patch_size = patch_size
        self.num_classes = num_classes
        self._windows = sliding_window_view(padded, (patch_size, patch_size), axis=(1, 2))

    def __len__(self) -> int:
        return len(self.targets)

    @property
    def dims(self) -> int:
        return self.padded.shape[0]

    def batch(self, indices, dtype=np.float32) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64)
        rows, cols = self.coords[idx, 0], self.coords[idx, 1]
        return np.ascontiguousarray(self._windows[:, rows, cols].transpose(1, 0, 2, 3), dtype=dtype)

    @property
    def patches(self) -> np.ndarray:
        return self.batch(np.arange(len(self)), dtype=self.padded.dtype)

    def subset(self, indices) -> "PatchSet":
        idx = np.asarray(indices, dtype=np.int64)
        return PatchSet(self.padded, self.coords[idx], self.targets[idx], self.patch_size, self.num_classes)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.targets, minlength=self.num_classes)


def extract_patches(cube: HsiCube, labels: LabelRaster, patch_size: int = 11) -> PatchSet:
    """One ``[d, p, p]`` patch per labeled pixel, centred on it, reflect-padded at borders."""
    if patch_size < 1 or patch_size % 2 == 0:
        raise ConfigurationError(f"patch size must be odd, got {patch_size}")
    if (labels.height, labels.width) != (cube.height, cube.width):
        raise StructuralError("label raster and cube dimensions differ")
    half = patch_size // 2
    padded = np.pad(cube.values, ((0, 0), (half, half), (half, half)), mode="reflect")
    rows, cols = np.nonzero(labels.labels)
    targets = labels.labels[rows, cols] - 1
    return PatchSet(padded, np.stack([rows, cols], axis=1), targets, patch_size, labels.num_classes)


def pixel_patches(cube: HsiCube, coords: np.ndarray, patch_size: int) -> PatchSet:
    """Patches at arbitrary pixel coordinates (targets are placeholders)."""
    half = patch_size // 2
    padded = np.pad(cube.values, ((0, 0), (half, half), (half, half)), mode="reflect")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    return PatchSet(padded, coords, np.zeros(len(coords), dtype=np.int64), patch_size, 1)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction <= 1:
            raise ConfigurationError(f"train fraction must lie in (0, 1], got {self.train_fraction}")


def train_count(fraction: float, n: int) -> int:
    """``max(1, round(fraction * n))`` with halves rounded up."""
    return max(1, int(np.floor(fraction * n + 0.5)))


def stratified_split(patches: PatchSet, spec: SplitSpec) -> tuple[PatchSet, PatchSet]:
    rng = np.random.default_rng(spec.rng_seed)
    train_idx, test_idx = [], []
    for c in range(patches.num_classes):
        members = np.flatnonzero(patches.targets == c)
        if members.size == 0:
            raise DataError(f"class {c + 1} has no labeled samples")
        chosen = rng.permutation(members)
        k = min(train_count(spec.train_fraction, members.size), members.size)
        train_idx.append(chosen[:k])
        test_idx.append(chosen[k:])
    train = np.sort(np.concatenate(train_idx))
    test = np.sort(np.concatenate(test_idx))
    return patches.subset(train), patches.subset(test)


# ---------------------------------------------------------------------------
# synthetic scenes


def make_synthetic_scene(
    n_classes: int = 3,
    n_labeled: int = 200,
    bands: int = 10,
    height: int = 16,
    width: int = 40,
    gap: int = 5,
    noise: float = 0.02,
    seed: int = 0,
) -> tuple[HsiCube, LabelRaster]:
    """A small scene of vertical class stripes with well-separated class spectra.

    Stripes are ``gap`` columns apart; the gaps hold an unlabeled background
    material with its own spectrum, so with ``gap`` at least the patch radius
    no labeled patch sees another class.  Every material gets a random
    spectrum in [0, 1] plus Gaussian noise of scale ``noise``.  ``n_labeled``
    randomly chosen stripe pixels carry their class label.
    """
    stripe = (width - gap * (n_classes - 1)) // n_classes
    if stripe < 1:
        raise ConfigurationError(f"width {width} cannot hold {n_classes} stripes with gap {gap}")
    if n_labeled > height * stripe * n_classes:
        raise ConfigurationError("more labeled pixels requested than the stripes hold")
    rng = np.random.default_rng(seed)
    spectra = rng.uniform(0.0, 1.0, size=(n_classes + 1, bands))  # last row: background
    material = np.full(width, n_classes)
    for c in range(n_classes):
        material[c * (stripe + gap): c * (stripe + gap) + stripe] = c
    materials = np.broadcast_to(material, (height, width))
    values = spectra[materials].transpose(2, 0, 1) + noise * rng.standard_normal((bands, height, width))
    candidates = np.flatnonzero(materials < n_classes)
    chosen = rng.choice(candidates, size=n_labeled, replace=False)
    labels = np.zeros((height, width), dtype=np.int64)
    labels.flat[chosen] = materials.flat[chosen] + 1
    return HsiCube(values.astype(np.float32)), LabelRaster(labels, n_classes)
