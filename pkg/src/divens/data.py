"""Synthetic datasets, corruption operators and OOD samplers.

Generated inputs live in the unit cube.  Blob and ring generators rescale
with an affine map fixed by the generating distribution (cluster centres or
ring radii plus four noise standard deviations) and clip to [0, 1], so
datasets drawn with different seeds share one coordinate system.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, FormatError
from .rng import make_rng

CorruptionName = Literal["gaussian_noise", "feature_dropout", "contrast_scale", "smooth_blur"]
CORRUPTIONS: tuple[str, ...] = ("gaussian_noise", "feature_dropout", "contrast_scale", "smooth_blur")

SEVERITY = {
    "gaussian_noise": (0.02, 0.04, 0.08, 0.16, 0.32),
    "feature_dropout": (0.05, 0.1, 0.2, 0.3, 0.4),
    "contrast_scale": (0.9, 0.75, 0.6, 0.45, 0.3),
    "smooth_blur": (1, 2, 3, 4, 5),
}

CIFAR_PIXELS = 3072
CIFAR_RECORD = CIFAR_PIXELS + 1


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    name: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError("inputs must be (N, L) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError("labels must lie in [0, classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index) -> "Dataset":
        return Dataset(self.inputs[index], self.labels[index], self.classes, self.name)


@dataclass(frozen=True)
class CorruptionKind:
    kind: str
    level: int

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ConfigurationError(f"unknown corruption {self.kind!r}")
        if not 1 <= int(self.level) <= 5:
            raise ConfigurationError("corruption level must be in 1..5")

    @property
    def severity(self) -> float:
        return SEVERITY[self.kind][self.level - 1]

    def __str__(self) -> str:
        return f"{self.kind}:{self.level}"


# ---------------------------------------------------------------- generators


def blob_centers(classes: int, dim: int, center_seed: int = 0) -> np.ndarray:
    """Deterministic standard-normal cluster centres."""
    return make_rng(center_seed, "blob-centers", classes, dim).standard_normal((classes, dim))


def make_blobs(
    classes: int,
    dim: int,
    per_class: int,
    spread: float,
    seed: int,
    center_seed: int = 0,
    name: str = "blobs",
) -> Dataset:
    """Isotropic Gaussian clusters around :func:`blob_centers`, rescaled to [0, 1]."""
    if classes < 2 or dim < 2:
        raise ConfigurationError("blobs need classes >= 2 and dim >= 2")
    centers = blob_centers(classes, dim, center_seed)
    rng = make_rng(seed, "blobs", center_seed)
    labels = np.repeat(np.arange(classes), per_class)
    x = centers[labels] + spread * rng.standard_normal((len(labels), dim))
    lo = centers.min(axis=0) - 4.0 * spread - 1e-12
    hi = centers.max(axis=0) + 4.0 * spread + 1e-12
    x = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    order = rng.permutation(len(labels))
    return Dataset(x[order], labels[order], classes, name)


def make_rings(classes: int, per_class: int, noise: float, seed: int, name: str = "rings") -> Dataset:
    """Class k lives on a noisy circle of radius k + 1 in two dimensions."""
    if classes < 2:
        raise ConfigurationError("rings need at least 2 classes")
    rng = make_rng(seed, "rings")
    labels = np.repeat(np.arange(classes), per_class)
    angle = rng.uniform(0.0, 2.0 * np.pi, size=len(labels))
    radius = labels + 1.0 + noise * rng.standard_normal(len(labels))
    x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    bound = classes + 4.0 * noise
    x = np.clip((x + bound) / (2.0 * bound), 0.0, 1.0)
    order = rng.permutation(len(labels))
    return Dataset(x[order], labels[order], classes, name)


# ---------------------------------------------------------------- corruptions


def _blur_pass(x: np.ndarray) -> np.ndarray:
    # ring adjacency over feature indices; the (1/4, 1/2, 1/4) weights have a
    # non-negative frequency response, so more passes always move further
    return 0.25 * np.roll(x, 1, axis=1) + 0.5 * x + 0.25 * np.roll(x, -1, axis=1)


def corrupt(ds: Dataset, c: CorruptionKind, seed: int, severity: float | None = None) -> Dataset:
    """Apply corruption ``c`` (``severity`` overrides the level's schedule value)."""
    s = c.severity if severity is None else severity
    rng = make_rng(seed, "corrupt", c.kind, c.level)
    x = ds.inputs.copy()
    if c.kind == "gaussian_noise":
        x = x + s * rng.standard_normal(x.shape)
    elif c.kind == "feature_dropout":
        x = np.where(rng.random(x.shape) < s, 0.5, x)
    elif c.kind == "contrast_scale":
        x = 0.5 + s * (x - 0.5)
    elif c.kind == "smooth_blur":
        for _ in range(int(s)):
            x = _blur_pass(x)
    x = np.clip(x, 0.0, 1.0)
    return Dataset(x, ds.labels.copy(), ds.classes, f"{ds.name}|{c}")


# ---------------------------------------------------------------- OOD


def sample_uniform_ood(dim: int, n: int, seed: int, step: int = 0) -> np.ndarray:
    """i.i.d. Uniform[0, 1] batch; ``step`` indexes a fresh draw per training step."""
    if n < 1:
        raise ConfigurationError("OOD batch size must be >= 1")
    return make_rng(seed, "uniform-ood", step).random((n, dim))


class OodPool:
    """Draw OOD training batches from a finite pool of real inputs."""

    def __init__(self, inputs: np.ndarray):
        self.inputs = ad.as_matrix(inputs, name="ood pool")

    def sample(self, n: int, seed: int, step: int = 0) -> np.ndarray:
        idx = make_rng(seed, "pool-ood", step).integers(0, len(self.inputs), size=n)
        return self.inputs[idx]


def fgsm_perturb(model, reg, x: np.ndarray, epsilon: float = 0.05) -> np.ndarray:
    """One signed-gradient ascent step on the sample-diversity score, clipped to [0, 1]."""
    from .regularizers import ood_score

    if epsilon < 0:
        raise ConfigurationError("epsilon must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if epsilon == 0:
        return x.copy()
    leaf = ad.parameter(x)
    ad.backward(ood_score(reg, model, leaf))
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(x)
    return np.clip(x + epsilon * np.sign(grad), 0.0, 1.0)


# ---------------------------------------------------------------- IO


def read_cifar10_binary(path: str | Path, name: str = "cifar10") -> Dataset:
    """Records of one label byte followed by 3072 pixel bytes (R, G, B planes)."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise FormatError(
            f"truncated record: {len(raw)} bytes is not a multiple of {CIFAR_RECORD}",
            offset=whole * CIFAR_RECORD,
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise FormatError(f"label {labels[bad[0]]} >= 10", offset=int(bad[0]) * CIFAR_RECORD)
    inputs = records[:, 1:].astype(np.float64) / 255.0
    return Dataset(inputs.reshape(len(labels), CIFAR_PIXELS), labels, 10, name)


def export_csv(ds: Dataset, path: str | Path) -> None:
    """Header ``label,f0..f{L-1}``; values with repr precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(ds.dim)])
        for label, row in zip(ds.labels, ds.inputs):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def import_csv(path: str | Path, classes: int | None = None, name: str = "") -> Dataset:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    labels = data[:, 0].astype(np.int64)
    return Dataset(data[:, 1:], labels, classes or int(labels.max()) + 1, name or Path(path).stem)
