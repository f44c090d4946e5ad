"""Labeled samples, induced per-level labels, stratified splitting and synthetic data."""

import logging
import math
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd

from hiercp import HierCPError
from hiercp.config import ConfigError, reject_unknown_keys
from hiercp.taxonomy import Level, Taxonomy

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (0.70, 0.15, 0.15)
SPLIT_NAMES = ("train", "calibration", "test")


class DatasetError(HierCPError):
    """Exception raised for inconsistent or invalid datasets."""


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    leaf_label: str


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix plus terminal-leaf labels, bound to a taxonomy."""

    features: np.ndarray
    leaf_labels: tuple[str, ...]
    taxonomy: Taxonomy

    def __post_init__(self) -> None:
        """Validate shape and labels."""
        if len(self.leaf_labels) == 0:
            message = "Dataset is empty"
            raise DatasetError(message)
        if self.features.ndim != 2:  # noqa: PLR2004
            message = f"Features must be a 2-D matrix, got {self.features.ndim} dims"
            raise DatasetError(message)
        if self.features.shape[0] != len(self.leaf_labels):
            message = (
                f"{self.features.shape[0]} feature rows but {len(self.leaf_labels)} "
                "labels"
            )
            raise DatasetError(message)
        leaves = set(self.taxonomy.leaves)
        unknown = sorted({label for label in self.leaf_labels if label not in leaves})
        if unknown:
            message = f"Labels are not terminal leaves of the taxonomy: {unknown}"
            raise DatasetError(message)

    def __len__(self) -> int:
        return len(self.leaf_labels)

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def sample(self, index: int) -> Sample:
        self._check_index(index)
        return Sample(self.features[index], self.leaf_labels[index])

    def induced_label(self, index: int, level: Level) -> str | None:
        """Return the sample's level-k ancestor, or None if its branch is shallower."""
        self._check_index(index)
        return self.taxonomy.label_at(self.leaf_labels[index], level)

    def label_indices(self, level: Level, rows: np.ndarray | None = None) -> np.ndarray:
        """Return column indices of the induced labels, -1 where undefined."""
        codes = self._label_codes[level]
        return codes if rows is None else codes[rows]

    @cached_property
    def _label_codes(self) -> dict[Level, np.ndarray]:
        return {
            level: label_codes(self.taxonomy, self.leaf_labels, level)
            for level in self.taxonomy.reported_levels
        }

    def _check_index(self, index: int) -> None:
        if not 0 <= index < len(self):
            message = f"Sample index {index} out of range 0..{len(self) - 1}"
            raise DatasetError(message)


def induced_label(ds: Dataset, i: int, k: Level) -> str | None:
    return ds.induced_label(i, k)


@dataclass(frozen=True)
class SplitResult:
    train: np.ndarray
    calibration: np.ndarray
    test: np.ndarray

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.calibration), len(self.test)


def check_fractions(fractions: tuple[float, ...]) -> tuple[float, float, float]:
    if len(fractions) != len(SPLIT_NAMES):
        message = f"Expected three split fractions, got {len(fractions)}"
        raise DatasetError(message)
    if any(fraction <= 0 for fraction in fractions):
        message = f"Split fractions must be positive, got {fractions}"
        raise DatasetError(message)
    if not math.isclose(math.fsum(fractions), 1.0, abs_tol=1e-9):
        message = f"Split fractions must sum to 1, got {fractions}"
        raise DatasetError(message)
    return fractions[0], fractions[1], fractions[2]


def allocate(count: int, fractions: tuple[float, ...], tie_offset: int = 0) -> list[int]:
    """Split a count proportionally using largest-remainder rounding.

    Ties between equal remainders go to the split that comes first when the split order
    is rotated by `tie_offset`.
    """
    shares = [count * fraction for fraction in fractions]
    allocation = [math.floor(share + 1e-9) for share in shares]
    remainders = [share - whole for share, whole in zip(shares, allocation, strict=True)]
    n_splits = len(fractions)
    order = sorted(
        range(n_splits),
        key=lambda j: (-round(remainders[j], 9), (j - tie_offset) % n_splits),
    )
    for j in order[: count - sum(allocation)]:
        allocation[j] += 1
    return allocation


def stratified_split(
    ds: Dataset,
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS,
    seed: int = 0,
) -> SplitResult:
    """Split a dataset into train/calibration/test sets stratified by leaf class.

    Each leaf class with at least two samples is allocated proportionally with
    largest-remainder rounding (ties broken by the class's index). Samples of classes
    with fewer than two samples are each sent to a split drawn uniformly at random.
    """
    checked = check_fractions(fractions)
    rng = np.random.default_rng(seed)
    leaf_codes = ds.label_indices("leaf")
    parts: list[list[int]] = [[], [], []]
    rare: list[int] = []
    for class_index in range(len(ds.taxonomy.leaves)):
        members = np.flatnonzero(leaf_codes == class_index)
        if len(members) == 0:
            continue
        if len(members) < 2:  # noqa: PLR2004
            rare.extend(members.tolist())
            continue
        shuffled = rng.permutation(members)
        start = 0
        for part, size in zip(
            parts, allocate(len(members), checked, tie_offset=class_index), strict=True
        ):
            part.extend(shuffled[start : start + size].tolist())
            start += size
    for index in rare:
        parts[int(rng.integers(len(parts)))].append(index)

    result = SplitResult(*(np.array(sorted(part), dtype=np.int64) for part in parts))
    logger.debug(
        "Stratified split with seed %s: train=%i calibration=%i test=%i",
        seed,
        *result.sizes(),
    )
    return result


@dataclass(frozen=True)
class GeneratorConfig:
    n_samples: int = 5000
    zipf_s: float = 1.0
    noise_sigma: float = 1.0
    separation: float = 1.5
    feature_dim: int = 8

    def __post_init__(self) -> None:
        """Validate value ranges."""
        if self.n_samples < 1:
            message = f"n_samples must be positive, got {self.n_samples}"
            raise ConfigError(message)
        if self.zipf_s < 0:
            message = f"zipf_s must be non-negative, got {self.zipf_s}"
            raise ConfigError(message)
        if not self.noise_sigma > 0:
            message = f"noise_sigma must be positive, got {self.noise_sigma}"
            raise ConfigError(message)
        if self.separation < 0:
            message = f"separation must be non-negative, got {self.separation}"
            raise ConfigError(message)
        if self.feature_dim < 1:
            message = f"feature_dim must be positive, got {self.feature_dim}"
            raise ConfigError(message)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "GeneratorConfig":
        reject_unknown_keys(values, set(cls.__dataclass_fields__), "generator config")
        try:
            return cls(
                **{
                    key: (int if key in {"n_samples", "feature_dim"} else float)(value)
                    for key, value in values.items()
                }
            )
        except ValueError as exc:
            message = f"Invalid generator config value: {exc}"
            raise ConfigError(message) from exc


@dataclass(frozen=True)
class SyntheticModel:
    """Per-node offsets and leaf prevalence used to draw synthetic samples."""

    node_offsets: dict[str, np.ndarray]
    leaf_centers: np.ndarray
    leaf_probabilities: np.ndarray = field(repr=False)


def build_synthetic_model(
    cfg: GeneratorConfig, t: Taxonomy, rng: np.random.Generator
) -> SyntheticModel:
    """Draw one offset per node and combine them along each leaf's root path.

    A leaf's center is the sum of its ancestors' offsets scaled by 0.5 per level below
    the family, so the family signal dominates.
    """
    offsets = rng.standard_normal((len(t.nodes), cfg.feature_dim)) * cfg.separation
    node_offsets = {node.name: offsets[node.index] for node in t.nodes}
    centers = np.zeros((len(t.leaves), cfg.feature_dim))
    for row, leaf in enumerate(t.leaves):
        for depth, ancestor in enumerate(t.path(leaf)):
            centers[row] += 0.5**depth * node_offsets[ancestor]
    ranks = np.arange(1, len(t.leaves) + 1, dtype=np.float64)
    weights = ranks**-cfg.zipf_s
    return SyntheticModel(node_offsets, centers, weights / weights.sum())


def generate_synthetic(cfg: GeneratorConfig, t: Taxonomy, seed: int) -> Dataset:
    """Generate a Zipf-imbalanced dataset whose features embed the hierarchy.

    Every leaf gets at least one sample; the remaining samples follow a Zipf law over
    leaves in taxonomy order.
    """
    n_leaves = len(t.leaves)
    if cfg.n_samples < n_leaves:
        message = (
            f"n_samples ({cfg.n_samples}) must be at least the number of leaves "
            f"({n_leaves})"
        )
        raise ConfigError(message)
    rng = np.random.default_rng(seed)
    synthetic = build_synthetic_model(cfg, t, rng)
    counts = 1 + rng.multinomial(cfg.n_samples - n_leaves, synthetic.leaf_probabilities)
    codes = rng.permutation(np.repeat(np.arange(n_leaves), counts))
    noise = rng.standard_normal((cfg.n_samples, cfg.feature_dim)) * cfg.noise_sigma
    features = synthetic.leaf_centers[codes] + noise
    labels = tuple(t.leaves[code] for code in codes)
    logger.info(
        "Generated %i synthetic samples over %i leaves (zipf_s=%s, noise_sigma=%s)",
        cfg.n_samples,
        n_leaves,
        cfg.zipf_s,
        cfg.noise_sigma,
    )
    return Dataset(features, labels, t)


def class_counts(ds: Dataset) -> dict[str, int]:
    """Count samples per leaf, in taxonomy leaf order."""
    counter = Counter(ds.leaf_labels)
    return {leaf: counter[leaf] for leaf in ds.taxonomy.leaves}


def read_features(path: str | Path) -> np.ndarray:
    """Read a features CSV with header `f0,f1,...` into an (n, d) float matrix."""
    frame = pd.read_csv(path, dtype=np.float64, float_precision="round_trip")
    expected = [f"f{i}" for i in range(frame.shape[1])]
    if list(frame.columns) != expected:
        message = f"Features header must be {','.join(expected)}"
        raise DatasetError(message)
    if frame.isna().to_numpy().any():
        message = f"Features file {path} contains missing values"
        raise DatasetError(message)
    return frame.to_numpy(dtype=np.float64)


def write_features(path: str | Path, features: np.ndarray) -> None:
    frame = pd.DataFrame(features, columns=[f"f{i}" for i in range(features.shape[1])])
    frame.to_csv(path, index=False, lineterminator="\n")


def read_labels(path: str | Path) -> tuple[str, ...]:
    with open(path, encoding="utf-8") as labels_file:
        return tuple(line.strip() for line in labels_file.read().splitlines() if line)


def write_labels(path: str | Path, labels: tuple[str, ...]) -> None:
    with open(path, "w", encoding="utf-8") as labels_file:
        labels_file.writelines(f"{label}\n" for label in labels)


def load_dataset(
    taxonomy: Taxonomy, features_path: str | Path, labels_path: str | Path
) -> Dataset:
    features = read_features(features_path)
    labels = read_labels(labels_path)
    logger.info(
        "Loaded %i samples with %i features from %s",
        len(labels),
        features.shape[1],
        features_path,
    )
    return Dataset(features, labels, taxonomy)


def label_codes(
    taxonomy: Taxonomy, leaf_labels: Sequence[str], level: Level
) -> np.ndarray:
    """Column index of each sample's level label in `class_order(level)`, -1 if none."""
    position = {name: i for i, name in enumerate(taxonomy.class_order(level))}
    per_leaf = {}
    for leaf in taxonomy.leaves:
        label = taxonomy.label_at(leaf, level)
        per_leaf[leaf] = -1 if label is None else position[label]
    try:
        return np.array([per_leaf[label] for label in leaf_labels], dtype=np.int64)
    except KeyError as exc:
        message = f"Label {exc} is not a leaf of the taxonomy"
        raise DatasetError(message) from exc
