"""Per-level class-weighted softmax (multinomial logistic regression) base classifiers."""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hiercp import HierCPError
from hiercp.config import ConfigError, reject_unknown_keys
from hiercp.conformal import ProbabilityTable
from hiercp.taxonomy import LEAF_LEVEL, Level, parse_level

logger = logging.getLogger(__name__)

MODEL_FILE_HEADER = "# hiercp softmax model"


class ModelError(HierCPError):
    """Exception raised for invalid training inputs or model files."""


class TrainingDivergedError(ModelError):
    """Exception raised when the training loss becomes non-finite.

    Attributes:
        level: level of the model being trained
        epoch: epoch (1-based) at which the loss diverged
    """

    def __init__(self, level: Level, epoch: int) -> None:
        """Initialize TrainingDivergedError instance."""
        self.level = level
        self.epoch = epoch
        super().__init__(f"Training of the level {level} model diverged at epoch {epoch}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    epochs: int = 40
    batch_size: int = 64
    l2_penalty: float = 1e-4
    seed: int = 0
    undersample: bool = False

    def __post_init__(self) -> None:
        """Validate that hyperparameters are positive."""
        for name in ("learning_rate", "epochs", "batch_size", "l2_penalty"):
            if not getattr(self, name) > 0:
                message = f"{name} must be positive, got {getattr(self, name)}"
                raise ConfigError(message)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "TrainConfig":
        reject_unknown_keys(values, set(cls.__dataclass_fields__), "train config")
        parsers = {
            "learning_rate": float,
            "epochs": int,
            "batch_size": int,
            "l2_penalty": float,
            "seed": int,
            "undersample": parse_bool,
        }
        try:
            return cls(**{key: parsers[key](value) for key, value in values.items()})
        except ValueError as exc:
            message = f"Invalid train config value: {exc}"
            raise ConfigError(message) from exc


def parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    message = f"'{value}' is not a boolean"
    raise ValueError(message)


@dataclass(frozen=True, eq=False)
class SoftmaxClassifier:
    """Linear softmax classifier over one level's label space."""

    weights: np.ndarray
    biases: np.ndarray
    level: Level
    class_order: tuple[str, ...]
    loss_history: tuple[float, ...] = field(default=(), repr=False)

    @property
    def feature_dim(self) -> int:
        return int(self.weights.shape[1])

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights.T + self.biases


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exponentials = np.exp(shifted)
    return exponentials / exponentials.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def class_weights(labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Weights inversely proportional to class frequency, n / (m * n_c).

    m is the size of the label space, so uniform counts over every class give all-ones.
    Classes absent from `labels` get weight 0 and drop out of the loss.
    """
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    present = counts > 0
    weights = np.zeros(n_classes)
    weights[present] = len(labels) / (n_classes * counts[present])
    return weights


def weighted_cross_entropy(
    weights: np.ndarray,
    biases: np.ndarray,
    features: np.ndarray,
    labels: np.ndarray,
    per_class_weights: np.ndarray,
    l2_penalty: float = 0.0,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Weighted mean cross-entropy plus an L2 penalty, with its analytic gradient.

    The loss is sum_i w_{y_i} * -log p(y_i | x_i) / sum_i w_{y_i} + l2 / 2 * ||W||^2;
    biases are not penalized.

    Returns:
        (loss, gradient with respect to weights, gradient with respect to biases)
    """
    logits = features @ weights.T + biases
    log_probabilities = log_softmax(logits)
    sample_weights = per_class_weights[labels]
    total_weight = sample_weights.sum()
    rows = np.arange(len(labels))
    loss = -(sample_weights * log_probabilities[rows, labels]).sum() / total_weight
    loss += 0.5 * l2_penalty * float((weights**2).sum())

    residuals = np.exp(log_probabilities)
    residuals[rows, labels] -= 1.0
    residuals *= (sample_weights / total_weight)[:, None]
    grad_weights = residuals.T @ features + l2_penalty * weights
    grad_biases = residuals.sum(axis=0)
    return float(loss), grad_weights, grad_biases


def undersample(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pick row indices that cap every class at the median present-class count."""
    counts = np.bincount(labels)
    cap = int(np.median(counts[counts > 0]))
    keep = []
    for class_index in np.flatnonzero(counts):
        members = np.flatnonzero(labels == class_index)
        if len(members) > cap:
            members = np.sort(rng.choice(members, size=cap, replace=False))
        keep.append(members)
    return np.sort(np.concatenate(keep))


def train(
    features: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    level: Level = LEAF_LEVEL,
    class_order: tuple[str, ...] | None = None,
) -> SoftmaxClassifier:
    """Fit a class-weighted softmax classifier by mini-batch gradient descent.

    Rows whose label is -1 (undefined at this level) are dropped. Features are
    standardized for training and the learned parameters are mapped back to the raw
    feature space, so the returned classifier takes raw features.

    Raises:
        ModelError: on a feature/label length mismatch, or when a label space of two
            or more classes has fewer than two of them present.
        TrainingDivergedError: if the loss becomes non-finite.
    """
    if features.ndim != 2 or features.shape[0] != len(labels):  # noqa: PLR2004
        message = f"{features.shape[0]} feature rows but {len(labels)} labels"
        raise ModelError(message)
    n_classes = len(class_order) if class_order is not None else int(labels.max()) + 1
    class_order = class_order or tuple(str(i) for i in range(n_classes))
    rng = np.random.default_rng(cfg.seed)

    if n_classes == 1:
        # a one-node label space is predicted with certainty
        return SoftmaxClassifier(
            np.zeros((1, features.shape[1])), np.zeros(1), level, class_order
        )
    defined = labels >= 0
    features, labels = features[defined], labels[defined]
    if cfg.undersample and len(labels):
        keep = undersample(labels, rng)
        features, labels = features[keep], labels[keep]
    if len(np.unique(labels)) < 2:  # noqa: PLR2004
        message = f"Level {level} training data has fewer than two classes"
        raise ModelError(message)
    if labels.max() >= n_classes:
        message = f"Level {level} labels exceed the {n_classes} classes of the level"
        raise ModelError(message)

    mean = features.mean(axis=0)
    scale = features.std(axis=0)
    scale[scale == 0] = 1.0
    standardized = (features - mean) / scale

    per_class_weights = class_weights(labels, n_classes)
    weights = np.zeros((n_classes, features.shape[1]))
    biases = np.zeros(n_classes)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(labels))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            _, grad_weights, grad_biases = weighted_cross_entropy(
                weights,
                biases,
                standardized[batch],
                labels[batch],
                per_class_weights,
                cfg.l2_penalty,
            )
            weights -= cfg.learning_rate * grad_weights
            biases -= cfg.learning_rate * grad_biases
        loss, _, _ = weighted_cross_entropy(
            weights, biases, standardized, labels, per_class_weights, cfg.l2_penalty
        )
        if not np.isfinite(loss) or not np.isfinite(weights).all():
            raise TrainingDivergedError(level, epoch)
        history.append(loss)
        logger.debug("Level %s epoch %i loss %.6f", level, epoch, loss)

    raw_weights = weights / scale
    raw_biases = biases - raw_weights @ mean
    return SoftmaxClassifier(raw_weights, raw_biases, level, class_order, tuple(history))


def predict_proba(clf: SoftmaxClassifier, features: np.ndarray) -> ProbabilityTable:
    if features.ndim != 2 or features.shape[1] != clf.feature_dim:  # noqa: PLR2004
        message = (
            f"Level {clf.level} model expects {clf.feature_dim} features, got "
            f"{features.shape[-1]}"
        )
        raise ModelError(message)
    return ProbabilityTable(clf.level, clf.class_order, softmax(clf.logits(features)))


def accuracy(clf: SoftmaxClassifier, features: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy over rows with a defined label; nan if there are none."""
    defined = labels >= 0
    if not defined.any():
        return float("nan")
    predicted = clf.logits(features[defined]).argmax(axis=1)
    return float((predicted == labels[defined]).mean())


def model_path(model_dir: str | Path, level: Level) -> Path:
    return Path(model_dir) / f"level-{level}.model"


def write_model(path: str | Path, clf: SoftmaxClassifier) -> None:
    """Write a model as a plain-text header followed by weight rows and a bias row.

    Floats are written in shortest round-trip form so reading returns identical values.
    """
    with open(path, "w", encoding="utf-8") as model_file:
        model_file.write(f"{MODEL_FILE_HEADER}\n")
        model_file.write(f"level={clf.level}\n")
        model_file.write(f"feature_dim={clf.feature_dim}\n")
        model_file.write(f"class_order={';'.join(clf.class_order)}\n")
        for row in clf.weights:
            model_file.write(",".join(repr(float(value)) for value in row) + "\n")
        model_file.write(",".join(repr(float(value)) for value in clf.biases) + "\n")


def read_model(path: str | Path) -> SoftmaxClassifier:
    with open(path, encoding="utf-8") as model_file:
        lines = model_file.read().splitlines()
    if len(lines) < 4 or lines[0] != MODEL_FILE_HEADER:  # noqa: PLR2004
        message = f"{path} is not a hiercp model file"
        raise ModelError(message)
    header = dict(line.partition("=")[::2] for line in lines[1:4])
    try:
        level = parse_level(header["level"])
        feature_dim = int(header["feature_dim"])
        class_order = tuple(header["class_order"].split(";"))
        rows = [[float(value) for value in line.split(",")] for line in lines[4:]]
    except (KeyError, ValueError) as exc:
        message = f"Malformed model file {path}: {exc}"
        raise ModelError(message) from exc
    if (
        len(rows) != len(class_order) + 1
        or any(len(row) != feature_dim for row in rows[:-1])
        or len(rows[-1]) != len(class_order)
    ):
        message = f"Model file {path} does not match its header"
        raise ModelError(message)
    return SoftmaxClassifier(
        weights=np.array(rows[:-1], dtype=np.float64),
        biases=np.array(rows[-1], dtype=np.float64),
        level=level,
        class_order=class_order,
    )
