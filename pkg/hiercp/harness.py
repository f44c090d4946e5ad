"""Monte Carlo alpha-sweep experiments comparing L-CP and P-CP."""

import dataclasses
import logging
import time
from collections.abc import Mapping
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from hiercp import HierCPError
from hiercp.config import ConfigError, read_key_value_file, reject_unknown_keys
from hiercp.conformal import (
    Method,
    PredictionBatch,
    ProbabilityTable,
    ScoreKind,
    calibrate_level,
    calibration_scores,
    lcp_predict,
    pcp_predict,
)
from hiercp.dataset import (
    DEFAULT_FRACTIONS,
    Dataset,
    GeneratorConfig,
    check_fractions,
    generate_synthetic,
    load_dataset,
    stratified_split,
)
from hiercp.metrics import (
    MetricsReport,
    MetricsRun,
    aggregate,
    evaluate_batch,
    write_report,
)
from hiercp.model import TrainConfig, accuracy, predict_proba, train
from hiercp.taxonomy import LEAF_LEVEL, Level, Taxonomy, read_taxonomy

logger = logging.getLogger(__name__)

DEFAULT_ALPHAS = tuple(round(0.02 * step, 2) for step in range(26))
REPORT_FILE_NAME = "metrics_report.csv"
LONG_TABLE_FILE_NAME = "sweep_long.csv"
LONG_TABLE_COLUMNS = ["method", "alpha", "level", "metric", "value", "iteration"]

TRAIN_KEYS = {"learning_rate", "epochs", "batch_size", "l2_penalty", "undersample"}
DATA_KEYS = {"taxonomy", "features", "labels", "synthetic_config", "data_seed"}
EXPERIMENT_KEYS = {
    "alphas",
    "n_iterations",
    "master_seed",
    "score_kind",
    "methods",
    "split",
    *TRAIN_KEYS,
    *DATA_KEYS,
}


class ExperimentError(HierCPError):
    """Exception raised for invalid experiments or when every iteration aborts."""


@dataclass(frozen=True)
class DataSource:
    """Where an experiment's samples come from: files, or the synthetic generator."""

    taxonomy: Path | None = None
    features: Path | None = None
    labels: Path | None = None
    synthetic_config: Path | None = None
    data_seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    n_iterations: int = 50
    master_seed: int = 0
    score_kind: ScoreKind = ScoreKind.ONE_MINUS
    methods: tuple[Method, ...] = (Method.LCP, Method.PCP)
    fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSource = field(default_factory=DataSource)

    def __post_init__(self) -> None:
        """Validate the alpha grid, iteration count and methods."""
        if not self.alphas:
            message = "At least one alpha is required"
            raise ConfigError(message)
        if list(self.alphas) != sorted(self.alphas):
            message = f"alphas must be sorted ascending, got {self.alphas}"
            raise ConfigError(message)
        if any(not 0 <= alpha < 1 for alpha in self.alphas):
            message = f"alphas must lie in [0, 1), got {self.alphas}"
            raise ConfigError(message)
        if self.n_iterations < 1:
            message = f"n_iterations must be at least 1, got {self.n_iterations}"
            raise ConfigError(message)
        if not self.methods or len(set(self.methods)) != len(self.methods):
            message = f"methods must be non-empty and distinct, got {self.methods}"
            raise ConfigError(message)
        check_fractions(self.fractions)

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ExperimentConfig":
        reject_unknown_keys(values, EXPERIMENT_KEYS, "experiment config")
        try:
            kwargs: dict = {}
            if "alphas" in values:
                kwargs["alphas"] = parse_float_list(values["alphas"])
            if "n_iterations" in values:
                kwargs["n_iterations"] = int(values["n_iterations"])
            if "master_seed" in values:
                kwargs["master_seed"] = int(values["master_seed"])
            if "score_kind" in values:
                kwargs["score_kind"] = ScoreKind(values["score_kind"])
            if "methods" in values:
                kwargs["methods"] = parse_methods(values["methods"])
            if "split" in values:
                kwargs["fractions"] = parse_float_list(values["split"])
            kwargs["train"] = TrainConfig.from_mapping(
                {key: value for key, value in values.items() if key in TRAIN_KEYS}
            )
            kwargs["data"] = DataSource(
                **{
                    key: Path(value)
                    for key, value in values.items()
                    if key in DATA_KEYS - {"data_seed"}
                },
                data_seed=int(values.get("data_seed", "0")),
            )
        except ValueError as exc:
            message = f"Invalid experiment config value: {exc}"
            raise ConfigError(message) from exc
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_mapping(read_key_value_file(path))


def parse_float_list(value: str) -> tuple[float, ...]:
    return tuple(float(item) for item in value.split(",") if item.strip())


def parse_methods(value: str) -> tuple[Method, ...]:
    items = [item.strip().lower() for item in value.split(",")]
    return tuple(Method(item) for item in items if item)


def iteration_seed(master_seed: int, iteration: int) -> int:
    """Derive an iteration's seed from the master seed and the iteration index."""
    state = np.random.SeedSequence([master_seed, iteration]).generate_state(
        1, dtype=np.uint64
    )
    return int(state[0])


def load_data(cfg: ExperimentConfig) -> Dataset:
    """Load the experiment's dataset from files or generate it synthetically."""
    source = cfg.data
    if source.taxonomy is None:
        message = "The experiment needs a taxonomy file"
        raise ConfigError(message)
    taxonomy = read_taxonomy(source.taxonomy)
    if source.features is not None or source.labels is not None:
        if source.features is None or source.labels is None:
            message = "Features and labels files must be given together"
            raise ConfigError(message)
        return load_dataset(taxonomy, source.features, source.labels)
    generator = (
        GeneratorConfig.from_mapping(read_key_value_file(source.synthetic_config))
        if source.synthetic_config is not None
        else GeneratorConfig()
    )
    return generate_synthetic(generator, taxonomy, source.data_seed)


@dataclass(frozen=True, eq=False)
class RunRecord:
    """Everything one Monte Carlo iteration produced.

    `predictions` is only filled when the iteration was run with `keep_predictions`.
    """

    iteration: int
    seed: int
    runs: tuple[MetricsRun, ...]
    duration: float
    test_indices: np.ndarray
    accuracies: Mapping[Level, float] = field(default_factory=dict)
    predictions: Mapping[tuple[Method, float], PredictionBatch] = field(
        default_factory=dict
    )


def required_levels(taxonomy: Taxonomy, methods: tuple[Method, ...]) -> list[Level]:
    if Method.LCP in methods:
        return list(taxonomy.reported_levels)
    return [LEAF_LEVEL]


def run_iteration(
    cfg: ExperimentConfig,
    i: int,
    dataset: Dataset,
    *,
    keep_predictions: bool = False,
) -> RunRecord:
    """Split, train, calibrate and evaluate one Monte Carlo iteration.

    Models and probability tables are built once and reused for every alpha; only the
    thresholds depend on alpha.
    """
    started = time.perf_counter()
    seed = iteration_seed(cfg.master_seed, i)
    taxonomy = dataset.taxonomy
    split = stratified_split(dataset, cfg.fractions, seed)
    logger.debug(
        "Iteration %i (seed %i): train=%i calibration=%i test=%i", i, seed, *split.sizes()
    )

    levels = required_levels(taxonomy, cfg.methods)
    cal_tables: dict[Level, ProbabilityTable] = {}
    test_tables: dict[Level, ProbabilityTable] = {}
    cal_scores: dict[Level, np.ndarray] = {}
    test_labels = {
        level: dataset.label_indices(level, split.test)
        for level in taxonomy.reported_levels
    }
    accuracies: dict[Level, float] = {}
    for level in levels:
        level_seed = iteration_seed(seed, taxonomy.reported_levels.index(level))
        level_cfg = dataclasses.replace(cfg.train, seed=level_seed)
        clf = train(
            dataset.features[split.train],
            dataset.label_indices(level, split.train),
            level_cfg,
            level,
            taxonomy.class_order(level),
        )
        cal_tables[level] = predict_proba(clf, dataset.features[split.calibration])
        test_tables[level] = predict_proba(clf, dataset.features[split.test])
        cal_scores[level] = calibration_scores(
            cal_tables[level],
            dataset.label_indices(level, split.calibration),
            cfg.score_kind,
        )
        test_features = dataset.features[split.test]
        accuracies[level] = accuracy(clf, test_features, test_labels[level])
    logger.info(
        "Iteration %i test accuracy by level: %s",
        i,
        ", ".join(f"{level}={value:.3f}" for level, value in accuracies.items()),
    )

    runs = []
    predictions = {}
    for alpha in cfg.alphas:
        thresholds = {
            level: calibrate_level(scores, alpha, level)
            for level, scores in cal_scores.items()
        }
        for method in cfg.methods:
            if method == Method.LCP:
                batch = lcp_predict(test_tables, thresholds, taxonomy, cfg.score_kind)
            else:
                batch = pcp_predict(
                    test_tables[LEAF_LEVEL],
                    thresholds[LEAF_LEVEL],
                    taxonomy,
                    cfg.score_kind,
                )
            runs.append(evaluate_batch(batch, test_labels, alpha))
            if keep_predictions:
                predictions[method, alpha] = batch

    duration = time.perf_counter() - started
    logger.info("Iteration %i completed in %.2fs", i, duration)
    return RunRecord(
        iteration=i,
        seed=seed,
        runs=tuple(runs),
        duration=duration,
        test_indices=split.test,
        accuracies=accuracies,
        predictions=predictions,
    )


@dataclass(frozen=True)
class SweepResult:
    reports: tuple[MetricsReport, ...]
    records: tuple[RunRecord, ...]
    aborted: Mapping[int, str]

    def report(self, method: Method, alpha: float) -> MetricsReport:
        for report in self.reports:
            if report.method == method and report.alpha == alpha:
                return report
        message = f"No report for method {method} at alpha {alpha}"
        raise KeyError(message)


def _attempt(
    cfg: ExperimentConfig, i: int, dataset: Dataset
) -> tuple[int, RunRecord | None, str | None]:
    try:
        return i, run_iteration(cfg, i, dataset), None
    except HierCPError as exc:
        logger.warning("Iteration %i aborted: %s", i, exc)
        return i, None, str(exc)


def sweep(
    cfg: ExperimentConfig, dataset: Dataset | None = None, threads: int = 1
) -> SweepResult:
    """Run every iteration and aggregate metrics per method and alpha.

    Iterations may run concurrently; results are ordered by iteration index before
    aggregation so the output does not depend on scheduling.

    Raises:
        ExperimentError: if every iteration aborted.
    """
    dataset = dataset if dataset is not None else load_data(cfg)
    logger.info(
        "Starting sweep: %i iterations, %i alphas, methods=%s, %i worker(s)",
        cfg.n_iterations,
        len(cfg.alphas),
        ",".join(cfg.methods),
        threads,
    )
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as executor:
        outcomes = sorted(
            executor.map(
                lambda i: _attempt(cfg, i, dataset), range(cfg.n_iterations)
            ),
            key=lambda outcome: outcome[0],
        )
    records = tuple(record for _, record, _ in outcomes if record is not None)
    aborted = {i: error for i, _, error in outcomes if error is not None}
    if not records:
        message = f"All {cfg.n_iterations} iterations aborted"
        raise ExperimentError(message)
    if aborted:
        logger.warning("%i of %i iterations aborted", len(aborted), cfg.n_iterations)

    reports = []
    for alpha in cfg.alphas:
        for method in cfg.methods:
            reports.append(
                aggregate(
                    [
                        run
                        for record in records
                        for run in record.runs
                        if run.method == method and run.alpha == alpha
                    ]
                )
            )
    return SweepResult(tuple(reports), records, aborted)


def long_table(records: tuple[RunRecord, ...]) -> pd.DataFrame:
    """Per-iteration metric values in long format for external plotting."""
    rows = [
        {
            "method": str(run.method),
            "alpha": run.alpha,
            "level": level,
            "metric": metric,
            "value": value,
            "iteration": record.iteration,
        }
        for record in records
        for run in record.runs
        for (level, metric), value in run.values.items()
    ]
    return pd.DataFrame(rows, columns=LONG_TABLE_COLUMNS)


def write_outputs(result: SweepResult, out_dir: str | Path) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / REPORT_FILE_NAME
    long_path = out_dir / LONG_TABLE_FILE_NAME
    write_report(report_path, result.reports)
    long_table(result.records).to_csv(long_path, index=False, lineterminator="\n")
    logger.info("Long-format sweep table written to %s", long_path)
    return report_path, long_path
