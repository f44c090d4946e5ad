import dataclasses
import logging
import math
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path

import click

from hiercp import HierCPError
from hiercp.config import (
    ConfigError,
    configure_logger,
    configure_sentry,
    load_config_values,
    read_key_value_file,
)
from hiercp.conformal import (
    ConformalError,
    HierPredictionSets,
    Method,
    ProbabilityTable,
    ScoreKind,
    calibrate_tables,
    is_nested,
    lcp_predict,
    pcp_predict,
    read_prediction_sets,
    read_probability_table,
    read_thresholds,
    write_prediction_sets,
    write_thresholds,
)
from hiercp.dataset import (
    GeneratorConfig,
    class_counts,
    generate_synthetic,
    label_codes,
    load_dataset,
    read_features,
    read_labels,
    write_features,
    write_labels,
)
from hiercp.harness import DataSource, ExperimentConfig, sweep, write_outputs
from hiercp.metrics import (
    COVERAGE,
    EMPTY_RATE,
    GLOBAL_LEVEL,
    HIR,
    MEAN_SET_SIZE,
    ORPHAN_RATE,
    SINGLETON_RATE,
    STERILE_RATE,
    MetricsReport,
    MetricsRun,
    aggregate,
    coverage,
    empty_rate,
    format_summary,
    hir,
    mean_set_size,
    singleton_rate,
    write_report,
)
from hiercp.model import (
    TrainConfig,
    accuracy,
    model_path,
    predict_proba,
    read_model,
    train,
    write_model,
)
from hiercp.taxonomy import LEAF_LEVEL, Level, Taxonomy, parse_level, read_taxonomy

logger = logging.getLogger(__name__)

VALIDATION_ERROR = 1
IO_ERROR = 2
SUMMARY_ALPHAS = (0.02, 0.05, 0.10, 0.20)


def log_level_option(command: click.Command) -> click.Command:
    return click.option(
        "-l",
        "--log-level",
        envvar="LOG_LEVEL",
        help="Case-insensitive Python log level to use, e.g. debug or warning. Defaults "
        "to INFO if not provided or found in ENV.",
    )(command)


def taxonomy_option(command: click.Command) -> click.Command:
    return click.option(
        "--taxonomy",
        required=True,
        type=click.Path(path_type=Path),
        help="Taxonomy file: one `node<TAB>parent` line per node.",
    )(command)


def score_kind_option(command: click.Command) -> click.Command:
    return click.option(
        "--score-kind",
        type=click.Choice([kind.value for kind in ScoreKind]),
        default=ScoreKind.ONE_MINUS.value,
        show_default=True,
        help="Nonconformity score: 1 - p or -log p.",
    )(command)


def start(log_level: str | None) -> dict:
    """Configure logging and Sentry and return environment settings."""
    root_logger = logging.getLogger()
    with exit_codes():
        logger.info(configure_logger(root_logger, log_level or "INFO"))
        logger.info(configure_sentry())
        return load_config_values()


@contextmanager
def exit_codes() -> Iterator[None]:
    """Map validation errors to exit code 1 and I/O errors to exit code 2."""
    try:
        yield
    except (HierCPError, ValueError) as exc:
        logger.error("Validation error: %s", exc)  # noqa: TRY400
        raise click.exceptions.Exit(VALIDATION_ERROR) from exc
    except OSError as exc:
        logger.error("I/O error: %s", exc)  # noqa: TRY400
        raise click.exceptions.Exit(IO_ERROR) from exc


@click.group()
@click.pass_context
def main(ctx: click.Context) -> None:
    ctx.ensure_object(dict)


@main.command()
@taxonomy_option
@click.option(
    "--config",
    "config_path",
    type=click.Path(path_type=Path),
    help="Generator config (key=value). Defaults are used for missing keys.",
)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-features", required=True, type=click.Path(path_type=Path))
@click.option("--out-labels", required=True, type=click.Path(path_type=Path))
@log_level_option
def generate(
    taxonomy: Path,
    config_path: Path | None,
    seed: int,
    out_features: Path,
    out_labels: Path,
    log_level: str | None,
) -> None:
    """Generate a synthetic dataset whose features embed the taxonomy."""
    start(log_level)
    with exit_codes():
        tree = read_taxonomy(taxonomy)
        generator = (
            GeneratorConfig.from_mapping(read_key_value_file(config_path))
            if config_path
            else GeneratorConfig()
        )
        dataset = generate_synthetic(generator, tree, seed)
        write_features(out_features, dataset.features)
        write_labels(out_labels, dataset.leaf_labels)
    logger.info("Features written to %s, labels written to %s", out_features, out_labels)
    click.echo("leaf\tcount")
    for leaf, count in class_counts(dataset).items():
        click.echo(f"{leaf}\t{count}")


@main.command(name="train")
@taxonomy_option
@click.option("--features", required=True, type=click.Path(path_type=Path))
@click.option("--labels", required=True, type=click.Path(path_type=Path))
@click.option("--model-dir", required=True, type=click.Path(path_type=Path))
@click.option(
    "--train-config",
    type=click.Path(path_type=Path),
    help="Training hyperparameters (key=value).",
)
@click.option("--seed", type=int, default=0, show_default=True)
@log_level_option
def train_command(
    taxonomy: Path,
    features: Path,
    labels: Path,
    model_dir: Path,
    train_config: Path | None,
    seed: int,
    log_level: str | None,
) -> None:
    """Train one softmax model per depth level and one for the leaf layer."""
    start(log_level)
    with exit_codes():
        tree = read_taxonomy(taxonomy)
        dataset = load_dataset(tree, features, labels)
        values = read_key_value_file(train_config) if train_config else {}
        values.setdefault("seed", str(seed))
        cfg = TrainConfig.from_mapping(values)
        model_dir.mkdir(parents=True, exist_ok=True)
        for level in tree.reported_levels:
            codes = dataset.label_indices(level)
            clf = train(dataset.features, codes, cfg, level, tree.class_order(level))
            write_model(model_path(model_dir, level), clf)
            logger.info(
                "Level %s model trained, training accuracy %.3f",
                level,
                accuracy(clf, dataset.features, codes),
            )
    logger.info("Models written to %s", model_dir)


def parse_level_alphas(values: tuple[str, ...]) -> dict[Level, float]:
    overrides: dict[Level, float] = {}
    for value in values:
        level_text, separator, alpha_text = value.partition("=")
        if not separator:
            message = f"Expected LEVEL=ALPHA, got '{value}'"
            raise ConfigError(message)
        overrides[parse_level(level_text)] = float(alpha_text)
    return overrides


def load_tables(
    tree: Taxonomy,
    levels: list[Level],
    model_dir: Path | None,
    probabilities_dir: Path | None,
    features: Path | None,
) -> dict[Level, ProbabilityTable]:
    """Build probability tables from trained models or read externally produced ones."""
    if (model_dir is None) == (probabilities_dir is None):
        message = "Exactly one of --model-dir and --probabilities-dir is required"
        raise ConfigError(message)
    if probabilities_dir is not None:
        return {
            level: read_probability_table(
                probabilities_dir / f"level-{level}.csv", level, tree
            )
            for level in levels
        }
    if features is None:
        message = "--features is required with --model-dir"
        raise ConfigError(message)
    matrix = read_features(features)
    tables = {}
    for level in levels:
        clf = read_model(model_path(model_dir, level))
        tables[level] = predict_proba(clf, matrix)
        tables[level].check_against(tree)
    return tables


def available_levels(
    tree: Taxonomy, model_dir: Path | None, probabilities_dir: Path | None
) -> list[Level]:
    if model_dir is not None:
        return [
            level
            for level in tree.reported_levels
            if model_path(model_dir, level).exists()
        ]
    if probabilities_dir is not None:
        return [
            level
            for level in tree.reported_levels
            if (probabilities_dir / f"level-{level}.csv").exists()
        ]
    return []


@main.command()
@taxonomy_option
@click.option("--model-dir", type=click.Path(path_type=Path))
@click.option(
    "--probabilities-dir",
    type=click.Path(path_type=Path),
    help="Directory of externally produced `level-<level>.csv` probability tables.",
)
@click.option("--features", type=click.Path(path_type=Path))
@click.option("--labels", required=True, type=click.Path(path_type=Path))
@click.option("--alpha", type=float, default=0.1, show_default=True)
@click.option(
    "--level-alpha",
    multiple=True,
    help="Per-level miscoverage override, e.g. `1=0.05` or `leaf=0.2`.",
)
@score_kind_option
@click.option("--out", required=True, type=click.Path(path_type=Path))
@log_level_option
def calibrate(
    taxonomy: Path,
    model_dir: Path | None,
    probabilities_dir: Path | None,
    features: Path | None,
    labels: Path,
    alpha: float,
    level_alpha: tuple[str, ...],
    score_kind: str,
    out: Path,
    log_level: str | None,
) -> None:
    """Calibrate per-level thresholds on a held-out calibration set."""
    start(log_level)
    with exit_codes():
        tree = read_taxonomy(taxonomy)
        levels = available_levels(tree, model_dir, probabilities_dir)
        if not levels:
            message = "No models or probability tables found"
            raise ConfigError(message)
        tables = load_tables(tree, levels, model_dir, probabilities_dir, features)
        leaf_labels = read_labels(labels)
        codes = {level: label_codes(tree, leaf_labels, level) for level in levels}
        overrides = parse_level_alphas(level_alpha)
        alphas = {level: overrides.get(level, alpha) for level in levels}
        thresholds = calibrate_tables(tables, codes, alphas, ScoreKind(score_kind))
        write_thresholds(out, list(thresholds.values()))
    for threshold in thresholds.values():
        logger.info(
            "Level %s: alpha=%s n_cal=%i q_hat=%s",
            threshold.level,
            threshold.alpha,
            threshold.n_cal,
            threshold.q_hat,
        )
    logger.info("Thresholds written to %s", out)


@main.command()
@taxonomy_option
@click.option("--model-dir", type=click.Path(path_type=Path))
@click.option("--probabilities-dir", type=click.Path(path_type=Path))
@click.option("--thresholds", required=True, type=click.Path(path_type=Path))
@click.option("--features", type=click.Path(path_type=Path))
@click.option(
    "--method",
    type=click.Choice([method.value for method in Method]),
    default=Method.PCP.value,
    show_default=True,
)
@score_kind_option
@click.option("--out", required=True, type=click.Path(path_type=Path))
@click.option(
    "--check",
    is_flag=True,
    help="Verify that every line is hierarchically nested. Fails if a P-CP line is not.",
)
@log_level_option
def predict(
    taxonomy: Path,
    model_dir: Path | None,
    probabilities_dir: Path | None,
    thresholds: Path,
    features: Path | None,
    method: str,
    score_kind: str,
    out: Path,
    check: bool,  # noqa: FBT001
    log_level: str | None,
) -> None:
    """Write per-sample prediction sets as `level:{a;b}` groups separated by `|`."""
    start(log_level)
    with exit_codes():
        tree = read_taxonomy(taxonomy)
        calibrated = read_thresholds(thresholds)
        kind = ScoreKind(score_kind)
        if Method(method) == Method.PCP:
            if LEAF_LEVEL not in calibrated:
                message = "P-CP needs a leaf threshold"
                raise ConformalError(message, LEAF_LEVEL)
            tables = load_tables(
                tree, [LEAF_LEVEL], model_dir, probabilities_dir, features
            )
            batch = pcp_predict(tables[LEAF_LEVEL], calibrated[LEAF_LEVEL], tree, kind)
        else:
            missing = [lvl for lvl in tree.reported_levels if lvl not in calibrated]
            if missing:
                message = f"L-CP needs thresholds for every level, missing {missing}"
                raise ConformalError(message)
            levels = list(tree.reported_levels)
            tables = load_tables(tree, levels, model_dir, probabilities_dir, features)
            batch = lcp_predict(
                tables, {level: calibrated[level] for level in levels}, tree, kind
            )
        count = write_prediction_sets(out, batch, tree)
        logger.info("%i prediction sets written to %s", count, out)
        if check:
            inconsistent = sum(not is_nested(sets, tree) for sets in batch)
            logger.info(
                "%i of %i lines are not hierarchically nested", inconsistent, count
            )
            if inconsistent and Method(method) == Method.PCP:
                message = f"{inconsistent} P-CP lines violate nestedness"
                raise ConformalError(message)


@main.command()
@taxonomy_option
@click.option("--predictions", required=True, type=click.Path(path_type=Path))
@click.option("--labels", required=True, type=click.Path(path_type=Path))
@click.option(
    "--method",
    type=click.Choice([method.value for method in Method]),
    default=Method.PCP.value,
    show_default=True,
)
@click.option("--alpha", type=float, default=0.1, show_default=True)
@click.option("--out", required=True, type=click.Path(path_type=Path))
@log_level_option
def evaluate(
    taxonomy: Path,
    predictions: Path,
    labels: Path,
    method: str,
    alpha: float,
    out: Path,
    log_level: str | None,
) -> None:
    """Compute the metrics report of a prediction-set file against true leaf labels."""
    start(log_level)
    with exit_codes():
        tree = read_taxonomy(taxonomy)
        batch = read_prediction_sets(predictions, Method(method), tree)
        leaf_labels = read_labels(labels)
        if len(batch) != len(leaf_labels):
            message = f"{len(batch)} prediction lines but {len(leaf_labels)} labels"
            raise ConfigError(message)
        if not batch:
            message = f"{predictions} holds no prediction sets"
            raise ConfigError(message)
        run = evaluation_run(batch, leaf_labels, tree, Method(method), alpha)
        report = aggregate([run])
        write_report(out, [report])
    for line in summary_lines([report], tree, [alpha]):
        click.echo(line)


def evaluation_run(
    batch: list[HierPredictionSets],
    leaf_labels: tuple[str, ...],
    tree: Taxonomy,
    method: Method,
    alpha: float,
) -> MetricsRun:
    values: dict[tuple[str, str], float | None] = {}
    n_effective: dict[tuple[str, str], int] = {}
    n = len(batch)
    levels = set(batch[0].sets)
    for line_number, sample in enumerate(batch, start=1):
        if set(sample.sets) != levels:
            message = f"Prediction line {line_number} covers other levels than line 1"
            raise ConformalError(message)
    for level in tree.reported_levels:
        if level not in levels:
            continue
        sets = [sample[level] for sample in batch]
        truths = [tree.label_at(leaf, level) for leaf in leaf_labels]
        key = str(level)
        values[key, COVERAGE] = coverage(sets, truths)
        values[key, MEAN_SET_SIZE] = mean_set_size(sets)
        values[key, EMPTY_RATE] = empty_rate(sets)
        values[key, SINGLETON_RATE] = singleton_rate(sets)
        n_effective[key, COVERAGE] = sum(truth is not None for truth in truths)
        for metric in (MEAN_SET_SIZE, EMPTY_RATE, SINGLETON_RATE):
            n_effective[key, metric] = n
    result = hir(batch, tree)
    values[GLOBAL_LEVEL, HIR] = result.rate
    values[GLOBAL_LEVEL, ORPHAN_RATE] = result.orphan_rate
    values[GLOBAL_LEVEL, STERILE_RATE] = result.sterile_rate
    for metric in (HIR, ORPHAN_RATE, STERILE_RATE):
        n_effective[GLOBAL_LEVEL, metric] = n
    return MetricsRun(method, alpha, values, n_effective)


def summary_lines(
    reports: list[MetricsReport], tree: Taxonomy, alphas: list[float]
) -> list[str]:
    """Format reports grouped like a results table: per alpha, per method."""
    method_names = {Method.LCP: "L-CP", Method.PCP: "P-CP"}
    lines = []
    for alpha in alphas:
        for report in reports:
            if not math.isclose(report.alpha, alpha):
                continue
            cells = [f"alpha={report.alpha:.2f}", f"{method_names[report.method]:<4}"]
            for level in tree.reported_levels:
                if (str(level), COVERAGE) not in report.summaries:
                    continue
                cov = format_summary(report.summaries[str(level), COVERAGE])
                size = format_summary(report.summaries[str(level), MEAN_SET_SIZE])
                cells.append(f"{level}: cov {cov} size {size}")
            cells.append(f"HIR {format_summary(report.summaries[GLOBAL_LEVEL, HIR])}")
            lines.append(" | ".join(cells))
    return lines


@main.command(name="sweep")
@taxonomy_option
@click.option("--features", type=click.Path(path_type=Path))
@click.option("--labels", type=click.Path(path_type=Path))
@click.option(
    "--synthetic-config",
    type=click.Path(path_type=Path),
    help="Generator config used when no features/labels files are given.",
)
@click.option(
    "--experiment-config",
    type=click.Path(path_type=Path),
    help="Experiment config (key=value). Defaults are used for missing keys.",
)
@click.option(
    "--methods",
    help="Comma-separated subset of lcp,pcp; overrides the experiment config.",
)
@click.option("--out-dir", required=True, type=click.Path(path_type=Path))
@log_level_option
def sweep_command(
    taxonomy: Path,
    features: Path | None,
    labels: Path | None,
    synthetic_config: Path | None,
    experiment_config: Path | None,
    methods: str | None,
    out_dir: Path,
    log_level: str | None,
) -> None:
    """Run the Monte Carlo alpha sweep and write the metrics report and long table."""
    config_values = start(log_level)
    with exit_codes():
        values = read_key_value_file(experiment_config) if experiment_config else {}
        if methods:
            values["methods"] = methods
        cfg = ExperimentConfig.from_mapping(values)
        cfg = dataclasses.replace(
            cfg,
            data=DataSource(
                taxonomy=taxonomy,
                features=features or cfg.data.features,
                labels=labels or cfg.data.labels,
                synthetic_config=synthetic_config or cfg.data.synthetic_config,
                data_seed=cfg.data.data_seed,
            ),
        )
        result = sweep(cfg, threads=config_values["THREADS"])
        report_path, long_path = write_outputs(result, out_dir)
        tree = read_taxonomy(taxonomy)
    logger.info("Sweep outputs written to %s and %s", report_path, long_path)
    shown = [
        alpha
        for alpha in SUMMARY_ALPHAS
        if any(math.isclose(alpha, candidate) for candidate in cfg.alphas)
    ]
    for line in summary_lines(list(result.reports), tree, shown):
        click.echo(line)
