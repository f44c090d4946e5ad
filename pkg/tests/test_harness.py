# ruff: noqa: PLR2004

import dataclasses
import filecmp
from pathlib import Path

import pandas as pd
import pytest

from hiercp.config import ConfigError
from hiercp.conformal import Method, is_nested
from hiercp.dataset import GeneratorConfig, generate_synthetic
from hiercp.harness import (
    LONG_TABLE_COLUMNS,
    DataSource,
    ExperimentConfig,
    ExperimentError,
    iteration_seed,
    load_data,
    run_iteration,
    sweep,
    write_outputs,
)
from hiercp.metrics import (
    COVERAGE,
    EMPTY_RATE,
    GLOBAL_LEVEL,
    HIR,
    MEAN_SET_SIZE,
    REPORT_COLUMNS,
    SINGLETON_RATE,
    report_frame,
)
from hiercp.model import TrainConfig
from hiercp.taxonomy import LEAF_LEVEL, read_taxonomy

FAST_TRAINING = TrainConfig(epochs=5, batch_size=128)
BUNDLED_TAXONOMY = Path(__file__).parent.parent / "config" / "os_taxonomy.tsv"
BENCHMARK_ALPHAS = (0.05, 0.1, 0.2)


def experiment(**overrides):
    values = {
        "alphas": (0.05, 0.1, 0.2),
        "n_iterations": 2,
        "master_seed": 3,
        "train": FAST_TRAINING,
    }
    values.update(overrides)
    return ExperimentConfig(**values)


def test_experiment_config_defaults():
    cfg = ExperimentConfig()
    assert cfg.alphas[0] == 0.0
    assert cfg.alphas[-1] == 0.5
    assert len(cfg.alphas) == 26
    assert cfg.n_iterations == 50
    assert cfg.methods == (Method.LCP, Method.PCP)


@pytest.mark.parametrize(
    ("overrides", "message"),
    [
        ({"alphas": ()}, "At least one alpha is required"),
        ({"alphas": (0.2, 0.1)}, "alphas must be sorted ascending"),
        ({"alphas": (0.1, 1.0)}, "alphas must lie in [0, 1)"),
        ({"n_iterations": 0}, "n_iterations must be at least 1, got 0"),
        ({"methods": (Method.PCP, Method.PCP)}, "methods must be non-empty and distinct"),
    ],
)
def test_experiment_config_validation(overrides, message):
    with pytest.raises(ConfigError) as error:
        ExperimentConfig(**overrides)
    assert message in str(error)


def test_experiment_config_from_file(tmp_path):
    path = tmp_path / "experiment.conf"
    path.write_text(
        "alphas=0.05,0.1\nn_iterations=3\nmethods=pcp\nepochs=7\n"
        "score_kind=neg_log\ndata_seed=9\nsynthetic_config=synthetic.conf\n",
        encoding="utf-8",
    )
    cfg = ExperimentConfig.from_file(path)
    assert cfg.alphas == (0.05, 0.1)
    assert cfg.n_iterations == 3
    assert cfg.methods == (Method.PCP,)
    assert cfg.train.epochs == 7
    assert cfg.score_kind == "neg_log"
    assert cfg.data.data_seed == 9
    assert cfg.data.synthetic_config.name == "synthetic.conf"


def test_experiment_config_rejects_unknown_keys():
    with pytest.raises(ConfigError) as error:
        ExperimentConfig.from_mapping({"iterations": "3"})
    assert "Unknown experiment config key(s): iterations" in str(error)


def test_bundled_experiment_config(os_taxonomy_file):
    cfg = ExperimentConfig.from_file(os_taxonomy_file.parent / "experiment.conf")
    assert cfg == dataclasses.replace(ExperimentConfig(), data=cfg.data)


def test_iteration_seeds_are_distinct_and_reproducible():
    seeds = [iteration_seed(0, i) for i in range(50)]
    assert len(set(seeds)) == 50
    assert seeds == [iteration_seed(0, i) for i in range(50)]
    assert iteration_seed(1, 0) != seeds[0]


def test_load_data_from_synthetic_config(toy_taxonomy_file, tmp_path):
    synthetic = tmp_path / "synthetic.conf"
    synthetic.write_text("n_samples=50\nfeature_dim=3\n", encoding="utf-8")
    cfg = ExperimentConfig(
        data=DataSource(taxonomy=toy_taxonomy_file, synthetic_config=synthetic)
    )
    dataset = load_data(cfg)
    assert len(dataset) == 50
    assert dataset.feature_dim == 3


def test_load_data_from_files(toy_taxonomy_file, synthetic_files, toy_dataset):
    features, labels = synthetic_files
    cfg = ExperimentConfig(
        data=DataSource(taxonomy=toy_taxonomy_file, features=features, labels=labels)
    )
    assert load_data(cfg).leaf_labels == toy_dataset.leaf_labels


def test_load_data_requires_both_files(toy_taxonomy_file, synthetic_files):
    features, _ = synthetic_files
    cfg = ExperimentConfig(data=DataSource(taxonomy=toy_taxonomy_file, features=features))
    with pytest.raises(ConfigError) as error:
        load_data(cfg)
    assert "Features and labels files must be given together" in str(error)


def test_run_iteration_alpha_zero_covers_everything(toy_dataset):
    record = run_iteration(experiment(alphas=(0.0,)), 0, toy_dataset)
    assert len(record.runs) == 2
    for run in record.runs:
        for level in toy_dataset.taxonomy.reported_levels:
            assert run.values[str(level), COVERAGE] == 1.0


def test_run_iteration_sets_shrink_as_alpha_grows(toy_dataset):
    record = run_iteration(
        experiment(alphas=(0.05, 0.1)), 0, toy_dataset, keep_predictions=True
    )
    for method in (Method.LCP, Method.PCP):
        wide = record.predictions[method, 0.05]
        narrow = record.predictions[method, 0.1]
        for level in toy_dataset.taxonomy.reported_levels:
            assert not (narrow.masks[level] & ~wide.masks[level]).any()


def test_run_iteration_pcp_is_consistent_and_shares_leaf_metrics(toy_dataset):
    record = run_iteration(experiment(), 1, toy_dataset)
    by_key = {(run.method, run.alpha): run for run in record.runs}
    for alpha in (0.05, 0.1, 0.2):
        lcp, pcp = by_key[Method.LCP, alpha], by_key[Method.PCP, alpha]
        assert pcp.values[GLOBAL_LEVEL, HIR] == 0.0
        for (level, metric), value in pcp.values.items():
            if level == LEAF_LEVEL:
                assert lcp.values[level, metric] == value
        assert pcp.values["1", COVERAGE] >= pcp.values[LEAF_LEVEL, COVERAGE]


def test_run_iteration_logs_accuracy(caplog, toy_dataset):
    run_iteration(experiment(), 0, toy_dataset)
    assert "Iteration 0 test accuracy by level: 1=" in caplog.text


def test_sweep_is_deterministic(toy_dataset):
    first = sweep(experiment(), toy_dataset)
    second = sweep(experiment(), toy_dataset, threads=2)
    pd.testing.assert_frame_equal(
        report_frame(first.reports), report_frame(second.reports)
    )
    assert [r.seed for r in first.records] == [r.seed for r in second.records]


def test_sweep_reports_are_ordered_by_alpha_then_method(toy_dataset):
    result = sweep(experiment(), toy_dataset)
    assert [(r.alpha, r.method) for r in result.reports] == [
        (0.05, Method.LCP),
        (0.05, Method.PCP),
        (0.1, Method.LCP),
        (0.1, Method.PCP),
        (0.2, Method.LCP),
        (0.2, Method.PCP),
    ]
    report = result.report(Method.PCP, 0.1)
    assert report.mean(GLOBAL_LEVEL, HIR) == 0.0
    assert report.std(GLOBAL_LEVEL, HIR) == 0.0
    assert report.summaries[GLOBAL_LEVEL, HIR].n_iterations == 2


def test_sweep_pcp_only(toy_dataset):
    result = sweep(experiment(methods=(Method.PCP,)), toy_dataset)
    assert {report.method for report in result.reports} == {Method.PCP}
    assert result.report(Method.PCP, 0.2).mean(1, COVERAGE) is not None


def test_sweep_pcp_results_do_not_depend_on_lcp(toy_dataset):
    both = sweep(experiment(), toy_dataset)
    alone = sweep(experiment(methods=(Method.PCP,)), toy_dataset)
    assert both.report(Method.PCP, 0.1).summaries == alone.report(
        Method.PCP, 0.1
    ).summaries


def test_sweep_all_iterations_aborted_raises_error(caplog, toy_dataset):
    cfg = experiment(train=TrainConfig(learning_rate=1e308, epochs=3))
    with pytest.raises(ExperimentError) as error:
        sweep(cfg, toy_dataset)
    assert "All 2 iterations aborted" in str(error)
    assert "Iteration 0 aborted" in caplog.text


def test_sweep_synthetic_leaf_coverage_near_target(toy_taxonomy):
    dataset = generate_synthetic(GeneratorConfig(n_samples=2000), toy_taxonomy, seed=0)
    result = sweep(experiment(alphas=(0.1,), n_iterations=5), dataset)
    for method in (Method.LCP, Method.PCP):
        assert result.report(method, 0.1).mean(LEAF_LEVEL, COVERAGE) >= 0.86


def test_write_outputs(tmp_path, toy_dataset):
    result = sweep(experiment(), toy_dataset)
    report_path, long_path = write_outputs(result, tmp_path / "out")
    report = pd.read_csv(report_path)
    long = pd.read_csv(long_path)
    assert list(report.columns) == REPORT_COLUMNS
    assert list(long.columns) == LONG_TABLE_COLUMNS
    assert set(long["iteration"]) == {0, 1}
    assert (report[report["metric"] == "hir"]["level"] == "global").all()


def test_sweep_report_files_are_byte_identical(tmp_path, toy_dataset):
    first = write_outputs(sweep(experiment(), toy_dataset), tmp_path / "first")
    second = write_outputs(
        sweep(experiment(), toy_dataset, threads=3), tmp_path / "second"
    )
    for first_path, second_path in zip(first, second, strict=True):
        assert filecmp.cmp(first_path, second_path, shallow=False)


# full protocol on the bundled OS taxonomy: 5000 samples, 50 iterations, 70/15/15 split
@pytest.fixture(scope="module")
def benchmark():
    return generate_synthetic(GeneratorConfig(), read_taxonomy(BUNDLED_TAXONOMY), seed=0)


@pytest.fixture(scope="module")
def benchmark_sweep(benchmark):
    return sweep(ExperimentConfig(alphas=BENCHMARK_ALPHAS), benchmark, threads=4)


@pytest.mark.parametrize("alpha", BENCHMARK_ALPHAS)
def test_benchmark_lcp_coverage_is_near_target_at_every_level(
    benchmark, benchmark_sweep, alpha
):
    report = benchmark_sweep.report(Method.LCP, alpha)
    for level in benchmark.taxonomy.reported_levels:
        mean = report.mean(level, COVERAGE)
        assert 1 - alpha - 0.01 <= mean <= 1 - alpha + 0.03, level


def test_benchmark_pcp_over_covers_families(benchmark_sweep):
    lcp = benchmark_sweep.report(Method.LCP, 0.1)
    pcp = benchmark_sweep.report(Method.PCP, 0.1)
    assert pcp.mean(1, COVERAGE) >= lcp.mean(1, COVERAGE)
    assert pcp.mean(1, MEAN_SET_SIZE) >= lcp.mean(1, MEAN_SET_SIZE)
    for metric in (COVERAGE, MEAN_SET_SIZE, EMPTY_RATE, SINGLETON_RATE):
        assert pcp.summaries[LEAF_LEVEL, metric] == lcp.summaries[LEAF_LEVEL, metric]


def test_benchmark_hir_pcp_zero_and_lcp_inconsistent(benchmark_sweep):
    for alpha in BENCHMARK_ALPHAS:
        pcp = benchmark_sweep.report(Method.PCP, alpha)
        assert pcp.mean(GLOBAL_LEVEL, HIR) == 0.0
        assert pcp.std(GLOBAL_LEVEL, HIR) == 0.0
    assert max(
        benchmark_sweep.report(Method.LCP, alpha).mean(GLOBAL_LEVEL, HIR)
        for alpha in BENCHMARK_ALPHAS
    ) > 0.01


def test_benchmark_pcp_leaf_coverage_is_inherited_by_ancestors(benchmark):
    taxonomy = benchmark.taxonomy
    cfg = ExperimentConfig(alphas=BENCHMARK_ALPHAS, methods=(Method.PCP,))
    for i in range(5):
        record = run_iteration(cfg, i, benchmark, keep_predictions=True)
        leaves = [benchmark.leaf_labels[index] for index in record.test_indices]
        for alpha in BENCHMARK_ALPHAS:
            batch = record.predictions[Method.PCP, alpha]
            for sets, leaf in zip(batch, leaves, strict=True):
                assert is_nested(sets, taxonomy)
                if leaf not in sets[LEAF_LEVEL]:
                    continue
                for level in range(1, taxonomy.depth + 1):
                    truth = taxonomy.label_at(leaf, level)
                    if truth is not None:
                        assert truth in sets[level]
