# ruff: noqa: PT004, D205, D209, D403, D415, RET504

from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from hiercp.conformal import ProbabilityTable
from hiercp.dataset import (
    Dataset,
    GeneratorConfig,
    generate_synthetic,
    write_features,
    write_labels,
)
from hiercp.taxonomy import LEAF_LEVEL, parse_taxonomy

OS_TAXONOMY = Path(__file__).parent.parent / "config" / "os_taxonomy.tsv"


@pytest.fixture(autouse=True)
def test_env(monkeypatch):
    monkeypatch.setenv("LOG_LEVEL", "INFO")
    monkeypatch.setenv("SENTRY_DSN", "None")
    monkeypatch.setenv("WORKSPACE", "test")
    monkeypatch.setenv("HIERCP_THREADS", "2")


@pytest.fixture
def runner():
    return CliRunner()


# taxonomy fixtures
@pytest.fixture
def toy_source():
    """Two families, three levels, ragged: B1 is a depth-2 terminal leaf."""
    return "\n".join(
        [
            "# toy taxonomy",
            "A\t",
            "B\t",
            "A1\tA",
            "A2\tA",
            "B1\tB",
            "B2\tB",
            "A1a\tA1",
            "A1b\tA1",
            "A2a\tA2",
            "B2a\tB2",
            "B2b\tB2",
        ]
    )


@pytest.fixture
def toy_taxonomy(toy_source):
    return parse_taxonomy(toy_source)


@pytest.fixture
def toy_taxonomy_file(tmp_path, toy_source):
    path = tmp_path / "taxonomy.tsv"
    path.write_text(toy_source + "\n", encoding="utf-8")
    return path


@pytest.fixture
def two_level_taxonomy():
    return parse_taxonomy("A\nB\nA1\tA\nA2\tA\nB1\tB\nB2\tB\n")


@pytest.fixture
def os_taxonomy_file():
    return OS_TAXONOMY


# dataset fixtures
@pytest.fixture
def toy_dataset(toy_taxonomy):
    cfg = GeneratorConfig(n_samples=600, noise_sigma=0.5, separation=2.0, feature_dim=4)
    return generate_synthetic(cfg, toy_taxonomy, seed=7)


@pytest.fixture
def small_dataset(two_level_taxonomy):
    features = np.array(
        [[0.0, 0.1], [0.2, 0.0], [3.0, 3.1], [3.2, 2.9], [6.0, 0.0], [6.1, 0.2]]
    )
    labels = ("A1", "A1", "A2", "A2", "B1", "B2")
    return Dataset(features, labels, two_level_taxonomy)


@pytest.fixture
def inconsistent_lcp_tables(two_level_taxonomy):
    """Level-1 model is sure of B while the leaf model is sure of A1."""
    return {
        1: ProbabilityTable(1, ("A", "B"), np.array([[0.05, 0.95]])),
        2: ProbabilityTable(
            2, ("A1", "A2", "B1", "B2"), np.array([[0.9, 0.04, 0.03, 0.03]])
        ),
        LEAF_LEVEL: ProbabilityTable(
            LEAF_LEVEL, ("A1", "A2", "B1", "B2"), np.array([[0.9, 0.04, 0.03, 0.03]])
        ),
    }


@pytest.fixture
def synthetic_files(tmp_path, toy_dataset):
    features = tmp_path / "features.csv"
    labels = tmp_path / "labels.txt"
    write_features(features, toy_dataset.features)
    write_labels(labels, toy_dataset.leaf_labels)
    return features, labels
