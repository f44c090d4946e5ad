# ruff: noqa: PLR2004

import numpy as np
import pytest

from hiercp.config import ConfigError
from hiercp.dataset import (
    Dataset,
    DatasetError,
    GeneratorConfig,
    allocate,
    build_synthetic_model,
    class_counts,
    generate_synthetic,
    induced_label,
    label_codes,
    load_dataset,
    read_features,
    stratified_split,
)
from hiercp.taxonomy import LEAF_LEVEL


def test_dataset_rejects_non_leaf_labels(two_level_taxonomy):
    with pytest.raises(DatasetError) as error:
        Dataset(np.zeros((2, 1)), ("A1", "A"), two_level_taxonomy)
    assert "Labels are not terminal leaves of the taxonomy: ['A']" in str(error)


def test_dataset_rejects_row_mismatch(two_level_taxonomy):
    with pytest.raises(DatasetError) as error:
        Dataset(np.zeros((3, 1)), ("A1", "A2"), two_level_taxonomy)
    assert "3 feature rows but 2 labels" in str(error)


def test_induced_label_follows_the_root_path(toy_taxonomy):
    dataset = Dataset(np.zeros((2, 1)), ("A1b", "B1"), toy_taxonomy)
    assert induced_label(dataset, 0, 1) == "A"
    assert induced_label(dataset, 0, 2) == "A1"
    assert induced_label(dataset, 0, LEAF_LEVEL) == "A1b"
    assert induced_label(dataset, 1, 3) is None
    assert dataset.sample(1).leaf_label == "B1"


def test_label_indices_mark_undefined_levels(toy_taxonomy):
    dataset = Dataset(np.zeros((3, 1)), ("A1b", "B1", "B2a"), toy_taxonomy)
    assert dataset.label_indices(1).tolist() == [0, 1, 1]
    assert dataset.label_indices(3).tolist() == [1, -1, 3]
    assert dataset.label_indices(LEAF_LEVEL).tolist() == [2, 0, 4]
    assert dataset.label_indices(2, np.array([2])).tolist() == [3]


def test_label_codes_reject_unknown_leaf(toy_taxonomy):
    with pytest.raises(DatasetError) as error:
        label_codes(toy_taxonomy, ["A1b", "Z"], 1)
    assert "Label 'Z' is not a leaf of the taxonomy" in str(error)


def test_allocate_uses_largest_remainder():
    assert allocate(10, (0.7, 0.15, 0.15)) == [7, 2, 1]
    assert allocate(10, (0.7, 0.15, 0.15), tie_offset=2) == [7, 1, 2]
    assert allocate(20, (0.7, 0.15, 0.15)) == [14, 3, 3]
    assert sum(allocate(7, (0.7, 0.15, 0.15))) == 7


def test_stratified_split_is_a_partition(toy_dataset):
    split = stratified_split(toy_dataset, seed=1)
    combined = np.concatenate([split.train, split.calibration, split.test])
    assert sorted(combined.tolist()) == list(range(len(toy_dataset)))
    assert sum(split.sizes()) == len(toy_dataset)


def test_stratified_split_is_proportional_per_class(toy_dataset):
    split = stratified_split(toy_dataset, seed=1)
    codes = toy_dataset.label_indices(LEAF_LEVEL)
    for class_index in range(len(toy_dataset.taxonomy.leaves)):
        count = int((codes == class_index).sum())
        if count < 2:
            continue
        for indices, fraction in zip(
            (split.train, split.calibration, split.test), (0.7, 0.15, 0.15), strict=True
        ):
            in_part = int((codes[indices] == class_index).sum())
            assert abs(in_part - count * fraction) < 1


def test_stratified_split_is_deterministic(toy_dataset):
    first = stratified_split(toy_dataset, seed=5)
    second = stratified_split(toy_dataset, seed=5)
    other = stratified_split(toy_dataset, seed=6)
    assert np.array_equal(first.test, second.test)
    assert np.array_equal(first.train, second.train)
    assert not np.array_equal(first.test, other.test)


def test_stratified_split_rare_class_lands_in_one_split(two_level_taxonomy):
    features = np.zeros((5, 1))
    labels = ("A1", "A1", "A1", "A1", "B2")
    split = stratified_split(Dataset(features, labels, two_level_taxonomy), seed=0)
    assert sum(4 in part for part in (split.train, split.calibration, split.test)) == 1


def test_stratified_split_rejects_bad_fractions(toy_dataset):
    with pytest.raises(DatasetError) as error:
        stratified_split(toy_dataset, (0.5, 0.3, 0.3))
    assert "Split fractions must sum to 1" in str(error)


def test_generate_synthetic_zipf_prevalence(toy_taxonomy):
    cfg = GeneratorConfig(n_samples=3000, zipf_s=1.0, feature_dim=4)
    counts = list(class_counts(generate_synthetic(cfg, toy_taxonomy, seed=0)).values())
    assert sum(counts) == 3000
    assert min(counts) >= 1
    assert counts[0] > counts[-1]
    assert counts[0] > 2 * counts[3]


def test_generate_synthetic_every_leaf_present_with_minimum_samples(toy_taxonomy):
    cfg = GeneratorConfig(n_samples=6, zipf_s=2.0, feature_dim=2)
    counts = class_counts(generate_synthetic(cfg, toy_taxonomy, seed=3))
    assert set(counts.values()) == {1}


def test_generate_synthetic_too_few_samples_raises_error(toy_taxonomy):
    with pytest.raises(ConfigError) as error:
        generate_synthetic(GeneratorConfig(n_samples=5), toy_taxonomy, seed=0)
    assert "n_samples (5) must be at least the number of leaves (6)" in str(error)


def test_generate_synthetic_is_deterministic(toy_taxonomy):
    cfg = GeneratorConfig(n_samples=200, feature_dim=3)
    first = generate_synthetic(cfg, toy_taxonomy, seed=11)
    second = generate_synthetic(cfg, toy_taxonomy, seed=11)
    assert np.array_equal(first.features, second.features)
    assert first.leaf_labels == second.leaf_labels


def test_generate_synthetic_samples_are_nearest_to_their_own_center(toy_taxonomy):
    cfg = GeneratorConfig(
        n_samples=500, noise_sigma=0.05, separation=3.0, feature_dim=6
    )
    dataset = generate_synthetic(cfg, toy_taxonomy, seed=2)
    centers = build_synthetic_model(
        cfg, toy_taxonomy, np.random.default_rng(2)
    ).leaf_centers
    distances = ((dataset.features[:, None, :] - centers[None]) ** 2).sum(axis=2)
    nearest = distances.argmin(axis=1)
    assert (nearest == dataset.label_indices(LEAF_LEVEL)).mean() > 0.95


def test_generator_config_from_mapping():
    cfg = GeneratorConfig.from_mapping({"n_samples": "100", "zipf_s": "1.5"})
    assert cfg.n_samples == 100
    assert cfg.zipf_s == 1.5
    with pytest.raises(ConfigError) as error:
        GeneratorConfig.from_mapping({"samples": "100"})
    assert "Unknown generator config key(s): samples" in str(error)


def test_features_and_labels_files(toy_taxonomy, synthetic_files, toy_dataset):
    features, labels = synthetic_files
    assert features.read_text(encoding="utf-8").startswith("f0,f1,f2,f3\n")
    loaded = load_dataset(toy_taxonomy, features, labels)
    assert np.array_equal(loaded.features, toy_dataset.features)
    assert loaded.leaf_labels == toy_dataset.leaf_labels


def test_read_features_rejects_missing_values(tmp_path):
    path = tmp_path / "features.csv"
    path.write_text("f0,f1\n1.0,\n", encoding="utf-8")
    with pytest.raises(DatasetError) as error:
        read_features(path)
    assert "contains missing values" in str(error)


def test_read_features_rejects_bad_header(tmp_path):
    path = tmp_path / "features.csv"
    path.write_text("x,y\n1.0,2.0\n", encoding="utf-8")
    with pytest.raises(DatasetError) as error:
        read_features(path)
    assert "Features header must be f0,f1" in str(error)
