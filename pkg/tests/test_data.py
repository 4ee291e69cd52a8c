import json

import numpy as np
import pytest

from dsen.data import (
    DatasetError,
    SyntheticSpec,
    ZslDataset,
    dataset_fingerprint,
    gen_synthetic,
    load_dataset,
    save_dataset,
    validate_dataset,
)


def _meta_only_dataset(attr_dim, n_seen, n_unseen):
    n_classes = n_seen + n_unseen
    rng = np.random.default_rng(0)
    labels = np.concatenate([np.arange(n_seen), np.arange(n_seen, n_classes)])
    split = np.array(["train"] * n_seen + ["test"] * n_unseen)
    return ZslDataset(
        features=rng.normal(size=(n_classes, 4)),
        labels=labels,
        attributes=rng.normal(size=(n_classes, attr_dim)),
        seen_classes=tuple(range(n_seen)),
        unseen_classes=tuple(range(n_seen, n_classes)),
        split=split,
    )


@pytest.mark.parametrize("attr_dim,n_seen,n_unseen", [(312, 150, 50), (64, 20, 12)])
def test_benchmark_shaped_metadata_loads(tmp_path, attr_dim, n_seen, n_unseen):
    # CUB and aPY class/attribute counts
    save_dataset(_meta_only_dataset(attr_dim, n_seen, n_unseen), tmp_path)
    ds = load_dataset(tmp_path)
    assert (ds.attr_dim, len(ds.seen_classes), len(ds.unseen_classes)) == (attr_dim, n_seen, n_unseen)


def test_round_trip_is_bit_exact(tmp_path):
    ds = gen_synthetic()
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    assert back.features.tobytes() == ds.features.tobytes()
    assert back.attributes.tobytes() == ds.attributes.tobytes()
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.split, ds.split)
    assert back.seen_classes == ds.seen_classes and back.unseen_classes == ds.unseen_classes


def test_features_file_is_raw_float32(tmp_path):
    ds = gen_synthetic(SyntheticSpec(n_seen=2, n_unseen=1, samples_per_class=3))
    save_dataset(ds, tmp_path)
    raw = (tmp_path / "features.f32").read_bytes()
    assert len(raw) == 4 * ds.n_samples * ds.feat_dim
    np.testing.assert_array_equal(np.frombuffer(raw, "<f4").reshape(ds.features.shape), ds.features)
    first = (tmp_path / "labels.csv").read_text().splitlines()[0]
    assert first.split(",")[0] == "0" and first.split(",")[2] in {"train", "val", "test"}


def test_unseen_labelled_train_sample_is_a_load_error(tmp_path):
    ds = gen_synthetic()
    ds.split[np.flatnonzero(ds.labels == ds.unseen_classes[0])[0]] = "train"
    save_dataset(ds, tmp_path)
    with pytest.raises(DatasetError, match="non-seen label"):
        load_dataset(tmp_path)


def test_load_errors_name_file_and_location(tmp_path):
    ds = gen_synthetic(SyntheticSpec(n_seen=2, n_unseen=1, samples_per_class=3))
    save_dataset(ds, tmp_path)
    blob = (tmp_path / "features.f32").read_bytes()
    (tmp_path / "features.f32").write_bytes(blob[:-4])
    with pytest.raises(DatasetError) as exc:
        load_dataset(tmp_path)
    assert exc.value.file == "features.f32"

    save_dataset(ds, tmp_path)
    nan = np.frombuffer(blob, "<f4").copy()
    nan[5] = np.nan
    (tmp_path / "features.f32").write_bytes(nan.tobytes())
    with pytest.raises(DatasetError, match="offset 20"):
        load_dataset(tmp_path)

    save_dataset(ds, tmp_path)
    with open(tmp_path / "labels.csv", "a") as fh:
        fh.write("0,99,train\n")
    with pytest.raises(DatasetError, match=r"labels.csv \(line 10\)"):
        load_dataset(tmp_path)


def test_overlapping_class_sets_rejected_on_load(tmp_path):
    ds = gen_synthetic()
    save_dataset(ds, tmp_path)
    meta = json.loads((tmp_path / "meta.json").read_text())
    meta["unseen_class_ids"].append(0)
    (tmp_path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(DatasetError, match="overlap"):
        load_dataset(tmp_path)


def test_missing_directory():
    with pytest.raises(DatasetError, match="does-not-exist"):
        load_dataset("does-not-exist")


def test_validator_cases():
    assert validate_dataset(gen_synthetic()) == []

    ds = gen_synthetic()
    ds.attributes[3] = 0.0
    assert any("class 3" in p and "zero norm" in p for p in validate_dataset(ds))

    ds = gen_synthetic()
    ds.unseen_classes = ds.unseen_classes + (0,)
    assert any("overlap" in p for p in validate_dataset(ds))


def test_noise_free_classes_are_constant():
    ds = gen_synthetic(SyntheticSpec(noise_std=0.0))
    for c in range(ds.n_classes):
        rows = ds.features[ds.labels == c]
        assert np.all(rows == rows[0])


def test_generator_is_pure():
    a, b = gen_synthetic(), gen_synthetic()
    assert a.features.tobytes() == b.features.tobytes()
    assert a.attributes.tobytes() == b.attributes.tobytes()
    np.testing.assert_array_equal(a.split, b.split)
    assert gen_synthetic(SyntheticSpec(seed=8)).features.tobytes() != a.features.tobytes()


def test_generator_splits():
    ds = gen_synthetic()
    unseen = np.isin(ds.labels, ds.unseen_classes)
    assert np.all(ds.split[unseen] == "test")
    assert set(ds.split[~unseen]) == {"train", "val"}
    np.testing.assert_allclose(np.linalg.norm(ds.attributes, axis=1), 1.0)


def test_nearest_class_mean_oracle_on_default_generator():
    # oracle classifier with class means computed from the generated data
    ds = gen_synthetic()
    classes = np.arange(ds.n_classes)
    means = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in classes])
    test = ds.split == "test"
    dists = ((ds.features[test][:, None, :] - means[None]) ** 2).sum(axis=2)
    pred = classes[np.argmin(dists, axis=1)]
    truth = ds.labels[test]
    per_class = [np.mean(pred[truth == c] == c) for c in np.unique(truth)]
    assert np.mean(per_class) >= 0.95


def test_fingerprint_changes_with_content(tmp_path):
    save_dataset(gen_synthetic(), tmp_path / "a")
    save_dataset(gen_synthetic(SyntheticSpec(seed=1)), tmp_path / "b")
    assert dataset_fingerprint(tmp_path / "a") != dataset_fingerprint(tmp_path / "b")


def test_optional_attribute_normalisation(tmp_path):
    ds = gen_synthetic()
    ds.attributes = ds.attributes * 3.0
    save_dataset(ds, tmp_path)
    assert np.allclose(np.linalg.norm(load_dataset(tmp_path).attributes, axis=1), 3.0)
    assert np.allclose(np.linalg.norm(load_dataset(tmp_path, normalize_attributes=True).attributes, axis=1), 1.0)
