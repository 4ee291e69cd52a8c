"""Dataset schema, directory I/O, validation and a synthetic GZSL generator.

On-disk layout of a dataset directory::

    meta.json       {format_version, n_samples, feat_dim, attr_dim, n_classes,
                     seen_class_ids, unseen_class_ids}
    features.f32    little-endian float32, row-major, n_samples x feat_dim
    labels.csv      sample_index,class_id,split   (split in train/val/test)
    attributes.csv  class_id,v1,...,v_attr_dim

Class ids are integers in ``[0, n_classes)``; attribute row ``i`` belongs to
class ``i``.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
FILES = ("meta.json", "features.f32", "labels.csv", "attributes.csv")


class DatasetError(ValueError):
    """A dataset file is missing, malformed or violates an invariant."""

    def __init__(self, file: str, where: str, rule: str):
        super().__init__(f"{file} ({where}): {rule}")
        self.file = file
        self.where = where
        self.rule = rule


@dataclass
class ZslDataset:
    features: np.ndarray  # (n, feat_dim) float64
    labels: np.ndarray  # (n,) int64 class ids
    attributes: np.ndarray  # (n_classes, attr_dim) float64
    seen_classes: tuple
    unseen_classes: tuple
    split: np.ndarray  # (n,) str, one of SPLITS

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    @property
    def attr_dim(self) -> int:
        return self.attributes.shape[1]

    @property
    def n_classes(self) -> int:
        return self.attributes.shape[0]

    @property
    def seen_attrs(self) -> np.ndarray:
        return self.attributes[list(self.seen_classes)]

    @property
    def unseen_attrs(self) -> np.ndarray:
        return self.attributes[list(self.unseen_classes)]

    def train_indices(self) -> np.ndarray:
        return np.flatnonzero(self.split == "train")

    def eval_indices(self, domain: str) -> np.ndarray:
        """Non-train samples whose label belongs to ``domain`` ("seen"/"unseen")."""
        classes = self.seen_classes if domain == "seen" else self.unseen_classes
        mask = (self.split != "train") & np.isin(self.labels, classes)
        return np.flatnonzero(mask)

    def seen_index(self, class_ids) -> np.ndarray:
        """Map seen class ids to classifier column positions."""
        lookup = {c: i for i, c in enumerate(self.seen_classes)}
        return np.array([lookup[int(c)] for c in class_ids], dtype=np.int64)

    def normalized(self) -> "ZslDataset":
        """Copy with every attribute row scaled to unit L2 norm."""
        norms = np.linalg.norm(self.attributes, axis=1, keepdims=True)
        return ZslDataset(
            self.features,
            self.labels,
            self.attributes / np.where(norms > 0, norms, 1.0),
            self.seen_classes,
            self.unseen_classes,
            self.split,
        )


def validate_dataset(ds: ZslDataset) -> list[str]:
    """Return a list of human-readable invariant violations (empty when valid)."""
    problems = []
    seen, unseen = set(ds.seen_classes), set(ds.unseen_classes)
    if ds.features.ndim != 2:
        problems.append(f"features must be 2-D, got shape {ds.features.shape}")
        return problems
    n = ds.features.shape[0]
    if ds.labels.shape != (n,) or ds.split.shape != (n,):
        problems.append(
            f"{n} feature rows but {ds.labels.shape[0]} labels and {ds.split.shape[0]} split tags"
        )
        return problems
    if not np.all(np.isfinite(ds.features)):
        bad = int(np.argwhere(~np.isfinite(ds.features))[0, 0])
        problems.append(f"non-finite feature value in sample {bad}")
    overlap = sorted(seen & unseen)
    if overlap:
        problems.append(f"seen and unseen class sets overlap: {overlap}")
    if not seen:
        problems.append("seen class set is empty")
    for c in sorted(seen | unseen):
        if not 0 <= c < ds.n_classes:
            problems.append(f"class id {c} has no attribute row")
    known = set(range(ds.n_classes))
    for c in sorted(set(ds.labels.tolist()) - known):
        problems.append(f"label class id {c} has no attribute row")
    for c in sorted(set(ds.labels.tolist()) - seen - unseen):
        if c in known:
            problems.append(f"label class id {c} is neither seen nor unseen")
    bad_split = sorted(set(ds.split.tolist()) - set(SPLITS))
    if bad_split:
        problems.append(f"unknown split tags {bad_split}")
    train = ds.split == "train"
    wrong = np.flatnonzero(train & ~np.isin(ds.labels, list(seen)))
    for i in wrong[:10]:
        problems.append(f"train sample {int(i)} has non-seen label {int(ds.labels[i])}")
    norms = np.linalg.norm(ds.attributes, axis=1)
    for c in np.flatnonzero(~(norms > 0)):
        problems.append(f"attribute row of class {int(c)} has zero norm")
    if not np.all(np.isfinite(ds.attributes)):
        problems.append("non-finite attribute value")
    return problems


def save_dataset(ds: ZslDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "n_samples": ds.n_samples,
        "feat_dim": ds.feat_dim,
        "attr_dim": ds.attr_dim,
        "n_classes": ds.n_classes,
        "seen_class_ids": [int(c) for c in ds.seen_classes],
        "unseen_class_ids": [int(c) for c in ds.unseen_classes],
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    (path / "features.f32").write_bytes(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
    with open(path / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for i, (c, s) in enumerate(zip(ds.labels, ds.split)):
            writer.writerow([i, int(c), s])
    with open(path / "attributes.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for c, row in enumerate(ds.attributes):
            writer.writerow([c, *(repr(float(v)) for v in row)])


def load_dataset(path, normalize_attributes: bool = False) -> ZslDataset:
    """Read and validate a dataset directory.

    Raises:
        DatasetError: naming the offending file, location and rule.
    """
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(str(path), "directory", "dataset directory does not exist")
    for name in FILES:
        if not (path / name).is_file():
            raise DatasetError(str(path / name), "file", "required file is missing")

    try:
        meta = json.loads((path / "meta.json").read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError("meta.json", f"line {exc.lineno}", f"invalid JSON: {exc.msg}") from None
    for key in ("n_samples", "feat_dim", "attr_dim", "n_classes", "seen_class_ids", "unseen_class_ids"):
        if key not in meta:
            raise DatasetError("meta.json", f"key {key!r}", "required key is missing")
    n, feat_dim = int(meta["n_samples"]), int(meta["feat_dim"])
    attr_dim, n_classes = int(meta["attr_dim"]), int(meta["n_classes"])

    blob = (path / "features.f32").read_bytes()
    if len(blob) != 4 * n * feat_dim:
        raise DatasetError(
            "features.f32",
            f"byte {len(blob)}",
            f"expected {4 * n * feat_dim} bytes for {n} x {feat_dim} float32 values",
        )
    features = np.frombuffer(blob, dtype="<f4").reshape(n, feat_dim).astype(np.float64)
    if not np.all(np.isfinite(features)):
        flat = int(np.argwhere(~np.isfinite(features.ravel()))[0, 0])
        raise DatasetError("features.f32", f"offset {4 * flat}", "NaN or infinite feature value")

    labels = np.full(n, -1, dtype=np.int64)
    split = np.empty(n, dtype=object)
    with open(path / "labels.csv", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                idx, cid, tag = int(row[0]), int(row[1]), row[2].strip()
            except (ValueError, IndexError):
                raise DatasetError("labels.csv", f"line {lineno}", "expected sample_index,class_id,split") from None
            if not 0 <= idx < n:
                raise DatasetError("labels.csv", f"line {lineno}", f"sample index {idx} out of range")
            if not 0 <= cid < n_classes:
                raise DatasetError("labels.csv", f"line {lineno}", f"unknown class id {cid}")
            if tag not in SPLITS:
                raise DatasetError("labels.csv", f"line {lineno}", f"split {tag!r} not in {SPLITS}")
            if labels[idx] != -1:
                raise DatasetError("labels.csv", f"line {lineno}", f"duplicate sample index {idx}")
            labels[idx], split[idx] = cid, tag
    missing = np.flatnonzero(labels < 0)
    if missing.size:
        raise DatasetError("labels.csv", f"sample {int(missing[0])}", "sample has no label line")

    attributes = np.full((n_classes, attr_dim), np.nan)
    seen_rows = set()
    with open(path / "attributes.csv", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            try:
                cid = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError:
                raise DatasetError("attributes.csv", f"line {lineno}", "non-numeric value") from None
            if not 0 <= cid < n_classes:
                raise DatasetError("attributes.csv", f"line {lineno}", f"unknown class id {cid}")
            if len(values) != attr_dim:
                raise DatasetError(
                    "attributes.csv", f"line {lineno}", f"{len(values)} values, expected attr_dim {attr_dim}"
                )
            attributes[cid] = values
            seen_rows.add(cid)
    for c in range(n_classes):
        if c not in seen_rows:
            raise DatasetError("attributes.csv", f"class {c}", "class has no attribute row")

    ds = ZslDataset(
        features=features,
        labels=labels,
        attributes=attributes,
        seen_classes=tuple(int(c) for c in meta["seen_class_ids"]),
        unseen_classes=tuple(int(c) for c in meta["unseen_class_ids"]),
        split=split.astype(str),
    )
    problems = validate_dataset(ds)
    if problems:
        raise DatasetError(str(path), "invariants", "; ".join(problems))
    return ds.normalized() if normalize_attributes else ds


def dataset_fingerprint(path) -> str:
    """SHA-256 over the four dataset files, in a fixed order."""
    digest = hashlib.sha256()
    for name in FILES:
        digest.update(name.encode())
        digest.update((Path(path) / name).read_bytes())
    return digest.hexdigest()


@dataclass(frozen=True)
class SyntheticSpec:
    n_seen: int = 10
    n_unseen: int = 5
    attr_dim: int = 16
    feat_dim: int = 32
    samples_per_class: int = 30
    noise_std: float = 0.1
    seed: int = 7
    hidden_dim: int = 64
    val_fraction: float = 0.2


def gen_synthetic(spec: SyntheticSpec = SyntheticSpec()) -> ZslDataset:
    """Seeded toy GZSL dataset.

    Class attributes are unit-norm Gaussian draws. A hidden random map
    ``G(a) = W2 relu(W1 a + b1)`` gives each class its mean feature, and samples
    add isotropic Gaussian noise. Classes ``0..n_seen-1`` are seen; seen samples
    are split train/val, every unseen sample goes to test.
    """
    if min(spec.n_seen, spec.n_unseen, spec.attr_dim, spec.feat_dim, spec.samples_per_class) < 1:
        raise ValueError("all counts must be >= 1")
    if spec.noise_std < 0:
        raise ValueError("noise_std must be >= 0")
    rng = np.random.default_rng(spec.seed)
    n_classes = spec.n_seen + spec.n_unseen
    attrs = rng.normal(size=(n_classes, spec.attr_dim))
    attrs /= np.linalg.norm(attrs, axis=1, keepdims=True)

    w1 = rng.normal(0.0, np.sqrt(2.0 / spec.attr_dim), size=(spec.hidden_dim, spec.attr_dim))
    b1 = rng.normal(0.0, 0.1, size=spec.hidden_dim)
    w2 = rng.normal(0.0, np.sqrt(2.0 / spec.hidden_dim), size=(spec.feat_dim, spec.hidden_dim))
    means = np.maximum(attrs @ w1.T + b1, 0.0) @ w2.T

    labels = np.repeat(np.arange(n_classes), spec.samples_per_class)
    noise = rng.normal(0.0, spec.noise_std, size=(labels.size, spec.feat_dim)) if spec.noise_std else 0.0
    # round through float32 so in-memory and on-disk features agree bit for bit
    features = (means[labels] + noise).astype(np.float32).astype(np.float64)

    split = np.empty(labels.size, dtype=object)
    n_val = int(round(spec.val_fraction * spec.samples_per_class))
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if c < spec.n_seen:
            order = rng.permutation(idx)
            split[order[:n_val]] = "val"
            split[order[n_val:]] = "train"
        else:
            split[idx] = "test"
    return ZslDataset(
        features=features,
        labels=labels.astype(np.int64),
        attributes=attrs,
        seen_classes=tuple(range(spec.n_seen)),
        unseen_classes=tuple(range(spec.n_seen, n_classes)),
        split=split.astype(str),
    )
