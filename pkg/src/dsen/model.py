"""DSEN parameter bundle, forward maps and checkpoint I/O."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dsen.nnkernel import (
    BackwardError,
    DimensionError,
    LinearLayer,
    as_matrix,
    linear_backward,
    linear_forward,
    relu,
    relu_backward,
    softmax_rows,
)

CHECKPOINT_MAGIC = b"DSENCKPT"
CHECKPOINT_VERSION = 1
HEAD_ORDER = ("phi_c", "phi_s", "phi_t", "phi_sr")


class CheckpointError(ValueError):
    pass


@dataclass
class ProjectionCache:
    x: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray


class ProjectionNet:
    """Two fully connected layers with a ReLU in between and a linear output."""

    def __init__(self, layer1: LinearLayer, layer2: LinearLayer):
        if layer1.out_dim != layer2.in_dim:
            raise DimensionError(
                f"layer1 out_dim {layer1.out_dim} != layer2 in_dim {layer2.in_dim}"
            )
        self.layer1 = layer1
        self.layer2 = layer2

    @classmethod
    def init(cls, rng, in_dim: int, hidden_dim: int, out_dim: int) -> "ProjectionNet":
        return cls(LinearLayer.init(rng, in_dim, hidden_dim), LinearLayer.init(rng, hidden_dim, out_dim))

    @property
    def in_dim(self) -> int:
        return self.layer1.in_dim

    @property
    def hidden_dim(self) -> int:
        return self.layer1.out_dim

    @property
    def out_dim(self) -> int:
        return self.layer2.out_dim

    def forward(self, x, record: bool = False):
        x = as_matrix(x)
        pre = linear_forward(self.layer1, x)
        hidden = relu(pre)
        out = linear_forward(self.layer2, hidden)
        if record:
            return out, ProjectionCache(x, pre, hidden)
        return out

    __call__ = forward

    def backward(self, cache: ProjectionCache | None, grad_out: np.ndarray, prefix: str, grads: dict):
        """Accumulate parameter gradients into ``grads`` and return d(loss)/d(input)."""
        if cache is None:
            raise BackwardError(f"{prefix}: backward called without a recorded forward pass")
        gh, gw2, gb2 = linear_backward(self.layer2, cache.hidden, grad_out)
        gpre = relu_backward(cache.pre, gh)
        gx, gw1, gb1 = linear_backward(self.layer1, cache.x, gpre)
        for name, g in (
            ("layer1.weight", gw1),
            ("layer1.bias", gb1),
            ("layer2.weight", gw2),
            ("layer2.bias", gb2),
        ):
            _accumulate(grads, f"{prefix}.{name}", g)
        return gx

    def parameters(self, prefix: str) -> dict:
        return {
            f"{prefix}.layer1.weight": self.layer1.weight,
            f"{prefix}.layer1.bias": self.layer1.bias,
            f"{prefix}.layer2.weight": self.layer2.weight,
            f"{prefix}.layer2.bias": self.layer2.bias,
        }

    def copy(self) -> "ProjectionNet":
        return ProjectionNet(self.layer1.copy(), self.layer2.copy())


def _accumulate(grads: dict, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


class Classifier:
    """Linear layer followed by a row softmax over the seen classes."""

    def __init__(self, linear: LinearLayer):
        self.linear = linear

    @property
    def n_classes(self) -> int:
        return self.linear.out_dim

    def logits(self, features) -> np.ndarray:
        return linear_forward(self.linear, features)

    def scores(self, features) -> np.ndarray:
        return softmax_rows(self.logits(features))

    def parameters(self, prefix: str = "p") -> dict:
        return {f"{prefix}.weight": self.linear.weight, f"{prefix}.bias": self.linear.bias}

    def copy(self) -> "Classifier":
        return Classifier(self.linear.copy())


@dataclass
class DsenModel:
    phi_c: ProjectionNet
    phi_s: ProjectionNet
    phi_t: ProjectionNet
    phi_sr: ProjectionNet
    p: Classifier
    seen_class_ids: list = field(default_factory=list)
    unseen_class_ids: list = field(default_factory=list)
    adapter: LinearLayer | None = None

    def __post_init__(self):
        for name in ("phi_s", "phi_t"):
            net = getattr(self, name)
            if (net.in_dim, net.hidden_dim, net.out_dim) != (
                self.phi_c.in_dim,
                self.phi_c.hidden_dim,
                self.phi_c.out_dim,
            ):
                raise DimensionError(f"{name} dimensions differ from phi_c")
        if self.phi_sr.in_dim != self.feat_dim or self.phi_sr.out_dim != self.attr_dim:
            raise DimensionError(
                f"phi_sr must map {self.feat_dim} -> {self.attr_dim}, "
                f"got {self.phi_sr.in_dim} -> {self.phi_sr.out_dim}"
            )
        if self.p.linear.in_dim != self.feat_dim:
            raise DimensionError("classifier input dim differs from feat_dim")
        if self.seen_class_ids and len(self.seen_class_ids) != self.p.n_classes:
            raise DimensionError(
                f"{len(self.seen_class_ids)} seen class ids for a "
                f"{self.p.n_classes}-way classifier"
            )

    @classmethod
    def init(
        cls,
        attr_dim: int,
        feat_dim: int,
        hidden_dim: int,
        seen_class_ids,
        unseen_class_ids=(),
        seed: int = 0,
        adapter: bool = False,
    ) -> "DsenModel":
        """Fresh model with MSRA-initialised weights and zero biases.

        Draw order is fixed (phi_c, phi_s, phi_t, phi_sr, p) so a given seed
        always yields the same parameters.
        """
        rng = np.random.default_rng(seed)
        seen = [int(c) for c in seen_class_ids]
        return cls(
            phi_c=ProjectionNet.init(rng, attr_dim, hidden_dim, feat_dim),
            phi_s=ProjectionNet.init(rng, attr_dim, hidden_dim, feat_dim),
            phi_t=ProjectionNet.init(rng, attr_dim, hidden_dim, feat_dim),
            phi_sr=ProjectionNet.init(rng, feat_dim, hidden_dim, attr_dim),
            p=Classifier(LinearLayer.init(rng, feat_dim, len(seen))),
            seen_class_ids=seen,
            unseen_class_ids=[int(c) for c in unseen_class_ids],
            adapter=LinearLayer.identity(feat_dim) if adapter else None,
        )

    @property
    def attr_dim(self) -> int:
        return self.phi_c.in_dim

    @property
    def feat_dim(self) -> int:
        return self.phi_c.out_dim

    @property
    def hidden_dim(self) -> int:
        return self.phi_c.hidden_dim

    @property
    def n_seen_classes(self) -> int:
        return self.p.n_classes

    def parameters(self) -> dict:
        """Live references to every parameter block, in checkpoint order."""
        params = {}
        for name in HEAD_ORDER:
            params.update(getattr(self, name).parameters(name))
        params.update(self.p.parameters("p"))
        if self.adapter is not None:
            params["adapter.weight"] = self.adapter.weight
            params["adapter.bias"] = self.adapter.bias
        return params

    def copy(self) -> "DsenModel":
        return DsenModel(
            phi_c=self.phi_c.copy(),
            phi_s=self.phi_s.copy(),
            phi_t=self.phi_t.copy(),
            phi_sr=self.phi_sr.copy(),
            p=self.p.copy(),
            seen_class_ids=list(self.seen_class_ids),
            unseen_class_ids=list(self.unseen_class_ids),
            adapter=None if self.adapter is None else self.adapter.copy(),
        )

    def _check_attrs(self, attrs) -> np.ndarray:
        attrs = as_matrix(attrs, "attributes")
        if attrs.shape[1] != self.attr_dim:
            raise DimensionError(
                f"attribute matrix shape {attrs.shape} does not match attr_dim {self.attr_dim}"
            )
        return attrs

    def embed_seen(self, attrs) -> np.ndarray:
        attrs = self._check_attrs(attrs)
        return self.phi_s(attrs) + self.phi_c(attrs)

    def embed_unseen(self, attrs) -> np.ndarray:
        attrs = self._check_attrs(attrs)
        return self.phi_t(attrs) + self.phi_c(attrs)

    def decode(self, embeddings) -> np.ndarray:
        embeddings = as_matrix(embeddings, "embeddings")
        if embeddings.shape[1] != self.feat_dim:
            raise DimensionError(
                f"embedding shape {embeddings.shape} does not match feat_dim {self.feat_dim}"
            )
        return self.phi_sr(embeddings)

    def visual(self, features) -> np.ndarray:
        """Map stored features through the optional adapter (identity when absent)."""
        features = as_matrix(features, "features")
        if features.shape[1] != self.feat_dim:
            raise DimensionError(
                f"feature shape {features.shape} does not match feat_dim {self.feat_dim}"
            )
        if self.adapter is None:
            return features
        return linear_forward(self.adapter, features)

    def classify_scores(self, features) -> np.ndarray:
        features = as_matrix(features, "features")
        if features.shape[1] != self.feat_dim:
            raise DimensionError(
                f"feature shape {features.shape} does not match feat_dim {self.feat_dim}"
            )
        return self.p.scores(features)

    def warm_start_unseen(self) -> "DsenModel":
        """Overwrite phi_t's values with phi_s's; returns ``self``.

        Copies into the existing arrays so references held by an optimizer
        stay valid; the two heads never share storage.
        """
        src = self.phi_s.parameters("x")
        for name, arr in self.phi_t.parameters("x").items():
            arr[...] = src[name]
        return self


# Aliases matching the operation names used elsewhere in the package.
def embed_seen(model: DsenModel, attrs) -> np.ndarray:
    return model.embed_seen(attrs)


def embed_unseen(model: DsenModel, attrs) -> np.ndarray:
    return model.embed_unseen(attrs)


def decode(model: DsenModel, embeddings) -> np.ndarray:
    return model.decode(embeddings)


def classify_scores(model: DsenModel, features) -> np.ndarray:
    return model.classify_scores(features)


def warm_start_unseen(model: DsenModel) -> DsenModel:
    return model.warm_start_unseen()


# -- checkpoint format -------------------------------------------------------
#
#   8 bytes   magic "DSENCKPT"
#   4 bytes   uint32 LE, length of the JSON header in bytes
#   N bytes   UTF-8 JSON header
#   rest      float64 LE parameter blocks, row-major, in the order listed under
#             header["blocks"]: phi_c, phi_s, phi_t, phi_sr (layer1 weight,
#             layer1 bias, layer2 weight, layer2 bias each), p (weight, bias),
#             then adapter (weight, bias) if present.


def save_checkpoint(model: DsenModel, path, config_hash: str = "") -> None:
    params = model.parameters()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "attr_dim": model.attr_dim,
        "feat_dim": model.feat_dim,
        "hidden_dim": model.hidden_dim,
        "n_seen_classes": model.n_seen_classes,
        "seen_class_ids": list(model.seen_class_ids),
        "unseen_class_ids": list(model.unseen_class_ids),
        "adapter": model.adapter is not None,
        "config_hash": config_hash,
        "blocks": [[name, list(arr.shape)] for name, arr in params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a DSEN checkpoint (bad magic)")
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n).decode("utf-8"))


def load_checkpoint(path) -> DsenModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a DSEN checkpoint (bad magic)")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12 : 12 + n].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
    model = DsenModel.init(
        header["attr_dim"],
        header["feat_dim"],
        header["hidden_dim"],
        header["seen_class_ids"],
        header["unseen_class_ids"],
        adapter=header["adapter"],
    )
    params = model.parameters()
    offset = 12 + n
    for name, shape in header["blocks"]:
        if name not in params or list(params[name].shape) != shape:
            raise CheckpointError(f"{path}: unexpected block {name} with shape {shape}")
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated while reading block {name}")
        params[name][...] = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset = end
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
    return model


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()[:16]
