"""Thresholded two-branch GZSL inference and the MCA / harmonic-mean protocol."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from dsen.data import ZslDataset
from dsen.model import DsenModel
from dsen.nnkernel import COS_EPS, DimensionError, as_matrix

SEEN_BRANCH = "seen_softmax"
UNSEEN_BRANCH = "unseen_ranking"


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Prediction:
    class_id: int
    branch: str
    max_seen_score: float


@dataclass
class EvalResult:
    mca_s: float | None
    mca_t: float
    h: float | None
    tau: float
    per_class: dict = field(default_factory=dict)
    routing: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"tau": self.tau, "mca_t": self.mca_t}
        if self.mca_s is not None:
            out["mca_s"] = self.mca_s
            out["h"] = self.h
        out["per_class"] = {str(k): v for k, v in self.per_class.items()}
        out["routing"] = self.routing
        return out


def _cosine_similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na = np.maximum(np.linalg.norm(a, axis=1, keepdims=True), COS_EPS)
    nb = np.maximum(np.linalg.norm(b, axis=1, keepdims=True), COS_EPS)
    return (a / na) @ (b / nb).T


def predict_batch(model: DsenModel, features, unseen_attrs, tau: float, unseen_ids=None):
    """Vectorised form of :func:`predict`.

    Returns ``(class_ids, routed_to_ranking, p_hat)`` as arrays.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    visual = model.visual(features)
    scores = model.classify_scores(visual)
    p_hat = scores.max(axis=1)
    to_ranking = ~(p_hat > tau)
    seen_ids = np.asarray(model.seen_class_ids or range(model.n_seen_classes), dtype=np.int64)
    pred = seen_ids[np.argmax(scores, axis=1)]
    if to_ranking.any():
        unseen_attrs = as_matrix(unseen_attrs, "unseen attributes") if unseen_attrs is not None else None
        if unseen_attrs is None or unseen_attrs.shape[0] == 0:
            raise EvaluationError("samples routed to the ranking branch but no unseen attributes given")
        if unseen_ids is None:
            unseen_ids = model.unseen_class_ids or range(unseen_attrs.shape[0])
        unseen_ids = np.asarray(unseen_ids, dtype=np.int64)
        if unseen_ids.shape[0] != unseen_attrs.shape[0]:
            raise DimensionError(
                f"{unseen_ids.shape[0]} unseen class ids for {unseen_attrs.shape[0]} attribute rows"
            )
        sim = _cosine_similarity_matrix(visual[to_ranking], model.embed_unseen(unseen_attrs))
        # max similarity == min negative-cosine distance; argmax keeps the lowest index on ties
        pred[to_ranking] = unseen_ids[np.argmax(sim, axis=1)]
    return pred, to_ranking, p_hat


def predict(model: DsenModel, feature, unseen_attrs, tau: float, unseen_ids=None) -> Prediction:
    pred, ranked, p_hat = predict_batch(model, as_matrix(feature), unseen_attrs, tau, unseen_ids)
    return Prediction(int(pred[0]), UNSEEN_BRANCH if ranked[0] else SEEN_BRANCH, float(p_hat[0]))


def per_class_accuracy(predictions, labels, class_set) -> dict:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    table = {}
    for c in class_set:
        mask = labels == c
        if not mask.any():
            raise EvaluationError(f"class {c} has no samples")
        table[int(c)] = float(np.mean(predictions[mask] == c))
    return table


def mca(predictions, labels, class_set) -> float:
    """Mean over classes of per-class top-1 accuracy."""
    table = per_class_accuracy(predictions, labels, class_set)
    return float(np.mean(list(table.values())))


def harmonic_mean(mca_t: float, mca_s: float) -> float:
    if mca_t + mca_s == 0:
        return 0.0
    return 2.0 * mca_t * mca_s / (mca_t + mca_s)


def _check_compatible(model: DsenModel, ds: ZslDataset) -> None:
    if model.feat_dim != ds.feat_dim or model.attr_dim != ds.attr_dim:
        raise DimensionError(
            f"model dims (attr {model.attr_dim}, feat {model.feat_dim}) do not match "
            f"dataset dims (attr {ds.attr_dim}, feat {ds.feat_dim})"
        )
    if model.seen_class_ids and list(model.seen_class_ids) != list(ds.seen_classes):
        raise DimensionError("model seen classes differ from the dataset's seen classes")


def evaluate(model: DsenModel, ds: ZslDataset, tau: float, conventional: bool = False) -> EvalResult:
    """GZSL evaluation on the non-train samples of both domains.

    ``conventional`` restricts scoring to unseen samples, every one of them
    routed to the ranking branch (``tau`` forced to 1).
    """
    _check_compatible(model, ds)
    unseen_ids = list(ds.unseen_classes)
    t_idx = ds.eval_indices("unseen")
    if t_idx.size == 0:
        raise EvaluationError("no unseen-domain evaluation samples")
    if conventional:
        tau = 1.0
        pred, ranked, _ = predict_batch(model, ds.features[t_idx], ds.unseen_attrs, tau, unseen_ids)
        table = per_class_accuracy(pred, ds.labels[t_idx], ds.unseen_classes)
        return EvalResult(
            mca_s=None,
            mca_t=float(np.mean(list(table.values()))),
            h=None,
            tau=tau,
            per_class=table,
            routing={"unseen": {SEEN_BRANCH: 0, UNSEEN_BRANCH: int(t_idx.size)}},
        )

    s_idx = ds.eval_indices("seen")
    if s_idx.size == 0:
        raise EvaluationError("no seen-domain evaluation samples")
    idx = np.concatenate([s_idx, t_idx])
    pred, ranked, _ = predict_batch(model, ds.features[idx], ds.unseen_attrs, tau, unseen_ids)
    ns = s_idx.size
    seen_table = per_class_accuracy(pred[:ns], ds.labels[s_idx], ds.seen_classes)
    unseen_table = per_class_accuracy(pred[ns:], ds.labels[t_idx], ds.unseen_classes)
    mca_s = float(np.mean(list(seen_table.values())))
    mca_t = float(np.mean(list(unseen_table.values())))
    routing = {
        "seen": {SEEN_BRANCH: int((~ranked[:ns]).sum()), UNSEEN_BRANCH: int(ranked[:ns].sum())},
        "unseen": {SEEN_BRANCH: int((~ranked[ns:]).sum()), UNSEEN_BRANCH: int(ranked[ns:].sum())},
    }
    return EvalResult(
        mca_s=mca_s,
        mca_t=mca_t,
        h=harmonic_mean(mca_t, mca_s),
        tau=float(tau),
        per_class={**seen_table, **unseen_table},
        routing=routing,
    )


def default_tau_grid(step: float = 0.05) -> np.ndarray:
    n = int(round(1.0 / step))
    return np.round(np.linspace(0.0, 1.0, n + 1), 10)


@dataclass(frozen=True)
class SweepRow:
    tau: float
    mca_s: float
    mca_t: float
    h: float


def sweep_tau(model: DsenModel, ds: ZslDataset, tau_grid=None) -> list[SweepRow]:
    grid = default_tau_grid() if tau_grid is None else np.asarray(tau_grid, dtype=np.float64)
    if np.any(np.diff(grid) < 0):
        raise ValueError("tau grid must be sorted ascending")
    rows = []
    for tau in grid:
        r = evaluate(model, ds, float(tau))
        rows.append(SweepRow(float(tau), r.mca_s, r.mca_t, r.h))
    return rows


def best_row(rows: list[SweepRow]) -> SweepRow:
    """Row with the highest H; the lowest tau wins ties."""
    return max(rows, key=lambda r: (r.h, -r.tau))


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    buf.write("tau,mca_s,mca_t,h\n")
    for r in rows:
        buf.write(f"{r.tau:.4f},{r.mca_s:.4f},{r.mca_t:.4f},{r.h:.4f}\n")
    return buf.getvalue()


@dataclass
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def percent(self) -> np.ndarray:
        total = self.counts.sum()
        return 100.0 * self.counts / total if total else np.zeros(len(self.counts))

    def fraction_below(self, threshold: float) -> float:
        """Share of samples in bins lying entirely below ``threshold``."""
        total = self.counts.sum()
        keep = self.bin_edges[1:] <= threshold
        return float(self.counts[keep].sum() / total) if total else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("bin_lo,bin_hi,count,percent\n")
        for lo, hi, c, p in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts, self.percent):
            buf.write(f"{lo:.4f},{hi:.4f},{int(c)},{p:.4f}\n")
        return buf.getvalue()


def max_scores(model: DsenModel, features) -> np.ndarray:
    return model.classify_scores(model.visual(features)).max(axis=1)


def score_histogram(model: DsenModel, features, bin_edges=None) -> Histogram:
    """Histogram of the maximum seen-class score; the last bin includes 1.0."""
    edges = np.linspace(0.0, 1.0, 11) if bin_edges is None else np.asarray(bin_edges, dtype=np.float64)
    if np.any(np.diff(edges) <= 0) or edges[0] > 0.0 or edges[-1] < 1.0:
        raise ValueError("bin edges must be strictly ascending and cover [0, 1]")
    counts, _ = np.histogram(max_scores(model, features), bins=edges)
    return Histogram(edges, counts)


def export_embeddings(model: DsenModel, ds: ZslDataset, path) -> None:
    """Write class prototypes as ``class_id,domain,feat...`` rows for external t-SNE."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for domain, classes, embed in (
            ("seen", ds.seen_classes, model.embed_seen),
            ("unseen", ds.unseen_classes, model.embed_unseen),
        ):
            emb = embed(ds.attributes[list(classes)])
            for c, row in zip(classes, emb):
                writer.writerow([int(c), domain, *(repr(float(v)) for v in row)])
