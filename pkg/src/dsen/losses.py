"""Training criteria: semantic-visual matching, semantic reconstruction and
domain division, plus their weighted sum with analytic gradients.

All terms use mean reductions: ``svs`` and the cross-entropy half of ``ddc``
average over the batch, ``sr`` over every class it reconstructs, and the
pseudo-feature half of ``ddc`` over the unseen classes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from dsen.model import DsenModel
from dsen.nnkernel import (
    DimensionError,
    NonFiniteError,
    as_matrix,
    linear_backward,
    rowwise_cosine_distance,
    softmax_rows,
)

PROB_FLOOR = 1e-12
TERMS = ("svs", "sr", "ddc")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 5.0
    lambda2: float = 1.0
    alpha: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "alpha"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


@dataclass(frozen=True)
class Toggles:
    svs: bool = True
    sr: bool = True
    ddc: bool = True

    @classmethod
    def from_mode(cls, mode: str) -> "Toggles":
        try:
            return MODES[mode.lower()]
        except KeyError:
            raise ValueError(f"unknown mode {mode!r}; expected one of {sorted(MODES)}") from None

    def enabled(self) -> tuple:
        return tuple(t for t in TERMS if getattr(self, t))

    @property
    def mode(self) -> str | None:
        for name, toggles in MODES.items():
            if toggles == self:
                return name
        return None


MODES = {
    "s2v": Toggles(svs=True, sr=False, ddc=False),
    "dsp": Toggles(svs=True, sr=True, ddc=False),
    "ddc": Toggles(svs=True, sr=False, ddc=True),
    "dsen": Toggles(svs=True, sr=True, ddc=True),
}


@dataclass
class Batch:
    """One optimisation step's worth of data.

    ``labels`` are column indices into ``seen_attrs`` (and into the
    classifier), not raw dataset class ids.
    """

    features: np.ndarray
    labels: np.ndarray
    seen_attrs: np.ndarray
    unseen_attrs: np.ndarray


@dataclass
class LossResult:
    value: float
    terms: dict
    grads: dict | None = field(default=None, repr=False)


# -- standalone scalar forms ---------------------------------------------------


def loss_svs(features, embedded) -> float:
    """Mean negative cosine between each feature row and its class embedding."""
    features = as_matrix(features, "features")
    embedded = as_matrix(embedded, "embedded")
    if features.shape != embedded.shape:
        raise DimensionError(f"features {features.shape} vs embeddings {embedded.shape}")
    d, _, _ = rowwise_cosine_distance(features, embedded)
    return float(d.mean())


def loss_sr(model: DsenModel, seen_attrs, unseen_attrs) -> float:
    return sr_term(model, seen_attrs, unseen_attrs)


def loss_ddc(model: DsenModel, seen_features, seen_labels, unseen_attrs, alpha: float = 0.1) -> float:
    value, _, _ = ddc_term(model, as_matrix(seen_features), np.asarray(seen_labels), unseen_attrs, alpha)
    return value


# -- terms with gradients ------------------------------------------------------


def _embed(model: DsenModel, head: str, attrs: np.ndarray, record: bool):
    specific = getattr(model, head)
    if not record:
        return specific(attrs) + model.phi_c(attrs), None
    es, cs = specific.forward(attrs, record=True)
    ec, cc = model.phi_c.forward(attrs, record=True)
    return es + ec, (head, cs, cc)


def _embed_backward(model: DsenModel, cache, grad: np.ndarray, grads: dict) -> None:
    head, cs, cc = cache
    getattr(model, head).backward(cs, grad, head, grads)
    model.phi_c.backward(cc, grad, "phi_c", grads)


def svs_term(model, visual, labels, seen_attrs, scale=1.0, grads=None):
    """Return ``(value, grad_visual)``; grad_visual is None without ``grads``.

    Each seen class in the batch is embedded once and shared by its samples.
    """
    seen_attrs = model._check_attrs(seen_attrs)
    record = grads is not None
    classes, inverse = np.unique(labels, return_inverse=True)
    emb, cache = _embed(model, "phi_s", seen_attrs[classes], record)
    d, g_vis, g_emb = rowwise_cosine_distance(visual, emb[inverse])
    n = visual.shape[0]
    value = float(d.mean())
    if not record:
        return value, None
    g_cls = np.zeros_like(emb)
    np.add.at(g_cls, inverse, g_emb * (scale / n))
    _embed_backward(model, cache, g_cls, grads)
    return value, g_vis * (scale / n)


def sr_term(model, seen_attrs, unseen_attrs, scale=1.0, grads=None, sides=("seen", "unseen")):
    """Mean squared reconstruction error over the seen and unseen classes.

    ``sides`` restricts which halves are evaluated; the denominator is the
    number of classes actually included.
    """
    parts = []
    if "seen" in sides:
        parts.append(("phi_s", model._check_attrs(seen_attrs)))
    if "unseen" in sides and unseen_attrs is not None:
        a_t = model._check_attrs(unseen_attrs)
        if a_t.shape[0]:
            parts.append(("phi_t", a_t))
    k = sum(a.shape[0] for _, a in parts)
    if k == 0:
        return 0.0
    record = grads is not None
    total = 0.0
    for head, attrs in parts:
        emb, ecache = _embed(model, head, attrs, record)
        if record:
            recon, dcache = model.phi_sr.forward(emb, record=True)
        else:
            recon = model.phi_sr(emb)
        diff = recon - attrs
        total += float(np.sum(diff * diff))
        if record:
            g_emb = model.phi_sr.backward(dcache, diff * (2.0 * scale / k), "phi_sr", grads)
            _embed_backward(model, ecache, g_emb, grads)
    return total / k


def _classifier_backward(model, inputs, g_logits, grads):
    g_in, g_w, g_b = linear_backward(model.p.linear, inputs, g_logits)
    for name, g in (("p.weight", g_w), ("p.bias", g_b)):
        grads[name] = grads[name] + g if name in grads else g
    return g_in


def ddc_term(model, visual, labels, unseen_attrs, alpha, scale=1.0, grads=None, pseudo=True,
             detach_pseudo=False):
    """Seen cross-entropy plus ``alpha`` times the mean log max-score of the
    pseudo features ``embed_unseen(a_t)``.

    Returns ``(value, grad_visual, parts)``. The gradient through the max is
    routed to the argmax column (lowest index on ties). With ``detach_pseudo``
    the pseudo features are treated as constants, so that half of the term
    only updates the classifier.
    """
    record = grads is not None
    n = visual.shape[0]
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0]} labels for {n} samples")
    if n and (labels.min() < 0 or labels.max() >= model.n_seen_classes):
        raise DimensionError("seen label index out of range for the classifier")

    probs = softmax_rows(model.p.logits(visual))
    picked = probs[np.arange(n), labels]
    ce = float(-np.mean(np.log(np.maximum(picked, PROB_FLOOR)))) if n else 0.0
    g_vis = None
    if record and n:
        g_logits = probs.copy()
        g_logits[np.arange(n), labels] -= 1.0
        g_logits[picked < PROB_FLOOR] = 0.0
        g_vis = _classifier_backward(model, visual, g_logits * (scale / n), grads)

    pseudo_value = 0.0
    if pseudo and unseen_attrs is not None:
        a_t = model._check_attrs(unseen_attrs)
        k = a_t.shape[0]
        if k:
            emb, ecache = _embed(model, "phi_t", a_t, record)
            q = softmax_rows(model.p.logits(emb))
            top = np.argmax(q, axis=1)
            p_hat = q[np.arange(k), top]
            pseudo_value = float(np.mean(np.log(np.maximum(p_hat, PROB_FLOOR))))
            if record and alpha:
                # d ln q_m / d z = onehot(m) - q
                g_logits = -q
                g_logits[np.arange(k), top] += 1.0
                g_logits[p_hat < PROB_FLOOR] = 0.0
                g_emb = _classifier_backward(model, emb, g_logits * (scale * alpha / k), grads)
                if not detach_pseudo:
                    _embed_backward(model, ecache, g_emb, grads)

    value = ce + alpha * pseudo_value
    return value, g_vis, {"ce": ce, "pseudo": pseudo_value}


def total_loss(
    model: DsenModel,
    batch: Batch,
    weights: LossWeights = LossWeights(),
    toggles: Toggles = Toggles(),
    need_grad: bool = False,
    frozen: tuple = (),
    seen_only: bool = False,
    detach_pseudo: bool = False,
) -> LossResult:
    """Weighted sum ``svs + lambda1 * sr + lambda2 * ddc`` of the enabled terms.

    Args:
        need_grad: also return gradients for every parameter block reached by
            an enabled term. Blocks no term reaches are absent from the dict.
        frozen: parameter-name prefixes whose gradients are discarded.
        seen_only: drop the unseen-class halves of ``sr`` and ``ddc``.
        detach_pseudo: stop the pseudo-feature gradient of ``ddc`` at the
            classifier input; the result is then not the gradient of ``value``
            with respect to phi_t / phi_c.

    Raises:
        NonFiniteError: if any term evaluates to NaN or infinity.
    """
    grads = {} if need_grad else None
    features = as_matrix(batch.features, "features")
    record_adapter = need_grad and model.adapter is not None
    visual = model.visual(features)
    g_visual = np.zeros_like(visual) if record_adapter else None
    unseen = None if seen_only else batch.unseen_attrs

    terms = {}
    value = 0.0
    if toggles.svs:
        terms["svs"], g = svs_term(model, visual, batch.labels, batch.seen_attrs, 1.0, grads)
        value += terms["svs"]
        if record_adapter:
            g_visual += g
    if toggles.sr:
        sides = ("seen",) if seen_only else ("seen", "unseen")
        terms["sr"] = sr_term(model, batch.seen_attrs, unseen, weights.lambda1, grads, sides)
        value += weights.lambda1 * terms["sr"]
    if toggles.ddc:
        terms["ddc"], g, parts = ddc_term(
            model, visual, batch.labels, unseen, weights.alpha, weights.lambda2, grads, not seen_only,
            detach_pseudo,
        )
        terms["ddc_ce"], terms["ddc_pseudo"] = parts["ce"], parts["pseudo"]
        value += weights.lambda2 * terms["ddc"]
        if record_adapter and g is not None:
            g_visual += g

    for name, term in terms.items():
        if not math.isfinite(term):
            raise NonFiniteError(f"loss term {name!r} is not finite ({term})", block=name)

    if record_adapter and (toggles.svs or toggles.ddc):
        _, g_w, g_b = linear_backward(model.adapter, features, g_visual)
        grads["adapter.weight"], grads["adapter.bias"] = g_w, g_b
    if grads is not None and frozen:
        grads = {k: v for k, v in grads.items() if not k.startswith(tuple(frozen))}
    return LossResult(value=float(value), terms=terms, grads=grads)
