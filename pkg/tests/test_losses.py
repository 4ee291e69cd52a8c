import itertools
import math

import numpy as np
import pytest

from dsen.losses import (
    MODES,
    Batch,
    LossWeights,
    Toggles,
    ddc_term,
    loss_ddc,
    loss_sr,
    loss_svs,
    sr_term,
    total_loss,
)
from dsen.model import DsenModel, ProjectionNet
from dsen.nnkernel import LinearLayer, cosine_distance, softmax_rows

from conftest import finite_difference_grads, max_relative_error, toy_batch


def _zero_model(attr_dim=3, feat_dim=4, hidden=5, n_seen=4):
    m = DsenModel.init(attr_dim, feat_dim, hidden, range(n_seen), seed=0)
    for arr in m.parameters().values():
        arr[...] = 0.0
    return m


def test_svs_examples():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(3, 4))
    assert loss_svs(f, f.copy()) == pytest.approx(-1.0)
    assert loss_svs([[1.0, 0.0]], [[0.0, 3.0]]) == 0.0
    e = rng.normal(size=(3, 4))
    assert loss_svs(f, e) == pytest.approx(np.mean([cosine_distance(a, b) for a, b in zip(f, e)]), abs=1e-12)


def test_sr_zero_model_on_unit_attributes_is_one():
    m = _zero_model()
    a = np.eye(3)
    assert loss_sr(m, a[:2], a[2:]) == pytest.approx(1.0)


def test_sr_perfect_reconstruction_is_zero():
    # encoder: identity-padded through relu on non-negative attrs; decoder inverts it
    attr, feat, hid = 2, 2, 2
    eye = LinearLayer(np.eye(2), np.zeros(2))
    zero = LinearLayer(np.zeros((2, 2)), np.zeros(2))
    enc = ProjectionNet(eye.copy(), eye.copy())
    m = DsenModel(
        phi_c=enc,
        phi_s=ProjectionNet(zero.copy(), zero.copy()),
        phi_t=ProjectionNet(zero.copy(), zero.copy()),
        phi_sr=ProjectionNet(eye.copy(), eye.copy()),
        p=__import__("dsen.model", fromlist=["Classifier"]).Classifier(LinearLayer(np.zeros((2, feat)), np.zeros(2))),
        seen_class_ids=[0, 1],
    )
    a_s = np.array([[1.0, 2.0], [0.5, 0.0]])
    a_t = np.array([[3.0, 1.0]])
    assert loss_sr(m, a_s, a_t) == 0.0


def test_sr_matches_hand_composed_oracle():
    model, batch = toy_batch(seed=4, n_seen=2, n_unseen=2)

    def mlp(net, x):
        h = np.maximum(x @ net.layer1.weight.T + net.layer1.bias, 0)
        return h @ net.layer2.weight.T + net.layer2.bias

    errs = []
    for head, attrs in (("phi_s", batch.seen_attrs), ("phi_t", batch.unseen_attrs)):
        for a in attrs:
            e = mlp(getattr(model, head), a[None]) + mlp(model.phi_c, a[None])
            errs.append(float(np.sum((mlp(model.phi_sr, e) - a) ** 2)))
    assert loss_sr(model, batch.seen_attrs, batch.unseen_attrs) == pytest.approx(np.mean(errs), abs=1e-9)


def test_ddc_attainable_minimum():
    # 4 seen classes; perfect seen predictions and uniform scores on pseudo features
    n_seen, alpha = 4, 0.1
    m = _zero_model(attr_dim=3, feat_dim=4, n_seen=n_seen)
    m.p.linear.weight[...] = 1e3 * np.eye(4)  # features are one-hot -> prob ~1 on the true class
    feats = np.eye(4)
    value = loss_ddc(m, feats, np.arange(4), np.ones((2, 3)), alpha=alpha)
    # zero encoders give zero pseudo features -> uniform scores
    assert value == pytest.approx(alpha * math.log(1 / n_seen), abs=1e-9)
    assert value == pytest.approx(-0.13863, abs=1e-5)


def test_ddc_alpha_zero_is_cross_entropy():
    model, batch = toy_batch(seed=5)
    probs = softmax_rows(model.p.logits(batch.features))
    ce = -np.mean(np.log(probs[np.arange(4), batch.labels]))
    assert loss_ddc(model, batch.features, batch.labels, batch.unseen_attrs, alpha=0.0) == pytest.approx(ce, abs=1e-12)


def test_ddc_matches_hand_evaluation():
    model, batch = toy_batch(seed=6, n=2, n_unseen=1)
    alpha = 0.1

    def scores(x):
        z = x @ model.p.linear.weight.T + model.p.linear.bias
        return [math.exp(v) / sum(math.exp(u) for u in row) for row in z.tolist() for v in row]

    n_seen = model.n_seen_classes
    seen = np.array(scores(batch.features)).reshape(2, n_seen)
    ce = -(math.log(seen[0, batch.labels[0]]) + math.log(seen[1, batch.labels[1]])) / 2
    pseudo = np.array(scores(model.embed_unseen(batch.unseen_attrs))).reshape(1, n_seen)
    expected = ce + alpha * math.log(pseudo.max())
    assert loss_ddc(model, batch.features, batch.labels, batch.unseen_attrs, alpha) == pytest.approx(expected, abs=1e-9)


def test_pseudo_term_minimised_by_uniform_distribution():
    # enumerate distributions on a 3-class simplex grid
    uniform = math.log(1 / 3)
    steps = 30
    for i, j in itertools.product(range(steps + 1), repeat=2):
        if i + j > steps:
            continue
        q = np.array([i, j, steps - i - j]) / steps
        value = math.log(q.max())
        if np.allclose(q, 1 / 3):
            assert value == pytest.approx(uniform)
        else:
            assert value > uniform


def test_total_loss_all_off_is_zero():
    model, batch = toy_batch()
    res = total_loss(model, batch, toggles=Toggles(False, False, False), need_grad=True)
    assert res.value == 0.0 and res.grads == {}


def test_total_loss_weighted_sum():
    model, batch = toy_batch(seed=1)
    res = total_loss(model, batch, LossWeights(5.0, 1.0, 0.1), MODES["dsen"])
    a, b, c = res.terms["svs"], res.terms["sr"], res.terms["ddc"]
    assert res.value == pytest.approx(a + 5 * b + c, abs=1e-12)


def test_dsp_equals_independent_terms():
    model, batch = toy_batch(seed=2)
    res = total_loss(model, batch, LossWeights(), MODES["dsp"])
    emb = model.embed_seen(batch.seen_attrs)[batch.labels]
    expected = loss_svs(batch.features, emb) + 5 * loss_sr(model, batch.seen_attrs, batch.unseen_attrs)
    assert res.value == pytest.approx(expected, abs=1e-12)


def test_disabled_terms_produce_no_gradients():
    model, batch = toy_batch(seed=3)
    grads = total_loss(model, batch, toggles=MODES["s2v"], need_grad=True).grads
    assert {k.split(".")[0] for k in grads} == {"phi_c", "phi_s"}


@pytest.mark.parametrize("mode", sorted(MODES))
@pytest.mark.parametrize("adapter", [False, True])
def test_total_loss_gradients_match_finite_differences(mode, adapter):
    model, batch = toy_batch(seed=11, adapter=adapter)
    weights, toggles = LossWeights(), MODES[mode]
    analytic = total_loss(model, batch, weights, toggles, need_grad=True).grads
    params = model.parameters()
    numeric = finite_difference_grads(lambda: total_loss(model, batch, weights, toggles).value, params)
    assert max_relative_error(analytic, numeric) < 1e-3


def test_frozen_and_seen_only_options():
    model, batch = toy_batch(seed=9)
    res = total_loss(model, batch, toggles=MODES["dsen"], need_grad=True, frozen=("phi_t.",), seen_only=True)
    assert not any(k.startswith("phi_t.") for k in res.grads)
    assert res.terms["ddc_pseudo"] == 0.0


def test_sr_gradient_isolation():
    model, batch = toy_batch(seed=8)
    seen_grads, unseen_grads = {}, {}
    sr_term(model, batch.seen_attrs, batch.unseen_attrs, grads=seen_grads, sides=("seen",))
    sr_term(model, batch.seen_attrs, batch.unseen_attrs, grads=unseen_grads, sides=("unseen",))
    assert not any(k.startswith("phi_t.") for k in seen_grads)
    assert not any(k.startswith("phi_s.") for k in unseen_grads)
    assert any(k.startswith("phi_c.") for k in seen_grads) and any(k.startswith("phi_c.") for k in unseen_grads)


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda1=-1.0)


def test_detached_pseudo_gradient_only_changes_classifier_pathway():
    model, batch = toy_batch(seed=12)
    full = total_loss(model, batch, toggles=MODES["ddc"], need_grad=True).grads
    det = total_loss(model, batch, toggles=MODES["ddc"], need_grad=True, detach_pseudo=True).grads
    assert not any(k.startswith("phi_t.") for k in det)
    for name in ("p.weight", "p.bias"):
        np.testing.assert_array_equal(full[name], det[name])
    # phi_c still sees the svs gradient but loses the pseudo-feature share
    assert not np.array_equal(full["phi_c.layer1.weight"], det["phi_c.layer1.weight"])
