import itertools

import numpy as np
import pytest

from deconfrec.models import (ARCHS, PAD, Batch, backward, build_model, logits_with,
                              loss_and_grads, predict, _adapt)
from deconfrec.numeric import finite_diff_grad, max_rel_error

from conftest import make_batch, random_trunk


def test_build_zero_bias_and_determinism():
    a = build_model("avg-pool", 10, 10, d=4, seed=7)
    b = build_model("avg-pool", 10, 10, d=4, seed=7)
    c = build_model("avg-pool", 10, 10, d=4, seed=8)
    assert np.all(a.params["cls.b"] == 0)
    assert list(a.params) == list(b.params)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params["emb.item"], c.params["emb.item"])


def test_unknown_arch():
    with pytest.raises(ValueError, match="unknown arch"):
        build_model("transformer", 3, 3)


def test_sections():
    t = build_model("recurrent", 3, 4)
    assert set(t.sections.values()) == {"embedding", "extractor", "classifier"}
    assert {p.name for p in t.embedding} == {"emb.user", "emb.item"}
    assert {p.name for p in t.classifier} == {"cls.w", "cls.b"}


@pytest.mark.parametrize("arch", ARCHS)
def test_zero_classifier_gives_half(arch, rng):
    t = random_trunk(rng, arch)
    t.params["cls.w"][:] = 0
    t.params["cls.b"][:] = 0
    assert np.all(predict(t, make_batch(rng, B=6)) == 0.5)


def test_fully_padded_avg_pool_uses_only_embeddings(rng):
    t = random_trunk(rng, "avg-pool", cross_features=False)
    b1 = Batch([1, 1], [2, 2], [[PAD] * 4, [PAD] * 4], [1, 0])
    s = predict(t, b1)
    t2 = t.copy()
    t2.params["emb.item"][[0, 1, 3, 4, 5, 6]] += 5.0  # items not at position 2
    assert np.array_equal(s, predict(t2, b1))


def test_hand_instance():
    # d = h = 1, identity extractor with unit weights, unit classifier
    t = build_model("avg-pool", 1, 2, d=1, h=1, L=2, activation="identity",
                    cross_features=False)
    t.params["emb.user"][:] = 0.2
    t.params["emb.item"][:] = [[0.3], [0.1]]
    t.params["ext.mlp0.w"][:] = 1.0
    t.params["cls.w"][:] = 1.0
    b = Batch([0], [0], [[1, 1]], [1])
    assert predict(t, b)[0] == pytest.approx(0.6456563062257954, abs=1e-15)


def test_adapter_hand_instance():
    out = _adapt(np.array([[0.2]]), {"pa.w": np.array([[0.5]]), "pa.b": np.array([0.0])}, "pa")
    assert out[0, 0] == pytest.approx(0.3, abs=1e-15)


@pytest.mark.parametrize("arch", ARCHS)
def test_oov_rejected(arch, rng):
    t = random_trunk(rng, arch)
    with pytest.raises(ValueError):
        predict(t, Batch([0], [7], [[PAD] * 4], [1]))
    with pytest.raises(ValueError):
        predict(t, Batch([5], [0], [[PAD] * 4], [1]))
    with pytest.raises(ValueError):
        predict(t, Batch([0], [0], [[PAD, 9, 1, 1]], [1]))


@pytest.mark.parametrize("arch", ARCHS)
def test_scores_in_open_interval(arch, rng):
    t = random_trunk(rng, arch, scale=5.0)
    s = predict(t, make_batch(rng, B=50))
    assert np.all((s > 0) & (s < 1))


def test_logit_gradient_identity():
    t = build_model("avg-pool", 1, 1, d=1, h=1, L=1, activation="identity",
                    cross_features=False, user_embedding=False)
    for k in t.params:
        t.params[k][:] = 0.0
    t.params["cls.b"][:] = np.log(0.8 / 0.2)
    b = Batch([0], [0], [[PAD]], [1])
    _, grads = backward(t, b)
    assert grads["cls.b"][0] == pytest.approx(-0.2, abs=1e-12)


def test_saturation_kills_gradient():
    t = build_model("avg-pool", 1, 1, d=1, h=1, L=1, user_embedding=False)
    t.params["cls.b"][:] = 40.0
    _, grads = backward(t, Batch([0], [0], [[PAD]], [1]))
    assert max(float(np.max(np.abs(g))) for g in grads.values()) < 1e-15


@pytest.mark.parametrize("arch,ue,cf", list(itertools.product(ARCHS, (True, False), (True, False))))
def test_gradients_match_finite_differences(arch, ue, cf, rng):
    for trial in range(2):
        t = random_trunk(rng, arch, ext_layers=1 + trial, user_embedding=ue, cross_features=cf)
        b = make_batch(rng, B=4)
        loss, grads = backward(t, b)
        num = finite_diff_grad(lambda _: backward(t, b)[0], t.params)
        assert max_rel_error(grads, num) <= 1e-4


@pytest.mark.parametrize("arch", ARCHS)
def test_adapter_gradients(arch, rng):
    t = random_trunk(rng, arch)
    ad = {"pa.w": rng.normal(0, .3, (3, 3)), "pa.b": rng.normal(0, .3, 3),
          "pb.w": rng.normal(0, .3, (4, 4)), "pb.b": rng.normal(0, .3, 4)}
    b = make_batch(rng, B=4)
    _, g, ag = loss_and_grads(t, b, adapter=ad)
    f = lambda _: loss_and_grads(t, b, adapter=ad)[0]  # noqa: E731
    assert max_rel_error(g, finite_diff_grad(f, t.params)) <= 1e-4
    assert max_rel_error(ag, finite_diff_grad(f, ad)) <= 1e-4


def _permute_history(b, rng):
    seq = b.sequences.copy()
    for r in range(len(seq)):
        valid = np.flatnonzero(seq[r] != PAD)
        seq[r, valid] = seq[r, rng.permutation(valid)]
    return Batch(b.users, b.items, seq, b.labels)


@pytest.mark.parametrize("arch", ["avg-pool", "target-attention"])
def test_permutation_invariance(arch, rng):
    for _ in range(10):
        t = random_trunk(rng, arch, L=6)
        b = make_batch(rng, L=6, B=5)
        np.testing.assert_allclose(logits_with(t, b), logits_with(t, _permute_history(b, rng)),
                                   rtol=0, atol=1e-12)


def test_recurrent_order_sensitivity(rng):
    changed = 0
    for _ in range(10):
        t = random_trunk(rng, "recurrent", L=6)
        seq = np.array([[0, 1, 2, 3, 4, 5]] * 2)
        b = Batch([0, 1], [2, 3], seq, [1, 0])
        rev = Batch([0, 1], [2, 3], seq[:, ::-1].copy(), [1, 0])
        changed += not np.allclose(logits_with(t, b), logits_with(t, rev))
    assert changed == 10


def test_bit_identical_repeat(rng):
    t = random_trunk(rng, "target-attention")
    b = make_batch(rng, B=8)
    l1, g1 = backward(t, b)
    l2, g2 = backward(t, b)
    assert l1 == l2 and all(np.array_equal(g1[k], g2[k]) for k in g1)
