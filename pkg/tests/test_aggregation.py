import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deconfrec.aggregation import (GradientQueue, GradNormLog, GroupWeights, aggregate,
                                   effective_weight)
from deconfrec.errors import QueueStateError
from deconfrec.verify import weighted_sum_oracle


def full_queue(grads, shapes=None):
    q = GradientQueue(len(grads), shapes)
    for j in sorted(grads):
        q.push(j, grads[j])
    return q


def test_push_states():
    q = GradientQueue(2)
    q.push(1, {"w": np.zeros(2)})
    assert len(q) == 1 and not q.ready
    with pytest.raises(QueueStateError):
        q.push(1, {"w": np.zeros(2)})
    q.push(2, {"w": np.zeros(2)})
    assert q.ready


def test_shape_mismatch():
    q = GradientQueue(2, {"w": (2,)})
    with pytest.raises(ValueError, match="shape"):
        q.push(1, {"w": np.zeros(3)})


def test_incomplete_queue():
    q = GradientQueue(3)
    q.push(1, {"w": np.zeros(1)})
    with pytest.raises(QueueStateError):
        aggregate(q, GroupWeights(3, 3, (1, 1, 1)))


def test_n1_identity():
    g = {"w": np.random.default_rng(0).normal(size=(3, 2))}
    out = aggregate(full_queue({1: g}), GroupWeights(1, 17, (17,)))
    assert np.array_equal(out["w"], g["w"])


def test_frozen_example():
    grads = {1: {"g": np.array([1.0, 0.0])}, 2: {"g": np.array([0.0, 1.0])}}
    out = aggregate(full_queue(grads), GroupWeights(2, 10, (4, 6)))
    np.testing.assert_allclose(out["g"], [1.25, 0.8333333333333334], rtol=0, atol=1e-15)


def test_equal_groups_exact_sum():
    rng = np.random.default_rng(1)
    grads = {j: {"g": rng.normal(size=5)} for j in (1, 2, 3)}
    out = aggregate(full_queue(grads), GroupWeights(3, 12, (4, 4, 4)))
    assert np.array_equal(out["g"], grads[1]["g"] + grads[2]["g"] + grads[3]["g"])


def test_queue_empty_after_aggregate():
    q = full_queue({1: {"g": np.ones(1)}, 2: {"g": np.ones(1)}})
    aggregate(q, GroupWeights(2, 2, (1, 1)))
    assert len(q) == 0


def test_effective_weight():
    assert effective_weight(GroupWeights(4, 20, (5,) * 4), 3) == 1.0
    assert effective_weight(GroupWeights(2, 10, (4, 6)), 1) == pytest.approx(1.25, abs=1e-15)
    assert effective_weight(GroupWeights(2, 10, (4, 6), prior=(1.0, 0.0)), 2) == 0.0
    with pytest.raises(ValueError):
        effective_weight(GroupWeights(2, 10, (4, 6)), 3)


grad_maps = st.integers(1, 5).flatmap(lambda n: st.tuples(
    st.lists(st.integers(1, 500), min_size=n, max_size=n),
    st.integers(0, 2**31 - 1)))


@settings(max_examples=80, deadline=None)
@given(grad_maps, st.floats(-10, 10))
def test_oracle_linearity_and_order(case, alpha):
    counts, seed = case
    n = len(counts)
    rng = np.random.default_rng(seed)
    grads = {j: {"a": rng.normal(size=3), "b": rng.normal(size=(2, 2))} for j in range(1, n + 1)}
    w = GroupWeights(n, sum(counts), tuple(counts))
    out = aggregate(full_queue(grads), w)
    want = weighted_sum_oracle(grads, counts)
    for k in out:
        assert np.max(np.abs(out[k] - want[k])) <= 1e-12
    scaled = {j: {k: alpha * v for k, v in g.items()} for j, g in grads.items()}
    out_s = aggregate(full_queue(scaled), w)
    for k in out:
        np.testing.assert_allclose(out_s[k], alpha * out[k], rtol=1e-12, atol=1e-12)
    q = GradientQueue(n)
    for j in rng.permutation(np.arange(1, n + 1)):
        q.push(int(j), grads[int(j)])
    shuffled = aggregate(q, w)
    assert all(np.array_equal(shuffled[k], out[k]) for k in out)
    # per-entry aggregation equals whole-map aggregation
    for k in out:
        for e in range(out[k].size):
            single = {j: {"x": np.array([g[k].ravel()[e]])} for j, g in grads.items()}
            assert aggregate(full_queue(single), w)["x"][0] == out[k].ravel()[e]


def test_custom_prior_oracle():
    rng = np.random.default_rng(5)
    grads = {j: {"g": rng.normal(size=4)} for j in (1, 2, 3)}
    prior = (0.2, 0.3, 0.5)
    out = aggregate(full_queue(grads), GroupWeights(3, 30, (5, 10, 15), prior=prior))
    want = weighted_sum_oracle(grads, (5, 10, 15), prior)
    assert np.max(np.abs(out["g"] - want["g"])) <= 1e-12


def test_bad_weights():
    with pytest.raises(ValueError):
        GroupWeights(2, 10, (10,))
    with pytest.raises(ValueError):
        GroupWeights(2, 10, (10, 0))
    with pytest.raises(ValueError):
        GroupWeights(2, 10, (5, 5), prior=(0.7, 0.7))


def test_grad_norm_log(tmp_path):
    log = GradNormLog()
    log.record("stage1", 0, 0, {1: {"g": np.array([3.0, 4.0])}, 2: {"g": np.zeros(2)}})
    log.write(tmp_path / "n.csv")
    lines = (tmp_path / "n.csv").read_text().splitlines()
    assert lines[0] == "stage,epoch,batch,group,grad_norm"
    assert lines[1] == "stage1,0,0,1,5.0"
