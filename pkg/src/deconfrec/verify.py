"""Self-check suites run by ``deconfrec verify``.

Each suite compares the implementation against an independent oracle on
random instances and returns a list of :class:`Check` results.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

from .aggregation import GradientQueue, GroupWeights, aggregate
from .metrics import TIE_POLICIES, auc, hitrate_at_k, ndcg_at_k
from .models import ARCHS, PAD, Batch, build_model, loss_and_grads, predict
from .numeric import finite_diff_grad, max_rel_error
from .optim import Adam
from .plugins import init_light, init_naive, plugin_backward, predict_with

GRAD_TOL = 1e-4
AGG_TOL = 1e-12
LIGHT_TOL = 1e-9


@dataclass
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}" + (
            f": {self.detail}" if self.detail else "")


def random_batch(rng, n_users, n_items, L, B) -> Batch:
    seq = rng.integers(0, n_items, (B, L))
    for b in range(B):
        seq[b, :rng.integers(0, L + 1)] = PAD
    return Batch(rng.integers(0, n_users, B), rng.integers(0, n_items, B), seq,
                 rng.integers(0, 2, B))


def random_trunk(rng, arch, d, h, L, **kw):
    trunk = build_model(arch, 5, 7, d=d, h=h, L=L, seed=int(rng.integers(1 << 30)), **kw)
    for k in trunk.params:
        trunk.params[k] = rng.normal(0.0, 0.5, trunk.params[k].shape)
    return trunk


def gradient_suite(instances: int = 20, seed: int = 0) -> List[Check]:
    """Analytic trunk (and adapter) gradients against central differences."""
    rng = np.random.default_rng(seed)
    checks = []
    for arch in ARCHS:
        worst, worst_ad = 0.0, 0.0
        for i in range(instances):
            d, h, L, B = int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(1, 7)), 4
            kw = dict(ext_layers=1 + i % 2, user_embedding=bool(i % 3), cross_features=i % 4 != 1)
            trunk = random_trunk(rng, arch, d, h, L, **kw)
            batch = random_batch(rng, 5, 7, L, B)
            adapter = None
            if i % 2:
                adapter = {"pa.w": rng.normal(0, 0.3, (d, d)), "pa.b": rng.normal(0, 0.3, d),
                           "pb.w": rng.normal(0, 0.3, (h, h)), "pb.b": rng.normal(0, 0.3, h)}
            _, grads, agrads = loss_and_grads(trunk, batch, adapter=adapter)

            def f(_):
                return loss_and_grads(trunk, batch, adapter=adapter)[0]

            worst = max(worst, max_rel_error(grads, finite_diff_grad(f, trunk.params)))
            if adapter is not None:
                worst_ad = max(worst_ad, max_rel_error(agrads, finite_diff_grad(f, adapter)))
        checks.append(Check(f"gradients/{arch}", worst <= GRAD_TOL and worst_ad <= GRAD_TOL,
                            f"max rel err trunk {worst:.2e}, adapter {worst_ad:.2e}"))
    return checks


def weighted_sum_oracle(grads: Dict[int, Dict[str, np.ndarray]], counts, prior=None):
    """Direct evaluation of sum_j P(z=j) * N / n_j * g_j, element by element in Python floats."""
    n = len(counts)
    N = sum(counts)
    out = {}
    for name in grads[1]:
        shape = grads[1][name].shape
        flat = [0.0] * int(np.prod(shape))
        for j in range(1, n + 1):
            pj = 1.0 / n if prior is None else prior[j - 1]
            for e, g in enumerate(grads[j][name].ravel().tolist()):
                flat[e] += pj * N / counts[j - 1] * g
        out[name] = np.array(flat).reshape(shape)
    return out


def aggregation_suite(queues: int = 100, seed: int = 0) -> List[Check]:
    rng = np.random.default_rng(seed)
    worst, ok_n1, ok_equal = 0.0, True, True
    shapes = {"a": (3,), "b": (2, 2)}
    for q in range(queues):
        n = (1, 2, 3, 5)[q % 4]
        counts = [int(c) for c in rng.integers(1, 1000, n)]
        grads = {j: {k: rng.normal(size=s) for k, s in shapes.items()} for j in range(1, n + 1)}
        queue = GradientQueue(n, shapes)
        for j in range(1, n + 1):
            queue.push(j, grads[j])
        got = aggregate(queue, GroupWeights(n, sum(counts), tuple(counts)))
        want = weighted_sum_oracle(grads, counts)
        worst = max(worst, max(float(np.max(np.abs(got[k] - want[k]))) for k in shapes))
        if n == 1:
            ok_n1 &= all(np.array_equal(got[k], grads[1][k]) for k in shapes)
        eq = GradientQueue(n, shapes)
        for j in range(1, n + 1):
            eq.push(j, grads[j])
        got_eq = aggregate(eq, GroupWeights(n, 7 * n, (7,) * n))
        summed = {}
        for k in shapes:
            summed[k] = grads[1][k]
            for j in range(2, n + 1):
                summed[k] = summed[k] + grads[j][k]
        ok_equal &= all(np.array_equal(got_eq[k], summed[k]) for k in shapes)
    return [
        Check("aggregation/oracle", worst <= AGG_TOL, f"max abs err {worst:.2e}"),
        Check("aggregation/n=1 identity", ok_n1),
        Check("aggregation/equal groups sum", ok_equal),
    ]


def plugin_suite(seed: int = 0) -> List[Check]:
    rng = np.random.default_rng(seed)
    exact, light_err, isolated = True, 0.0, True
    for arch in ARCHS:
        trunk = random_trunk(rng, arch, 4, 5, 6)
        batch = random_batch(rng, 5, 7, 6, 8)
        base = predict(trunk, batch)
        exact &= np.array_equal(predict_with(trunk, init_naive(trunk, 1), batch), base)
        for zero in (True, False):
            light = init_light(trunk, 1, seed=seed, scale=1e-12, exact_zero=zero)
            light_err = max(light_err, float(np.max(np.abs(
                predict_with(trunk, light, batch) - base))))
        for make in (lambda: init_naive(trunk, 1),
                     lambda: init_light(trunk, 1, seed=seed)):
            plugins = {1: make()}
            plugins.update({j: type(plugins[1])(j, {k: rng.normal(size=v.shape)
                                                    for k, v in plugins[1].params.items()})
                            for j in (2, 3)})
            before_trunk = {k: v.copy() for k, v in trunk.params.items()}
            before = {j: {k: v.copy() for k, v in p.params.items()} for j, p in plugins.items()}
            batch.group = 2
            _, pgrads, _ = plugin_backward(trunk, plugins[2], batch)
            Adam().step(plugins[2].params, pgrads, 1e-2)
            isolated &= all(np.array_equal(trunk.params[k], v) for k, v in before_trunk.items())
            isolated &= all(np.array_equal(plugins[j].params[k], v)
                            for j in (1, 3) for k, v in before[j].items())
            isolated &= any(not np.array_equal(plugins[2].params[k], v)
                            for k, v in before[2].items())
    return [
        Check("plugins/naive zero identity", exact, "bit-exact"),
        Check("plugins/light near-zero identity", light_err <= LIGHT_TOL,
              f"max abs diff {light_err:.2e}"),
        Check("plugins/isolation", isolated),
    ]


def brute_force_auc(pos, neg, tie_policy="strict"):
    credit = 0.0
    for p, q in itertools.product(pos.tolist(), neg.tolist()):
        if q < p:
            credit += 1.0
        elif q == p and tie_policy == "half":
            credit += 0.5
    return credit / (len(pos) * len(neg))


def metric_suite(seed: int = 0, sizes=((5, 7), (40, 60), (300, 200), (1000, 1000))) -> List[Check]:
    rng = np.random.default_rng(seed)
    ok = True
    detail = []
    for n_pos, n_neg in sizes:
        # few distinct values so ties are common
        pos = rng.integers(0, 50, n_pos) / 10.0
        neg = rng.integers(0, 50, n_neg) / 10.0
        for tp in TIE_POLICIES:
            if n_pos * n_neg <= 100_000:
                want = brute_force_auc(pos, neg, tp)
            else:
                # vectorized pair matrix; still independent of the sorted-count path
                cmp = neg[None, :] < pos[:, None]
                tie = neg[None, :] == pos[:, None]
                want = (cmp.sum() + (0.5 * tie.sum() if tp == "half" else 0.0)) / (n_pos * n_neg)
            got = auc(pos, neg, tp)
            if got != want:
                ok = False
                detail.append(f"{n_pos}x{n_neg}/{tp}: {got} != {want}")
    ranks = {0: 1, 1: 3, 2: 11}
    hand = (hitrate_at_k(ranks, 10) == 2 / 3
            and abs(ndcg_at_k(ranks, 10) - (1.0 + 0.5) / 3) < 1e-15
            and hitrate_at_k({0: 1}, 1) == 1.0 and ndcg_at_k({0: 2}, 1) == 0.0)
    return [Check("metrics/auc pair-count oracle", ok, "; ".join(detail) or "exact"),
            Check("metrics/hr and ndcg hand values", hand)]


SUITES: Dict[str, Callable[[], List[Check]]] = {
    "gradients": gradient_suite,
    "aggregation": aggregation_suite,
    "plugins": plugin_suite,
    "metrics": metric_suite,
}


def run_suite(name: str) -> List[Check]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; expected one of {sorted(SUITES)}")
    return SUITES[name]()
