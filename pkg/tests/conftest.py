import numpy as np
import pytest

from deconfrec.data import from_records
from deconfrec.models import PAD, Batch, build_model


def make_batch(rng, n_users=5, n_items=7, L=4, B=3, group=None):
    seq = rng.integers(0, n_items, (B, L))
    for b in range(B):
        seq[b, :rng.integers(0, L + 1)] = PAD
    return Batch(rng.integers(0, n_users, B), rng.integers(0, n_items, B), seq,
                 rng.integers(0, 2, B), group=group)


def random_trunk(rng, arch, d=3, h=4, L=4, scale=0.5, **kw):
    trunk = build_model(arch, 5, 7, d=d, h=h, L=L, seed=0, **kw)
    for k in trunk.params:
        trunk.params[k] = rng.normal(0.0, scale, trunk.params[k].shape)
    return trunk


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_log():
    # user a: 5 clicks, b: 2, c: 1 (excluded by leave-last-out)
    recs = [("a", "i1", 1), ("a", "i2", 2), ("a", "i3", 3), ("a", "i4", 4), ("a", "i5", 5),
            ("b", "i1", 10), ("b", "i6", 11), ("c", "i2", 7)]
    return from_records(recs)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line, then assert it."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def record(label, passed, detail=""):
        lines.append(f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}")
        assert passed, f"{label}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
