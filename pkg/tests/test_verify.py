import pytest

from deconfrec.verify import SUITES, run_suite


@pytest.mark.parametrize("name", sorted(SUITES))
def test_suite_passes(name):
    checks = run_suite(name)
    assert checks and all(c.passed for c in checks), [c.line() for c in checks if not c.passed]


def test_unknown_suite():
    with pytest.raises(ValueError, match="unknown suite"):
        run_suite("everything")
