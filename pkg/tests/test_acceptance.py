"""One test per acceptance criterion; each prints a PASS/FAIL line with its measured numbers.

Run with ``pytest -m acceptance -s`` (or ``tfelab verify``).
"""

import pytest

from tfelab.acceptance import CRITERIA, nonlinear_reference_run

pytestmark = pytest.mark.acceptance


@pytest.fixture(scope="module")
def shared_run():
    return nonlinear_reference_run()


def _report(c, capsys):
    with capsys.disabled():
        print("\n" + c.line())
    assert c.passed, c.line()


@pytest.mark.parametrize("number", [1, 2, 3, 4, 5, 7, 9, 10])
def test_criterion(number, capsys):
    _report(CRITERIA[number](), capsys)


@pytest.mark.parametrize("number", [6, 8])
def test_nonlinear_criterion(number, shared_run, capsys):
    _report(CRITERIA[number](run=shared_run), capsys)
