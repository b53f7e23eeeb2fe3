"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""

import pytest

from gravitydb.verify import CHECKS, run_check


@pytest.mark.parametrize("number", [n for n, _, _ in CHECKS], ids=[name.replace(" ", "_") for _, name, _ in CHECKS])
def test_acceptance(number, capsys):
    result = run_check(number)
    with capsys.disabled():
        print("\n" + result.line())
    assert result.passed, result.line()
