"""
Selftest runner: individual checks pass in quick mode and failures surface.

Run with:
    PYTHONPATH=. pytest -q tests/test_selftest.py
"""
import pytest

import selftest
from errors import SelftestFailure


@pytest.mark.parametrize("name", ["adjoint", "matrix_oracle", "gradients", "ssm", "determinism"])
def test_quick_check_passes(name):
    passed, detail = selftest.CHECKS[name](True)
    assert passed, detail


def test_runner_reports_each_check():
    results = selftest.run_selftest(quick=True, only=["adjoint", "ssm"])
    assert [r.name for r in results] == ["adjoint", "ssm"]
    assert all(r.passed and r.seconds >= 0 for r in results)


def test_unknown_check_is_rejected():
    with pytest.raises(SelftestFailure):
        selftest.run_selftest(only=["adjoint", "bogus"])


def test_failing_and_crashing_checks_raise(monkeypatch):
    monkeypatch.setitem(selftest.CHECKS, "broken", lambda quick: (False, "off by one"))
    with pytest.raises(SelftestFailure, match="broken"):
        selftest.run_selftest(quick=True, only=["broken"])

    def crash(quick):
        raise RuntimeError("boom")

    monkeypatch.setitem(selftest.CHECKS, "crash", crash)
    with pytest.raises(SelftestFailure, match="crash"):
        selftest.run_selftest(quick=True, only=["crash"])
