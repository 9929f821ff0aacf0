import pytest

from eedet.reference import LATENCY_ROWS, cost_checks, latency_checks, objective_checks, reference_checks


def test_all_reference_rows_reproduce():
    checks = reference_checks()
    failed = [c["name"] for c in checks if not c["passed"]]
    assert not failed
    assert len(checks) == len(cost_checks()) + len(latency_checks()) + len(objective_checks()) == 3 + 6 + 1


def test_latency_rows_cover_three_widths():
    assert set(LATENCY_ROWS) == {"static-0.5", "static-0.75", "static-1.0"}
    for c in latency_checks():
        assert c["error"] <= 0.025


def test_shallow_exit_flagged():
    shallow = next(c for c in cost_checks() if c["name"] == "shallow_exit_overhead")
    assert shallow["value"]["S"] == pytest.approx(1 - 708 / 534) and shallow["value"]["flagged"]
