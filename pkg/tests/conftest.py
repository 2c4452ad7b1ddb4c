"""Shared hooks: acceptance criteria report one PASS/FAIL line each."""

import pytest


@pytest.fixture(scope="session")
def acceptance(request):
    """``record(n, name, ok, detail)`` stores and prints a criterion verdict."""
    results = request.config.__dict__.setdefault("_sar_acceptance", {})

    def record(n: int, name: str, ok: bool, detail: str = "") -> bool:
        results[n] = (name, bool(ok), detail)
        print(f"\ncriterion {n} [{name}]: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.__dict__.get("_sar_acceptance")
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        name, ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n} [{name}]: {'PASS' if ok else 'FAIL'} {detail}".rstrip())
