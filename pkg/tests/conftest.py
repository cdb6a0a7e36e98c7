import os

from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_acceptance: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    _acceptance[criterion] = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_acceptance):
        terminalreporter.write_line(_acceptance[k])
