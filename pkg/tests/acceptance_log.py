"""Collects one pass/fail line per acceptance criterion for the terminal summary."""

RESULTS: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    RESULTS[criterion] = (bool(passed), detail)
    print(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}")
