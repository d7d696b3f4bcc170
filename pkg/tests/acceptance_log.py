"""Verdict lines recorded by the acceptance tests, printed at session end."""

RESULTS = {}  # criterion number -> (passed, detail)


def verdict(number: int, passed: bool, detail: str) -> None:
    RESULTS[number] = (bool(passed), detail)
    assert passed, f"criterion {number}: {detail}"
