"""Collects one pass/fail line per acceptance criterion."""

RESULTS: dict[int, str] = {}


def record(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS[number] = line
    print(line)
    return ok
