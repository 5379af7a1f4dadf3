"""Collects one summary line per acceptance criterion for the terminal report."""

LINES: list[str] = []


def record(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    LINES.append(line)
    print(line)
    return line
