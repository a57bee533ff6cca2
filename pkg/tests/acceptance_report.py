"""Collects one verdict line per acceptance criterion for the terminal summary."""

LINES: list[str] = []


def verdict(number: int, ok: bool, detail: str) -> str:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    LINES.append(line)
    print(line)
    return line
