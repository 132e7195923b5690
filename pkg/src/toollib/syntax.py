"""In-process syntax gate for generated tool code.

The same check the execution worker applies, run locally so the pipeline can
reject broken code without a worker round-trip.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class SyntaxReport:
    ok: bool
    message: str = ""
    line: int | None = None
    column: int | None = None


def syntax_check(code: str) -> SyntaxReport:
    """Compile the source; an empty module compiles fine."""
    try:
        compile(code, "<tool>", "exec")
    except SyntaxError as exc:
        return SyntaxReport(
            ok=False,
            message=f"{exc.msg} (line {exc.lineno}, column {exc.offset})",
            line=exc.lineno,
            column=exc.offset,
        )
    except ValueError as exc:  # e.g. source containing null bytes
        return SyntaxReport(ok=False, message=str(exc))
    return SyntaxReport(ok=True)
