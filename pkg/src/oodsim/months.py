"""Calendar-month arithmetic on `YYYY-MM` strings."""

from __future__ import annotations

import re

from .errors import SchemaError

_MONTH_RE = re.compile(r"^(\d{4})-(\d{2})$")


def parse_month(month: str) -> tuple[int, int]:
    """Return (year, month) from a `YYYY-MM` string, validating the range."""
    m = _MONTH_RE.match(month)
    if not m:
        raise SchemaError(f"bad month {month!r}: expected YYYY-MM")
    year, mon = int(m.group(1)), int(m.group(2))
    if not 1 <= mon <= 12:
        raise SchemaError(f"bad month {month!r}: month field out of range")
    return year, mon


def month_ordinal(month: str) -> int:
    """Months since 0000-01; used only for differences and ordering."""
    year, mon = parse_month(month)
    return year * 12 + (mon - 1)


def month_str(ordinal: int) -> str:
    year, mon = divmod(ordinal, 12)
    return f"{year:04d}-{mon + 1:02d}"


def add_months(month: str, k: int) -> str:
    return month_str(month_ordinal(month) + k)


def months_between(start: str, end: str) -> int:
    """Signed difference end - start in months."""
    return month_ordinal(end) - month_ordinal(start)


def month_range(start: str, end: str) -> list[str]:
    """Inclusive list of months from start to end."""
    lo, hi = month_ordinal(start), month_ordinal(end)
    if hi < lo:
        raise SchemaError(f"month range {start}..{end} is reversed")
    return [month_str(i) for i in range(lo, hi + 1)]
