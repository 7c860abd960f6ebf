"""Unit-suffixed quantity parsing.

Physical inputs coming from the command line or configuration files must
carry an explicit unit. Lengths are returned in meters, angles in degrees.
"""

from __future__ import annotations

import re

LENGTH_UNITS = {"m": 1.0, "mm": 1e-3, "um": 1e-6, "µm": 1e-6, "nm": 1e-9}
ANGLE_UNITS = {"deg": 1.0, "rad": 57.29577951308232}
TIME_UNITS = {"s": 1.0, "ms": 1e-3, "us": 1e-6}

_QTY = re.compile(r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*([A-Za-zµ/]+)\s*$")


def _parse(text: str, table: dict[str, float], kind: str) -> float:
    if isinstance(text, (int, float)):
        raise ValueError(f"{kind} {text!r} needs a unit suffix ({', '.join(table)})")
    match = _QTY.match(str(text))
    if match is None:
        raise ValueError(
            f"cannot parse {kind} {text!r}: expected a number with a unit suffix "
            f"({', '.join(table)})"
        )
    value, unit = match.groups()
    if unit not in table:
        raise ValueError(f"unknown {kind} unit {unit!r} in {text!r}; use one of {', '.join(table)}")
    return float(value) * table[unit]


def parse_length(text: str) -> float:
    """Parse ``"7.5mm"``-style text to meters."""
    return _parse(text, LENGTH_UNITS, "length")


def parse_angle(text: str) -> float:
    """Parse ``"3deg"`` or ``"0.05rad"`` to degrees."""
    return _parse(text, ANGLE_UNITS, "angle")


def parse_time(text: str) -> float:
    """Parse ``"0.1s"`` or ``"100ms"`` to seconds."""
    return _parse(text, TIME_UNITS, "time")


def format_length(value: float) -> str:
    """Format meters with the most readable suffix, round-trippable."""
    a = abs(value)
    if a == 0 or a >= 1e-3:
        return f"{value * 1e3:.12g}mm"
    if a >= 1e-6:
        return f"{value * 1e6:.12g}um"
    return f"{value * 1e9:.12g}nm"
