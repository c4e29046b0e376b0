"""Canonical JSON: sorted keys, no whitespace, shortest round-trip floats."""

from __future__ import annotations

import json
from typing import Any


def dumps(obj: Any) -> str:
    # float.__repr__ already yields the shortest round-trip decimal form.
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def _reject_constant(name: str) -> Any:
    raise ValueError(f"non-finite number {name} is not valid JSON")


def loads(text: str | bytes) -> Any:
    """Strict JSON parse: NaN/Infinity literals are rejected."""
    return json.loads(text, parse_constant=_reject_constant)
