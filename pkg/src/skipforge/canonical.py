"""Canonical JSON: the single wire encoding shared by plans, requests,
cache headers, checkpoints and the web client.

Rules: keys sorted, separators ",":"", no NaN/Inf, and floats with an exact
integral value emitted as integers (so 1.0 serializes as 1 on every client).
"""
from __future__ import annotations

import hashlib
import json
import math
from typing import Any


def _normalize(obj: Any) -> Any:
    if isinstance(obj, bool):
        return obj
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError(f"non-finite number {obj!r} not allowed in canonical JSON")
        return int(obj) if obj.is_integer() else obj
    if isinstance(obj, dict):
        return {str(k): _normalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    return obj


def canonical_dumps(obj: Any) -> str:
    return json.dumps(_normalize(obj), sort_keys=True, separators=(",", ":"), allow_nan=False)


def canonical_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_dumps(obj).encode("utf-8")).hexdigest()
