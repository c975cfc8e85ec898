"""Utility helpers shared across pipeline components."""

from __future__ import annotations

import hashlib
import json
from typing import Any, Dict, Optional, Sequence

import numpy as np


def as_vector(value: Any, size: int = 3, name: str = "value") -> np.ndarray:
    """Convert ``value`` to a finite float64 vector of length ``size``.

    Parameters
    ----------
    value:
        Sequence or array with exactly ``size`` numeric entries.
    size:
        Expected number of components.
    name:
        Label used in the error message.
    """

    arr = np.asarray(value, dtype=np.float64).reshape(-1)
    if arr.shape != (size,):
        raise ValueError(f"{name} must have {size} components, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr.tolist()}")
    return arr


def format_float(value: float) -> str:
    """Format a float so that parsing it back reproduces the same double."""

    return format(float(value), ".17g")


def to_jsonable(value: Any) -> Any:
    """Recursively convert numpy containers into plain JSON types."""

    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    return value


def canonical_json(data: Any) -> str:
    return json.dumps(to_jsonable(data), sort_keys=True, separators=(",", ":"))


def config_hash(data: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON encoding of ``data``."""

    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def percentile_summary(values: Sequence[float], points: Optional[Sequence[int]] = None) -> Dict[str, float]:
    points = points or (50, 90, 99)
    if not values:
        return {f"p{p}": float("nan") for p in points}
    arr = np.asarray(values, dtype=np.float64)
    return {f"p{p}": float(np.percentile(arr, p)) for p in points}


__all__ = [
    "as_vector",
    "canonical_json",
    "config_hash",
    "format_float",
    "percentile_summary",
    "to_jsonable",
]
