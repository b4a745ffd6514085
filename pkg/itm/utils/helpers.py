import hashlib
import json
from typing import Any, List, Sequence

from itm.utils.errors import ItmError, ERR_CONFIG_SCHEMA


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def config_hash(data: Any) -> str:
    """Short SHA-256 of the canonical JSON form of a config mapping."""
    canonical = json.dumps(data, sort_keys=True, separators=(',', ':'), default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def parse_float_list(value: str) -> List[float]:
    """Parses '0.2,0.1,0.05' (CLI style) into floats."""
    if value is None or not str(value).strip():
        return []
    try:
        return [float(v) for v in str(value).split(',') if v.strip()]
    except ValueError:
        raise ItmError(f"Could not parse number list '{value}'", ERR_CONFIG_SCHEMA)


def sort_descending(values: Sequence[float]) -> List[float]:
    return sorted(values, reverse=True)


def times_close(t1: float, t2: float) -> bool:
    """Time stamps produced by the planner are exact; this only absorbs parsing noise."""
    return abs(t1 - t2) <= 1e-12 * max(1.0, abs(t1), abs(t2))
