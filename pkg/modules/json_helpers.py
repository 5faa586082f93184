"""
JSON Serialisation Helpers
==========================
Serialisation utilities for values that are not natively JSON-serialisable:
numpy arrays and scalars, dataclasses and pydantic models.

This module provides:
1. Recursive conversion of nested structures to JSON-safe values
2. Safe dumps with a structured fallback
3. Line-delimited JSON (JSONL) reading and writing

Floats are emitted with Python's shortest round-trip repr, so weights and
scaler statistics reload bit-identically.
"""
import dataclasses
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List

import numpy as np
from pydantic import BaseModel

from modules.error_handler import RecordError

logger = logging.getLogger("json_helpers")


def serialise_value(value: Any) -> Any:
    """
    Recursively serialise a value to be JSON-compatible.

    Handles:
    - numpy arrays and numpy scalar types
    - Nested structures (dict, list, tuple)
    - dataclasses and pydantic models

    Args:
        value: Any value that needs to be JSON-serialisable

    Returns:
        JSON-serialisable representation of the value
    """
    if value is None:
        return None

    # Fast path
    if isinstance(value, (str, bool, int)):
        return value

    if isinstance(value, float):
        if not np.isfinite(value):
            return repr(value)
        return value

    if isinstance(value, np.ndarray):
        return serialise_value(value.tolist())

    if isinstance(value, np.bool_):
        return bool(value)

    if isinstance(value, np.integer):
        return int(value)

    if isinstance(value, np.floating):
        return serialise_value(float(value))

    if isinstance(value, BaseModel):
        return serialise_value(value.model_dump())

    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        if hasattr(value, 'to_dict'):
            return serialise_value(value.to_dict())
        return serialise_value({f.name: getattr(value, f.name) for f in dataclasses.fields(value)})

    if isinstance(value, dict):
        return {str(k): serialise_value(v) for k, v in value.items()}

    if isinstance(value, (list, tuple, set)):
        return [serialise_value(item) for item in value]

    try:
        return str(value)
    except Exception as e:
        logger.warning(f"Failed to serialise {type(value).__name__}: {e}")
        return f"<{type(value).__name__}>"


def safe_json_dumps(obj: Any, **kwargs) -> str:
    """
    Serialise any object to a JSON string.

    Drop-in replacement for json.dumps() that handles numpy and dataclass
    values. Non-finite floats are refused by the encoder.
    """
    kwargs.setdefault('allow_nan', False)
    try:
        return json.dumps(serialise_value(obj), **kwargs)
    except (TypeError, ValueError) as e:
        logger.error(f"Failed to serialise to JSON: {e}")
        return json.dumps({"error": "serialisation_failed", "type": type(obj).__name__})


def write_json(path: str, obj: Any):
    """Write one JSON document (sorted keys, indented)."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(safe_json_dumps(obj, indent=2, sort_keys=True))
        f.write("\n")


def read_json(path: str) -> Any:
    """Read one JSON document."""
    with open(path, 'r', encoding='utf-8') as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise RecordError(f"invalid JSON: {e.msg}", path=path, line=e.lineno) from e


def write_jsonl(path: str, records: Iterable[Any]):
    """Write records as line-delimited JSON with sorted keys."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(safe_json_dumps(record, sort_keys=True))
            f.write("\n")


def iter_jsonl(path: str) -> Iterator[tuple]:
    """
    Iterate over (line_number, record) pairs of a JSONL file.

    Blank lines are skipped; malformed lines raise RecordError with the
    line number.
    """
    with open(path, 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordError(f"invalid JSON record: {e.msg}", path=path, line=line_no) from e
            if not isinstance(record, dict):
                raise RecordError("record is not a JSON object", path=path, line=line_no)
            yield line_no, record


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    """Read all records of a JSONL file."""
    return [record for _, record in iter_jsonl(path)]


class JSONLWriter:
    """
    Append-only JSONL writer, one record per call.

    Used for the training log so records reach disk as epochs finish.
    """

    def __init__(self, path: str):
        self.path = path
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, 'w', encoding='utf-8', newline='\n')

    def write(self, record: Any):
        self._fh.write(safe_json_dumps(record, sort_keys=True))
        self._fh.write("\n")
        self._fh.flush()

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
