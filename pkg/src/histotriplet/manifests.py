"""Line-delimited JSON manifests and content hashing helpers."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import ManifestParseError


def read_jsonl(path):
    """Parse one JSON object per line; blank lines are ignored.

    Raises ManifestParseError naming the offending line number.
    """
    path = Path(path)
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(path, lineno, str(exc)) from exc
            if not isinstance(obj, dict):
                raise ManifestParseError(path, lineno, "expected a JSON object")
            records.append((lineno, obj))
    return records


def write_jsonl(path, records):
    """Write dicts as one compact, key-sorted JSON object per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
            fh.write("\n")
    return path


def append_jsonl(path, record):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")))
        fh.write("\n")


def sha256_file(path, chunk_size=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while True:
            chunk = fh.read(chunk_size)
            if not chunk:
                break
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
