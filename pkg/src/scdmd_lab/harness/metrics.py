"""Append-only JSONL metrics with run id and config hash on every line."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Iterator, List, Optional

import numpy as np

METRICS_VERSION = 1


def plain(obj):
    if isinstance(obj, dict):
        return {k: plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def encode(record: dict) -> str:
    return json.dumps(plain(record), sort_keys=True, allow_nan=False)


class MetricsWriter:
    """Writes one complete line per record and flushes it, so an abort never
    leaves a partial line behind."""

    def __init__(self, path, run_id: str, config_hash: str):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.run_id, self.config_hash = run_id, config_hash
        self._fh = open(self.path, "a", encoding="utf-8")

    def write(self, record: dict, kind: str = "iter"):
        line = encode({"type": kind, "run_id": self.run_id, "config_hash": self.config_hash, **record})
        self._fh.write(line + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_records(path, kind: Optional[str] = None) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if kind is None or rec.get("type") == kind:
                yield rec


def truncate_after(path, step: int):
    """Drop iteration records with ``iter >= step`` (used before resuming)."""
    path = Path(path)
    if not path.exists():
        return
    keep: List[str] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("type") == "iter" and rec["iter"] >= step:
                continue
            if rec.get("type") == "final":
                continue
            keep.append(line)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(keep), encoding="utf-8")
    os.replace(tmp, path)
