"""Append-only JSON-lines metrics stream.

Each line is one :class:`MetricsRecord`. The timestamp is a logical clock
(the record's position in its stream) rather than wall time, so two runs
with the same config and seed write byte-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

KINDS = ("epoch", "report", "battery")


class MetricsError(ValueError):
    pass


def _number(key: str, value):
    if value is None or isinstance(value, bool):
        return value
    if isinstance(value, (int, float)) or hasattr(value, "item"):
        value = value.item() if hasattr(value, "item") else value
        if isinstance(value, float) and not math.isfinite(value):
            raise MetricsError(f"payload field {key!r} is not finite")
        return value
    raise MetricsError(f"payload field {key!r} must be numeric, got {type(value).__name__}")


@dataclass
class MetricsRecord:
    run_id: str
    timestamp: int
    kind: str
    payload: dict
    # free-form string labels (method name, model path); not part of the numeric payload
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise MetricsError(f"kind must be one of {KINDS}")
        self.payload = {str(k): _number(k, v) for k, v in self.payload.items()}
        self.tags = {str(k): str(v) for k, v in self.tags.items()}

    def to_json(self) -> str:
        obj = {"run_id": self.run_id, "timestamp": self.timestamp, "kind": self.kind, "payload": self.payload}
        if self.tags:
            obj["tags"] = self.tags
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        try:
            obj = json.loads(line)
            return cls(obj["run_id"], int(obj["timestamp"]), obj["kind"], obj["payload"], obj.get("tags", {}))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise MetricsError(f"malformed metrics line: {exc}") from None


class MetricsWriter:
    """Appends records for one run; the logical clock continues an existing file."""

    def __init__(self, path, run_id: str):
        self.path = Path(path)
        self.run_id = run_id
        self.clock = len(read_metrics(self.path)) if self.path.exists() else 0

    def write(self, kind: str, payload: dict, **tags) -> MetricsRecord:
        rec = MetricsRecord(self.run_id, self.clock, kind, payload, tags)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(rec.to_json() + "\n")
        self.clock += 1
        return rec


def read_metrics(path) -> list:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [MetricsRecord.from_json(line) for line in lines if line.strip()]
