"""Append-only run trace: one ``t=<s> kind=<KIND> payload=<text>`` line per message."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("SENSSTATE", "RANSTATE", "RANCNT", "AUTH", "ADVISORY", "MODE")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (complex, np.complexfloating)):
        return [_plain(obj.real), _plain(obj.imag)]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            raise ValueError(f"non-finite value in trace payload: {v}")
        return v
    if hasattr(obj, "value") and isinstance(obj.value, str):  # str enums
        return obj.value
    return obj


def canonical_text(payload) -> str:
    """Deterministic single-line text for a payload of dicts/lists/numbers."""
    return json.dumps(_plain(payload), sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class TraceLog:
    lines: list[str] = field(default_factory=list)
    _last_t: float = -math.inf

    def append(self, t: float, kind: str, payload) -> None:
        if kind not in KINDS:
            raise ValueError(f"unknown trace kind {kind!r}")
        if t < self._last_t:
            raise ValueError("trace timestamps must be non-decreasing")
        self._last_t = t
        self.lines.append(f"t={t:.6f} kind={kind} payload={canonical_text(payload)}")

    def of_kind(self, kind: str) -> list[str]:
        tag = f" kind={kind} "
        return [ln for ln in self.lines if tag in ln]

    def text(self) -> str:
        return "".join(ln + "\n" for ln in self.lines)


def parse_line(line: str) -> tuple[float, str, object]:
    head, _, payload = line.partition(" payload=")
    t_part, kind_part = head.split(" ")
    return float(t_part[2:]), kind_part[5:], json.loads(payload)
