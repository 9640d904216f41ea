"""Time-stamped record of one pipeline run, exportable as JSON lines."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


def _plain(value):
    """Make a value JSON-serialisable without losing float precision."""
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


@dataclass
class EpisodeLog:
    """Per-step records plus per-stage outcomes for one run."""

    records: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    outcome: str = "incomplete"
    meta: dict = field(default_factory=dict)

    def add(self, time: float, phase: str, **fields) -> None:
        rec = {"time": float(time), "phase": phase}
        rec.update({k: _plain(v) for k, v in fields.items()})
        self.records.append(rec)

    def close_stage(self, stage: str, status: str, **fields) -> None:
        entry = {"stage": stage, "status": status}
        entry.update({k: _plain(v) for k, v in fields.items()})
        self.stages.append(entry)

    def stage_status(self, stage: str) -> str | None:
        for entry in self.stages:
            if entry["stage"] == stage:
                return entry["status"]
        return None

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            header = {"kind": "episode", "outcome": self.outcome,
                      "stages": _plain(self.stages)}
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for rec in self.records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
