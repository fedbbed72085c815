"""Experiment reports: rows of (time, estimate, std error, target, pass)
with the rule that granted the flag, serialized as JSON and CSV."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import ibflab

SCHEMA_VERSION = 1


@dataclass
class ReportRow:
    label: str
    t: float
    estimate: float
    std_error: float
    target: float | None
    passed: bool
    rule: str

    def to_dict(self):
        return {
            "label": self.label,
            "t": self.t,
            "estimate": self.estimate,
            "std_error": self.std_error,
            "target": self.target,
            "passed": bool(self.passed),
            "rule": self.rule,
        }


@dataclass
class ExperimentReport:
    experiment: str
    config_echo: dict
    rows: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    wall_time: float = 0.0
    # per-replicate data table (header, rows); written as its own CSV and
    # kept out of the JSON summary
    data_header: list = field(default_factory=list)
    data_rows: list = field(default_factory=list)

    def add(self, label, t, estimate, std_error, target, passed, rule) -> None:
        self.rows.append(
            ReportRow(
                label=str(label),
                t=float(t),
                estimate=float(estimate),
                std_error=float(std_error),
                target=None if target is None else float(target),
                passed=bool(passed),
                rule=str(rule),
            )
        )

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_dict(self, volatile: bool = True) -> dict:
        out = {
            "schema_version": SCHEMA_VERSION,
            "experiment": self.experiment,
            "config": _plain(self.config_echo),
            "rows": [r.to_dict() for r in self.rows],
            "notes": list(self.notes),
            "extra": _plain(self.extra),
            "pass_all": self.all_passed,
        }
        if volatile:
            out["meta"] = {
                "package_version": ibflab.__version__,
                "numpy_version": np.__version__,
                "wall_time_s": self.wall_time,
                "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
            }
        return out

    def write_json(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label", "t", "estimate", "std_error", "target", "passed", "rule"])
            for r in self.rows:
                writer.writerow(
                    [r.label, r.t, r.estimate, r.std_error, r.target, int(r.passed), r.rule]
                )

    def set_data(self, header, rows) -> None:
        self.data_header = list(header)
        self.data_rows = [list(r) for r in rows]

    def write_data_csv(self, path) -> None:
        if not self.data_rows:
            return
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.data_header)
            writer.writerows(self.data_rows)

    def summary_lines(self) -> list[str]:
        lines = []
        for r in self.rows:
            status = "PASS" if r.passed else "FAIL"
            tgt = "" if r.target is None else f" target={r.target:.6g}"
            lines.append(
                f"[{status}] {self.experiment}/{r.label} t={r.t:g} "
                f"estimate={r.estimate:.6g} se={r.std_error:.3g}{tgt} ({r.rule})"
            )
        return lines


def _plain(obj):
    """Recursively convert numpy and dataclass values to JSON-safe types."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _plain(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def write_trajectory_csv(path, times, positions) -> None:
    """CSV rows (replicate, t, particle, x_1..x_d) for saved snapshots."""
    pos = np.asarray(positions)
    if pos.ndim == 3:
        pos = pos[None]
    r, k, n, d = pos.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replicate", "t", "particle"] + [f"x{i + 1}" for i in range(d)])
        for ri in range(r):
            for ki in range(k):
                for p in range(n):
                    writer.writerow([ri, times[ki], p] + list(pos[ri, ki, p]))
