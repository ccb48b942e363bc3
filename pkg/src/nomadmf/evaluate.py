"""Metrics and convergence logging.

A ConvergenceLog collects one record per checkpoint: wall-clock seconds
(excluding checkpoint pauses), cumulative update count, training
objective, and test RMSE.  Logs round-trip through a CSV format with
``#key=value`` metadata comment lines.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import factor_array
from .data import DataFormatError, Entries

CSV_HEADER = "elapsed_sec,total_updates,train_objective,test_rmse"


@dataclass
class LogRecord:
    elapsed_sec: float
    total_updates: int
    train_objective: float
    test_rmse: float


@dataclass
class ConvergenceLog:
    records: list[LogRecord] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def append(self, elapsed_sec, total_updates, train_objective, test_rmse) -> None:
        if self.records:
            last = self.records[-1]
            if total_updates <= last.total_updates or elapsed_sec <= last.elapsed_sec:
                raise ValueError(
                    "log records must strictly increase in elapsed time and updates"
                )
        self.records.append(
            LogRecord(float(elapsed_sec), int(total_updates), float(train_objective), float(test_rmse))
        )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final(self) -> LogRecord:
        if not self.records:
            raise ValueError("empty log")
        return self.records[-1]


def test_rmse(W, H, test_entries: Entries) -> float:
    """Root mean squared prediction error over the held-out entries."""
    if len(test_entries) == 0:
        raise ValueError("empty test set")
    Wd = factor_array(W)
    Hd = factor_array(H)
    pred = np.einsum("ij,ij->i", Wd[test_entries.users], Hd[test_entries.items])
    err = test_entries.values - pred
    return math.sqrt(float(err @ err) / len(test_entries))


def throughput(log: ConvergenceLog, workers: int) -> float:
    """Updates per worker per second between the first and last records."""
    if workers < 1:
        raise ValueError("worker count must be >= 1")
    if len(log.records) < 2:
        raise ValueError("need at least two records to measure throughput")
    first, last = log.records[0], log.records[-1]
    dt = last.elapsed_sec - first.elapsed_sec
    if dt <= 0:
        raise ValueError("zero elapsed time between records")
    return (last.total_updates - first.total_updates) / dt / workers


def time_to_rmse(log: ConvergenceLog, target: float) -> float | None:
    """Elapsed seconds of the first record at or below target, or None."""
    for rec in log.records:
        if rec.test_rmse <= target:
            return rec.elapsed_sec
    return None


def write_csv(log: ConvergenceLog, path) -> None:
    with open(path, "w") as fh:
        for key in sorted(log.metadata):
            fh.write(f"#{key}={log.metadata[key]}\n")
        fh.write(CSV_HEADER + "\n")
        for rec in log.records:
            fh.write(
                f"{rec.elapsed_sec!r},{rec.total_updates},"
                f"{rec.train_objective!r},{rec.test_rmse!r}\n"
            )


def read_csv(path) -> ConvergenceLog:
    log = ConvergenceLog()
    saw_header = False
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "=" not in line:
                    raise DataFormatError(f"line {lineno}: malformed metadata comment")
                key, _, value = line[1:].partition("=")
                log.metadata[key] = value
                continue
            if not saw_header:
                if line != CSV_HEADER:
                    raise DataFormatError(f"line {lineno}: unexpected header {line!r}")
                saw_header = True
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise DataFormatError(f"line {lineno}: expected 4 fields")
            try:
                rec = LogRecord(
                    float(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])
                )
            except ValueError as exc:
                raise DataFormatError(f"line {lineno}: {exc}") from exc
            log.records.append(rec)
    if not saw_header:
        raise DataFormatError("missing header line")
    return log
