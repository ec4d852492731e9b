"""Named metric values and their CSV serialization."""
import csv
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Union

from nightstereo.errors import IoFailure


@dataclass
class MetricsReport:
    """One row of named metric values (a frame, a summary, a node...)."""
    name: str
    values: Dict[str, float] = field(default_factory=dict)

    def __getitem__(self, key: str) -> float:
        return self.values[key]

    def __contains__(self, key: str) -> bool:
        return key in self.values


def format_value(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return f"{value:.6f}"
    return str(value)


def write_metrics_csv(path: Union[str, os.PathLike], reports: Iterable[MetricsReport]) -> None:
    """Write reports as rows; columns are `name` plus the union of keys in first-seen order."""
    reports = list(reports)
    columns: List[str] = []
    for report in reports:
        for key in report.values:
            if key not in columns:
                columns.append(key)
    try:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["name"] + columns)
            for report in reports:
                writer.writerow([report.name] + [
                    format_value(report.values[c]) if c in report.values else "" for c in columns
                ])
    except OSError as e:
        raise IoFailure(path, e.strerror) from e


def read_metrics_csv(path: Union[str, os.PathLike]) -> List[MetricsReport]:
    try:
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as e:
        raise IoFailure(path, e.strerror) from e
    reports = []
    for row in rows:
        name = row.pop("name")
        reports.append(MetricsReport(name, {k: float(v) for k, v in row.items() if v != ""}))
    return reports


def mean_report(name: str, reports: Iterable[MetricsReport]) -> MetricsReport:
    """Column-wise mean over the reports that carry each key; NaN entries are skipped.

    A key whose every entry is NaN averages to NaN.
    """
    sums: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    for report in reports:
        for key, value in report.values.items():
            value = float(value)
            sums.setdefault(key, 0.0)
            counts.setdefault(key, 0)
            if not math.isnan(value):
                sums[key] += value
                counts[key] += 1
    return MetricsReport(name, {k: sums[k] / counts[k] if counts[k] else float("nan") for k in sums})
