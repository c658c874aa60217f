"""Region remapping, Dice and 95th-percentile Hausdorff distance, and report aggregation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

REGIONS = ("WT", "TC", "ET")
METRICS = tuple(f"dice_{r}" for r in REGIONS) + tuple(f"hd95_{r}" for r in REGIONS)

# distance reported when exactly one of the two masks is empty
HD95_EMPTY = 373.13


def remap_regions(m: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Whole tumor {1, 2, 4}, tumor core {1, 4} and enhancing tumor {4} masks."""
    wt = np.isin(m, (1, 2, 4))
    tc = np.isin(m, (1, 4))
    et = m == 4
    return wt, tc, et


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """``2|a & b| / (|a| + |b|)``; two empty masks score 1."""
    _same_shape(a, b)
    a = a.astype(bool)
    b = b.astype(bool)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def _directed_p95(src: np.ndarray, dst: np.ndarray, spacing) -> float:
    # distance from every voxel of src to the nearest voxel of dst
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return float(np.percentile(dist[src], 95))


def hd95(a: np.ndarray, b: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float:
    """Symmetric 95th-percentile Hausdorff distance between two voxel sets, in mm.

    Distances run between full masks, not extracted surfaces. Both empty gives
    0; exactly one empty gives :data:`HD95_EMPTY`.
    """
    _same_shape(a, b)
    a = a.astype(bool)
    b = b.astype(bool)
    has_a, has_b = a.any(), b.any()
    if not has_a and not has_b:
        return 0.0
    if not (has_a and has_b):
        return HD95_EMPTY
    spacing = tuple(float(s) for s in spacing)
    return max(_directed_p95(a, b, spacing), _directed_p95(b, a, spacing))


def evaluate(pred: np.ndarray, gt: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0),
             subject: str | None = None) -> dict:
    _same_shape(pred, gt)
    record = {"subject": subject} if subject is not None else {}
    for name, p, g in zip(REGIONS, remap_regions(pred), remap_regions(gt)):
        record[f"dice_{name}"] = dice(p, g)
    for name, p, g in zip(REGIONS, remap_regions(pred), remap_regions(gt)):
        record[f"hd95_{name}"] = hd95(p, g, spacing)
    return record


@dataclass
class MetricsReport:
    records: list[dict]
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    median: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"subjects": self.records,
                "aggregate": {"mean": self.mean, "std": self.std, "median": self.median}}

    def table(self) -> str:
        """Mean/StdDev/Median rows against Dice (%) and HD95 (mm) columns."""
        head = f"{'':8s}" + "".join(f"{'Dice ' + r:>10s}" for r in REGIONS) + \
            "".join(f"{'HD95 ' + r:>10s}" for r in REGIONS)
        rows = [head]
        for label, stats in (("Mean", self.mean), ("StdDev", self.std), ("Median", self.median)):
            cells = [f"{100 * stats[f'dice_{r}']:10.2f}" for r in REGIONS]
            cells += [f"{stats[f'hd95_{r}']:10.2f}" for r in REGIONS]
            rows.append(f"{label:8s}" + "".join(cells))
        return "\n".join(rows)


def aggregate(records: Iterable[dict]) -> MetricsReport:
    """Mean, sample standard deviation (0 for a single record) and median per metric."""
    records = list(records)
    if not records:
        raise ValueError("cannot aggregate an empty set of records")
    report = MetricsReport(records)
    for key in METRICS:
        vals = np.array([r[key] for r in records], dtype=np.float64)
        report.mean[key] = float(vals.mean())
        report.std[key] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        report.median[key] = float(np.median(vals))
    return report


def write_report(path: str | Path, report: MetricsReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
