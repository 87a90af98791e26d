"""Point-level removal metrics: static, dynamic and harmonic accuracy."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .pointcloud_io import Label, LabeledCloud


def harmonic_accuracy(sa: Optional[float], da: Optional[float]) -> Optional[float]:
    """``2 * SA * DA / (SA + DA)``; None if either input is undefined."""
    if sa is None or da is None:
        return None
    if sa + da == 0:
        return 0.0
    return 2.0 * sa * da / (sa + da)


@dataclass
class EvalReport:
    sa: Optional[float]
    da: Optional[float]
    ha: Optional[float]
    gt_static: int
    gt_dynamic: int
    static_retained: int
    dynamic_removed: int
    runtime_mean: Optional[float] = None
    runtime_std: Optional[float] = None
    method: str = "ghostsweep"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        """Aligned text table with the usual ``SA ↑ DA ↑ HA ↑`` columns."""
        def fmt(v):
            return "-" if v is None else f"{v:.2f}"
        cols = ["Methods", "SA ↑", "DA ↑", "HA ↑"]
        row = [self.method, fmt(self.sa), fmt(self.da), fmt(self.ha)]
        if self.runtime_mean is not None:
            cols.append("Runtime/scan [s]")
            row.append(format_timing(self.runtime_mean, self.runtime_std))
        widths = [max(len(c), len(r)) for c, r in zip(cols, row)]
        line = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))
        return "\n".join([line(cols), "-+-".join("-" * w for w in widths), line(row)])


def score(result_static: Iterable[int], gt: LabeledCloud,
          runtime: Optional[Sequence[float]] = None) -> EvalReport:
    """Score a cleaned map given the stable indices it kept.

    Unlabeled GT points count in neither denominator. A metric whose
    denominator is zero is reported as None, and so is HA.
    """
    kept = np.asarray(sorted(set(int(i) for i in result_static)), dtype=np.int64)
    missing = np.setdiff1d(kept, gt.indices)
    if len(missing):
        raise ValueError(f"{len(missing)} result indices are not in the ground-truth map")
    in_result = np.isin(gt.indices, kept)
    is_static = gt.labels == Label.STATIC
    is_dynamic = gt.labels == Label.DYNAMIC
    n_static, n_dynamic = int(is_static.sum()), int(is_dynamic.sum())
    retained = int((in_result & is_static).sum())
    removed = int((~in_result & is_dynamic).sum())
    sa = 100.0 * retained / n_static if n_static else None
    da = 100.0 * removed / n_dynamic if n_dynamic else None
    mean = std = None
    if runtime is not None and len(runtime):
        mean, std = timing(runtime)
    return EvalReport(sa=sa, da=da, ha=harmonic_accuracy(sa, da), gt_static=n_static,
                      gt_dynamic=n_dynamic, static_retained=retained, dynamic_removed=removed,
                      runtime_mean=mean, runtime_std=std)


def timing(per_scan_elapsed: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation of per-scan runtimes."""
    x = np.asarray(per_scan_elapsed, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no timing measurements")
    return float(x.mean()), float(x.std(ddof=0))


def format_timing(mean: float, std: float) -> str:
    return f"{mean:.3f} ± {std:.3f}"
