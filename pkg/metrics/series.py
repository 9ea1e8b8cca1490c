"""CSV series for plotting: one fixed header per report kind."""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import pandas as pd

from metrics.attacks import SweepPoint
from metrics.compression import CompressionTable
from metrics.robustness import CushionReport, PropagationReport, cushion_histogram
from spectral.linalg import SpectrumReport

SERIES_COLUMNS = {
    "spectrum": ["rank", "variance_ratio"],
    "sweep": ["rho", "accuracy", "model"],
    "cushion": ["bin_lo", "bin_hi", "count", "model", "layer"],
    "cushion_examples": ["index", "ratio", "model", "layer"],
    "propagation": ["input_ratio", "representation_ratio", "model"],
    "compression": ["model", "dim", "accuracy", "params_replaced"],
    "curves": ["step", "instantaneous", "cumulative", "model"],
}


@dataclass
class AccuracyCurves:
    instantaneous: List[float]
    cumulative: List[float]


@dataclass
class CushionExamples:
    """Per-example view of a cushion report (the plain report emits its histogram)."""

    report: CushionReport


def _rows(report, model, layer):
    if isinstance(report, CushionExamples):
        layer = report.report.layer_index if layer is None else layer
        return "cushion_examples", [
            (i, ratio, model, layer)
            for i, ratio in zip(report.report.example_indices, report.report.per_example_ratios)
        ]
    if isinstance(report, SpectrumReport):
        return "spectrum", [(r, v) for r, v in sorted(report.variance_ratio_at.items())]
    if isinstance(report, CushionReport):
        layer = report.layer_index if layer is None else layer
        return "cushion", [(lo, hi, c, model, layer) for lo, hi, c in cushion_histogram(report)]
    if isinstance(report, PropagationReport):
        return "propagation", [(x, y, model) for x, y in report.pairs]
    if isinstance(report, CompressionTable):
        return "compression", [(r.model, r.dim, r.accuracy, r.params_replaced) for r in report.rows]
    if isinstance(report, AccuracyCurves):
        return "curves", [
            (k + 1, a_i, a_c, model)
            for k, (a_i, a_c) in enumerate(zip(report.instantaneous, report.cumulative))
        ]
    if isinstance(report, Sequence) and all(isinstance(p, SweepPoint) for p in report):
        return "sweep", [(p.rho, p.accuracy, model) for p in report]
    raise TypeError(f"no series layout for {type(report).__name__}")


def emit_series(report, path, model=None, layer=None):
    kind, rows = _rows(report, model, layer)
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    frame = pd.DataFrame(rows, columns=SERIES_COLUMNS[kind])
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def emit_combined(reports, path, layer=None):
    """One CSV holding several models' series of the same kind (``{model: report}``)."""
    frames, kind = [], None
    for model, report in reports.items():
        report_kind, rows = _rows(report, model, layer)
        if kind is not None and report_kind != kind:
            raise TypeError(f"cannot combine {kind} and {report_kind} series")
        kind = report_kind
        frames.append(pd.DataFrame(rows, columns=SERIES_COLUMNS[kind]))
    if kind is None:
        raise ValueError("no reports to emit")
    path = Path(path)
    path.parent.mkdir(exist_ok=True, parents=True)
    pd.concat(frames, ignore_index=True).to_csv(path, index=False, float_format="%.17g")
    return path
