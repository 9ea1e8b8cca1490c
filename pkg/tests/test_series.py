import pandas as pd
import pytest
import torch

from metrics.attacks import SweepPoint
from metrics.compression import CompressionRow, CompressionTable
from metrics.robustness import CushionReport, PropagationReport, layer_cushion
from metrics.series import SERIES_COLUMNS, AccuracyCurves, CushionExamples, emit_combined, emit_series
from spectral import linalg


def sweep(values):
    return [SweepPoint(epsilon=e, rho=e / 2, accuracy=1 - e) for e in values]


class TestEmitSeries:
    def test_spectrum(self, tmp_path):
        report = linalg.spectrum(torch.eye(3, dtype=torch.float64))
        frame = pd.read_csv(emit_series(report, tmp_path / "spectrum.csv"))
        assert list(frame.columns) == SERIES_COLUMNS["spectrum"]
        assert frame["rank"].tolist() == [1, 2, 3]
        assert frame["variance_ratio"].iloc[-1] == pytest.approx(1.0)

    def test_cushion_has_fifty_bins(self, tmp_path):
        report = CushionReport(layer_index=2, per_example_ratios=[0.1, 0.2])
        frame = pd.read_csv(emit_series(report, tmp_path / "c.csv", model="N-LR"))
        assert list(frame.columns) == SERIES_COLUMNS["cushion"]
        assert len(frame) == 50
        assert set(frame["layer"]) == {2}

    def test_cushion_examples_one_row_each(self, tmp_path):
        report = CushionReport(layer_index=1, per_example_ratios=[0.25, 1 / 3], example_indices=[0, 2])
        frame = pd.read_csv(emit_series(CushionExamples(report), tmp_path / "e.csv", model="1-LR"))
        assert list(frame.columns) == SERIES_COLUMNS["cushion_examples"] == ["index", "ratio", "model", "layer"]
        assert frame["index"].tolist() == [0, 2]
        assert frame["ratio"].tolist() == [0.25, 1 / 3]
        assert set(frame["model"]) == {"1-LR"}
        assert set(frame["layer"]) == {1}

    def test_cushion_examples_from_layer_cushion(self, tmp_path, small_net, small_blobs):
        report = layer_cushion(small_net, small_blobs.features, 1)
        frame = pd.read_csv(emit_series(CushionExamples(report), tmp_path / "e.csv", model="N-LR"))
        assert len(frame) + report.skipped == len(small_blobs)
        assert frame["ratio"].min() == report.mu_layer
        assert frame["ratio"].between(0, 1 + 1e-9).all()

    def test_propagation(self, tmp_path):
        report = PropagationReport(tap_index=1, pairs=[(0.1, 0.2), (0.3, 0.05)])
        frame = pd.read_csv(emit_series(report, tmp_path / "p.csv", model="1-LR"))
        assert list(frame.columns) == SERIES_COLUMNS["propagation"]
        assert frame["representation_ratio"].tolist() == [0.2, 0.05]

    def test_compression(self, tmp_path):
        table = CompressionTable(rows=[CompressionRow("N-LR", 2, 0.5, 10)])
        frame = pd.read_csv(emit_series(table, tmp_path / "t.csv"))
        assert list(frame.columns) == SERIES_COLUMNS["compression"]

    def test_curves_start_at_step_one(self, tmp_path):
        curves = AccuracyCurves(instantaneous=[0.9, 0.5], cumulative=[0.9, 0.4])
        frame = pd.read_csv(emit_series(curves, tmp_path / "curves.csv", model="N-LR"))
        assert list(frame.columns) == SERIES_COLUMNS["curves"]
        assert frame["step"].tolist() == [1, 2]

    def test_floats_survive_exactly(self, tmp_path):
        points = sweep([0.1 / 3, 2 / 7])
        frame = pd.read_csv(emit_series(points, tmp_path / "s.csv", model="N-LR"))
        assert frame["rho"].tolist() == [p.rho for p in points]

    def test_unknown_report(self, tmp_path):
        with pytest.raises(TypeError):
            emit_series({"a": 1}, tmp_path / "x.csv")


class TestEmitCombined:
    def test_models_stacked(self, tmp_path):
        path = emit_combined({"N-LR": sweep([0.0, 0.1]), "1-LR": sweep([0.0])}, tmp_path / "sweep.csv")
        frame = pd.read_csv(path)
        assert frame["model"].tolist() == ["N-LR", "N-LR", "1-LR"]

    def test_mixed_kinds(self, tmp_path):
        with pytest.raises(TypeError):
            emit_combined(
                {"a": sweep([0.0]), "b": PropagationReport(tap_index=0)}, tmp_path / "mixed.csv"
            )

    def test_nothing_to_emit(self, tmp_path):
        with pytest.raises(ValueError):
            emit_combined({}, tmp_path / "empty.csv")
