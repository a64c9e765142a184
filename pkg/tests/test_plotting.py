"""Metrics plot rendering: structure, determinism, input rejection."""

import pytest

from birq.errors import DataError
from birq.plotting import PANELS, render_metrics_svg, save_plot
from birq.trainer import METRICS_FIELDS


def rows(n=20):
    out = []
    for step in range(n):
        r = {"step": step, "epoch": step // 10}
        for name in METRICS_FIELDS[2:]:
            r[name] = 1.0 / (step + 1) if name.startswith("loss") else 0.5
        out.append(r)
    return out


class TestRender:
    def test_one_path_per_series(self):
        svg = render_metrics_svg(rows())
        n_series = sum(len(series) for _, _, series in PANELS)
        assert svg.count("<path ") == n_series == 5
        assert svg.startswith("<svg ") and svg.rstrip().endswith("</svg>")

    def test_series_colors_present(self):
        svg = render_metrics_svg(rows())
        for _, _, series in PANELS:
            for _, label, color in series:
                assert color in svg
                assert label in svg

    def test_deterministic(self):
        assert render_metrics_svg(rows()) == render_metrics_svg(rows())

    def test_single_row_degenerate_ranges(self):
        svg = render_metrics_svg(rows(1))
        assert "<path " in svg
        assert "nan" not in svg.lower()

    def test_empty_rows_rejected(self):
        with pytest.raises(DataError):
            render_metrics_svg([])

    def test_missing_column_rejected(self):
        bad = rows()
        for r in bad:
            del r["loss_G"]
        with pytest.raises(DataError, match="loss_G"):
            render_metrics_svg(bad)


class TestSave:
    def test_writes_rendered_bytes(self, tmp_path):
        path = tmp_path / "m.svg"
        save_plot(rows(), str(path))
        assert path.read_text() == render_metrics_svg(rows())
