import numpy as np
import pytest

from fedwsq import reporting


class TestEma:
    def test_first_value_passthrough(self):
        assert reporting.ema_update(None, 0.4, 0.9) == 0.4

    def test_recurrence(self):
        assert reporting.ema_update(0.5, 1.0, 0.9) == pytest.approx(0.55, abs=1e-15)

    def test_smoothing_zero_tracks_raw(self):
        assert reporting.ema_update(0.2, 0.8, 0.0) == 0.8

    def test_converges_to_constant(self):
        ema = None
        for _ in range(500):
            ema = reporting.ema_update(ema, 0.7, 0.9)
        assert abs(ema - 0.7) < 1e-12


class TestCsv:
    def test_header(self):
        assert reporting.csv_header() == (
            "round,train_loss,acc_raw,acc_ema,uplink_bytes,bits_1,bits_2,bits_4,wallclock_ms\n"
        )

    def test_row_roundtrips_floats_exactly(self):
        r = reporting.RoundReport(
            round=3,
            train_loss=1.0 / 3.0,
            test_acc_raw=0.1 + 0.2,
            test_acc_ema=0.55,
            uplink_bytes=1234,
            bits_hist={4: 5},
        )
        cells = reporting.csv_row(r).rstrip("\n").split(",")
        assert cells[0] == "3"
        assert float(cells[1]) == 1.0 / 3.0
        assert float(cells[2]) == 0.1 + 0.2
        assert cells[4:] == ["1234", "0", "0", "5", "0"]


class TestPartitionHash:
    def test_deterministic(self):
        shards = [np.array([0, 1]), np.array([2])]
        assert reporting.partition_hash(shards) == reporting.partition_hash(shards)
        assert len(reporting.partition_hash(shards)) == 16

    def test_sensitive_to_order_and_content(self):
        a = reporting.partition_hash([np.array([0, 1]), np.array([2])])
        b = reporting.partition_hash([np.array([2]), np.array([0, 1])])
        c = reporting.partition_hash([np.array([0, 1]), np.array([3])])
        assert a != b and a != c

    def test_boundary_shift_changes_hash(self):
        a = reporting.partition_hash([np.array([0, 1]), np.array([2])])
        b = reporting.partition_hash([np.array([0]), np.array([1, 2])])
        assert a != b


class TestFigures:
    def make_reports(self, n=4):
        return [
            reporting.RoundReport(t, 1.0 / t, 0.5, 0.5, 100, {4: 1}) for t in range(1, n + 1)
        ]

    def test_metrics_figure_file(self, tmp_path):
        path = str(tmp_path / "m.png")
        reporting.render_metrics_figure(self.make_reports(), path)
        assert (tmp_path / "m.png").stat().st_size > 0

    def test_metrics_figure_empty_noop(self, tmp_path):
        path = str(tmp_path / "m.png")
        reporting.render_metrics_figure([], path)
        assert not (tmp_path / "m.png").exists()

    def test_levels_figure_file(self, tmp_path):
        path = str(tmp_path / "l.png")
        reporting.render_levels_figure([-0.8, 0.8], [-0.798, 0.798], path)
        assert (tmp_path / "l.png").stat().st_size > 0

    def test_compare_figure_file(self, tmp_path):
        path = str(tmp_path / "c.png")
        reporting.render_compare_figure({"a": self.make_reports(), "b": self.make_reports()}, path)
        assert (tmp_path / "c.png").stat().st_size > 0
