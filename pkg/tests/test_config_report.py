import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bilevel_ssl.config import ConfigError, RunConfig, apply_override, apply_thread_limit, load_config
from bilevel_ssl.metrics import COLUMNS, MetricsRecord, MetricsWriter, read_metrics
from bilevel_ssl.regularizers import WeightLedger
from bilevel_ssl.report import BIN_EDGES, build_report, histogram


class TestConfig:
    def test_defaults(self):
        c = load_config()
        assert c.mode == "rebo" and c.train_config().alpha == 0.01

    def test_file_and_overrides(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"mode": "baseline", "train": {"gamma": 0.0}}))
        c = load_config(p, ["train.alpha=0.05", "counts.L=10", "num_points=64", "dataset=x.bspc"])
        t = c.train_config()
        assert (c.mode, t.gamma, t.alpha, c.counts["L"], c.num_points, c.dataset) == (
            "baseline", 0.0, 0.05, 10, 64, "x.bspc")

    @pytest.mark.parametrize("overrides", [["nope=1"], ["train.nope=1"], ["mode=other"], ["train.alpha=0"],
                                           ["num_classes=1"], ["novalue"], ["counts.Q=3"]])
    def test_rejections(self, overrides):
        with pytest.raises(ConfigError):
            load_config(None, overrides)

    def test_bad_file(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_config(p)
        with pytest.raises(ConfigError):
            load_config(tmp_path / "missing.json")

    def test_env_output_dir(self, monkeypatch):
        monkeypatch.setenv("BSSL_OUTPUT_DIR", "/tmp/elsewhere")
        assert load_config().output_dir == "/tmp/elsewhere"

    def test_thread_limit(self, monkeypatch):
        monkeypatch.setenv("BSSL_THREADS", "1")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            monkeypatch.delenv(var, raising=False)
        apply_thread_limit()
        import os
        assert os.environ["OPENBLAS_NUM_THREADS"] == "1"

    def test_round_trip_through_json(self):
        c = load_config(None, ["train.weak.jitter=0.01"])
        again = RunConfig(**json.loads(json.dumps(c.to_dict())))
        assert again.train_config() == c.train_config()

    def test_override_section_clash(self):
        raw = {"mode": "rebo"}
        with pytest.raises(ConfigError):
            apply_override(raw, "mode.x=1")


class TestMetrics:
    def test_round_trip_and_nan(self, tmp_path):
        w = MetricsWriter(tmp_path / "m.csv")
        w.append(MetricsRecord("rebo", 0, 0, 1.5, 2.5, lambda_U=0.25))
        w.append(MetricsRecord("rebo", 0, 1, 1.0, 2.0, meta_skipped=1))
        w.flush()
        rows = read_metrics(tmp_path / "m.csv")
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(COLUMNS)
        assert rows[0].lambda_U == 0.25 and math.isnan(rows[0].accuracy) and rows[1].meta_skipped == 1

    def test_keys_must_increase(self, tmp_path):
        w = MetricsWriter(tmp_path / "m.csv")
        w.append(MetricsRecord("rebo", 1, 0, 0.0, 0.0))
        with pytest.raises(ValueError):
            w.append(MetricsRecord("rebo", 0, 5, 0.0, 0.0))

    def test_append_continues_after_existing(self, tmp_path):
        w = MetricsWriter(tmp_path / "m.csv")
        w.append(MetricsRecord("rebo", 0, 0, 0.0, 0.0))
        w.flush()
        w2 = MetricsWriter(tmp_path / "m.csv", append=True)
        with pytest.raises(ValueError):
            w2.append(MetricsRecord("rebo", 0, 0, 0.0, 0.0))
        w2.append(MetricsRecord("rebo", 0, 1, 0.0, 0.0))
        w2.flush()
        assert len(read_metrics(tmp_path / "m.csv")) == 2

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_metrics(tmp_path / "m.csv")


class TestHistogram:
    def test_right_closed_bins(self):
        pct = histogram([0.0, 0.1, 0.10000001, 0.2, 0.95, 1.0])
        # 0 and 0.1 in the first bin, 0.1+ and 0.2 in the second, the rest in the last
        assert pct.tolist() == pytest.approx([100 * 2 / 6, 100 * 2 / 6, 0, 0, 0, 0, 0, 0, 0, 100 * 2 / 6])

    def test_edges_are_exact_decimals(self):
        assert histogram([0.3]).argmax() == 2
        assert histogram([0.7]).argmax() == 6

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            histogram([1.2])
        with pytest.raises(ValueError):
            histogram([])

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=100))
    def test_sums_to_100(self, w):
        pct = histogram(w)
        assert pct.sum() == pytest.approx(100.0)
        k = np.searchsorted(BIN_EDGES, w[0], side="left")
        assert pct[max(k - 1, 0)] > 0


class TestReport:
    def test_build(self, tmp_path):
        led = WeightLedger()
        led.update_many([1, 2, 3, 4], [0.05, 0.9, 0.95, 0.15], ["S", "U", "U", "W"])
        led.to_csv(tmp_path / "ledger.csv")
        w = MetricsWriter(tmp_path / "metrics.csv")
        for i in range(3):
            w.append(MetricsRecord("rebo", 0, i, 1.0 / (i + 1), 2.0, lambda_U=0.9, lambda_S=0.1))
        w.flush()
        out = build_report(tmp_path)
        assert out["means"] == {"S": 0.05, "U": pytest.approx(0.925), "W": 0.15}
        with open(tmp_path / "report" / "histogram.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][:2] == ["cohort", "(0.0,0.1]"] and rows[0][-1] == "(0.9,1.0]" and len(rows) == 4
        assert rows[1][0] == "S" and float(rows[1][1]) == 100.0
        means = (tmp_path / "report" / "cohort_means.csv").read_text().splitlines()
        assert means[0] == "cohort,count,mean_weight" and means[2].startswith("U,2,")
        for name in ("weight_histogram.png", "weights_over_time.png", "losses.png"):
            assert (tmp_path / "report" / name).read_bytes()[:4] == b"\x89PNG"

    def test_missing_ledger(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            build_report(tmp_path)
