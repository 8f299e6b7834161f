import numpy as np
import pytest

from prunekit.model_graph import build_mini_resnet, count_costs
from prunekit.report import (
    StageMetrics, build_report, emit_report, format_count, read_report_csv, read_report_json,
    reduction_factor_text, reduction_pct_text, stage_metrics, text_table,
)
from prunekit.trainer import Accuracy


def sample_report():
    b = StageMetrics(0.9312, 0.998, 590_000, 125_000_000, 0.0, 125_000_000)
    c = StageMetrics(0.9301, 0.997, 241_900, 70_000_000, 59.0, 70_000_000)
    h = StageMetrics(0.9288, None, 130_000, 70_000_000, 78.0, 30_000_000)
    return build_report(b, c, h)


class TestFormatting:
    def test_percent(self):
        assert reduction_pct_text(25.5e6, 6.9e6) == "72.9% reduction"
        assert reduction_pct_text(25_500_000, 25_500_000) == "0.0% reduction"

    def test_factor(self):
        assert reduction_factor_text(0.59e6, 0.13e6) == "4.5×"
        assert reduction_factor_text(10, 10) == "1.0×"

    @pytest.mark.parametrize("n,text", [(25_500_000, "25.5M"), (590_000, "0.59M"), (6_900_000, "6.9M"), (41_000, "41K"), (12, "12"), (4_089_184_256, "4.09G")])
    def test_counts(self, n, text):
        assert format_count(n) == text


def test_report_fields():
    r = sample_report()
    assert r.param_reduction_x == pytest.approx(590_000 / 130_000)
    assert r.mac_reduction_x == pytest.approx(125 / 70)
    assert r.channel_param_reduction_x == pytest.approx(590_000 / 241_900)


def test_table_columns():
    t = text_table(sample_report())
    rows = {line.split("|")[0].strip(): line.split("|")[1].strip() for line in t.splitlines()[2:]}
    assert rows["Top 1 (%) Hybrid Pruning"] == "92.88"
    assert rows["Original No. of Params"] == "0.59M"
    assert "0.13M (78.0% reduction)" in t
    assert "Sparsity (%) Baseline->Pruned" in t and "0.0->59.0->78.0" in t
    assert "4.5×" in t
    assert "Top 5 (%) Hybrid Pruning" in t and t.count(" -\n") == 1


def test_json_csv_round_trip(tmp_path):
    r = sample_report()
    emit_report(r, tmp_path / "r.json", "json")
    emit_report(r, tmp_path / "r.csv", "csv")
    emit_report(r, tmp_path / "r.txt", "text")
    assert read_report_json(tmp_path / "r.json") == r
    assert read_report_csv(tmp_path / "r.csv") == r
    # every format states the same hybrid parameter count
    assert "130000" in (tmp_path / "r.txt").read_text()
    with pytest.raises(ValueError):
        emit_report(r, tmp_path / "r.xml", "xml")


def test_stage_metrics_counts_zeros():
    m = build_mini_resnet(2, 1, 8, 5)
    dense = count_costs(m)
    w = m.node("layer2.0.conv2").params["weight"]
    w.reshape(-1)[: w.size // 2] = 0
    s = stage_metrics(m, dense.total_params, Accuracy(0.5, 0.9))
    assert s.params == count_costs(m).nonzero_params
    assert s.sparsity_pct == pytest.approx(100 * (1 - s.params / dense.total_params))
    assert s.effective_macs < s.macs == dense.total_macs
    assert (s.top1, s.top5) == (0.5, 0.9)
    assert int(np.count_nonzero(w)) == w.size - w.size // 2
