"""Baseline / channel-pruned / hybrid comparison reports."""

import csv
import json
from dataclasses import asdict, dataclass, fields
from typing import Optional

from .model_graph import count_costs

STAGES = ("baseline", "channel_pruned", "hybrid")
STAGE_LABELS = {"baseline": "Baseline", "channel_pruned": "Channel Pruning", "hybrid": "Hybrid Pruning"}


@dataclass
class StageMetrics:
    top1: Optional[float]
    top5: Optional[float]
    params: int  # nonzero parameters
    macs: int  # dense MACs of the (possibly thinner) architecture
    sparsity_pct: float  # zeroed or removed parameters, relative to the baseline size
    effective_macs: Optional[int] = None  # MACs whose weight is nonzero


@dataclass
class PruneReport:
    baseline: StageMetrics
    channel_pruned: StageMetrics
    hybrid: StageMetrics
    param_reduction_x: float
    mac_reduction_x: float
    channel_param_reduction_x: float = 1.0
    channel_mac_reduction_x: float = 1.0

    def stage(self, name):
        return getattr(self, name)


def stage_metrics(model, baseline_params, accuracy=None):
    """Metrics for one model.  ``baseline_params`` is the dense parameter count
    of the original network; sparsity counts channel-removed parameters too."""
    c = count_costs(model)
    return StageMetrics(
        top1=None if accuracy is None else accuracy.top1,
        top5=None if accuracy is None else accuracy.top5,
        params=c.nonzero_params,
        macs=c.total_macs,
        sparsity_pct=100.0 * (1.0 - c.nonzero_params / baseline_params),
        effective_macs=c.effective_macs,
    )


def build_report(baseline, channel_pruned, hybrid):
    """Assemble a :class:`PruneReport` from three :class:`StageMetrics`."""
    return PruneReport(
        baseline=baseline,
        channel_pruned=channel_pruned,
        hybrid=hybrid,
        param_reduction_x=baseline.params / hybrid.params,
        mac_reduction_x=baseline.macs / hybrid.macs,
        channel_param_reduction_x=baseline.params / channel_pruned.params,
        channel_mac_reduction_x=baseline.macs / channel_pruned.macs,
    )


def format_count(n):
    """25_500_000 -> '25.5M', 590_000 -> '0.59M', 41_000 -> '41K'."""
    if abs(n) >= 1e9:
        return f"{n / 1e9:.3g}G"
    if abs(n) >= 1e5:
        return f"{n / 1e6:.3g}M"
    if abs(n) >= 1e3:
        return f"{n / 1e3:.3g}K"
    return str(int(n))


def reduction_pct_text(before, after):
    return f"{100.0 * (1.0 - after / before):.1f}% reduction"


def reduction_factor_text(before, after):
    return f"{before / after:.1f}×"


def _pct(v):
    return "-" if v is None else f"{100.0 * v:.2f}"


def text_table(report):
    """Two-column table using the column names of the comparison tables."""
    b, c, h = report.baseline, report.channel_pruned, report.hybrid
    rows = [
        ("Top 1 (%) Baseline", _pct(b.top1)),
        ("Top 1 (%) Channel Pruning", _pct(c.top1)),
        ("Top 1 (%) Hybrid Pruning", _pct(h.top1)),
        ("Top 5 (%) Baseline", _pct(b.top5)),
        ("Top 5 (%) Channel Pruning", _pct(c.top5)),
        ("Top 5 (%) Hybrid Pruning", _pct(h.top5)),
        ("Original No. of Params", format_count(b.params)),
        ("No. of Params (Coarse-grained Pruning)", f"{format_count(c.params)} ({reduction_pct_text(b.params, c.params)})"),
        ("No. of Params (Hybrid Pruning)", f"{format_count(h.params)} ({reduction_pct_text(b.params, h.params)})"),
        ("Sparsity (%) Baseline->Pruned", f"{b.sparsity_pct:.1f}->{c.sparsity_pct:.1f}->{h.sparsity_pct:.1f}"),
        ("MACs Baseline", format_count(b.macs)),
        ("MACs (Coarse-grained Pruning)", f"{format_count(c.macs)} ({reduction_factor_text(b.macs, c.macs)} fewer)"),
        ("Parameter reduction (Hybrid)", reduction_factor_text(b.params, h.params)),
        ("Exact params Baseline/Channel/Hybrid", f"{b.params}/{c.params}/{h.params}"),
    ]
    width = max(len(k) for k, _ in rows)
    lines = [f"{'Column'.ljust(width)} | Value", f"{'-' * width}-+-{'-' * 24}"]
    lines += [f"{k.ljust(width)} | {v}" for k, v in rows]
    return "\n".join(lines) + "\n"


def report_to_dict(report):
    return asdict(report)


def report_from_dict(d):
    kw = {name: StageMetrics(**d[name]) for name in STAGES}
    for f in fields(PruneReport):
        if f.name not in STAGES:
            kw[f.name] = d[f.name]
    return PruneReport(**kw)


def report_rows(report):
    """Flat ``(key, value)`` pairs, e.g. ``("hybrid.params", 130000)``."""
    d = report_to_dict(report)
    rows = []
    for name in STAGES:
        rows += [(f"{name}.{k}", v) for k, v in d[name].items()]
    rows += [(k, v) for k, v in d.items() if k not in STAGES]
    return rows


def emit_report(report, path, fmt="json"):
    if fmt == "json":
        with open(path, "w") as f:
            json.dump(report_to_dict(report), f, indent=2, sort_keys=True)
            f.write("\n")
    elif fmt == "csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["key", "value"])
            for k, v in report_rows(report):
                w.writerow([k, "" if v is None else repr(v)])
    elif fmt in ("text", "text-table", "txt"):
        with open(path, "w") as f:
            f.write(text_table(report))
    else:
        raise ValueError(f"unknown report format {fmt!r}")


def read_report_json(path):
    with open(path) as f:
        return report_from_dict(json.load(f))


def read_report_csv(path):
    d = {name: {} for name in STAGES}
    ints = {"params", "macs", "effective_macs"}
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            key, raw = rec["key"], rec["value"]
            stage, _, field_name = key.partition(".")
            leaf = field_name or stage
            val = None if raw == "" else (int(raw) if leaf in ints else float(raw))
            if field_name:
                d[stage][field_name] = val
            else:
                d[stage] = val
    return report_from_dict(d)
