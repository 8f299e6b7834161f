"""Per-layer channel sensitivity sweep and channel planning.

For each prunable conv, its output channels are ranked by the L1 norm of
their filters.  The weakest ``p%`` are zeroed for increasing ``p`` while every
other layer stays dense, and validation accuracy is measured.  A layer's
recorded percentage is the last swept ``p`` that kept accuracy at or above
``baseline - tolerance``.  The sweep needs forward passes only, no training.
"""

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import GraphError, SensitivityError, TargetMacsUnreachable
from .model_graph import count_costs, planned_macs, predict
from .trainer import evaluate

log = logging.getLogger(__name__)


@dataclass
class SensitivityConfig:
    accuracy_tolerance_pct: float = 2.0
    sweep_start_pct: float = 30.0
    sweep_end_pct: float = 80.0
    sweep_step_pct: float = 10.0
    round_multiple: int = 4
    target_macs: Optional[int] = None
    eval_subset_cap: Optional[int] = 1024

    def __post_init__(self):
        if not 0 < self.sweep_start_pct <= self.sweep_end_pct <= 100:
            raise ValueError("need 0 < sweep_start_pct <= sweep_end_pct <= 100")
        if self.sweep_step_pct <= 0:
            raise ValueError("sweep_step_pct must be > 0")
        if self.round_multiple < 1:
            raise ValueError("round_multiple must be >= 1")
        if self.accuracy_tolerance_pct < 0:
            raise ValueError("accuracy_tolerance_pct must be >= 0")

    def sweep_points(self):
        pts = []
        k = 0
        while True:
            p = round(self.sweep_start_pct + k * self.sweep_step_pct, 9)
            if p > self.sweep_end_pct + 1e-9:
                return pts
            pts.append(p)
            k += 1


@dataclass
class LayerSensitivity:
    layer_id: str
    sweep_points: list  # [(sparsity_pct, accuracy)], in sweep order
    recorded_prune_pct: float


@dataclass
class SensitivityProfile:
    baseline_accuracy: float
    threshold_accuracy: float
    per_layer: list = field(default_factory=list)

    def layer(self, layer_id):
        for row in self.per_layer:
            if row.layer_id == layer_id:
                return row
        raise KeyError(layer_id)

    def recorded(self):
        return {row.layer_id: row.recorded_prune_pct for row in self.per_layer}


@dataclass
class PlanEntry:
    layer_id: str
    original_channels: int
    kept_channels: int


@dataclass
class ChannelPlan:
    per_layer: list
    round_multiple: int = 1
    alpha: float = 1.0
    planned_macs: Optional[int] = None

    def kept(self):
        return {e.layer_id: e.kept_channels for e in self.per_layer}

    def entry(self, layer_id):
        for e in self.per_layer:
            if e.layer_id == layer_id:
                return e
        raise KeyError(layer_id)


def channel_importance(weights):
    """Output channel indices by descending sum of absolute weights (ties: lower index first)."""
    w = np.asarray(weights)
    if w.ndim < 1 or w.shape[0] < 1:
        raise ValueError("weights need at least one output channel")
    sums = np.abs(w.reshape(w.shape[0], -1)).sum(axis=1, dtype=np.float64)
    return np.argsort(-sums, kind="stable")


def channels_to_remove(weights, count):
    """The ``count`` lowest-importance output channels, sorted ascending."""
    if count <= 0:
        return np.array([], dtype=np.int64)
    return np.sort(channel_importance(weights)[-count:])


def channel_zero_overrides(model, removed, base=None):
    """Forward overrides that silence output channels.

    ``removed`` maps conv id to channel indices.  The conv filter and bias
    rows are zeroed, as are the scale and shift of the batchnorm that follows,
    so the channel's activation is exactly zero downstream.
    """
    out = dict(base or {})
    for lid, idx in removed.items():
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size == 0:
            continue
        node = model.node(lid)
        for target, names in [(node, ("weight", "bias"))] + [(bn, ("weight", "bias")) for bn in model.channel_group(lid)]:
            for name in names:
                arr = out.get((target.id, name), target.params.get(name))
                if arr is None:
                    continue
                arr = arr.copy()
                arr[idx] = 0
                out[(target.id, name)] = arr
    return out


def channels_at(prune_pct, channels):
    # floor: never mask more than prune_pct of the channels
    return int(math.floor(prune_pct / 100.0 * channels + 1e-9))


def masked_accuracy(model, layer_id, prune_pct, val):
    """Top-1 accuracy with the weakest ``prune_pct``% output channels of one
    layer zeroed and every other layer dense.  ``model`` is not modified."""
    node = model.node(layer_id)
    if node.kind != "conv" or not node.prunable_out:
        raise GraphError(f"{layer_id} is not a prunable conv layer")
    if not 0 <= prune_pct <= 100:
        raise ValueError("prune_pct must be within [0, 100]")
    w = node.params["weight"]
    removed = channels_to_remove(w, channels_at(prune_pct, w.shape[0]))
    overrides = channel_zero_overrides(model, {layer_id: removed}) if removed.size else None
    logits = predict(model, val.images, overrides=overrides)
    return float(np.mean(np.argmax(logits, axis=1) == val.labels))


def sweep_layer(model, layer_id, val, config, threshold):
    points = []
    recorded = 0.0
    for p in config.sweep_points():
        acc = masked_accuracy(model, layer_id, p, val)
        points.append((p, acc))
        if acc >= threshold:
            recorded = p
        else:
            break
    return LayerSensitivity(layer_id, points, recorded)


def _threads():
    try:
        return max(1, int(os.environ.get("PRUNEKIT_THREADS", "1")))
    except ValueError:
        return 1


def run_sensitivity(model, val, config, layers=None):
    """Sweep every prunable conv (or ``layers``) and return the profile."""
    val = val.head(config.eval_subset_cap)
    if len(val) == 0:
        raise SensitivityError("validation set is empty")
    baseline = evaluate(model, val).top1
    chance = 1.0 / val.class_count
    if baseline < 1.5 * chance:
        raise SensitivityError(
            f"baseline accuracy {baseline:.4f} is below 1.5x chance ({1.5 * chance:.4f}); train the model first"
        )
    threshold = baseline - config.accuracy_tolerance_pct / 100.0
    ids = [n.id for n in model.prunable_convs()] if layers is None else list(layers)
    threads = min(_threads(), len(ids)) or 1
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(lambda lid: sweep_layer(model, lid, val, config, threshold), ids))
    else:
        rows = [sweep_layer(model, lid, val, config, threshold) for lid in ids]
    for r in rows:
        log.info("%s: recorded %.1f%% after %d sweep points", r.layer_id, r.recorded_prune_pct, len(r.sweep_points))
    return SensitivityProfile(baseline, threshold, rows)


def round_to_multiple(x, k):
    """Nearest multiple of ``k``; exact halves round up."""
    q = x / k
    f = math.floor(q)
    if q - f >= 0.5 - 1e-9:
        f += 1
    return int(f * k)


def kept_channels(channels, prune_pct, k):
    """Channels left after pruning ``prune_pct``%, rounded to a multiple of
    ``k`` and clamped to ``[k, channels]``."""
    if channels <= k:
        return channels
    kept = round_to_multiple((1 - prune_pct / 100.0) * channels, k)
    return min(max(kept, k), channels)


def _plan_at(model, recorded, k, alpha):
    entries = []
    for n in model.convs():
        c = n.spec["out_channels"]
        if n.prunable_out and n.id in recorded:
            kept = kept_channels(c, alpha * recorded[n.id], k)
        else:
            kept = c
        entries.append(PlanEntry(n.id, c, kept))
    return entries


def plan_channels(profile, model, config, search_steps=20):
    """Turn recorded prune percentages into per-layer kept channel counts.

    With ``config.target_macs`` set, every recorded percentage is scaled by a
    common factor alpha in [0, 1]; the smallest alpha whose plan fits the MAC
    budget is found by bisection, so no more is pruned than needed.
    """
    recorded = profile.recorded()
    missing = [n.id for n in model.prunable_convs() if n.id not in recorded]
    if missing:
        raise GraphError(f"profile does not cover prunable layers: {missing}")
    k = config.round_multiple

    def macs_at(alpha):
        plan = _plan_at(model, recorded, k, alpha)
        return plan, planned_macs(model, {e.layer_id: e.kept_channels for e in plan})

    if config.target_macs is None:
        plan, macs = macs_at(1.0)
        return ChannelPlan(plan, k, 1.0, macs)
    target = config.target_macs
    plan, macs = macs_at(0.0)
    if macs <= target:
        return ChannelPlan(plan, k, 0.0, macs)
    plan, macs = macs_at(1.0)
    if macs > target:
        raise TargetMacsUnreachable(target, macs)
    lo, hi = 0.0, 1.0
    for _ in range(search_steps):
        mid = 0.5 * (lo + hi)
        if macs_at(mid)[1] <= target:
            hi = mid
        else:
            lo = mid
    plan, macs = macs_at(hi)
    return ChannelPlan(plan, k, hi, macs)


def uniform_plan(model, prune_pct, k):
    """Every prunable conv pruned by the same percentage (the naive baseline)."""
    entries = _plan_at(model, {n.id: prune_pct for n in model.prunable_convs()}, k, 1.0)
    return ChannelPlan(entries, k, 1.0, planned_macs(model, {e.layer_id: e.kept_channels for e in entries}))


def dense_macs(model):
    return count_costs(model).total_macs


PROFILE_COLUMNS = ["layer_id", "sparsity_pct", "accuracy", "recorded_prune_pct", "baseline_accuracy", "threshold_accuracy"]
PLAN_COLUMNS = ["layer_id", "original_channels", "kept_channels"]


def export_profile(profile, path):
    """Full sweep table, one row per evaluated (layer, sparsity) point."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(PROFILE_COLUMNS)
        for row in profile.per_layer:
            for p, acc in row.sweep_points:
                w.writerow([row.layer_id, repr(float(p)), repr(float(acc)), repr(float(row.recorded_prune_pct)),
                            repr(float(profile.baseline_accuracy)), repr(float(profile.threshold_accuracy))])


def read_profile(path):
    rows = {}
    baseline = threshold = None
    with open(path, newline="") as f:
        for rec in csv.DictReader(f):
            lid = rec["layer_id"]
            if lid not in rows:
                rows[lid] = LayerSensitivity(lid, [], float(rec["recorded_prune_pct"]))
            rows[lid].sweep_points.append((float(rec["sparsity_pct"]), float(rec["accuracy"])))
            baseline = float(rec["baseline_accuracy"])
            threshold = float(rec["threshold_accuracy"])
    if baseline is None:
        raise ValueError(f"{path}: profile has no rows")
    return SensitivityProfile(baseline, threshold, list(rows.values()))


def export_plan_plotdata(plan, path, protected=None):
    """Per-layer original vs kept output channels, in network order.

    ``protected`` (a set of ids) adds a ``protected`` column so plots can
    leave those layers out.
    """
    cols = PLAN_COLUMNS + (["protected"] if protected is not None else [])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for e in plan.per_layer:
            row = [e.layer_id, e.original_channels, e.kept_channels]
            if protected is not None:
                row.append(int(e.layer_id in protected))
            w.writerow(row)


def read_plan(path, round_multiple=1):
    with open(path, newline="") as f:
        entries = [PlanEntry(r["layer_id"], int(r["original_channels"]), int(r["kept_channels"])) for r in csv.DictReader(f)]
    return ChannelPlan(entries, round_multiple)
