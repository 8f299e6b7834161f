"""Physically remove pruned output channels from a model.

Dropping an output channel of a conv removes the filter row, its bias, the
matching batchnorm entries, and the matching input slice of every layer that
reads the channel.  Convs that feed a residual add are protected, so skip
connections always keep matching shapes.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError, SurgeryError
from .model_graph import infer_shapes
from .sensitivity import channel_zero_overrides, channels_to_remove

WEIGHT_DIMS = {"conv": ("out_channels", "in_channels", "kernel_h", "kernel_w"), "fc": ("out_features", "in_features")}


@dataclass
class SurgeryRecord:
    per_layer: list = field(default_factory=list)  # [(layer_id, [removed indices])]

    def removed(self):
        return {lid: list(idx) for lid, idx in self.per_layer}

    def to_json(self):
        return [[lid, [int(i) for i in idx]] for lid, idx in self.per_layer]

    @classmethod
    def from_json(cls, rows):
        return cls([(lid, [int(i) for i in idx]) for lid, idx in rows])


@dataclass
class Mismatch:
    layer_id: str
    param: str
    dim: str
    expected: int
    actual: int

    def __str__(self):
        return f"{self.layer_id}.{self.param}: {self.dim} is {self.actual}, expected {self.expected}"


@dataclass
class SurgeryValidation:
    mismatches: list
    deltas: list  # [(layer_id, original_channels, kept_channels)] per conv

    @property
    def ok(self):
        return not self.mismatches


def _check_plan(model, plan):
    for e in plan.per_layer:
        if e.layer_id not in model:
            raise SurgeryError(f"plan references unknown layer {e.layer_id!r}")
        node = model.node(e.layer_id)
        if node.kind != "conv":
            raise SurgeryError(f"plan entry {e.layer_id} is not a conv layer")
        c = node.spec["out_channels"]
        if e.original_channels != c:
            raise SurgeryError(f"plan says {e.layer_id} has {e.original_channels} channels, model has {c}")
        if not 1 <= e.kept_channels <= c:
            raise SurgeryError(f"{e.layer_id}: cannot keep {e.kept_channels} of {c} channels")
        if e.kept_channels < c:
            if model.channel_consumers(e.layer_id)[1]:
                raise SurgeryError(f"pruning {e.layer_id} would break a skip connection")
            if not node.prunable_out:
                raise SurgeryError(f"{e.layer_id} is protected and cannot lose output channels")


def removal_sets(model, plan):
    """Channels each planned layer loses, ranked on the unmodified model."""
    _check_plan(model, plan)
    out = {}
    for e in plan.per_layer:
        w = model.node(e.layer_id).params["weight"]
        out[e.layer_id] = channels_to_remove(w, e.original_channels - e.kept_channels)
    return out


def slice_model(model, plan):
    """Return ``(thinner, record)``; ``model`` itself is left untouched."""
    removed = removal_sets(model, plan)
    shapes = infer_shapes(model)
    thin = model.copy()
    for lid, idx in removed.items():
        if idx.size == 0:
            continue
        node = thin.node(lid)
        c = node.spec["out_channels"]
        keep = np.setdiff1d(np.arange(c), idx)
        node.params["weight"] = np.ascontiguousarray(node.params["weight"][keep])
        if node.params.get("bias") is not None:
            node.params["bias"] = node.params["bias"][keep].copy()
        node.spec["out_channels"] = len(keep)
        for bn in thin.channel_group(lid):
            for name in ("weight", "bias", "running_mean", "running_var"):
                bn.params[name] = bn.params[name][keep].copy()
            bn.spec["num_features"] = len(keep)
        consumers, adds = thin.channel_consumers(lid)
        if adds:
            raise SurgeryError(f"pruning {lid} would break a skip connection at {adds[0].id}")
        for cons in consumers:
            if cons.kind == "conv":
                cons.params["weight"] = np.ascontiguousarray(cons.params["weight"][:, keep])
                cons.spec["in_channels"] = len(keep)
            else:
                # fc may read a flattened [C,H,W] volume: keep whole per-channel blocks
                src = shapes[cons.inputs[0]]
                per = int(np.prod(src[1:])) if len(src) > 1 else 1
                feats = (keep[:, None] * per + np.arange(per)[None, :]).ravel()
                cons.params["weight"] = np.ascontiguousarray(cons.params["weight"][:, feats])
                cons.spec["in_features"] = len(feats)
    record = SurgeryRecord([(e.layer_id, [int(i) for i in removed[e.layer_id]]) for e in plan.per_layer])
    try:
        thin.validate()
    except GraphError as exc:
        raise SurgeryError(f"sliced graph fails validation: {exc}") from exc
    thin.meta["surgery_record"] = record.to_json()
    return thin, record


def validate_surgery(model, thinner, record):
    """Re-derive every parameter shape from ``record`` and compare with ``thinner``."""
    removed = record.removed()
    for lid in removed:
        if lid not in model:
            raise SurgeryError(f"record references unknown layer {lid!r}")
    expected_out = {
        n.id: n.spec["out_channels"] - len(removed.get(n.id, ())) for n in model.convs()
    }
    shapes = infer_shapes(model, out_channels=expected_out)
    mismatches = []
    for n in model.nodes:
        if n.id not in thinner:
            mismatches.append(Mismatch(n.id, "*", "layer", 1, 0))
            continue
        t = thinner.node(n.id)
        for name, arr in n.params.items():
            want = _expected_shape(n, name, shapes)
            got = t.params.get(name)
            if got is None:
                mismatches.append(Mismatch(n.id, name, "param", 1, 0))
                continue
            dims = WEIGHT_DIMS.get(n.kind, ("channels",)) if name == "weight" else ("channels",)
            if len(got.shape) != len(want):
                mismatches.append(Mismatch(n.id, name, "ndim", len(want), got.ndim))
                continue
            for d, (a, b) in enumerate(zip(want, got.shape)):
                if a != b:
                    mismatches.append(Mismatch(n.id, name, dims[d] if d < len(dims) else f"axis{d}", a, b))
    deltas = [(n.id, n.spec["out_channels"], expected_out[n.id]) for n in model.convs()]
    return SurgeryValidation(mismatches, deltas)


def _expected_shape(node, name, shapes):
    s = node.spec
    if node.kind == "conv":
        cout = shapes[node.id][0]
        cin = shapes[node.inputs[0]][0]
        return (cout, cin, s["kernel_h"], s["kernel_w"]) if name == "weight" else (cout,)
    if node.kind == "fc":
        fin = int(np.prod(shapes[node.inputs[0]]))
        return (s["out_features"], fin) if name == "weight" else (s["out_features"],)
    if node.kind == "batchnorm":
        return (shapes[node.id][0],)
    return tuple(node.params[name].shape)


def removed_channel_overrides(model, record):
    """Overrides that zero, in the dense model, exactly the channels ``record`` removes."""
    return channel_zero_overrides(model, {lid: idx for lid, idx in record.removed().items() if idx})
