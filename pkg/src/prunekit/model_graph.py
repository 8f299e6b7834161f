"""Model topology, forward/backward execution and cost accounting.

A :class:`ModelGraph` is a topologically ordered list of :class:`LayerNode`
objects.  Node inputs refer to earlier node ids, or to ``"input"`` for the
network input.  Residual connections are ``add`` nodes with two inputs.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .errors import GraphError, ShapeError

INPUT = "input"
KINDS = ("conv", "fc", "batchnorm", "relu", "pool", "add", "softmax")

# params that count towards model size; batchnorm running stats are buffers
COUNTED_PARAMS = {"conv": ("weight", "bias"), "fc": ("weight", "bias"), "batchnorm": ("weight", "bias")}

# nodes that carry a channel straight through, so channel masks/slices propagate across them
CHANNELWISE = ("batchnorm", "relu", "pool")


@dataclass
class LayerNode:
    id: str
    kind: str
    spec: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)
    prunable_out: bool = False
    prunable_weights: bool = False

    def conv_spec(self):
        s = self.spec
        return tc.ConvSpec(
            s["out_channels"], s["in_channels"], s["kernel_h"], s["kernel_w"], s["stride"], s["padding"]
        )


@dataclass
class ModelGraph:
    nodes: list
    input_shape: tuple
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self._index = {n.id: i for i, n in enumerate(self.nodes)}

    def node(self, node_id):
        try:
            return self.nodes[self._index[node_id]]
        except KeyError:
            raise GraphError(f"no layer named {node_id!r}") from None

    def __contains__(self, node_id):
        return node_id in self._index

    def copy(self):
        return ModelGraph(
            [copy.deepcopy(n) for n in self.nodes], self.input_shape, self.num_classes, copy.deepcopy(self.meta)
        )

    def consumers(self, node_id):
        return [n for n in self.nodes if node_id in n.inputs]

    def convs(self):
        return [n for n in self.nodes if n.kind == "conv"]

    def weighted_layers(self):
        return [n for n in self.nodes if n.kind in ("conv", "fc")]

    def prunable_convs(self):
        return [n for n in self.nodes if n.kind == "conv" and n.prunable_out]

    def channel_group(self, conv_id):
        """Batchnorm nodes that directly follow ``conv_id`` and share its output channels."""
        group = []
        cur = conv_id
        while True:
            nxt = self.consumers(cur)
            if len(nxt) != 1 or nxt[0].kind != "batchnorm":
                return group
            group.append(nxt[0])
            cur = nxt[0].id

    def channel_consumers(self, conv_id):
        """Layers whose input channels are the output channels of ``conv_id``.

        Walks forward through channel-wise nodes.  Returns ``(weighted, adds)``:
        the conv/fc nodes that read the channels and any ``add`` nodes reached.
        """
        weighted, adds, seen = [], [], set()
        frontier = [conv_id]
        while frontier:
            cur = frontier.pop()
            for nxt in self.consumers(cur):
                if nxt.id in seen:
                    continue
                seen.add(nxt.id)
                if nxt.kind in ("conv", "fc"):
                    weighted.append(nxt)
                elif nxt.kind == "add":
                    adds.append(nxt)
                elif nxt.kind in CHANNELWISE or nxt.kind == "softmax":
                    frontier.append(nxt.id)
        order = {n.id: i for i, n in enumerate(self.nodes)}
        weighted.sort(key=lambda n: order[n.id])
        return weighted, adds

    def protected_layers(self):
        """Ids that must never lose output channels: the first conv, the last
        fc, and every conv whose output reaches a residual ``add``."""
        convs, fcs = self.convs(), [n for n in self.nodes if n.kind == "fc"]
        protected = set()
        if convs:
            protected.add(convs[0].id)
        if fcs:
            protected.add(fcs[-1].id)
        for c in convs:
            if self.channel_consumers(c.id)[1]:
                protected.add(c.id)
        return protected

    def validate(self):
        """Check ordering, shape chaining, skip-add matching and eligibility flags."""
        seen = {INPUT}
        for n in self.nodes:
            if n.kind not in KINDS:
                raise GraphError(f"{n.id}: unknown layer kind {n.kind!r}")
            if n.id in seen:
                raise GraphError(f"duplicate layer id {n.id!r}")
            for i in n.inputs:
                if i not in seen:
                    raise GraphError(f"{n.id}: input {i!r} is not an earlier layer")
            want = 2 if n.kind == "add" else 1
            if len(n.inputs) != want:
                raise GraphError(f"{n.id}: {n.kind} takes {want} input(s), has {len(n.inputs)}")
            seen.add(n.id)
        shapes = infer_shapes(self)
        out = shapes[self.nodes[-1].id]
        if out != (self.num_classes,):
            raise GraphError(f"model output shape {out} is not ({self.num_classes},)")
        for n in self.nodes:
            for name, arr in n.params.items():
                want = _param_shape(n, name)
                if want is not None and tuple(arr.shape) != want:
                    raise ShapeError(f"{n.id}.{name} has shape {arr.shape}, expected {want}", dim=f"{n.id}.{name}")
        protected = self.protected_layers()
        for n in self.nodes:
            if n.id in protected and n.prunable_out:
                raise GraphError(f"{n.id} is a protected layer but is marked prunable_out")
            if n.prunable_out and n.kind != "conv":
                raise GraphError(f"{n.id}: only conv layers can lose output channels")
        return shapes


def _param_shape(node, name):
    s = node.spec
    if node.kind == "conv":
        return {"weight": (s["out_channels"], s["in_channels"], s["kernel_h"], s["kernel_w"]), "bias": (s["out_channels"],)}.get(name)
    if node.kind == "fc":
        return {"weight": (s["out_features"], s["in_features"]), "bias": (s["out_features"],)}.get(name)
    if node.kind == "batchnorm":
        return (s["num_features"],)
    return None


def infer_shapes(model, out_channels=None):
    """Per-sample output shape of every node (``"input"`` included).

    ``out_channels`` optionally overrides conv output widths, which lets the
    cost model evaluate a hypothetical thinner network without building it.
    """
    out_channels = out_channels or {}
    shapes = {INPUT: tuple(model.input_shape)}
    for n in model.nodes:
        ins = [shapes[i] for i in n.inputs]
        x = ins[0]
        s = n.spec
        if n.kind == "conv":
            if len(x) != 3:
                raise ShapeError(f"{n.id}: conv needs a [C,H,W] input, got {x}", dim="input.ndim")
            cin = x[0]
            if not out_channels and cin != s["in_channels"]:
                raise ShapeError(f"{n.id}: receives {cin} channels, expects {s['in_channels']}", dim="Cin")
            ho, wo = n.conv_spec().output_hw(x[1], x[2])
            shapes[n.id] = (out_channels.get(n.id, s["out_channels"]), ho, wo)
        elif n.kind == "fc":
            feats = int(np.prod(x))
            if not out_channels and feats != s["in_features"]:
                raise ShapeError(f"{n.id}: receives {feats} features, expects {s['in_features']}", dim="in_features")
            shapes[n.id] = (s["out_features"],)
        elif n.kind == "batchnorm":
            if not out_channels and x[0] != s["num_features"]:
                raise ShapeError(f"{n.id}: receives {x[0]} channels, expects {s['num_features']}", dim="C")
            shapes[n.id] = x
        elif n.kind == "pool":
            if s["mode"] == "global_avg":
                shapes[n.id] = (x[0],)
            else:
                sp = tc.ConvSpec(x[0], x[0], s["kernel"], s["kernel"], s["stride"], s.get("padding", 0))
                shapes[n.id] = (x[0], *sp.output_hw(x[1], x[2]))
        elif n.kind == "add":
            if ins[0] != ins[1]:
                raise ShapeError(f"{n.id}: skip-add operands {ins[0]} and {ins[1]} differ", dim="C" if ins[0][0] != ins[1][0] else "HW")
            shapes[n.id] = x
        else:
            shapes[n.id] = x
    return shapes


# ---------------------------------------------------------------------------
# execution


def _param(node, name, overrides):
    if overrides is not None:
        key = (node.id, name)
        if key in overrides:
            return overrides[key]
    return node.params.get(name)


def forward(model, x, training=False, overrides=None, keep_cache=False):
    """Run the network on ``x`` [N,C,H,W] and return logits [N,num_classes].

    ``overrides`` maps ``(node_id, param_name)`` to a replacement array used
    instead of the stored parameter (masked weights, zeroed channels).  The
    stored parameters are never modified, except batchnorm running statistics
    in training mode.  With ``keep_cache`` the return value is
    ``(logits, cache)`` for :func:`backward`.
    """
    x = np.asarray(x)
    if x.shape[1:] != model.input_shape:
        raise ShapeError(f"input {x.shape[1:]} does not match model input {model.input_shape}", dim="input")
    acts = {INPUT: x}
    caches = {}
    # free activations early when no backward pass will need them
    remaining = None if keep_cache else _use_counts(model)
    for n in model.nodes:
        ins = [acts[i] for i in n.inputs]
        if n.kind == "conv":
            out = tc.conv2d_forward(ins[0], _param(n, "weight", overrides), _param(n, "bias", overrides), n.conv_spec())
        elif n.kind == "fc":
            out = tc.linear_forward(ins[0], _param(n, "weight", overrides), _param(n, "bias", overrides))
        elif n.kind == "batchnorm":
            out, caches[n.id] = tc.batchnorm_forward(
                ins[0], _param(n, "weight", overrides), _param(n, "bias", overrides),
                n.params["running_mean"], n.params["running_var"], training,
                n.spec.get("momentum", 0.1), n.spec.get("eps", 1e-5),
            )
        elif n.kind == "relu":
            out = tc.relu_forward(ins[0])
        elif n.kind == "pool":
            if n.spec["mode"] == "global_avg":
                out = tc.global_avg_pool_forward(ins[0])
            else:
                out, caches[n.id] = tc.max_pool2d_forward(ins[0], n.spec["kernel"], n.spec["stride"], n.spec.get("padding", 0))
        elif n.kind == "add":
            out = tc.add(ins[0], ins[1])
        elif n.kind == "softmax":
            out = tc.softmax(ins[0])
        else:
            raise GraphError(f"{n.id}: unknown layer kind {n.kind!r}")
        acts[n.id] = out
        if remaining is not None:
            for i in n.inputs:
                remaining[i] -= 1
                if remaining[i] == 0:
                    del acts[i]
    logits = acts[model.nodes[-1].id]
    if keep_cache:
        return logits, {"acts": acts, "caches": caches, "overrides": overrides}
    return logits


def _use_counts(model):
    counts = {}
    for n in model.nodes:
        for i in n.inputs:
            counts[i] = counts.get(i, 0) + 1
    counts[model.nodes[-1].id] = counts.get(model.nodes[-1].id, 0) + 1
    return counts


def backward(model, cache, grad_logits):
    """Back-propagate ``grad_logits``; returns ``{node_id: {param: grad}}``.

    Gradients are taken with respect to the parameters actually used in the
    forward pass (i.e. the overridden ones, when overrides were given).
    """
    acts, caches, overrides = cache["acts"], cache["caches"], cache["overrides"]
    grads = {model.nodes[-1].id: grad_logits}
    pgrads = {}

    def push(target, g):
        if target == INPUT:
            return
        if target in grads:
            grads[target] = grads[target] + g
        else:
            grads[target] = g

    for n in reversed(model.nodes):
        g = grads.pop(n.id, None)
        if g is None:
            continue
        x = acts[n.inputs[0]]
        if n.kind == "conv":
            gx, gw, gb = tc.conv2d_backward(g, x, _param(n, "weight", overrides), n.conv_spec())
            pgrads[n.id] = {"weight": gw}
            if n.params.get("bias") is not None:
                pgrads[n.id]["bias"] = gb
            push(n.inputs[0], gx)
        elif n.kind == "fc":
            gx, gw, gb = tc.linear_backward(g, x, _param(n, "weight", overrides))
            pgrads[n.id] = {"weight": gw}
            if n.params.get("bias") is not None:
                pgrads[n.id]["bias"] = gb
            push(n.inputs[0], gx)
        elif n.kind == "batchnorm":
            gx, gg, gb = tc.batchnorm_backward(g, caches[n.id])
            pgrads[n.id] = {"weight": gg, "bias": gb}
            push(n.inputs[0], gx)
        elif n.kind == "relu":
            push(n.inputs[0], tc.relu_backward(g, x))
        elif n.kind == "pool":
            if n.spec["mode"] == "global_avg":
                push(n.inputs[0], tc.global_avg_pool_backward(g, x.shape))
            else:
                push(n.inputs[0], tc.max_pool2d_backward(g, caches[n.id]))
        elif n.kind == "add":
            push(n.inputs[0], g)
            push(n.inputs[1], g)
        elif n.kind == "softmax":
            s = acts[n.id]
            push(n.inputs[0], s * (g - (g * s).sum(axis=1, keepdims=True)))
    return pgrads


def predict(model, x, batch_size=256, overrides=None):
    """Eval-mode logits for ``x``, computed in batches."""
    outs = [forward(model, x[i : i + batch_size], overrides=overrides) for i in range(0, len(x), batch_size)]
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# cost accounting


@dataclass
class LayerCost:
    layer_id: str
    param_count: int
    mac_count: int
    nonzero_params: int = 0
    effective_macs: int = 0


@dataclass
class CostReport:
    per_layer: list
    total_params: int
    total_macs: int
    nonzero_params: int
    sparsity_percent: float
    effective_macs: int = 0

    def layer(self, layer_id):
        for row in self.per_layer:
            if row.layer_id == layer_id:
                return row
        raise KeyError(layer_id)


def _layer_macs(node, shapes, out_channels=None):
    s = node.spec
    if node.kind == "conv":
        cin = shapes[node.inputs[0]][0]
        cout, ho, wo = shapes[node.id]
        return cout * cin * s["kernel_h"] * s["kernel_w"] * ho * wo, ho * wo
    if node.kind == "fc":
        fin = int(np.prod(shapes[node.inputs[0]]))
        return s["out_features"] * fin, 1
    return 0, 0


def count_costs(model):
    """Parameter, MAC and sparsity accounting for ``model``.

    One multiply-accumulate counts as one MAC; only conv and fc layers do
    MAC work.  ``effective_macs`` counts only MACs whose weight is nonzero.
    """
    shapes = infer_shapes(model)
    rows = []
    for n in model.nodes:
        names = COUNTED_PARAMS.get(n.kind, ())
        arrays = [n.params[k] for k in names if n.params.get(k) is not None]
        params = sum(int(a.size) for a in arrays)
        nonzero = sum(int(np.count_nonzero(a)) for a in arrays)
        macs, positions = _layer_macs(n, shapes)
        eff = int(np.count_nonzero(n.params["weight"])) * positions if n.kind in ("conv", "fc") else 0
        rows.append(LayerCost(n.id, params, int(macs), nonzero, eff))
    total = sum(r.param_count for r in rows)
    nonzero = sum(r.nonzero_params for r in rows)
    sparsity = 100.0 * (1.0 - nonzero / total) if total else 0.0
    return CostReport(
        per_layer=rows,
        total_params=total,
        total_macs=sum(r.mac_count for r in rows),
        nonzero_params=nonzero,
        sparsity_percent=sparsity,
        effective_macs=sum(r.effective_macs for r in rows),
    )


def planned_macs(model, kept):
    """Total MACs of the network obtained by giving each conv in ``kept`` that
    many output channels (and shrinking its consumers' inputs accordingly)."""
    shapes = infer_shapes(model, out_channels=dict(kept))
    return sum(_layer_macs(n, shapes)[0] for n in model.nodes)


def planned_params(model, kept):
    shapes = infer_shapes(model, out_channels=dict(kept))
    total = 0
    for n in model.nodes:
        if n.kind == "conv":
            cout = shapes[n.id][0]
            cin = shapes[n.inputs[0]][0]
            total += cout * cin * n.spec["kernel_h"] * n.spec["kernel_w"]
            total += cout if n.params.get("bias") is not None else 0
        elif n.kind == "fc":
            total += n.spec["out_features"] * int(np.prod(shapes[n.inputs[0]]))
            total += n.spec["out_features"] if n.params.get("bias") is not None else 0
        elif n.kind == "batchnorm":
            total += 2 * shapes[n.id][0]
    return total


# ---------------------------------------------------------------------------
# builders


class _Builder:
    def __init__(self, input_shape, num_classes, seed):
        self.nodes = []
        self.rng = np.random.default_rng(seed)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.last = INPUT
        self.channels = input_shape[0]

    def _add(self, node):
        self.nodes.append(node)
        self.last = node.id
        return node.id

    def conv(self, name, cout, k, stride=1, padding=0, src=None, prunable_out=True, prunable_weights=True, bias=False):
        src = self.last if src is None else src
        cin = self._channels_of(src)
        fan_in = cin * k * k
        w = self.rng.standard_normal((cout, cin, k, k), dtype=np.float32) * np.float32(np.sqrt(2.0 / fan_in))
        params = {"weight": w}
        if bias:
            params["bias"] = np.zeros(cout, dtype=np.float32)
        spec = dict(out_channels=cout, in_channels=cin, kernel_h=k, kernel_w=k, stride=stride, padding=padding)
        return self._add(LayerNode(name, "conv", spec, params, [src], prunable_out, prunable_weights))

    def bn(self, name, src=None, gamma=1.0):
        src = self.last if src is None else src
        c = self._channels_of(src)
        params = {
            "weight": np.full(c, gamma, dtype=np.float32),
            "bias": np.zeros(c, dtype=np.float32),
            "running_mean": np.zeros(c, dtype=np.float32),
            "running_var": np.ones(c, dtype=np.float32),
        }
        return self._add(LayerNode(name, "batchnorm", {"num_features": c, "eps": 1e-5, "momentum": 0.1}, params, [src]))

    def relu(self, name, src=None):
        return self._add(LayerNode(name, "relu", {}, {}, [self.last if src is None else src]))

    def maxpool(self, name, k, stride, padding):
        return self._add(LayerNode(name, "pool", {"mode": "max", "kernel": k, "stride": stride, "padding": padding}, {}, [self.last]))

    def gap(self, name):
        return self._add(LayerNode(name, "pool", {"mode": "global_avg"}, {}, [self.last]))

    def add(self, name, a, b):
        return self._add(LayerNode(name, "add", {}, {}, [a, b]))

    def fc(self, name, cout):
        cin = self._channels_of(self.last)
        bound = 1.0 / np.sqrt(cin)
        params = {
            "weight": self.rng.uniform(-bound, bound, (cout, cin)).astype(np.float32),
            "bias": np.zeros(cout, dtype=np.float32),
        }
        spec = {"in_features": cin, "out_features": cout}
        return self._add(LayerNode(name, "fc", spec, params, [self.last], prunable_out=False, prunable_weights=False))

    def _channels_of(self, node_id):
        if node_id == INPUT:
            return self.input_shape[0]
        for n in reversed(self.nodes):
            if n.id == node_id:
                if n.kind == "conv":
                    return n.spec["out_channels"]
                if n.kind == "fc":
                    return n.spec["out_features"]
                return self._channels_of(n.inputs[0])
        raise GraphError(node_id)

    def bottleneck(self, prefix, width, out_channels, stride, stride_on_3x3=True):
        """conv1x1 -> conv3x3 -> conv1x1 expansion, projection shortcut when shapes change."""
        entry = self.last
        cin = self._channels_of(entry)
        s1, s3 = (1, stride) if stride_on_3x3 else (stride, 1)
        self.conv(f"{prefix}.conv1", width, 1, s1, 0)
        self.bn(f"{prefix}.bn1")
        self.relu(f"{prefix}.relu1")
        self.conv(f"{prefix}.conv2", width, 3, s3, 1)
        self.bn(f"{prefix}.bn2")
        self.relu(f"{prefix}.relu2")
        self.conv(f"{prefix}.conv3", out_channels, 1, 1, 0, prunable_out=False)
        main = self.bn(f"{prefix}.bn3")
        if stride != 1 or cin != out_channels:
            self.conv(f"{prefix}.downsample.conv", out_channels, 1, stride, 0, src=entry, prunable_out=False)
            shortcut = self.bn(f"{prefix}.downsample.bn")
        else:
            shortcut = entry
        self.add(f"{prefix}.add", main, shortcut)
        self.relu(f"{prefix}.relu_out")

    def graph(self, meta=None):
        model = ModelGraph(self.nodes, self.input_shape, self.num_classes, meta or {})
        model.validate()
        return model


def build_resnet50(num_classes=1000, seed=0):
    """Bottleneck ResNet-50 for 3x224x224 inputs (stride on the 3x3 conv)."""
    if num_classes < 2:
        raise GraphError("num_classes must be >= 2")
    b = _Builder((3, 224, 224), num_classes, seed)
    b.conv("conv1", 64, 7, 2, 3, prunable_out=False, prunable_weights=False)
    b.bn("bn1")
    b.relu("relu1")
    b.maxpool("maxpool", 3, 2, 1)
    for stage, (blocks, width) in enumerate(zip((3, 4, 6, 3), (64, 128, 256, 512)), start=1):
        for i in range(blocks):
            stride = 2 if (i == 0 and stage > 1) else 1
            b.bottleneck(f"layer{stage}.{i}", width, width * 4, stride)
    b.gap("avgpool")
    b.fc("fc", num_classes)
    return b.graph({"arch": "resnet50"})


def _cifar_bottleneck(stages, blocks_per_stage, base_channels, num_classes, input_shape, seed, arch, expansion=4):
    b = _Builder(input_shape, num_classes, seed)
    b.conv("conv1", base_channels, 3, 1, 1, prunable_out=False, prunable_weights=False)
    b.bn("bn1")
    b.relu("relu1")
    for stage in range(stages):
        width = base_channels * 2**stage
        for i in range(blocks_per_stage):
            stride = 2 if (i == 0 and stage > 0) else 1
            b.bottleneck(f"layer{stage + 1}.{i}", width, width * expansion, stride)
    b.gap("avgpool")
    b.fc("fc", num_classes)
    return b.graph({"arch": arch})


def build_resnet56_cifar(num_classes=10, seed=0):
    """Depth-56 bottleneck ResNet for 3x32x32 inputs: 3 stages of 6 blocks,
    widths 16/32/64 with 4x expansion, plus stem conv and fc."""
    if num_classes < 2:
        raise GraphError("num_classes must be >= 2")
    return _cifar_bottleneck(3, 6, 16, num_classes, (3, 32, 32), seed, "resnet56")


def build_mini_resnet(stages, blocks_per_stage, base_channels, num_classes, input_shape=(3, 16, 16), seed=0, expansion=4):
    """Scaled-down bottleneck ResNet with the same layout and protection rules."""
    for name, v in (("stages", stages), ("blocks_per_stage", blocks_per_stage), ("base_channels", base_channels)):
        if v < 1:
            raise GraphError(f"{name} must be >= 1, got {v}")
    if num_classes < 2:
        raise GraphError("num_classes must be >= 2")
    return _cifar_bottleneck(
        stages, blocks_per_stage, base_channels, num_classes, input_shape, seed,
        f"mini-resnet-{stages}x{blocks_per_stage}x{base_channels}", expansion,
    )
