import numpy as np
import pytest

from oracles import output_rel_error
from prunekit.errors import SurgeryError
from prunekit.model_graph import build_mini_resnet, count_costs, forward
from prunekit.sensitivity import ChannelPlan, PlanEntry, kept_channels
from prunekit.surgery import SurgeryRecord, removed_channel_overrides, slice_model, validate_surgery


def keep_all(model):
    return ChannelPlan([PlanEntry(n.id, n.spec["out_channels"], n.spec["out_channels"]) for n in model.convs()])


def random_plan(model, rng, k=4):
    entries = []
    for n in model.convs():
        c = n.spec["out_channels"]
        kept = kept_channels(c, float(rng.uniform(0, 90)), k) if n.prunable_out else c
        entries.append(PlanEntry(n.id, c, kept))
    return ChannelPlan(entries, k)


def perturb_bn(model, rng):
    # non-trivial running stats so eval-mode batchnorm is not the identity
    for n in model.nodes:
        if n.kind == "batchnorm":
            c = n.params["weight"].shape[0]
            n.params["weight"][:] = rng.uniform(0.5, 1.5, c)
            n.params["bias"][:] = rng.normal(0, 0.3, c)
            n.params["running_mean"][:] = rng.normal(0, 0.3, c)
            n.params["running_var"][:] = rng.uniform(0.5, 2, c)
    return model


MINIS = [
    dict(stages=3, blocks_per_stage=1, base_channels=8, num_classes=10, input_shape=(3, 16, 16)),
    dict(stages=2, blocks_per_stage=2, base_channels=8, num_classes=5, input_shape=(3, 12, 12)),
    dict(stages=3, blocks_per_stage=2, base_channels=4, num_classes=4, input_shape=(1, 8, 8), expansion=2),
]


def test_identity_plan_is_bit_identical():
    m = build_mini_resnet(2, 1, 8, 5)
    thin, record = slice_model(m, keep_all(m))
    assert all(not idx for _, idx in record.per_layer)
    for a, b in zip(m.nodes, thin.nodes):
        assert a.spec == b.spec
        for k in a.params:
            assert a.params[k].tobytes() == b.params[k].tobytes()


@pytest.mark.parametrize("arch", range(len(MINIS)))
def test_masked_dense_equivalence(arch):
    rng = np.random.default_rng(arch)
    m = perturb_bn(build_mini_resnet(seed=arch, **MINIS[arch]), rng)
    plan = random_plan(m, rng)
    thin, record = slice_model(m, plan)
    overrides = removed_channel_overrides(m, record)
    for _ in range(10):
        x = rng.standard_normal((4, *m.input_shape)).astype(np.float32)
        dense = forward(m, x, overrides=overrides)
        sliced = forward(thin, x)
        assert output_rel_error(sliced, dense) < 1e-5
    thin.validate()
    assert validate_surgery(m, thin, record).ok


def test_macs_strictly_drop():
    m = build_mini_resnet(2, 1, 8, 5)
    plan = keep_all(m)
    plan.per_layer[1] = PlanEntry(plan.per_layer[1].layer_id, 8, 4)
    thin, _ = slice_model(m, plan)
    assert count_costs(thin).total_macs < count_costs(m).total_macs
    assert thin.node(plan.per_layer[1].layer_id).params["weight"].shape[0] == 4


def test_weakest_channels_removed():
    m = build_mini_resnet(1, 1, 8, 3)
    w = m.node("layer1.0.conv1").params["weight"]
    w[[2, 5]] *= 1e-3
    plan = keep_all(m)
    plan.per_layer = [PlanEntry(e.layer_id, e.original_channels, 6 if e.layer_id == "layer1.0.conv1" else e.kept_channels)
                      for e in plan.per_layer]
    thin, record = slice_model(m, plan)
    assert record.removed()["layer1.0.conv1"] == [2, 5]
    np.testing.assert_array_equal(thin.node("layer1.0.conv1").params["weight"], w[[0, 1, 3, 4, 6, 7]])
    np.testing.assert_array_equal(thin.node("layer1.0.conv2").params["weight"],
                                  m.node("layer1.0.conv2").params["weight"][:, [0, 1, 3, 4, 6, 7]])


def test_input_not_mutated():
    m = build_mini_resnet(2, 1, 8, 5)
    before = {(n.id, k): v.copy() for n in m.nodes for k, v in n.params.items()}
    slice_model(m, random_plan(m, np.random.default_rng(0)))
    for n in m.nodes:
        for k, v in n.params.items():
            assert v.tobytes() == before[(n.id, k)].tobytes()


class TestValidate:
    def setup_method(self):
        self.m = build_mini_resnet(2, 1, 8, 5)
        self.thin, self.record = slice_model(self.m, random_plan(self.m, np.random.default_rng(3)))

    def test_clean(self):
        v = validate_surgery(self.m, self.thin, self.record)
        assert v.mismatches == []
        assert [d[0] for d in v.deltas] == [n.id for n in self.m.convs()]
        for lid, orig, kept in v.deltas:
            assert kept == self.thin.node(lid).spec["out_channels"] <= orig

    def test_tampered(self):
        lid = next(lid for lid, idx in self.record.per_layer if idx)
        node = self.thin.node(lid)
        w = node.params["weight"]
        node.params["weight"] = np.concatenate([w, w[:1]])
        v = validate_surgery(self.m, self.thin, self.record)
        assert not v.ok
        assert any(mm.layer_id == lid and mm.dim == "out_channels" for mm in v.mismatches)
        assert lid in str(v.mismatches[0])

    def test_unknown_layer(self):
        bad = SurgeryRecord(self.record.per_layer + [("ghost.conv", [0])])
        with pytest.raises(SurgeryError):
            validate_surgery(self.m, self.thin, bad)

    def test_record_json(self):
        assert SurgeryRecord.from_json(self.record.to_json()) == self.record
        assert self.thin.meta["surgery_record"] == self.record.to_json()


class TestPlanErrors:
    m = build_mini_resnet(2, 1, 8, 5)

    def plan_with(self, lid, kept):
        plan = keep_all(self.m)
        plan.per_layer = [PlanEntry(e.layer_id, e.original_channels, kept if e.layer_id == lid else e.kept_channels)
                          for e in plan.per_layer]
        return plan

    def test_skip_breaking(self):
        with pytest.raises(SurgeryError, match="skip"):
            slice_model(self.m, self.plan_with("layer1.0.conv3", 16))

    def test_stem(self):
        with pytest.raises(SurgeryError):
            slice_model(self.m, self.plan_with("conv1", 4))

    def test_unknown(self):
        plan = keep_all(self.m)
        plan.per_layer.append(PlanEntry("nope", 8, 4))
        with pytest.raises(SurgeryError, match="unknown"):
            slice_model(self.m, plan)

    def test_zero_kept(self):
        with pytest.raises(SurgeryError):
            slice_model(self.m, self.plan_with("layer1.0.conv1", 0))
