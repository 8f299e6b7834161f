import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prunekit import sensitivity as sens
from prunekit.errors import GraphError, SensitivityError, TargetMacsUnreachable
from prunekit.model_graph import build_mini_resnet, forward, planned_macs
from prunekit.sensitivity import (
    ChannelPlan, LayerSensitivity, PlanEntry, SensitivityConfig, SensitivityProfile, channel_importance,
    dense_macs, export_plan_plotdata, export_profile, kept_channels, masked_accuracy, plan_channels,
    read_plan, read_profile, round_to_multiple, run_sensitivity, sweep_layer,
)
from prunekit.trainer import evaluate


class TestImportance:
    def test_two_channels(self):
        w = np.stack([np.full((1, 2, 2), 0.1), np.full((1, 2, 2), 0.5)])
        assert channel_importance(w).tolist() == [1, 0]

    def test_ties_lower_index_first(self):
        assert channel_importance(np.ones((6, 3, 3, 3))).tolist() == list(range(6))

    def test_scalar_oracle(self, rng):
        w = rng.standard_normal((16, 4, 3, 3)).astype(np.float32)
        sums = []
        for c in range(16):
            s = 0.0
            for v in w[c].ravel():
                s += abs(float(v))
            sums.append((-s, c))
        assert channel_importance(w).tolist() == [c for _, c in sorted(sums)]

    def test_sign_does_not_matter(self, rng):
        w = rng.standard_normal((8, 2, 3, 3))
        assert channel_importance(w).tolist() == channel_importance(-w).tolist()


class TestMaskedAccuracy:
    def test_zero_is_baseline(self, trained_mini, synth_splits):
        val = synth_splits[1]
        assert masked_accuracy(trained_mini, "layer1.0.conv1", 0, val) == evaluate(trained_mini, val).top1

    def test_restoration_and_repeatability(self, trained_mini, synth_splits):
        val = synth_splits[1]
        x = val.images[:16]
        before = forward(trained_mini, x)
        a = masked_accuracy(trained_mini, "layer2.0.conv2", 60, val)
        b = masked_accuracy(trained_mini, "layer2.0.conv2", 60, val)
        assert a == b
        assert forward(trained_mini, x).tobytes() == before.tobytes()

    def test_full_mask_hurts(self, trained_mini, synth_splits):
        val = synth_splits[1]
        base = evaluate(trained_mini, val).top1
        assert masked_accuracy(trained_mini, "layer1.0.conv2", 100, val) <= base
        # removing every channel of a bottleneck's middle conv leaves only the skip path
        assert masked_accuracy(trained_mini, "layer2.0.conv1", 100, val) < base

    def test_protected_refused(self, trained_mini, synth_splits):
        for lid in ("conv1", "layer1.0.conv3", "fc"):
            with pytest.raises(GraphError):
                masked_accuracy(trained_mini, lid, 30, synth_splits[1])


def scripted(monkeypatch, accs):
    """Replace the masked evaluation with a fixed accuracy sequence per layer."""
    seen = {}

    def fake(model, layer_id, pct, val):
        seen.setdefault(layer_id, []).append(pct)
        return accs[layer_id][len(seen[layer_id]) - 1]

    monkeypatch.setattr(sens, "masked_accuracy", fake)
    return seen


class TestRecordingRule:
    cfg = SensitivityConfig(sweep_start_pct=30, sweep_end_pct=70)

    def test_last_passing(self, monkeypatch):
        seen = scripted(monkeypatch, {"a": [0.92, 0.91, 0.90, 0.86, 0.80]})
        row = sweep_layer(None, "a", None, self.cfg, 0.89)
        assert row.recorded_prune_pct == 50
        assert seen["a"] == [30, 40, 50, 60]  # stops at the first failure

    def test_first_fails(self, monkeypatch):
        seen = scripted(monkeypatch, {"a": [0.5, 0.95, 0.95, 0.95, 0.95]})
        row = sweep_layer(None, "a", None, self.cfg, 0.89)
        assert row.recorded_prune_pct == 0
        assert seen["a"] == [30]

    def test_all_pass(self, monkeypatch):
        cfg = SensitivityConfig()
        scripted(monkeypatch, {"a": [0.95] * 6})
        row = sweep_layer(None, "a", None, cfg, 0.89)
        assert row.recorded_prune_pct == 80
        assert [p for p, _ in row.sweep_points] == [30, 40, 50, 60, 70, 80]

    def test_equal_to_threshold_passes(self, monkeypatch):
        scripted(monkeypatch, {"a": [0.89, 0.88]})
        assert sweep_layer(None, "a", None, self.cfg, 0.89).recorded_prune_pct == 30

    def test_sweep_points(self):
        assert SensitivityConfig().sweep_points() == [30, 40, 50, 60, 70, 80]
        assert SensitivityConfig(sweep_start_pct=10, sweep_end_pct=35, sweep_step_pct=12.5).sweep_points() == [10, 22.5, 35]


class TestRunSensitivity:
    def test_profile_invariants(self, trained_mini, synth_splits):
        val = synth_splits[1]
        prof = run_sensitivity(trained_mini, val, SensitivityConfig())
        assert prof.threshold_accuracy == pytest.approx(prof.baseline_accuracy - 0.02)
        assert {r.layer_id for r in prof.per_layer} == {n.id for n in trained_mini.prunable_convs()}
        for row in prof.per_layer:
            accs = dict(row.sweep_points)
            if row.recorded_prune_pct > 0:
                assert accs[row.recorded_prune_pct] >= prof.threshold_accuracy
            last_p, last_a = row.sweep_points[-1]
            if last_p != row.recorded_prune_pct:
                assert last_a < prof.threshold_accuracy

    def test_order_independent_and_pure(self, trained_mini, synth_splits):
        val = synth_splits[1]
        cfg = SensitivityConfig()
        ids = [n.id for n in trained_mini.prunable_convs()]
        x = val.images[:8]
        before = forward(trained_mini, x)
        a = run_sensitivity(trained_mini, val, cfg, layers=ids)
        b = run_sensitivity(trained_mini, val, cfg, layers=ids[::-1])
        assert {r.layer_id: r.sweep_points for r in a.per_layer} == {r.layer_id: r.sweep_points for r in b.per_layer}
        assert forward(trained_mini, x).tobytes() == before.tobytes()

    def test_threads_match_serial(self, trained_mini, synth_splits, monkeypatch):
        val = synth_splits[1]
        serial = run_sensitivity(trained_mini, val, SensitivityConfig())
        monkeypatch.setenv("PRUNEKIT_THREADS", "3")
        threaded = run_sensitivity(trained_mini, val, SensitivityConfig())
        assert [(r.layer_id, r.sweep_points) for r in serial.per_layer] == [(r.layer_id, r.sweep_points) for r in threaded.per_layer]

    def test_untrained_refused(self, synth_splits):
        m = build_mini_resnet(2, 1, 8, 5, input_shape=synth_splits[1].images.shape[1:], seed=0)
        for n in m.nodes:
            if n.kind == "fc":
                n.params["weight"][:] = 0
                n.params["bias"][:] = 0  # constant logits: always class 0
        with pytest.raises(SensitivityError, match="chance"):
            run_sensitivity(m, synth_splits[1], SensitivityConfig())


class TestRounding:
    def test_nearest(self):
        assert kept_channels(64, 60, 8) == 24

    def test_tie_up(self):
        assert kept_channels(60, 50, 4) == 32
        assert round_to_multiple(30, 4) == 32
        assert round_to_multiple(29.9, 4) == 28

    def test_clamp(self):
        assert kept_channels(64, 99, 8) == 8
        assert kept_channels(64, 0, 8) == 64
        assert kept_channels(4, 80, 8) == 4

    @settings(max_examples=300, deadline=None)
    @given(st.integers(1, 512), st.floats(0, 100), st.sampled_from([1, 2, 4, 8]))
    def test_constraint(self, c, p, k):
        kept = kept_channels(c, p, k)
        assert 1 <= kept <= c
        assert kept == c or kept % k == 0


def fake_profile(model, pct):
    return SensitivityProfile(0.9, 0.88, [LayerSensitivity(n.id, [], pct.get(n.id, 50.0)) for n in model.prunable_convs()])


class TestPlan:
    model = build_mini_resnet(3, 1, 8, 10)

    def test_no_target(self):
        plan = plan_channels(fake_profile(self.model, {}), self.model, SensitivityConfig())
        assert plan.alpha == 1.0
        for e in plan.per_layer:
            node = self.model.node(e.layer_id)
            if node.prunable_out:
                assert e.kept_channels == kept_channels(e.original_channels, 50, 4)
            else:
                assert e.kept_channels == e.original_channels
        assert plan.planned_macs == planned_macs(self.model, plan.kept())

    def test_dense_target_keeps_all(self):
        cfg = SensitivityConfig(target_macs=dense_macs(self.model))
        plan = plan_channels(fake_profile(self.model, {}), self.model, cfg)
        assert plan.alpha == 0.0
        assert all(e.kept_channels == e.original_channels for e in plan.per_layer)

    def test_unreachable(self):
        prof = fake_profile(self.model, {})
        best = plan_channels(prof, self.model, SensitivityConfig()).planned_macs
        with pytest.raises(TargetMacsUnreachable) as e:
            plan_channels(prof, self.model, SensitivityConfig(target_macs=best - 1))
        assert e.value.best_macs == best

    def test_budget_search(self):
        prof = fake_profile(self.model, {})
        full = plan_channels(prof, self.model, SensitivityConfig()).planned_macs
        dense = dense_macs(self.model)
        assert dense >= full
        target = (dense + full) // 2
        plan = plan_channels(prof, self.model, SensitivityConfig(target_macs=target))
        assert plan.planned_macs <= target
        # alpha is the least pruning that meets the budget, to within 1e-3
        lower = sens._plan_at(self.model, prof.recorded(), 4, plan.alpha - 1e-3)
        assert planned_macs(self.model, {e.layer_id: e.kept_channels for e in lower}) > target

    def test_missing_layer(self):
        prof = fake_profile(self.model, {})
        prof.per_layer.pop()
        with pytest.raises(GraphError):
            plan_channels(prof, self.model, SensitivityConfig())


class TestCsv:
    def test_plan_rows_and_round_trip(self, tmp_path):
        plan = ChannelPlan([PlanEntry("a", 16, 8), PlanEntry("b", 32, 32), PlanEntry("c", 8, 4)], 4)
        path = tmp_path / "plan.csv"
        export_plan_plotdata(plan, path, protected={"b"})
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["layer_id", "original_channels", "kept_channels", "protected"]
        assert len(rows) == 4
        back = read_plan(path, 4)
        assert back.per_layer == plan.per_layer
        assert [r[3] for r in rows[1:]] == ["0", "1", "0"]

    def test_protected_kept_intact(self, tmp_path):
        m = build_mini_resnet(2, 1, 8, 5)
        plan = plan_channels(fake_profile(m, {}), m, SensitivityConfig())
        path = tmp_path / "plan.csv"
        export_plan_plotdata(plan, path, protected=m.protected_layers())
        for r in csv.DictReader(open(path)):
            if r["protected"] == "1":
                assert r["kept_channels"] == r["original_channels"]

    def test_profile_round_trip(self, tmp_path):
        prof = SensitivityProfile(0.95, 0.93, [
            LayerSensitivity("x", [(30.0, 0.95), (40.0, 0.94), (50.0, 0.9)], 40.0),
            LayerSensitivity("y", [(30.0, 0.1)], 0.0),
        ])
        path = tmp_path / "p.csv"
        export_profile(prof, path)
        assert read_profile(path) == prof
        assert len(open(path).read().splitlines()) == 5
