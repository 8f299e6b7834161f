"""Train a small bottleneck ResNet on synthetic textures and sweep each
prunable layer's channel sensitivity.

Prints the accuracy curve per layer, the recorded prune percentage, and the
channel plan for round-multiple 4 with and without a MAC budget.
"""

from prunekit import (
    SensitivityConfig, TrainConfig, build_mini_resnet, fine_tune, plan_channels, run_sensitivity, split,
    synth_dataset,
)
from prunekit.sensitivity import dense_macs

data = synth_dataset(0, 1500, 10, (3, 16, 16), noise=1.5)
train, val = split(data, 0.25, 0)
model = build_mini_resnet(3, 1, 16, 10, input_shape=(3, 16, 16))
model, _, history = fine_tune(model, train, val, None, TrainConfig(epochs=6))
print(f"baseline val top-1 {history[-1]['val_top1']:.3f}")

cfg = SensitivityConfig(accuracy_tolerance_pct=2.0, round_multiple=4)
profile = run_sensitivity(model, val, cfg)
print(f"threshold accuracy {profile.threshold_accuracy:.3f}")
for row in profile.per_layer:
    curve = "  ".join(f"{p:.0f}%:{a:.3f}" for p, a in row.sweep_points)
    print(f"{row.layer_id:18s} recorded {row.recorded_prune_pct:4.0f}%   {curve}")

plan = plan_channels(profile, model, cfg)
print(f"\nplan at recorded percentages: {plan.planned_macs:,} of {dense_macs(model):,} MACs")
for e in plan.per_layer:
    if e.kept_channels != e.original_channels:
        print(f"   {e.layer_id:18s} {e.original_channels:3d} -> {e.kept_channels:3d}")

budget = (dense_macs(model) + plan.planned_macs) // 2
cfg.target_macs = budget
scaled = plan_channels(profile, model, cfg)
print(f"\nbudget {budget:,} MACs: alpha {scaled.alpha:.4f}, planned {scaled.planned_macs:,}")
