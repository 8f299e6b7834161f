"""End-to-end hybrid pruning on a desk-sized problem.

Channel pruning from the sensitivity profile makes the network thinner, a
short fine-tune recovers accuracy, and masked fine-tuning with sigma=0 then
zeroes the small weights.  The comparison table is printed at the end.
"""

import logging

from prunekit import (
    HybridConfig, PruneConfig, SensitivityConfig, TrainConfig, build_mini_resnet, fine_tune, run_hybrid, split,
    synth_dataset,
)
from prunekit.data import fit_standardize
from prunekit.report import text_table

logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

raw = synth_dataset(0, 3000, 10, (3, 16, 16), noise=2.0, standardize_data=False)
rest, test = split(raw, 0.2, 1)
train, val = split(rest, 0.25, 2)
train, val, test = fit_standardize(train, val, test)

model = build_mini_resnet(3, 1, 16, 10, input_shape=(3, 16, 16))
model, _, _ = fine_tune(model, train, val, None, TrainConfig(epochs=8, learning_rate=0.05))

result = run_hybrid(model, train, val, HybridConfig(
    sensitivity=SensitivityConfig(accuracy_tolerance_pct=2.0, round_multiple=4),
    recovery=TrainConfig(epochs=4, learning_rate=0.01),
    sparse=TrainConfig(epochs=4, learning_rate=0.01),
    prune=PruneConfig(sigma=0.0),
), test=test)

print()
print(text_table(result.report))
for e in result.plan.per_layer:
    print(f"{e.layer_id:26s} {e.original_channels:3d} -> {e.kept_channels:3d}")
