"""Parameter and MAC accounting for the reference ResNets.

Builds ResNet-50 and the bottleneck ResNet-56, prints their totals, and then
shows how pruning a block's middle conv moves the numbers.
"""

from prunekit import build_resnet50, build_resnet56_cifar, count_costs
from prunekit.model_graph import planned_macs
from prunekit.report import format_count

for name, model in [("ResNet-50 (224x224)", build_resnet50(1000)), ("ResNet-56 bottleneck (32x32)", build_resnet56_cifar(10))]:
    c = count_costs(model)
    print(f"{name}: {format_count(c.total_params)} params ({c.total_params:,}), {format_count(c.total_macs)} MACs")
    heavy = sorted(c.per_layer, key=lambda r: r.mac_count, reverse=True)[:3]
    for r in heavy:
        print(f"   {r.layer_id:28s} {r.mac_count:>13,} MACs")
    protected = model.protected_layers()
    print(f"   {len(model.prunable_convs())} convs may lose channels, {len(protected)} layers are protected")

# halving every prunable conv of ResNet-56
m = build_resnet56_cifar(10)
kept = {n.id: n.spec["out_channels"] // 2 for n in m.prunable_convs()}
before = count_costs(m).total_macs
after = planned_macs(m, kept)
print(f"\nResNet-56 with half the channels in every prunable conv: {before:,} -> {after:,} MACs ({before / after:.2f}x fewer)")
