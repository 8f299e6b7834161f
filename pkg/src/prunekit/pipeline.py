"""The two-stage hybrid pipeline: sensitivity-aware channel pruning, recovery
fine-tuning, then statistics-aware weight pruning on the thinner model."""

import logging
from dataclasses import dataclass, field

from .model_graph import count_costs
from .report import build_report, stage_metrics
from .sensitivity import SensitivityConfig, plan_channels, run_sensitivity
from .surgery import slice_model
from .trainer import PruneConfig, TrainConfig, evaluate, fine_tune

log = logging.getLogger(__name__)


@dataclass
class HybridConfig:
    sensitivity: SensitivityConfig = field(default_factory=SensitivityConfig)
    recovery: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=3, learning_rate=0.01))
    sparse: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=3, learning_rate=0.01))
    prune: PruneConfig = field(default_factory=PruneConfig)


@dataclass
class HybridResult:
    profile: object
    plan: object
    record: object
    thinner: object  # straight after surgery
    channel_model: object  # thinner model after recovery fine-tuning
    final: object  # thinner sparse model, masks baked in
    masks: dict
    report: object
    history: dict


def run_hybrid(model, train, val, config=None, test=None):
    """Run the full pipeline on a trained dense ``model``.

    ``val`` drives the sensitivity sweep and checkpoint selection.  Report
    accuracies come from ``test`` when given, else from ``val``.
    """
    config = config or HybridConfig()
    profile = run_sensitivity(model, val, config.sensitivity)
    plan = plan_channels(profile, model, config.sensitivity)
    thinner, record = slice_model(model, plan)
    log.info("surgery: %d -> %d params", count_costs(model).total_params, count_costs(thinner).total_params)

    history = {}
    channel_model = thinner
    if config.recovery.epochs > 0:
        channel_model, _, history["recovery"] = fine_tune(thinner, train, val, None, config.recovery)
    final, masks, history["sparse"] = fine_tune(channel_model, train, val, config.prune, config.sparse)

    eval_set = test if test is not None else val
    base_params = count_costs(model).total_params
    report = build_report(
        stage_metrics(model, base_params, evaluate(model, eval_set)),
        stage_metrics(channel_model, base_params, evaluate(channel_model, eval_set)),
        stage_metrics(final, base_params, evaluate(final, eval_set)),
    )
    return HybridResult(profile, plan, record, thinner, channel_model, final, masks, report, history)
