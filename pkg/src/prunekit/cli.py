"""``prunekit`` command line.

Logs go to stderr; machine-readable results go to files named by ``--out``
or to stdout.  Every command is deterministic for fixed inputs and seeds.
"""

import argparse
import json
import logging
import os
import sys

from . import data as datamod
from .errors import PrunekitError
from .model_graph import build_mini_resnet, build_resnet50, build_resnet56_cifar, count_costs
from .model_io import load_model, save_model
from .pipeline import HybridConfig, run_hybrid
from .report import build_report, emit_report, stage_metrics, text_table
from .sensitivity import (
    SensitivityConfig, ChannelPlan, PlanEntry, export_plan_plotdata, export_profile,
    plan_channels, read_plan, read_profile, run_sensitivity,
)
from .surgery import slice_model
from .trainer import PruneConfig, TrainConfig, evaluate, fine_tune, write_history_csv

log = logging.getLogger("prunekit")

COMMANDS = ("train-baseline", "sensitivity", "plan", "prune-channels", "finetune",
            "prune-weights", "hybrid", "eval", "report", "plot-data")


def _sweep(text):
    try:
        start, end, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("--sweep expects START:END:STEP, e.g. 30:80:10") from None
    return start, end, step


def _shape(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers, e.g. 3,16,16") from None


def _data_parent():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("data")
    g.add_argument("--data", help="idx: IMAGES,LABELS; cifar10: comma-separated batch files")
    g.add_argument("--dataset-format", choices=("idx", "cifar10", "synth"), default="synth")
    g.add_argument("--synth-n", type=int, default=1200)
    g.add_argument("--synth-classes", type=int, default=10)
    g.add_argument("--synth-shape", type=_shape, default=(3, 16, 16))
    g.add_argument("--synth-noise", type=float, default=1.0)
    g.add_argument("--data-seed", type=int, default=0, help="seed of the synthetic generator and the train/val split")
    g.add_argument("--val-fraction", type=float, default=0.25)
    g.add_argument("--eval-cap", type=int, default=1024, help="validation samples used by the sensitivity sweep")
    return p


def _train_parent():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=5)
    g.add_argument("--lr", type=float, default=0.05)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--weight-decay", type=float, default=1e-4)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    return p


def _sens_parent():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("sensitivity")
    g.add_argument("--tolerance", type=float, default=2.0, help="allowed top-1 drop, in percentage points")
    g.add_argument("--sweep", type=_sweep, default=(30.0, 80.0, 10.0), help="START:END:STEP in percent")
    g.add_argument("--round-multiple", type=int, choices=(4, 8), default=4)
    g.add_argument("--target-macs", type=int)
    return p


def build_parser():
    parser = argparse.ArgumentParser(prog="prunekit", description="Hybrid channel + weight pruning toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    data_p, train_p, sens_p = _data_parent(), _train_parent(), _sens_parent()

    c = sub.add_parser("train-baseline", parents=[data_p, train_p], help="train a dense model")
    c.add_argument("--arch", choices=("mini", "resnet56", "resnet50"), default="mini")
    c.add_argument("--stages", type=int, default=3)
    c.add_argument("--blocks", type=int, default=1)
    c.add_argument("--base-channels", type=int, default=8)
    c.add_argument("--out", required=True)

    c = sub.add_parser("sensitivity", parents=[data_p, sens_p], help="per-layer channel sensitivity sweep")
    c.add_argument("--model", required=True)
    c.add_argument("--out", required=True, help="profile CSV")

    c = sub.add_parser("plan", parents=[sens_p], help="channel plan from a sensitivity profile")
    c.add_argument("--model", required=True)
    c.add_argument("--profile", required=True)
    c.add_argument("--out", required=True, help="plan CSV")

    c = sub.add_parser("prune-channels", help="slice planned channels out of a model")
    c.add_argument("--model", required=True)
    c.add_argument("--plan", required=True)
    c.add_argument("--out", required=True)

    c = sub.add_parser("finetune", parents=[data_p, train_p], help="dense fine-tuning")
    c.add_argument("--model", required=True)
    c.add_argument("--history")
    c.add_argument("--out", required=True)

    c = sub.add_parser("prune-weights", parents=[data_p, train_p], help="fine-tuning with dynamic weight masks")
    c.add_argument("--model", required=True)
    c.add_argument("--sigma", type=float, default=0.0)
    c.add_argument("--mask-update-every", type=int, default=1)
    c.add_argument("--history")
    c.add_argument("--out", required=True)

    c = sub.add_parser("hybrid", parents=[data_p, train_p, sens_p], help="sensitivity -> plan -> surgery -> recovery -> masked fine-tune -> report")
    c.add_argument("--model", required=True)
    c.add_argument("--sigma", type=float, default=0.0)
    c.add_argument("--recovery-epochs", type=int)
    c.add_argument("--out", required=True, help="output directory")

    c = sub.add_parser("eval", parents=[data_p], help="top-1/top-5 accuracy")
    c.add_argument("--model", required=True)

    c = sub.add_parser("report", parents=[data_p], help="cost/sparsity report")
    c.add_argument("--model", required=True)
    c.add_argument("--baseline", help="dense baseline model; enables the three-stage comparison")
    c.add_argument("--channel-model", help="channel-pruned model for the comparison")
    c.add_argument("--with-accuracy", action="store_true", help="evaluate accuracies on the validation split")
    c.add_argument("--format", choices=("json", "csv", "text"), default="json")
    c.add_argument("--out")

    c = sub.add_parser("plot-data", help="per-layer original vs kept output channels")
    src = c.add_mutually_exclusive_group(required=True)
    src.add_argument("--plan")
    src.add_argument("--model", help="pruned model; needs --baseline")
    c.add_argument("--baseline")
    c.add_argument("--out", required=True)
    return parser


def load_data(args, model=None):
    """Raw dataset -> (train, val), standardised with the model's stored stats
    when present, otherwise with statistics of the training split."""
    fmt = args.dataset_format
    if fmt == "synth":
        ds = datamod.synth_dataset(args.data_seed, args.synth_n, args.synth_classes, args.synth_shape,
                                   noise=args.synth_noise, standardize_data=False)
    else:
        if not args.data:
            raise PrunekitError(f"--data is required for --dataset-format {fmt}")
        paths = args.data.split(",")
        for p in paths:
            if not os.path.exists(p):
                raise FileNotFoundError(p)
        if fmt == "idx":
            if len(paths) != 2:
                raise PrunekitError("--data for idx must be IMAGES,LABELS")
            ds = datamod.load_idx(paths[0], paths[1], standardize_data=False)
        else:
            ds = datamod.load_cifar10_binary(paths, standardize_data=False)
    train, val = datamod.split(ds, args.val_fraction, args.data_seed)
    stats = (model.meta.get("normalization") if model is not None else None) or datamod.channel_stats(train.images)
    return datamod.standardize(train, stats), datamod.standardize(val, stats)


def _train_cfg(args, epochs=None):
    return TrainConfig(learning_rate=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                       epochs=args.epochs if epochs is None else epochs, batch_size=args.batch_size, seed=args.seed)


def _sens_cfg(args):
    start, end, step = args.sweep
    return SensitivityConfig(accuracy_tolerance_pct=args.tolerance, sweep_start_pct=start, sweep_end_pct=end,
                             sweep_step_pct=step, round_multiple=args.round_multiple, target_macs=args.target_macs,
                             eval_subset_cap=getattr(args, "eval_cap", 1024))


def _acc_json(acc):
    return json.dumps({"top1": acc.top1, "top5": acc.top5})


def cmd_train_baseline(args):
    if args.arch == "mini":
        if args.dataset_format == "synth":
            shape = args.synth_shape
        else:
            shape = (1, 28, 28) if args.dataset_format == "idx" else (3, 32, 32)
        classes = args.synth_classes if args.dataset_format == "synth" else 10
        model = build_mini_resnet(args.stages, args.blocks, args.base_channels, classes, shape, seed=args.seed)
    elif args.arch == "resnet56":
        model = build_resnet56_cifar(10, seed=args.seed)
    else:
        model = build_resnet50(1000, seed=args.seed)
    train, val = load_data(args)
    model.meta["normalization"] = train.stats
    trained, _, history = fine_tune(model, train, val, None, _train_cfg(args))
    save_model(trained, args.out)
    print(json.dumps(history[-1] if history else {}))


def cmd_sensitivity(args):
    model = load_model(args.model)
    _, val = load_data(args, model)
    profile = run_sensitivity(model, val, _sens_cfg(args))
    export_profile(profile, args.out)
    print(json.dumps({r.layer_id: r.recorded_prune_pct for r in profile.per_layer}))


def cmd_plan(args):
    model = load_model(args.model)
    profile = read_profile(args.profile)
    args.eval_cap = None
    plan = plan_channels(profile, model, _sens_cfg(args))
    export_plan_plotdata(plan, args.out)
    print(json.dumps({"alpha": plan.alpha, "planned_macs": plan.planned_macs,
                      "dense_macs": count_costs(model).total_macs}))


def cmd_prune_channels(args):
    model = load_model(args.model)
    thin, record = slice_model(model, read_plan(args.plan))
    save_model(thin, args.out)
    before, after = count_costs(model), count_costs(thin)
    print(json.dumps({"params": [before.total_params, after.total_params], "macs": [before.total_macs, after.total_macs]}))


def cmd_finetune(args):
    model = load_model(args.model)
    train, val = load_data(args, model)
    tuned, _, history = fine_tune(model, train, val, None, _train_cfg(args))
    if args.history:
        write_history_csv(history, args.history)
    save_model(tuned, args.out)
    print(json.dumps(history[-1] if history else {}))


def cmd_prune_weights(args):
    model = load_model(args.model)
    train, val = load_data(args, model)
    cfg = PruneConfig(sigma=args.sigma, mask_update_every=args.mask_update_every)
    tuned, masks, history = fine_tune(model, train, val, cfg, _train_cfg(args))
    if args.history:
        write_history_csv(history, args.history)
    save_model(tuned, args.out, masks=masks)
    c = count_costs(tuned)
    print(json.dumps({"sparsity_percent": c.sparsity_percent, "nonzero_params": c.nonzero_params}))


def cmd_hybrid(args):
    model = load_model(args.model)
    train, val = load_data(args, model)
    os.makedirs(args.out, exist_ok=True)
    rec_epochs = args.recovery_epochs if args.recovery_epochs is not None else args.epochs
    cfg = HybridConfig(
        sensitivity=_sens_cfg(args),
        recovery=_train_cfg(args, rec_epochs),
        sparse=_train_cfg(args),
        prune=PruneConfig(sigma=args.sigma),
    )
    res = run_hybrid(model, train, val, cfg)
    out = args.out
    export_profile(res.profile, os.path.join(out, "profile.csv"))
    export_plan_plotdata(res.plan, os.path.join(out, "plan.csv"))
    export_plan_plotdata(res.plan, os.path.join(out, "plot_data.csv"), protected=model.protected_layers())
    save_model(res.channel_model, os.path.join(out, "thinner.pkm"))
    save_model(res.final, os.path.join(out, "hybrid.pkm"), masks=res.masks)
    for name, hist in res.history.items():
        write_history_csv(hist, os.path.join(out, f"history_{name}.csv"))
    emit_report(res.report, os.path.join(out, "report.json"), "json")
    emit_report(res.report, os.path.join(out, "report.csv"), "csv")
    emit_report(res.report, os.path.join(out, "report.txt"), "text")
    print(json.dumps({"param_reduction_x": res.report.param_reduction_x, "mac_reduction_x": res.report.mac_reduction_x,
                      "hybrid_top1": res.report.hybrid.top1, "baseline_top1": res.report.baseline.top1}))


def cmd_eval(args):
    model = load_model(args.model)
    _, val = load_data(args, model)
    print(_acc_json(evaluate(model, val)))


def cmd_report(args):
    model = load_model(args.model)
    if args.baseline is None:
        c = count_costs(model)
        doc = {"total_params": c.total_params, "nonzero_params": c.nonzero_params,
               "sparsity_percent": c.sparsity_percent, "total_macs": c.total_macs,
               "effective_macs": c.effective_macs,
               "per_layer": [[r.layer_id, r.param_count, r.mac_count, r.nonzero_params] for r in c.per_layer]}
        if args.with_accuracy:
            _, val = load_data(args, model)
            doc["top1"], doc["top5"] = evaluate(model, val)
        text = json.dumps(doc, indent=2)
        if args.out:
            with open(args.out, "w") as f:
                f.write(text + "\n")
        else:
            print(text)
        return
    base = load_model(args.baseline)
    channel = load_model(args.channel_model) if args.channel_model else model
    accs = [None, None, None]
    if args.with_accuracy:
        _, val = load_data(args, base)
        accs = [evaluate(m, val) for m in (base, channel, model)]
    total = count_costs(base).total_params
    report = build_report(*(stage_metrics(m, total, a) for m, a in zip((base, channel, model), accs)))
    if args.out:
        emit_report(report, args.out, args.format)
    else:
        print(text_table(report), end="")


def cmd_plot_data(args):
    if args.plan:
        plan = read_plan(args.plan)
        export_plan_plotdata(plan, args.out)
        return
    if not args.baseline:
        raise PrunekitError("plot-data --model needs --baseline")
    base, pruned = load_model(args.baseline), load_model(args.model)
    entries = [PlanEntry(n.id, n.spec["out_channels"], pruned.node(n.id).spec["out_channels"]) for n in base.convs()]
    export_plan_plotdata(ChannelPlan(entries), args.out, protected=base.protected_layers())


HANDLERS = {
    "train-baseline": cmd_train_baseline, "sensitivity": cmd_sensitivity, "plan": cmd_plan,
    "prune-channels": cmd_prune_channels, "finetune": cmd_finetune, "prune-weights": cmd_prune_weights,
    "hybrid": cmd_hybrid, "eval": cmd_eval, "report": cmd_report, "plot-data": cmd_plot_data,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        HANDLERS[args.command](args)
    except FileNotFoundError as exc:
        log.error("missing input file: %s", exc.filename or exc)
        return 1
    except (PrunekitError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
