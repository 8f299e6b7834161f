import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from prunekit.cli import main
from prunekit.model_graph import build_mini_resnet, count_costs
from prunekit.model_io import load_model, save_model
from prunekit.sensitivity import read_plan

SYNTH = ["--synth-n", "480", "--synth-classes", "4", "--synth-shape", "3,8,8", "--synth-noise", "1.0"]


@pytest.fixture(scope="module")
def baseline(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    path = d / "base.pkm"
    rc = main(["train-baseline", *SYNTH, "--stages", "2", "--base-channels", "8", "--epochs", "4", "--out", str(path)])
    assert rc == 0
    return path


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "prunekit", *args], capture_output=True, text=True)


def test_unknown_command_and_flag():
    r = run_cli("frobnicate")
    assert r.returncode != 0 and "usage" in r.stderr
    r = run_cli("eval", "--model", "x.pkm", "--no-such-flag")
    assert r.returncode != 0 and "usage" in r.stderr


def test_missing_input(tmp_path, caplog):
    assert main(["eval", "--model", str(tmp_path / "absent.pkm")]) == 1
    assert "absent.pkm" in caplog.text


def test_malformed_model(tmp_path):
    bad = tmp_path / "bad.pkm"
    bad.write_bytes(b"PKMODEL\n\x03")
    assert main(["eval", "--model", str(bad)]) == 1


def test_eval_prints_json(baseline, capsys):
    assert main(["eval", "--model", str(baseline), *SYNTH]) == 0
    acc = json.loads(capsys.readouterr().out)
    assert acc["top1"] > 0.8 and acc["top5"] is None


def test_plan_dense_target_keeps_all(baseline, tmp_path, capsys):
    prof = tmp_path / "profile.csv"
    assert main(["sensitivity", "--model", str(baseline), *SYNTH, "--out", str(prof)]) == 0
    capsys.readouterr()
    dense = count_costs(load_model(baseline)).total_macs
    plan_path = tmp_path / "plan.csv"
    assert main(["plan", "--model", str(baseline), "--profile", str(prof), "--target-macs", str(dense), "--out", str(plan_path)]) == 0
    assert json.loads(capsys.readouterr().out)["alpha"] == 0.0
    assert all(e.kept_channels == e.original_channels for e in read_plan(plan_path).per_layer)


def test_staged_commands(baseline, tmp_path, capsys):
    prof, plan, thin, tuned, sparse = (tmp_path / n for n in ("p.csv", "plan.csv", "thin.pkm", "tuned.pkm", "sparse.pkm"))
    assert main(["sensitivity", "--model", str(baseline), *SYNTH, "--sweep", "30:60:15", "--out", str(prof)]) == 0
    assert main(["plan", "--model", str(baseline), "--profile", str(prof), "--round-multiple", "4", "--out", str(plan)]) == 0
    assert main(["prune-channels", "--model", str(baseline), "--plan", str(plan), "--out", str(thin)]) == 0
    assert main(["finetune", "--model", str(thin), *SYNTH, "--epochs", "1", "--out", str(tuned)]) == 0
    assert main(["prune-weights", "--model", str(tuned), *SYNTH, "--epochs", "1", "--sigma", "0", "--out", str(sparse)]) == 0
    capsys.readouterr()
    for e in read_plan(plan).per_layer:
        assert e.kept_channels == e.original_channels or e.kept_channels % 4 == 0
    assert main(["report", "--model", str(sparse), "--baseline", str(baseline), "--channel-model", str(tuned),
                 "--with-accuracy", *SYNTH]) == 0
    table = capsys.readouterr().out
    assert "Hybrid Pruning" in table and "% reduction" in table
    plot = tmp_path / "plot.csv"
    assert main(["plot-data", "--model", str(thin), "--baseline", str(baseline), "--out", str(plot)]) == 0
    rows = list(csv.DictReader(open(plot)))
    assert [r["layer_id"] for r in rows] == [n.id for n in load_model(baseline).convs()]


def test_report_half_zeroed(tmp_path, capsys):
    m = build_mini_resnet(2, 1, 8, 5, input_shape=(3, 8, 8))
    for n in m.nodes:
        for name, arr in n.params.items():
            if name == "bias":
                arr[:] = 0.1  # no incidental zeros
    before = count_costs(m)
    assert before.nonzero_params == before.total_params
    conv_weights = zeroed = 0
    rng = np.random.default_rng(0)
    for n in m.convs():
        flat = n.params["weight"].reshape(-1)
        flat[rng.permutation(flat.size)[: flat.size // 2]] = 0
        conv_weights += flat.size
        zeroed += flat.size // 2
    path = tmp_path / "half.pkm"
    save_model(m, path)
    out = tmp_path / "r.json"
    assert main(["report", "--model", str(path), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    conv_share = conv_weights / before.total_params
    assert doc["nonzero_params"] == before.total_params - zeroed
    assert doc["sparsity_percent"] == pytest.approx(100 * conv_share * 0.5, abs=0.05)
    assert doc["total_params"] == before.total_params


@pytest.mark.slow
def test_hybrid_end_to_end_reproducible(baseline, tmp_path, capsys):
    outs = []
    for run in ("a", "b"):
        d = tmp_path / run
        args = ["hybrid", "--model", str(baseline), *SYNTH, "--epochs", "2", "--recovery-epochs", "2",
                "--lr", "0.01", "--sigma", "0", "--out", str(d)]
        assert main(args) == 0
        outs.append(d)
    summary = json.loads(capsys.readouterr().out.splitlines()[0])
    assert summary["param_reduction_x"] > 1.0
    names = sorted(p.name for p in outs[0].iterdir())
    assert {"report.json", "report.csv", "report.txt", "plot_data.csv", "profile.csv", "plan.csv", "hybrid.pkm", "thinner.pkm"} <= set(names)
    for name in names:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name
    report = json.loads((outs[0] / "report.json").read_text())
    final, masks = load_model(outs[0] / "hybrid.pkm", with_masks=True)
    recount = count_costs(final)
    assert report["hybrid"]["params"] == recount.nonzero_params
    base = load_model(baseline)
    for lid in base.protected_layers():
        if base.node(lid).kind == "conv":
            assert final.node(lid).spec["out_channels"] == base.node(lid).spec["out_channels"]
    for r in csv.DictReader(open(outs[0] / "plot_data.csv")):
        if r["protected"] == "1":
            assert r["kept_channels"] == r["original_channels"]
