"""End-to-end checks of the command-line front end.

Each test drives ``cli.main`` with real argv lists against a temp directory,
so flags, config merging, artifact layout, and exit codes are all exercised
through the same path a shell user takes.
"""

import json
import os

import numpy as np
import pytest

from fedmotif import cli
from fedmotif.graph import load as load_graph
from fedmotif.model import load_params


def run_cli(*argv):
    return cli.main(list(argv))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated graph + partition shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    part = str(root / "part")
    assert run_cli("gen", "--nodes", "96", "--degree", "4.0", "--seed", "0",
                   "--out", data) == 0
    assert run_cli("partition", "--graph", f"{data}/graph.txt", "--method",
                   "kway", "--clients", "3", "--seed", "0", "--out", part) == 0
    return {"root": root, "graph": f"{data}/graph.txt", "data": data,
            "partition": f"{part}/partition.txt", "part": part}


class TestGen:
    def test_artifacts_and_manifest(self, workspace):
        names = sorted(os.listdir(workspace["data"]))
        assert names == ["graph.txt", "instances.json", "manifest.json"]
        manifest = json.load(open(f"{workspace['data']}/manifest.json"))
        assert manifest["artifacts"] == ["graph.txt", "instances.json"]
        assert manifest["config"]["nodes"] == 96

    def test_sidecar_lists_instances_and_prevalence(self, workspace):
        side = json.load(open(f"{workspace['data']}/instances.json"))
        assert side["num_nodes"] == 96
        assert side["instances"], "generator planted nothing"
        first = side["instances"][0]
        assert set(first) == {"task", "nodes", "edges"}
        assert first["nodes"] == sorted(first["nodes"])
        assert set(side["prevalence_pct"]) == {"C2", "C3", "C4", "C5", "C6", "SG", "BC"}

    def test_graph_loads_back(self, workspace):
        g = load_graph(workspace["graph"])
        assert g.num_nodes == 96
        assert g.labels.shape == (96, 7)

    def test_same_seed_same_bytes(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (a, b):
            assert run_cli("gen", "--nodes", "48", "--out", out) == 0
        assert open(f"{a}/graph.txt", "rb").read() == open(f"{b}/graph.txt", "rb").read()
        assert open(f"{a}/instances.json").read() == open(f"{b}/instances.json").read()


class TestPartition:
    def test_summary_counts(self, workspace):
        s = json.load(open(f"{workspace['part']}/summary.json"))
        assert s["num_clients"] == 3
        assert sum(s["owned_nodes"]) == 96
        assert 0 < s["cut_edges"] <= s["total_edges"]
        assert s["cut_fraction"] == s["cut_edges"] / s["total_edges"]
        assert len(s["remote_nodes"]) == 3

    def test_pairs_file_covers_every_node(self, workspace):
        lines = open(workspace["partition"]).read().splitlines()
        assert lines[0] == "clients=3"
        assert len(lines) == 1 + 96

    def test_unknown_method_rejected(self, workspace, capsys):
        code = run_cli("partition", "--graph", workspace["graph"], "--method",
                       "metis", "--clients", "3", "--out", "nowhere")
        assert code == 2  # argparse rejects the choice before any work


class TestConfigMerging:
    def test_flags_beat_config(self, workspace, tmp_path):
        cfgp = tmp_path / "gen.json"
        cfgp.write_text(json.dumps({"nodes": 32, "seed": 5}))
        out = str(tmp_path / "out")
        assert run_cli("gen", "--config", str(cfgp), "--nodes", "48",
                       "--out", out) == 0
        manifest = json.load(open(f"{out}/manifest.json"))
        assert manifest["config"]["nodes"] == 48  # flag wins
        assert manifest["config"]["seed"] == 5  # config fills the gap

    def test_config_can_satisfy_required(self, tmp_path):
        cfgp = tmp_path / "gen.json"
        cfgp.write_text(json.dumps({"nodes": 32, "out": str(tmp_path / "o")}))
        assert run_cli("gen", "--config", str(cfgp)) == 0

    def test_unknown_key_is_validation_error(self, tmp_path, capsys):
        cfgp = tmp_path / "gen.json"
        cfgp.write_text(json.dumps({"nodes": 32, "nodez": 1}))
        assert run_cli("gen", "--config", str(cfgp), "--out", str(tmp_path)) == 2
        assert "nodez" in capsys.readouterr().err

    def test_malformed_json_is_validation_error(self, tmp_path):
        cfgp = tmp_path / "gen.json"
        cfgp.write_text("{not json")
        assert run_cli("gen", "--config", str(cfgp), "--out", str(tmp_path)) == 2

    def test_config_choice_still_validated(self, workspace, tmp_path):
        cfgp = tmp_path / "p.json"
        cfgp.write_text(json.dumps({"method": "metis"}))
        code = run_cli("partition", "--config", str(cfgp), "--graph",
                       workspace["graph"], "--clients", "2",
                       "--out", str(tmp_path / "o"))
        assert code == 2

    def test_missing_required_reported(self, capsys):
        assert run_cli("gen", "--nodes", "32") == 2
        assert "--out" in capsys.readouterr().err


class TestTrain:
    def test_centralized_writes_checkpoint_history_ledger(self, workspace, tmp_path):
        out = str(tmp_path / "run")
        assert run_cli("train", "--graph", workspace["graph"], "--regime",
                       "centralized", "--epochs", "2", "--batch-size", "0",
                       "--patience", "0", "--width", "4", "--layers", "1",
                       "--out", out) == 0
        assert sorted(os.listdir(out)) == [
            "checkpoint.ckpt", "history.json", "ledger.csv", "manifest.json"]
        hist = json.load(open(f"{out}/history.json"))
        assert hist["epochs_run"] == 2 and len(hist["loss"]) == 2
        params = load_params(f"{out}/checkpoint.ckpt")
        assert params.arch.width == 4
        # centralized training moves no embeddings
        assert open(f"{out}/ledger.csv").read().strip() == \
            "step,layer,client,embeddings_sent,bytes"

    def test_federated_fresh_records_traffic(self, workspace, tmp_path):
        out = str(tmp_path / "run")
        assert run_cli("train", "--graph", workspace["graph"], "--partition",
                       workspace["partition"], "--regime", "syncsgd",
                       "--policy", "fresh_layerwise", "--epochs", "2",
                       "--batch-size", "0", "--patience", "0", "--width", "4",
                       "--layers", "2", "--out", out) == 0
        rows = open(f"{out}/ledger.csv").read().splitlines()
        assert rows[0] == "step,layer,client,embeddings_sent,bytes"
        assert len(rows) > 1

    def test_stale_policy_trains(self, workspace, tmp_path):
        out = str(tmp_path / "run")
        assert run_cli("train", "--graph", workspace["graph"], "--partition",
                       workspace["partition"], "--regime", "fedavg",
                       "--policy", "stale_epoch", "--epochs", "2",
                       "--batch-size", "0", "--patience", "0", "--width", "4",
                       "--layers", "1", "--out", out) == 0
        rows = open(f"{out}/ledger.csv").read().splitlines()
        assert len(rows) > 1  # per-epoch snapshots still move rows

    def test_stale_policy_rejected_at_eval(self, workspace, tmp_path):
        code = run_cli("eval", "--checkpoint", "x.ckpt", "--graph",
                       workspace["graph"], "--policy", "stale_epoch",
                       "--out", str(tmp_path / "o"))
        assert code == 2

    def test_local_regime_writes_per_client_checkpoints(self, workspace, tmp_path):
        out = str(tmp_path / "run")
        assert run_cli("train", "--graph", workspace["graph"], "--partition",
                       workspace["partition"], "--regime", "local", "--epochs",
                       "1", "--batch-size", "0", "--patience", "0", "--width",
                       "4", "--layers", "1", "--out", out) == 0
        ckpts = [n for n in os.listdir(out) if n.endswith(".ckpt")]
        assert sorted(ckpts) == [f"checkpoint_client{c}.ckpt" for c in range(3)]

    def test_federated_regime_requires_partition(self, workspace, tmp_path, capsys):
        code = run_cli("train", "--graph", workspace["graph"], "--regime",
                       "fedavg", "--patience", "0", "--epochs", "1",
                       "--out", str(tmp_path / "o"))
        assert code == 2
        assert "--partition" in capsys.readouterr().err

    def test_patience_requires_val_graph(self, workspace, tmp_path):
        code = run_cli("train", "--graph", workspace["graph"], "--regime",
                       "centralized", "--epochs", "2", "--patience", "1",
                       "--out", str(tmp_path / "o"))
        assert code == 2

    def test_paths_checked_before_any_work(self, workspace, tmp_path):
        out = str(tmp_path / "o")
        code = run_cli("train", "--graph", workspace["graph"], "--partition",
                       "does/not/exist", "--regime", "fedavg", "--epochs", "1",
                       "--patience", "0", "--out", out)
        assert code == 2
        assert not os.path.exists(out)  # failed before writing anything


@pytest.fixture(scope="module")
def checkpoint(workspace, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("train"))
    assert run_cli("train", "--graph", workspace["graph"], "--partition",
                   workspace["partition"], "--regime", "fedavg", "--policy",
                   "fresh_layerwise", "--epochs", "2", "--batch-size", "0",
                   "--patience", "0", "--width", "4", "--layers", "2",
                   "--out", out) == 0
    return f"{out}/checkpoint.ckpt"


@pytest.fixture(scope="module")
def sweep_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("sweep"))
    assert run_cli("sweep", "--nodes", "64", "--degree", "4.0", "--clients",
                   "2", "3", "--regimes", "local", "fedavg_le", "--epochs",
                   "2", "--batch-size", "0", "--patience", "0", "--width",
                   "4", "--layers", "1", "--seeds", "0", "--out", out) == 0
    return out


class TestEval:
    def test_report_csv_and_summary(self, workspace, checkpoint, tmp_path):
        out = str(tmp_path / "eval")
        assert run_cli("eval", "--checkpoint", checkpoint, "--graph",
                       workspace["graph"], "--partition",
                       workspace["partition"], "--out", out) == 0
        lines = open(f"{out}/report.csv").read().splitlines()
        assert lines[0] == "task,prevalence,pr_auc"
        assert len(lines) == 8
        summary = json.load(open(f"{out}/summary.json"))
        assert 0.0 <= summary["macro_pr_auc"] <= 1.0
        assert summary["policy"] == "fresh_layerwise"
        # fresh inference moves every boundary row once per layer
        per_layer = summary["exchange"]["per_layer"]
        assert set(per_layer) == {"0", "1"}
        assert len(set(per_layer.values())) == 1

    def test_centralized_eval_has_no_exchange(self, workspace, checkpoint, tmp_path):
        out = str(tmp_path / "eval")
        assert run_cli("eval", "--checkpoint", checkpoint, "--graph",
                       workspace["graph"], "--out", out) == 0
        summary = json.load(open(f"{out}/summary.json"))
        assert summary["policy"] == "centralized"
        assert "exchange" not in summary

    def test_placeholder_eval_scores_differ_from_fresh(self, workspace, checkpoint, tmp_path):
        fresh, ph = str(tmp_path / "f"), str(tmp_path / "p")
        for out, policy in ((fresh, "fresh_layerwise"), (ph, "placeholder_zero")):
            assert run_cli("eval", "--checkpoint", checkpoint, "--graph",
                           workspace["graph"], "--partition",
                           workspace["partition"], "--policy", policy,
                           "--out", out) == 0
        assert open(f"{fresh}/report.csv").read() != open(f"{ph}/report.csv").read()

    def test_missing_checkpoint_is_validation_error(self, workspace, tmp_path):
        assert run_cli("eval", "--checkpoint", "nope.ckpt", "--graph",
                       workspace["graph"], "--out", str(tmp_path)) == 2


class TestSweepAndPlot:
    def test_one_row_per_point_and_regime(self, sweep_dir):
        bundle = json.load(open(f"{sweep_dir}/sweep.json"))
        assert len(bundle["rows"]) == 4  # 2 counts x 2 regimes x 1 seed
        assert {r["num_clients"] for r in bundle["rows"]} == {2, 3}
        csv_rows = open(f"{sweep_dir}/sweep.csv").read().splitlines()
        assert csv_rows[0] == "num_clients,regime,seed,macro"
        assert len(csv_rows) == 5

    def test_plot_writes_figures_and_manifest(self, sweep_dir, tmp_path):
        out = str(tmp_path / "figs")
        assert run_cli("plot", "--sweep", f"{sweep_dir}/sweep.json", "--ceiling",
                       "0.9", "--results", f"{sweep_dir}/sweep.json",
                       "--out", out) == 0
        manifest = json.load(open(f"{out}/manifest.json"))
        assert manifest["artifacts"] == ["sweep.png", "tasks.png"]
        assert os.path.getsize(f"{out}/sweep.png") > 0

    def test_plot_without_inputs_fails(self, tmp_path):
        assert run_cli("plot", "--out", str(tmp_path / "o")) == 2

    def test_plot_rejects_non_bundle(self, tmp_path):
        bogus = tmp_path / "x.json"
        bogus.write_text("{}")
        assert run_cli("plot", "--sweep", str(bogus),
                       "--out", str(tmp_path / "o")) == 2


class TestVerify:
    def test_pass_prints_verdicts_and_exits_zero(self, tmp_path, capsys):
        out = str(tmp_path / "v")
        code = run_cli("verify", "--suite", "determinism", "--instances", "2",
                       "--out", out)
        captured = capsys.readouterr().out
        assert code == 0
        assert "PASS  all suites" in captured
        assert open(f"{out}/verify.txt").read() == captured

    def test_failure_exits_three(self, monkeypatch):
        from fedmotif.verify import PropertyResult, SuiteReport

        def fake_verify(suite, rng_seed=0, instances=None):
            return SuiteReport(suite, [PropertyResult(suite, "x", False, "boom")], 0.0)

        monkeypatch.setattr(cli.verification, "verify", fake_verify)
        assert run_cli("verify", "--suite", "gap") == 3

    def test_unknown_suite_rejected(self):
        assert run_cli("verify", "--suite", "nonsense") == 2


class TestDeterminism:
    def test_same_flags_same_result_bytes(self, tmp_path):
        outs = [str(tmp_path / n) for n in ("a", "b")]
        for out in outs:
            assert run_cli("sweep", "--nodes", "64", "--degree", "4.0",
                           "--clients", "2", "--regimes", "local", "--epochs",
                           "1", "--batch-size", "0", "--patience", "0",
                           "--width", "4", "--layers", "1", "--seeds", "0",
                           "--out", out) == 0
        a = open(f"{outs[0]}/sweep.json", "rb").read()
        b = open(f"{outs[1]}/sweep.json", "rb").read()
        assert a == b
