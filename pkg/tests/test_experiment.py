"""Experiment runner: dataset/partition plumbing, artifacts, determinism."""

import json
import os

import numpy as np
import pytest

from fedmotif.experiment import (
    REGIME_PRESETS,
    SPLITS,
    DataSpec,
    ExperimentError,
    ExperimentSpec,
    PartitionSpec,
    evaluate_params,
    make_dataset,
    make_partition,
    plot_sweep,
    plot_tasks,
    run,
    run_single,
    scores_for,
    steps_per_epoch,
    summary_csv,
    sweep,
    sweep_csv,
    to_json,
    trend_spec,
    write_manifest,
)
from fedmotif.metrics import evaluate, macro
from fedmotif.model import ArchSpec, ModelParams, forward_full, load_params


def tiny_spec(**kw):
    base = dict(
        data=DataSpec(num_nodes=64, avg_degree=4.0),
        partition=PartitionSpec(method="kway", num_clients=2),
        regimes=["local", "fedavg_le"],
        width=4,
        layers=1,
        lr=0.01,
        epochs=2,
        batch_size=None,
        patience=None,
        seeds=[0],
    )
    base.update(kw)
    return ExperimentSpec(**base)


def seed_inputs(spec, seed=0):
    import dataclasses

    dataset = make_dataset(dataclasses.replace(spec.data, rng_seed=seed))
    parts = {
        s: make_partition(g, dataclasses.replace(spec.partition, rng_seed=seed))
        for s, g in dataset.items()
    }
    return dataset, parts


class TestSpecs:
    def test_unknown_regime_rejected(self):
        with pytest.raises(ExperimentError, match="unknown regime"):
            tiny_spec(regimes=["fedavg", "mystery"])

    def test_unknown_partition_method_rejected(self):
        with pytest.raises(ExperimentError, match="partition method"):
            PartitionSpec(method="metis")

    def test_every_preset_names_a_training_regime(self):
        from fedmotif.training import REGIMES

        for name, (regime, mode) in REGIME_PRESETS.items():
            assert regime in REGIMES, name

    def test_trend_spec_shape(self):
        spec = trend_spec()
        assert spec.data.num_nodes == 1024
        assert spec.partition.num_clients == 8
        assert spec.partition.method == "kway"
        assert set(spec.regimes) >= {"local", "fedavg", "fedavg_le", "syncsgd_le"}
        assert spec.seeds == [0, 1, 2]


class TestDataset:
    def test_three_splits_with_constant_features(self):
        spec = tiny_spec()
        dataset = make_dataset(spec.data)
        assert set(dataset) == set(SPLITS)
        for g in dataset.values():
            assert g.d_in == 1
            assert np.all(g.node_features == 1.0)

    def test_splits_are_distinct_graphs(self):
        dataset = make_dataset(DataSpec(num_nodes=64, avg_degree=4.0))
        edge_sets = {
            split: set(zip(g.src.tolist(), g.dst.tolist()))
            for split, g in dataset.items()
        }
        assert edge_sets["train"] != edge_sets["val"]
        assert edge_sets["train"] != edge_sets["test"]

    def test_same_seed_same_dataset(self):
        a = make_dataset(DataSpec(num_nodes=64, avg_degree=4.0, rng_seed=3))
        b = make_dataset(DataSpec(num_nodes=64, avg_degree=4.0, rng_seed=3))
        for split in SPLITS:
            assert np.array_equal(a[split].src, b[split].src)
            assert np.array_equal(a[split].labels, b[split].labels)

    def test_partition_methods_cover_nodes(self):
        g = make_dataset(DataSpec(num_nodes=64, avg_degree=4.0))["train"]
        for method in ("louvain", "kway"):
            part = make_partition(g, PartitionSpec(method=method, num_clients=3))
            assert sum(len(v) for v in part.v_own) == g.num_nodes


class TestStepsPerEpoch:
    def test_centralized_counts_batches(self):
        assert steps_per_epoch(None, 100, 30) == 4
        assert steps_per_epoch(None, 100, None) == 1

    def test_lockstep_takes_the_max_over_clients(self):
        g = make_dataset(DataSpec(num_nodes=64, avg_degree=4.0))["train"]
        part = make_partition(g, PartitionSpec(method="louvain", num_clients=3))
        s = steps_per_epoch(part, g.num_nodes, 8)
        expect = max(int(np.ceil(len(v) / 8)) for v in part.v_own)
        assert s == expect


class TestRunSingle:
    def test_row_fields_and_ledger(self):
        spec = tiny_spec(regimes=["local", "fedavg", "fedavg_le", "syncsgd_le"])
        dataset, parts = seed_inputs(spec)
        rows = {}
        for name in spec.regimes:
            row, result = run_single(name, dataset, parts, spec, 0)
            rows[name] = row
            assert row["regime"] == name
            assert row["seed"] == 0
            assert row["macro"] is None or 0.0 <= row["macro"] <= 1.0
            assert set(row["tasks"]) == {"C2", "C3", "C4", "C5", "C6", "SG", "BC"}
            assert row["stop_gradient_at_received_rows"] is True
            assert row["epochs_run"] == spec.epochs
        # placeholder regimes never put an embedding on the wire
        assert rows["local"]["ledger"]["total_embeddings"] == 0
        assert rows["fedavg"]["ledger"]["total_embeddings"] == 0
        assert rows["fedavg_le"]["ledger"]["total_embeddings"] > 0
        assert "comm" in rows["fedavg_le"]
        assert "comm" not in rows["fedavg"]
        assert "comm" not in rows["local"]

    def test_centralized_has_no_partition_or_traffic(self):
        spec = tiny_spec(regimes=["centralized"])
        dataset, parts = seed_inputs(spec)
        row, result = run_single("centralized", dataset, parts, spec, 0)
        assert row["ledger"]["total_embeddings"] == 0
        assert "comm" not in row

    def test_same_seed_same_row(self):
        spec = tiny_spec(regimes=["fedavg_le"])
        dataset, parts = seed_inputs(spec)
        row1, _ = run_single("fedavg_le", dataset, parts, spec, 0)
        row2, _ = run_single("fedavg_le", dataset, parts, spec, 0)
        assert to_json(row1) == to_json(row2)

    def test_centralized_beats_always_positive_floor(self):
        # prevalence mean is what constant scores earn by the tie-grouped AP
        spec = tiny_spec(
            data=DataSpec(num_nodes=256, avg_degree=6.0),
            regimes=["centralized"],
            width=8,
            layers=2,
            epochs=30,
            batch_size=64,
        )
        dataset, parts = seed_inputs(spec)
        row, _ = run_single("centralized", dataset, parts, spec, 0)
        g_test = dataset["test"]
        floor = float(np.mean([g_test.labels[:, t].mean() for t in range(7)]))
        assert row["macro"] > floor + 0.05

    def test_stale_regime_runs_and_reports_traffic(self):
        spec = tiny_spec(regimes=["fedavg_stale"], epochs=2)
        dataset, parts = seed_inputs(spec)
        row, _ = run_single("fedavg_stale", dataset, parts, spec, 0)
        assert row["ledger"]["total_embeddings"] > 0


class TestScoresFor:
    def test_centralized_scores_match_forward_full(self):
        spec = tiny_spec()
        dataset, _ = seed_inputs(spec)
        g = dataset["test"]
        params = ModelParams.init(spec.arch(g), 0)
        got = scores_for(params, g, None, "placeholder_zero")
        assert np.array_equal(got, forward_full(params, g).logits)

    def test_fresh_distributed_scores_match_centralized(self):
        spec = tiny_spec()
        dataset, parts = seed_inputs(spec)
        g = dataset["test"]
        params = ModelParams.init(spec.arch(g), 0)
        got = scores_for(params, g, parts["test"], "fresh_layerwise")
        assert np.array_equal(got, forward_full(params, g).logits)

    def test_evaluate_params_returns_reports_and_macro(self):
        spec = tiny_spec()
        dataset, parts = seed_inputs(spec)
        g = dataset["test"]
        params = ModelParams.init(spec.arch(g), 0)
        reports, m = evaluate_params(params, g, parts["test"], "fresh_layerwise")
        assert len(reports) == 7
        assert m is None or 0.0 <= m <= 1.0


class TestRunAndArtifacts:
    def test_bundle_shape_and_summary(self, tmp_path):
        spec = tiny_spec(seeds=[0, 1], out_dir=str(tmp_path))
        bundle = run(spec)
        assert len(bundle["rows"]) == 2 * len(spec.regimes)
        for name in spec.regimes:
            assert bundle["summary"][name]["seeds"] == 2
        assert "delta_vs_local" in bundle["summary"]["fedavg_le"]
        assert (tmp_path / "result.json").exists()
        assert (tmp_path / "summary.csv").exists()
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        for rel in manifest["artifacts"]:
            assert (tmp_path / rel).exists()

    def test_checkpoints_round_trip(self, tmp_path):
        spec = tiny_spec(regimes=["fedavg_le"], out_dir=str(tmp_path))
        run(spec)
        p = load_params(str(tmp_path / "fedavg_le_seed0.ckpt"))
        assert np.all(np.isfinite(p.flat))

    def test_result_json_is_byte_identical_across_reruns(self, tmp_path):
        spec1 = tiny_spec(out_dir=str(tmp_path / "a"))
        spec2 = tiny_spec(out_dir=str(tmp_path / "b"))
        run(spec1)
        run(spec2)
        a = (tmp_path / "a" / "result.json").read_bytes()
        b = (tmp_path / "b" / "result.json").read_bytes()
        assert a == b

    def test_summary_csv_layout(self, tmp_path):
        spec = tiny_spec(out_dir=str(tmp_path))
        bundle = run(spec)
        lines = summary_csv(bundle).strip().splitlines()
        header = lines[0].split(",")
        assert header[0] == "regime"
        assert header[1:8] == ["C2", "C3", "C4", "C5", "C6", "SG", "BC"]
        assert header[-4:] == [
            "macro_mean",
            "macro_std",
            "delta_vs_local",
            "delta_vs_fedavg",
        ]
        assert len(lines) == 1 + len(spec.regimes)


class TestSweep:
    def test_one_row_per_count_regime_seed(self, tmp_path):
        spec = tiny_spec(regimes=["local", "fedavg_le"], out_dir=str(tmp_path))
        out = sweep(spec, [2, 3])
        assert len(out["rows"]) == 2 * 2 * 1
        seen = {(r["num_clients"], r["regime"]) for r in out["rows"]}
        assert seen == {(2, "local"), (2, "fedavg_le"), (3, "local"), (3, "fedavg_le")}
        csv_text = (tmp_path / "sweep.csv").read_text()
        lines = csv_text.strip().splitlines()
        assert lines[0] == "num_clients,regime,seed,macro"
        assert len(lines) == 1 + len(out["rows"])

    def test_sweep_json_written(self, tmp_path):
        spec = tiny_spec(regimes=["local"], out_dir=str(tmp_path))
        sweep(spec, [2])
        data = json.loads((tmp_path / "sweep.json").read_text())
        assert data["client_counts"] == [2]


class TestPlots:
    def test_sweep_plot_writes_png(self, tmp_path):
        spec = tiny_spec(regimes=["local"])
        out = sweep(spec, [2])
        path = plot_sweep(out, str(tmp_path / "sweep.png"), ceiling=0.9)
        assert os.path.getsize(path) > 0

    def test_task_plot_writes_png(self, tmp_path):
        spec = tiny_spec()
        dataset, parts = seed_inputs(spec)
        rows = [run_single(n, dataset, parts, spec, 0)[0] for n in spec.regimes]
        path = plot_tasks(rows, str(tmp_path / "tasks.png"))
        assert os.path.getsize(path) > 0

    def test_task_plot_rejects_mismatched_tasks(self, tmp_path):
        spec = tiny_spec()
        dataset, parts = seed_inputs(spec)
        row, _ = run_single("local", dataset, parts, spec, 0)
        broken = dict(row)
        broken["tasks"] = {k: v for k, v in row["tasks"].items() if k != "C2"}
        with pytest.raises(ExperimentError, match="disagree"):
            plot_tasks([row, broken], str(tmp_path / "bad.png"))

    def test_empty_sweep_rejected(self, tmp_path):
        with pytest.raises(ExperimentError, match="empty"):
            plot_sweep({"rows": []}, str(tmp_path / "no.png"))


class TestJsonFormatting:
    def test_converts_numpy_and_fraction(self):
        from fractions import Fraction

        text = to_json(
            {
                "i": np.int64(3),
                "f": np.float64(0.5),
                "a": np.arange(2),
                "q": Fraction(1, 3),
            }
        )
        data = json.loads(text)
        assert data == {"i": 3, "f": 0.5, "a": [0, 1], "q": "1/3"}
        assert text.endswith("\n")

    def test_rejects_unknown_types(self):
        with pytest.raises(TypeError):
            to_json({"x": object()})

    def test_keys_sorted(self):
        text = to_json({"b": 1, "a": 2})
        assert text.index('"a"') < text.index('"b"')

    def test_manifest_paths_relative_and_sorted(self, tmp_path):
        spec = tiny_spec()
        f1 = tmp_path / "z.csv"
        f2 = tmp_path / "a.json"
        f1.write_text("x")
        f2.write_text("y")
        write_manifest(str(tmp_path), [str(f1), str(f2)], spec)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["artifacts"] == ["a.json", "z.csv"]
        assert "out_dir" not in manifest["spec"]
