"""End-to-end experiment runner: generate, partition, train, evaluate, report.

Evaluation protocol: the test graph is partitioned the same way as the
training graph and every regime runs inference through the same distributed
forward it trained with, so a regime that trained without exchange is also
evaluated without it.  Stale mode warms its cache with one snapshot pass
before the scored forward (epoch-2 semantics).  Owned logits are gathered
into one global score matrix and scored against the full label matrix.

Result JSON is deterministic for a fixed spec and seed: keys are sorted and
no timestamps are embedded.
"""

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import List, Optional

import numpy as np

from . import graph as graphmod
from .generate import GenConfig, default_pattern_counts, generate, prevalence
from .metrics import CommReport, evaluate, macro, reports_to_csv
from .model import ArchSpec, ModelParams, forward_full, save_params
from .partition import Partition, balanced_kway, from_owner, louvain
from .protocol import (
    FRESH,
    PLACEHOLDER,
    STALE,
    ExchangePlan,
    RemotePolicy,
    StaleCache,
    build_clients,
    distributed_forward,
    snapshot_epoch,
)
from .training import TrainConfig, node_batches, train

SPLITS = ("train", "val", "test")

# presentation name -> (training regime, remote policy mode)
REGIME_PRESETS = {
    "centralized": ("centralized", PLACEHOLDER),
    "local": ("local", PLACEHOLDER),
    "local_le": ("local", FRESH),
    "fedavg": ("fedavg", PLACEHOLDER),
    "fedavg_le": ("fedavg", FRESH),
    "fedavg_stale": ("fedavg", STALE),
    "syncsgd_le": ("syncsgd", FRESH),
}


class ExperimentError(RuntimeError):
    pass


@dataclass
class DataSpec:
    num_nodes: int = 1024
    avg_degree: float = 6.0
    rng_seed: int = 0
    pattern_counts: Optional[dict] = None  # None = reference mix, scaled

    def config(self, split: str) -> GenConfig:
        counts = self.pattern_counts
        if counts is None:
            counts = default_pattern_counts(self.num_nodes)
        return GenConfig(
            self.num_nodes, self.avg_degree, counts, rng_seed=self.rng_seed, split=split
        )


def make_dataset(dspec: DataSpec) -> dict:
    """Three independent splits with the constant feature vector x_v = 1."""
    out = {}
    for split in SPLITS:
        g, _ = generate(dspec.config(split))
        out[split] = graphmod.constant_features(g, 1.0)
    return out


@dataclass
class PartitionSpec:
    method: str = "louvain"  # louvain | kway
    num_clients: int = 8
    imbalance_eps: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.method not in ("louvain", "kway"):
            raise ExperimentError(f"unknown partition method {self.method!r}")


def make_partition(g, pspec: PartitionSpec) -> Partition:
    if pspec.method == "louvain":
        return louvain(g, pspec.num_clients, rng_seed=pspec.rng_seed)
    return balanced_kway(
        g, pspec.num_clients, imbalance_eps=pspec.imbalance_eps, rng_seed=pspec.rng_seed
    )


@dataclass
class ExperimentSpec:
    data: DataSpec = field(default_factory=DataSpec)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    regimes: List[str] = field(
        default_factory=lambda: ["local", "fedavg", "fedavg_le", "syncsgd_le"]
    )
    width: int = 16
    layers: int = 2
    direction: str = "both"
    lr: float = 0.01
    epochs: int = 100
    local_epochs: int = 1
    batch_size: Optional[int] = 128
    patience: Optional[int] = 10
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    out_dir: Optional[str] = None

    def __post_init__(self):
        for name in self.regimes:
            if name not in REGIME_PRESETS:
                raise ExperimentError(f"unknown regime {name!r}")

    def arch(self, g) -> ArchSpec:
        return ArchSpec(
            d_in=g.d_in, width=self.width, layers=self.layers, direction=self.direction
        )


def trend_spec(out_dir: Optional[str] = None) -> ExperimentSpec:
    """Reference configuration for the regime-ordering run (1024 nodes, k=8).

    Calibrated so every regime trains stably under plain SGD and the regimes
    separate: at 100 epochs x 4 batches, sync-SGD has converged while
    fully-local has not, and five local epochs per round cost plain FedAvg
    roughly 3pp to parameter drift that fresh per-layer exchange compensates.
    The balanced k-way split keeps the cut dense (~62% of edges), which is
    what makes exchange freshness matter at all at this scale.
    """
    return ExperimentSpec(
        data=DataSpec(num_nodes=1024, avg_degree=6.0),
        partition=PartitionSpec(method="kway", num_clients=8),
        regimes=["local", "fedavg", "fedavg_le", "fedavg_stale", "syncsgd_le"],
        width=16,
        layers=2,
        lr=0.01,
        epochs=100,
        local_epochs=5,
        batch_size=32,
        patience=None,
        seeds=[0, 1, 2],
        out_dir=out_dir,
    )


def _policy_instance(mode: str, clients, params, plan, executor=None) -> RemotePolicy:
    if mode == FRESH:
        return RemotePolicy.fresh()
    if mode == PLACEHOLDER:
        return RemotePolicy.placeholder_zero()
    # stale: warp the cache to the current parameters with one snapshot pass
    cold = distributed_forward(
        params, clients, RemotePolicy.stale(StaleCache()), plan=plan, executor=executor
    )
    cache = snapshot_epoch(clients, cold.banks, plan)
    return RemotePolicy(mode=STALE, cache=cache)


def scores_for(params, g, part, mode, executor=None) -> np.ndarray:
    """Global logit matrix under a regime's own inference protocol."""
    if part is None:
        return forward_full(params, g).logits
    clients = build_clients(g, part)
    plan = ExchangePlan.from_partition(part)
    policy = _policy_instance(mode, clients, params, plan, executor)
    fwd = distributed_forward(params, clients, policy, plan=plan, executor=executor)
    n_tasks = fwd.states[0].logits.shape[1]
    scores = np.empty((g.num_nodes, n_tasks))
    for rt, st in zip(clients, fwd.states):
        scores[rt.sub.owned] = st.logits
    return scores


def evaluate_params(params, g, part, mode, executor=None):
    reports = evaluate(scores_for(params, g, part, mode, executor), g.labels)
    return reports, macro(reports)


def steps_per_epoch(part: Optional[Partition], n_nodes: int, batch_size) -> int:
    rng = np.random.default_rng(0)  # batch count does not depend on the draw
    if part is None:
        return len(node_batches(n_nodes, batch_size, rng))
    return max(
        len(node_batches(len(v), batch_size, rng)) for v in part.v_own
    )


def run_single(
    name: str,
    dataset: dict,
    parts: dict,
    spec: ExperimentSpec,
    seed: int,
    executor=None,
) -> tuple:
    """Train one regime on one seed and evaluate it on the test split."""
    regime, mode = REGIME_PRESETS[name]
    g_train = dataset["train"]
    arch = spec.arch(g_train)
    params0 = ModelParams.init(arch, seed)
    tcfg = TrainConfig(
        regime=regime,
        remote_mode=mode,
        lr=spec.lr,
        epochs=spec.epochs,
        local_epochs=spec.local_epochs if regime == "fedavg" else 1,
        batch_size=spec.batch_size,
        patience=spec.patience,
        rng_seed=seed,
    )
    part_train = None if regime == "centralized" else parts["train"]
    part_val = None if regime == "centralized" else parts["val"]
    part_test = None if regime == "centralized" else parts["test"]

    eval_fn = None
    if spec.patience is not None:
        def eval_fn(params):
            m = evaluate_params(params, dataset["val"], part_val, mode, executor)[1]
            return -1.0 if m is None else m

    result = train(g_train, part_train, params0, tcfg, eval_fn=eval_fn, executor=executor)
    reports, macro_test = evaluate_params(
        result.params, dataset["test"], part_test, mode, executor
    )

    out = {
        "regime": name,
        "seed": seed,
        "macro": macro_test,
        "tasks": {
            r.task: {
                "prevalence": r.prevalence,
                "pr_auc": r.pr_auc_minority,
                "reason": r.reason,
            }
            for r in reports
        },
        "epochs_run": len(result.history.loss),
        "final_loss": result.history.loss[-1],
        "best_epoch": result.history.best_epoch,
        "param_drift_rounds": result.history.param_drift_rounds,
        "ledger": {
            "total_embeddings": result.ledger.total_embeddings,
            "total_bytes": result.ledger.total_bytes,
        },
        "stop_gradient_at_received_rows": True,
    }
    if mode == FRESH and regime != "centralized" and result.ledger.total_embeddings:
        s = steps_per_epoch(part_train, g_train.num_nodes, spec.batch_size)
        comm = CommReport.from_ledger(
            result.ledger,
            s,
            len(result.history.loss),
            spec.layers,
            params0.flat.size,
            parts["train"].num_clients,
        )
        out["comm"] = comm.to_dict()
    return out, result


def _aggregate(rows: List[dict], regimes: List[str]) -> dict:
    """Mean and std of macro PR-AUC per regime, plus deltas vs baselines."""
    summary = {}
    for name in regimes:
        vals = [r["macro"] for r in rows if r["regime"] == name and r["macro"] is not None]
        if not vals:
            continue
        summary[name] = {
            "macro_mean": float(np.mean(vals)),
            "macro_std": float(np.std(vals)),
            "seeds": len(vals),
        }
    for name, entry in summary.items():
        for base in ("local", "fedavg"):
            if base in summary and name != base:
                entry[f"delta_vs_{base}"] = entry["macro_mean"] - summary[base]["macro_mean"]
    return summary


def run(spec: ExperimentSpec, executor=None) -> dict:
    """All regimes x all seeds; returns the bundle and writes artifacts."""
    rows = []
    artifacts = []
    for seed in spec.seeds:
        dspec = DataSpec(
            spec.data.num_nodes, spec.data.avg_degree, seed, spec.data.pattern_counts
        )
        dataset = make_dataset(dspec)
        parts = {
            split: make_partition(
                dataset[split],
                PartitionSpec(
                    spec.partition.method,
                    spec.partition.num_clients,
                    spec.partition.imbalance_eps,
                    rng_seed=seed,
                ),
            )
            for split in SPLITS
        }
        for name in spec.regimes:
            row, result = run_single(name, dataset, parts, spec, seed, executor)
            rows.append(row)
            if spec.out_dir:
                base = os.path.join(spec.out_dir, f"{name}_seed{seed}")
                os.makedirs(spec.out_dir, exist_ok=True)
                with open(base + "_ledger.csv", "w") as f:
                    f.write(result.ledger.to_csv())
                artifacts.append(base + "_ledger.csv")
                p = result.params[0] if isinstance(result.params, list) else result.params
                save_params(p, base + ".ckpt")
                artifacts.append(base + ".ckpt")
    bundle = {
        "spec": spec_to_dict(spec),
        "rows": rows,
        "summary": _aggregate(rows, spec.regimes),
    }
    if spec.out_dir:
        path = os.path.join(spec.out_dir, "result.json")
        write_json(path, bundle)
        artifacts.append(path)
        csv_path = os.path.join(spec.out_dir, "summary.csv")
        with open(csv_path, "w") as f:
            f.write(summary_csv(bundle))
        artifacts.append(csv_path)
        write_manifest(spec.out_dir, artifacts, spec)
    return bundle


def sweep(spec: ExperimentSpec, client_counts: List[int], executor=None) -> dict:
    """One run() per client count; rows carry (num_clients, regime, seed)."""
    all_rows = []
    for k in client_counts:
        sub = ExperimentSpec(
            data=spec.data,
            partition=PartitionSpec(
                spec.partition.method, k, spec.partition.imbalance_eps,
                spec.partition.rng_seed,
            ),
            regimes=spec.regimes,
            width=spec.width,
            layers=spec.layers,
            direction=spec.direction,
            lr=spec.lr,
            epochs=spec.epochs,
            local_epochs=spec.local_epochs,
            batch_size=spec.batch_size,
            patience=spec.patience,
            seeds=spec.seeds,
            out_dir=None,
        )
        bundle = run(sub, executor)
        for row in bundle["rows"]:
            row["num_clients"] = k
            all_rows.append(row)
    out = {"spec": spec_to_dict(spec), "client_counts": list(client_counts), "rows": all_rows}
    if spec.out_dir:
        os.makedirs(spec.out_dir, exist_ok=True)
        path = os.path.join(spec.out_dir, "sweep.json")
        write_json(path, out)
        csv_path = os.path.join(spec.out_dir, "sweep.csv")
        with open(csv_path, "w") as f:
            f.write(sweep_csv(out))
        write_manifest(spec.out_dir, [path, csv_path], spec)
    return out


# ---------------------------------------------------------------------------
# artifact formatting
# ---------------------------------------------------------------------------


def spec_to_dict(spec: ExperimentSpec) -> dict:
    d = asdict(spec)
    # where the artifacts land is not part of the experiment's identity
    d.pop("out_dir", None)
    return d


def write_json(path: str, obj) -> None:
    with open(path, "w") as f:
        f.write(to_json(obj))


def to_json(obj) -> str:
    def default(o):
        if isinstance(o, Fraction):
            return str(o)
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(f"not JSON-serializable: {type(o)}")

    return json.dumps(obj, sort_keys=True, indent=2, default=default) + "\n"


def summary_csv(bundle: dict) -> str:
    """Per-regime rows: per-task means, macro mean+-std, delta columns."""
    rows = bundle["rows"]
    regimes = list(bundle["summary"].keys())
    tasks = list(rows[0]["tasks"].keys()) if rows else []
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(
        ["regime"] + tasks + ["macro_mean", "macro_std", "delta_vs_local", "delta_vs_fedavg"]
    )
    for name in regimes:
        mine = [r for r in rows if r["regime"] == name]
        task_means = []
        for t in tasks:
            vals = [r["tasks"][t]["pr_auc"] for r in mine if r["tasks"][t]["pr_auc"] is not None]
            task_means.append(f"{np.mean(vals):.4f}" if vals else "")
        s = bundle["summary"][name]
        w.writerow(
            [name]
            + task_means
            + [
                f"{s['macro_mean']:.4f}",
                f"{s['macro_std']:.4f}",
                f"{s.get('delta_vs_local', ''):.4f}" if "delta_vs_local" in s else "",
                f"{s.get('delta_vs_fedavg', ''):.4f}" if "delta_vs_fedavg" in s else "",
            ]
        )
    return buf.getvalue()


def sweep_csv(out: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["num_clients", "regime", "seed", "macro"])
    for row in out["rows"]:
        w.writerow([row["num_clients"], row["regime"], row["seed"], row["macro"]])
    return buf.getvalue()


def write_manifest(out_dir: str, files: List[str], spec) -> str:
    manifest = {
        "artifacts": sorted(os.path.relpath(f, out_dir) for f in files),
        "spec": spec_to_dict(spec),
    }
    path = os.path.join(out_dir, "manifest.json")
    write_json(path, manifest)
    return path


# ---------------------------------------------------------------------------
# plots (static files; the CSV next to them is the source of truth)
# ---------------------------------------------------------------------------


def plot_sweep(sweep_bundle: dict, out_path: str, ceiling: Optional[float] = None) -> str:
    """Macro PR-AUC vs client count, one line per regime."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = sweep_bundle["rows"]
    if not rows:
        raise ExperimentError("empty sweep bundle")
    regimes = sorted({r["regime"] for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in regimes:
        pts = {}
        for r in rows:
            if r["regime"] == name and r["macro"] is not None:
                pts.setdefault(r["num_clients"], []).append(r["macro"])
        ks = sorted(pts)
        means = [float(np.mean(pts[k])) for k in ks]
        ax.plot(ks, means, marker="o", label=name)
    if ceiling is not None:
        ax.axhline(ceiling, linestyle=":", color="gray", label="centralized")
    ax.set_xlabel("clients")
    ax.set_ylabel("macro PR-AUC")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_tasks(bundles: List[dict], out_path: str) -> str:
    """Grouped per-task bar chart, one group per task, one bar per bundle row."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not bundles:
        raise ExperimentError("no result bundles to plot")
    task_sets = [tuple(b["tasks"].keys()) for b in bundles]
    if len(set(task_sets)) != 1:
        names = sorted(set().union(*[set(t) for t in task_sets]))
        raise ExperimentError(f"bundles disagree on tasks: {names}")
    tasks = list(task_sets[0])
    x = np.arange(len(tasks))
    width = 0.8 / len(bundles)
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, b in enumerate(bundles):
        vals = [
            b["tasks"][t]["pr_auc"] if b["tasks"][t]["pr_auc"] is not None else 0.0
            for t in tasks
        ]
        ax.bar(x + i * width, vals, width, label=f"{b['regime']} s{b['seed']}")
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(tasks)
    ax.set_ylabel("minority-class PR-AUC")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
