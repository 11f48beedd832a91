"""Command-line front end for the simulator.

Seven subcommands cover the workflow end to end: ``gen`` builds a synthetic
graph with planted patterns, ``partition`` splits it across simulated
clients, ``train`` runs one training regime, ``eval`` scores a checkpoint,
``sweep`` repeats a full experiment over several client counts, ``verify``
runs the property suites, and ``plot`` renders result bundles.

Every subcommand accepts ``--config <file.json>`` holding defaults for any
of its options (keys use underscores, e.g. ``batch_size``).  Values resolve
as flags > config file > built-in defaults, so a config file can carry a
whole experiment while individual flags override single knobs.

Artifacts land under ``--out <dir>`` next to a ``manifest.json`` naming
them; a directory without a manifest is a partially written run.  Exit
codes: 0 success, 2 validation error (bad flags, unknown config keys,
unresolvable paths, malformed inputs), 3 property-suite failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from typing import Any, List, Optional

import numpy as np

from fedmotif import verify as verification
from fedmotif.experiment import (
    DataSpec,
    ExperimentError,
    ExperimentSpec,
    PartitionSpec,
    REGIME_PRESETS,
    plot_sweep,
    plot_tasks,
    scores_for,
    write_json,
)
from fedmotif.experiment import sweep as run_sweep
from fedmotif.generate import (
    GenConfig,
    GenerationError,
    SPLITS,
    default_pattern_counts,
    generate,
    prevalence,
)
from fedmotif.graph import (
    GraphFormatError,
    ValidationError,
    constant_features,
)
from fedmotif.graph import load as load_graph
from fedmotif.graph import save as save_graph
from fedmotif.metrics import evaluate, macro, reports_to_csv
from fedmotif.model import DIRECTIONS, ArchSpec, ModelParams, load_params, save_params
from fedmotif.partition import (
    PartitionError,
    balanced_kway,
    deserialize_partition,
    louvain,
    serialize_partition,
)
from fedmotif.protocol import (
    FRESH,
    PLACEHOLDER,
    STALE,
    ExchangeLedger,
    ExchangePlan,
    PolicyError,
    RemotePolicy,
    build_clients,
    distributed_forward,
)
from fedmotif.training import REGIMES, TrainConfig, TrainingError, train

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_SUITE_FAILURE = 3

TRAIN_POLICIES = (FRESH, PLACEHOLDER, STALE)
EVAL_POLICIES = (FRESH, PLACEHOLDER)  # stale snapshots only exist mid-training
DEFAULT_SWEEP_REGIMES = ["local", "fedavg", "fedavg_le", "syncsgd_le"]


class CliError(Exception):
    """Validation problem the user can fix; rendered as `error: ...`."""


# ---------------------------------------------------------------------------
# option table: one declaration drives both argparse and config-file merging
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Opt:
    name: str  # dest; the flag is --name-with-dashes
    kind: type = str
    default: Any = None
    required: bool = False
    many: bool = False  # nargs="+"; config value must be a list
    choices: Optional[tuple] = None
    help: str = ""


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_opts(sub: argparse.ArgumentParser, opts: List[Opt]) -> None:
    sub.add_argument(
        "--config", metavar="FILE", default=None,
        help="JSON object with defaults for any option of this subcommand",
    )
    for o in opts:
        kwargs: dict = {"dest": o.name, "default": None}
        kwargs["help"] = o.help + (" (required)" if o.required else "")
        if o.many:
            kwargs["nargs"] = "+"
        if o.kind is not str:
            kwargs["type"] = o.kind
        if o.choices:
            kwargs["choices"] = list(o.choices)
        sub.add_argument(_flag(o.name), **kwargs)


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise CliError(f"config file not found: {path}")
    try:
        with open(path) as f:
            obj = json.load(f)
    except json.JSONDecodeError as exc:
        raise CliError(f"config file {path}: {exc}")
    if not isinstance(obj, dict):
        raise CliError(f"config file {path}: expected a JSON object")
    return obj


def _coerce(o: Opt, raw) -> Any:
    try:
        if o.many:
            if not isinstance(raw, list):
                raise TypeError("expected a list")
            return [o.kind(x) for x in raw]
        if isinstance(raw, (dict, list)):
            raise TypeError(f"expected a scalar, got {type(raw).__name__}")
        return o.kind(raw)
    except (TypeError, ValueError) as exc:
        raise CliError(f"config key {o.name!r}: {exc}")


def _resolve(opts: List[Opt], args: argparse.Namespace, config: dict) -> dict:
    """Merge flag values over config values over declared defaults."""
    known = {o.name for o in opts}
    stray = sorted(set(config) - known)
    if stray:
        raise CliError(f"unknown config keys: {', '.join(stray)}")
    out = {}
    for o in opts:
        v = getattr(args, o.name)
        if v is None and o.name in config:
            v = _coerce(o, config[o.name])
        if v is None:
            v = o.default
        if v is None and o.required:
            raise CliError(f"{_flag(o.name)} is required")
        if v is not None and o.choices:
            bad = [x for x in (v if o.many else [v]) if x not in o.choices]
            if bad:
                raise CliError(
                    f"{_flag(o.name)}: {bad[0]!r} is not one of {list(o.choices)}"
                )
        out[o.name] = v
    return out


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------


def _require_file(path: Optional[str], what: str) -> str:
    # every referenced path must resolve before any work starts
    if path is None or not os.path.isfile(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _outdir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _manifest(out_dir: str, files: List[str], config: dict) -> str:
    payload = {
        "artifacts": sorted(os.path.relpath(f, out_dir) for f in files),
        "config": config,
    }
    path = os.path.join(out_dir, "manifest.json")
    write_json(path, payload)
    return path


def _graph_for_model(path: str):
    g = load_graph(path)
    if g.d_in == 0:
        # generated graphs carry no node features; the model sees x_v = 1
        g = constant_features(g, 1.0)
    return g


def _load_partition(path: str, g):
    with open(path, "rb") as f:
        return deserialize_partition(f.read(), g)


def _none_if_zero(v: Optional[int]) -> Optional[int]:
    return None if v == 0 else v


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

GEN_OPTS = [
    Opt("nodes", int, required=True, help="node count"),
    Opt("degree", float, 6.0, help="target average degree"),
    Opt("seed", int, 0, help="generator seed"),
    Opt("split", str, "train", choices=SPLITS, help="which split's stream to draw"),
    Opt("out", str, required=True, help="output directory"),
]


def cmd_gen(cfg: dict) -> int:
    out = _outdir(cfg["out"])
    counts = default_pattern_counts(cfg["nodes"])
    g, instances = generate(
        GenConfig(cfg["nodes"], cfg["degree"], counts,
                  rng_seed=cfg["seed"], split=cfg["split"])
    )
    gpath = os.path.join(out, "graph.txt")
    save_graph(g, gpath)
    sidecar = {
        "num_nodes": g.num_nodes,
        "num_edges": g.num_edges,
        "pattern_counts": counts,
        "prevalence_pct": prevalence(g),
        "instances": [
            {"task": it.task,
             "nodes": sorted(it.member_nodes),
             "edges": sorted(it.member_edges)}
            for it in instances
        ],
    }
    spath = os.path.join(out, "instances.json")
    write_json(spath, sidecar)
    _manifest(out, [gpath, spath], cfg)
    print(f"wrote {gpath}: {g.num_nodes} nodes, {g.num_edges} edges, "
          f"{len(instances)} planted instances")
    return EXIT_OK


PARTITION_OPTS = [
    Opt("graph", str, required=True, help="graph file to split"),
    Opt("method", str, required=True, choices=("louvain", "kway"),
        help="community-based or balanced cut-minimizing split"),
    Opt("clients", int, required=True, help="number of clients K"),
    Opt("eps", float, 0.0, help="allowed size imbalance for kway"),
    Opt("seed", int, 0, help="partitioner seed"),
    Opt("out", str, required=True, help="output directory"),
]


def cmd_partition(cfg: dict) -> int:
    _require_file(cfg["graph"], "graph file")
    g = load_graph(cfg["graph"])
    if cfg["method"] == "louvain":
        part = louvain(g, cfg["clients"], rng_seed=cfg["seed"])
    else:
        part = balanced_kway(g, cfg["clients"], imbalance_eps=cfg["eps"],
                             rng_seed=cfg["seed"])
    out = _outdir(cfg["out"])
    ppath = os.path.join(out, "partition.txt")
    with open(ppath, "wb") as f:
        f.write(serialize_partition(part))
    summary = {
        "method": cfg["method"],
        "num_clients": part.num_clients,
        "cut_edges": part.cut_edges,
        "total_edges": g.num_edges,
        "cut_fraction": part.cut_edges / g.num_edges if g.num_edges else 0.0,
        "owned_nodes": [len(v) for v in part.v_own],
        "remote_nodes": [len(v) for v in part.v_rem],
    }
    spath = os.path.join(out, "summary.json")
    write_json(spath, summary)
    _manifest(out, [ppath, spath], cfg)
    print(f"wrote {ppath}: {part.num_clients} clients, "
          f"{part.cut_edges}/{g.num_edges} edges cut")
    return EXIT_OK


TRAIN_OPTS = [
    Opt("graph", str, required=True, help="training graph file"),
    Opt("partition", str, help="partition file (required for federated regimes)"),
    Opt("val_graph", str, help="validation graph for early stopping"),
    Opt("val_partition", str, help="partition of the validation graph"),
    Opt("regime", str, "centralized", choices=REGIMES, help="training regime"),
    Opt("policy", str, PLACEHOLDER, choices=TRAIN_POLICIES,
        help="how clients fill remote embedding rows"),
    Opt("width", int, 16, help="embedding width d"),
    Opt("layers", int, 2, help="message-passing layers L"),
    Opt("direction", str, "both", choices=DIRECTIONS, help="edge directions used"),
    Opt("lr", float, 0.01, help="SGD step size"),
    Opt("epochs", int, 100, help="training epochs"),
    Opt("local_epochs", int, 1, help="local epochs per round (fedavg only)"),
    Opt("batch_size", int, 128, help="nodes per batch; 0 = one full batch"),
    Opt("patience", int, 10, help="early-stop patience in epochs; 0 = off"),
    Opt("seed", int, 0, help="init and batch-order seed"),
    Opt("out", str, required=True, help="output directory"),
]


def cmd_train(cfg: dict) -> int:
    _require_file(cfg["graph"], "training graph")
    for key, what in (("partition", "partition file"),
                      ("val_graph", "validation graph"),
                      ("val_partition", "validation partition")):
        if cfg[key] is not None:
            _require_file(cfg[key], what)

    g = _graph_for_model(cfg["graph"])
    part = None
    if cfg["regime"] != "centralized":
        if cfg["partition"] is None:
            raise CliError(f"regime {cfg['regime']!r} needs --partition")
        part = _load_partition(cfg["partition"], g)

    tcfg = TrainConfig(
        regime=cfg["regime"],
        remote_mode=cfg["policy"],
        lr=cfg["lr"],
        epochs=cfg["epochs"],
        local_epochs=cfg["local_epochs"],
        batch_size=_none_if_zero(cfg["batch_size"]),
        patience=_none_if_zero(cfg["patience"]),
        rng_seed=cfg["seed"],
    )

    eval_fn = None
    if tcfg.patience is not None:
        if cfg["val_graph"] is None:
            raise CliError("--patience needs --val-graph (pass --patience 0 to "
                           "train without early stopping)")
        g_val = _graph_for_model(cfg["val_graph"])
        part_val = None
        if cfg["regime"] != "centralized":
            if cfg["val_partition"] is None:
                raise CliError("federated early stopping needs --val-partition")
            part_val = _load_partition(cfg["val_partition"], g_val)

        def eval_fn(params):
            m = macro(evaluate(
                scores_for(params, g_val, part_val, cfg["policy"]), g_val.labels))
            return -1.0 if m is None else m

    arch = ArchSpec(d_in=g.d_in, width=cfg["width"], layers=cfg["layers"],
                    direction=cfg["direction"])
    params0 = ModelParams.init(arch, cfg["seed"])
    result = train(g, part, params0, tcfg, eval_fn=eval_fn)

    out = _outdir(cfg["out"])
    files = []
    if isinstance(result.params, list):
        # local regime: one independently trained model per client
        for c, p in enumerate(result.params):
            path = os.path.join(out, f"checkpoint_client{c}.ckpt")
            save_params(p, path)
            files.append(path)
    else:
        path = os.path.join(out, "checkpoint.ckpt")
        save_params(result.params, path)
        files.append(path)

    lpath = os.path.join(out, "ledger.csv")
    with open(lpath, "w") as f:
        f.write(result.ledger.to_csv())
    files.append(lpath)

    h = result.history
    hpath = os.path.join(out, "history.json")
    write_json(hpath, {
        "loss": h.loss,
        "val": [{"epoch": e, "metric": m} for e, m in h.val],
        "best_epoch": h.best_epoch,
        "stopped_at": h.stopped_at,
        "epochs_run": len(h.loss),
        "param_drift_rounds": h.param_drift_rounds,
    })
    files.append(hpath)

    _manifest(out, files, cfg)
    print(f"trained {cfg['regime']} for {len(h.loss)} epochs, "
          f"final loss {h.loss[-1]:.6f}; wrote {files[0]}")
    return EXIT_OK


EVAL_OPTS = [
    Opt("checkpoint", str, required=True, help="model checkpoint file"),
    Opt("graph", str, required=True, help="graph to score"),
    Opt("partition", str, help="partition file; omit for centralized inference"),
    Opt("policy", str, FRESH, choices=EVAL_POLICIES,
        help="remote-row policy for partitioned inference"),
    Opt("out", str, required=True, help="output directory"),
]


def _scores_and_traffic(params, g, part, mode):
    """Logits for every node, plus the exchange ledger when rows move."""
    if part is None:
        return scores_for(params, g, None, mode), None
    clients = build_clients(g, part)
    plan = ExchangePlan.from_partition(part)
    ledger = ExchangeLedger(params.arch.width) if mode == FRESH else None
    policy = RemotePolicy.fresh() if mode == FRESH else RemotePolicy.placeholder_zero()
    fwd = distributed_forward(params, clients, policy, ledger=ledger, plan=plan)
    scores = np.empty((g.num_nodes, fwd.states[0].logits.shape[1]))
    for rt, st in zip(clients, fwd.states):
        scores[rt.sub.owned] = st.logits
    return scores, ledger


def cmd_eval(cfg: dict) -> int:
    _require_file(cfg["checkpoint"], "checkpoint")
    _require_file(cfg["graph"], "graph file")
    if cfg["partition"] is not None:
        _require_file(cfg["partition"], "partition file")

    params = load_params(cfg["checkpoint"])
    g = _graph_for_model(cfg["graph"])
    if g.d_in != params.arch.d_in:
        raise CliError(f"checkpoint expects d_in={params.arch.d_in}, "
                       f"graph provides {g.d_in}")
    part = None
    if cfg["partition"] is not None:
        part = _load_partition(cfg["partition"], g)

    scores, ledger = _scores_and_traffic(params, g, part, cfg["policy"])
    reports = evaluate(scores, g.labels)

    out = _outdir(cfg["out"])
    cpath = os.path.join(out, "report.csv")
    with open(cpath, "w") as f:
        f.write(reports_to_csv(reports))
    summary = {
        "checkpoint": os.path.basename(cfg["checkpoint"]),
        "policy": cfg["policy"] if part is not None else "centralized",
        "macro_pr_auc": macro(reports),
        "tasks": {
            r.task: {"prevalence": r.prevalence, "pr_auc": r.pr_auc_minority,
                     "reason": r.reason}
            for r in reports
        },
    }
    if ledger is not None:
        summary["exchange"] = {
            "per_layer": {str(l): n for l, n in sorted(ledger.per_layer().items())},
            "total_embeddings": ledger.total_embeddings,
            "total_bytes": ledger.total_bytes,
        }
    spath = os.path.join(out, "summary.json")
    write_json(spath, summary)
    _manifest(out, [cpath, spath], cfg)
    m = summary["macro_pr_auc"]
    print(f"wrote {cpath}; macro PR-AUC "
          f"{'undefined' if m is None else format(m, '.4f')}")
    return EXIT_OK


SWEEP_OPTS = [
    Opt("nodes", int, 1024, help="node count per generated split"),
    Opt("degree", float, 6.0, help="target average degree"),
    Opt("method", str, "kway", choices=("louvain", "kway"), help="partitioner"),
    Opt("clients", int, default=[3, 5, 10, 15], many=True,
        help="client counts to sweep"),
    Opt("eps", float, 0.0, help="allowed size imbalance for kway"),
    Opt("regimes", str, default=DEFAULT_SWEEP_REGIMES, many=True,
        choices=tuple(REGIME_PRESETS), help="regime presets to run"),
    Opt("width", int, 16, help="embedding width d"),
    Opt("layers", int, 2, help="message-passing layers L"),
    Opt("direction", str, "both", choices=DIRECTIONS, help="edge directions used"),
    Opt("lr", float, 0.01, help="SGD step size"),
    Opt("epochs", int, 100, help="training epochs"),
    Opt("local_epochs", int, 1, help="local epochs per round (fedavg only)"),
    Opt("batch_size", int, 128, help="nodes per batch; 0 = one full batch"),
    Opt("patience", int, 10, help="early-stop patience in epochs; 0 = off"),
    Opt("seeds", int, default=[0], many=True, help="repeat seeds"),
    Opt("out", str, required=True, help="output directory"),
]


def cmd_sweep(cfg: dict) -> int:
    spec = ExperimentSpec(
        data=DataSpec(num_nodes=cfg["nodes"], avg_degree=cfg["degree"]),
        partition=PartitionSpec(cfg["method"], cfg["clients"][0],
                                imbalance_eps=cfg["eps"]),
        regimes=list(cfg["regimes"]),
        width=cfg["width"],
        layers=cfg["layers"],
        direction=cfg["direction"],
        lr=cfg["lr"],
        epochs=cfg["epochs"],
        local_epochs=cfg["local_epochs"],
        batch_size=_none_if_zero(cfg["batch_size"]),
        patience=_none_if_zero(cfg["patience"]),
        seeds=list(cfg["seeds"]),
        out_dir=_outdir(cfg["out"]),
    )
    bundle = run_sweep(spec, list(cfg["clients"]))
    print(f"wrote {os.path.join(cfg['out'], 'sweep.json')}: "
          f"{len(bundle['rows'])} rows over k={cfg['clients']}")
    return EXIT_OK


VERIFY_OPTS = [
    Opt("suite", str, "all", choices=verification.SUITES + ("all",),
        help="which property suite to run"),
    Opt("seed", int, 0, help="instance-sampler seed"),
    Opt("instances", int, help="override the per-suite instance count"),
    Opt("out", str, help="optional directory for the text report"),
]


def cmd_verify(cfg: dict) -> int:
    names = verification.SUITES if cfg["suite"] == "all" else (cfg["suite"],)
    reports = [
        verification.verify(s, rng_seed=cfg["seed"], instances=cfg["instances"])
        for s in names
    ]
    text = verification.render(reports)
    sys.stdout.write(text)
    if cfg["out"]:
        out = _outdir(cfg["out"])
        rpath = os.path.join(out, "verify.txt")
        with open(rpath, "w") as f:
            f.write(text)
        _manifest(out, [rpath], cfg)
    ok = all(r.passed for r in reports)
    return EXIT_OK if ok else EXIT_SUITE_FAILURE


PLOT_OPTS = [
    Opt("sweep", str, help="sweep.json bundle for the client-count figure"),
    Opt("results", str, many=True, help="result.json bundles for per-task bars"),
    Opt("seed", int, help="restrict per-task bars to one seed"),
    Opt("ceiling", float, help="dotted centralized-ceiling line for the sweep"),
    Opt("out", str, required=True, help="output directory"),
]


def cmd_plot(cfg: dict) -> int:
    if cfg["sweep"] is None and cfg["results"] is None:
        raise CliError("nothing to plot: pass --sweep and/or --results")
    out = _outdir(cfg["out"])
    files = []
    if cfg["sweep"] is not None:
        _require_file(cfg["sweep"], "sweep bundle")
        with open(cfg["sweep"]) as f:
            bundle = json.load(f)
        if "rows" not in bundle:
            raise CliError(f"{cfg['sweep']} is not a sweep bundle (no 'rows')")
        files.append(plot_sweep(bundle, os.path.join(out, "sweep.png"),
                                ceiling=cfg["ceiling"]))
    if cfg["results"] is not None:
        rows = []
        for path in cfg["results"]:
            _require_file(path, "result bundle")
            with open(path) as f:
                bundle = json.load(f)
            if "rows" not in bundle:
                raise CliError(f"{path} is not a result bundle (no 'rows')")
            rows += [r for r in bundle["rows"]
                     if cfg["seed"] is None or r["seed"] == cfg["seed"]]
        if not rows:
            raise CliError("no result rows matched")
        files.append(plot_tasks(rows, os.path.join(out, "tasks.png")))
    _manifest(out, files, cfg)
    print("wrote " + ", ".join(files))
    return EXIT_OK


COMMANDS = {
    "gen": (cmd_gen, GEN_OPTS, "generate a synthetic graph with planted patterns"),
    "partition": (cmd_partition, PARTITION_OPTS, "split a graph across clients"),
    "train": (cmd_train, TRAIN_OPTS, "train one regime on a graph"),
    "eval": (cmd_eval, EVAL_OPTS, "score a checkpoint on a graph"),
    "sweep": (cmd_sweep, SWEEP_OPTS, "run regimes over several client counts"),
    "verify": (cmd_verify, VERIFY_OPTS, "run the property suites"),
    "plot": (cmd_plot, PLOT_OPTS, "render figures from result bundles"),
}

# user-fixable problems raised by the library layers; anything else is a bug
_VALIDATION_ERRORS = (
    CliError,
    ValidationError,
    GraphFormatError,
    PartitionError,
    GenerationError,
    PolicyError,
    ExperimentError,
    ValueError,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedmotif",
        description="simulate federated subgraph-pattern detection",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    for name, (_, opts, blurb) in COMMANDS.items():
        _add_opts(subs.add_parser(name, help=blurb, description=blurb), opts)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits itself on bad flags / --help
        return int(exc.code or 0)
    handler, opts, _ = COMMANDS[args.command]
    try:
        cfg = _resolve(opts, args, _load_config(args.config))
        return handler(cfg)
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
