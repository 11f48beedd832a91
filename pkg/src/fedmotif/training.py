"""Training regimes over a partitioned graph.

Four regimes share one SGD core:

* ``centralized``: plain mini-batch SGD on the full graph, no clients.
* ``local``: every client trains its own copy independently.  Embedding
  exchange is allowed here but the shared-parameter assumption breaks after
  the first step, so received rows no longer match what a centralized model
  would produce.
* ``fedavg``: rounds of E local epochs followed by a sample-count-weighted
  parameter average.  Parameters are bitwise equal across clients at the
  start of each round and drift apart in between.
* ``syncsgd``: one batch-size-weighted gradient average per step; every
  client applies the identical update, so parameters stay bitwise equal the
  whole run (asserted before every step).

Clients running in lockstep see the same number of steps per epoch: whoever
runs out of batches early keeps computing forwards (its boundary rows feed
the others) but contributes an empty, zero-weight batch.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .model import ModelParams, backward, bce_loss, loss_and_grad
from .protocol import (
    FRESH,
    PLACEHOLDER,
    STALE,
    ExchangeLedger,
    ExchangePlan,
    RemotePolicy,
    build_clients,
    distributed_forward,
    snapshot_epoch,
)

CENTRALIZED = "centralized"
LOCAL = "local"
FEDAVG = "fedavg"
SYNCSGD = "syncsgd"
REGIMES = (CENTRALIZED, LOCAL, FEDAVG, SYNCSGD)

_EMPTY = np.empty(0, dtype=np.int64)


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    """Training loss stopped being finite."""


@dataclass
class TrainConfig:
    regime: str = CENTRALIZED
    remote_mode: str = PLACEHOLDER
    lr: float = 0.01
    epochs: int = 100
    local_epochs: int = 1  # E, consumed by fedavg only
    batch_size: Optional[int] = 128  # None = one full batch per epoch
    patience: Optional[int] = 10  # early-stop patience in eval points, None = off
    rng_seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.remote_mode not in (FRESH, PLACEHOLDER, STALE):
            raise ValueError(f"unknown remote mode {self.remote_mode!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 or None")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 or None")


@dataclass
class History:
    loss: List[float] = field(default_factory=list)  # per epoch, node-weighted
    val: List[tuple] = field(default_factory=list)  # (epoch, metric)
    param_drift_rounds: List[int] = field(default_factory=list)  # rounds where local steps broke parameter sharing
    best_epoch: int = -1
    stopped_at: Optional[int] = None


@dataclass
class ClientState:
    runtime: object  # ClientRuntime
    params: ModelParams
    weight: int  # owned training-node count K_c


@dataclass
class TrainResult:
    params: object  # ModelParams, or a list of them for the local regime
    history: History
    ledger: ExchangeLedger


def node_batches(n: int, size: Optional[int], rng) -> List[np.ndarray]:
    """Split ``n`` training nodes into disjoint batches covering each exactly once.

    ``size=None`` yields one unshuffled full batch; otherwise a seeded
    permutation is split into ceil(n/size) near-equal chunks.
    """
    if n == 0:
        return []
    if size is None:
        return [np.arange(n, dtype=np.int64)]
    perm = rng.permutation(n).astype(np.int64)
    return np.array_split(perm, -(-n // size))


def _epoch_rng(seed: int, client: int, epoch: int):
    return np.random.default_rng([seed, client, epoch])


def _policy_for(cfg: TrainConfig) -> RemotePolicy:
    if cfg.remote_mode == FRESH:
        return RemotePolicy.fresh()
    if cfg.remote_mode == PLACEHOLDER:
        return RemotePolicy.placeholder_zero()
    return RemotePolicy.stale()


def _flats_equal(states: List[ClientState]) -> bool:
    f0 = states[0].params.flat
    return all(np.array_equal(f0, st.params.flat) for st in states[1:])


class _Stopper:
    """Tracks the best validation metric and the flats that produced it."""

    def __init__(self, patience: Optional[int]):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1
        self.bad = 0
        self.best_flats = None

    def update(self, metric: float, flats: List[np.ndarray], epoch: int) -> bool:
        if metric > self.best:
            self.best = metric
            self.best_epoch = epoch
            self.bad = 0
            self.best_flats = [f.copy() for f in flats]
            return False
        self.bad += 1
        return self.patience is not None and self.bad >= self.patience

    def restore(self, flats: List[np.ndarray]) -> None:
        if self.best_flats is not None:
            for dst, src in zip(flats, self.best_flats):
                dst[...] = src


def _run_epochs(
    states: List[ClientState],
    cfg: TrainConfig,
    policy: RemotePolicy,
    plan: ExchangePlan,
    ledger: ExchangeLedger,
    g,
    n_epochs: int,
    epoch0: int,
    step0: int,
    sync: bool,
    executor=None,
):
    """Run lockstep epochs over all clients.  Returns (next_step, losses, a2_lost)."""
    clients = [st.runtime for st in states]
    P = states[0].params.flat.size
    step = step0
    losses = []
    a2_lost = False
    for e in range(n_epochs):
        epoch = epoch0 + e
        batches = [
            node_batches(st.runtime.n_owned, cfg.batch_size, _epoch_rng(cfg.rng_seed, i, epoch))
            for i, st in enumerate(states)
        ]
        n_steps = max(len(b) for b in batches)
        loss_sum = 0.0
        node_count = 0
        fwd = None
        for s in range(n_steps):
            if sync and not _flats_equal(states):
                raise TrainingError(
                    f"sync-sgd invariant broken: client parameters differ before "
                    f"epoch {epoch} step {s}"
                )
            fwd = distributed_forward(
                [st.params for st in states],
                clients,
                policy,
                ledger=ledger,
                step=step,
                plan=plan,
                executor=executor,
            )

            def client_grad(i):
                batch = batches[i][s] if s < len(batches[i]) else _EMPTY
                if batch.size == 0:
                    return 0.0, 0, np.zeros(P)
                loss, dlogits = bce_loss(
                    fwd.states[i].logits, states[i].runtime.labels, batch
                )
                grad = backward(
                    states[i].params, fwd.states[i], dlogits, g.edge_features
                )
                return loss, int(batch.size), grad

            if executor is None:
                results = [client_grad(i) for i in range(len(states))]
            else:
                results = list(executor.map(client_grad, range(len(states))))
            for i, (loss, b, _) in enumerate(results):
                if not np.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss {loss!r} at epoch {epoch}, step {s}, "
                        f"client {states[i].runtime.client}"
                    )
                loss_sum += loss * b
                node_count += b
            if sync:
                total = sum(b for _, b, _ in results)
                acc = np.zeros(P)
                for _, b, grad in results:
                    if b:
                        acc += b * grad
                delta = (cfg.lr / total) * acc
                for st in states:
                    st.params.flat -= delta
            else:
                for st, (_, _, grad) in zip(states, results):
                    st.params.flat -= cfg.lr * grad
                if not a2_lost and len(states) > 1 and not _flats_equal(states):
                    a2_lost = True
            step += 1
        if policy.mode == STALE and fwd is not None:
            policy.cache = snapshot_epoch(
                clients, fwd.banks, plan, ledger=ledger, step=step - 1, epoch=epoch
            )
        losses.append(loss_sum / node_count)
    return step, losses, a2_lost


def train_centralized(
    g,
    params0: ModelParams,
    cfg: TrainConfig,
    eval_fn: Optional[Callable] = None,
) -> TrainResult:
    """Mini-batch SGD on the whole graph.  The remote policy is never consulted."""
    params = params0.copy()
    history = History()
    ledger = ExchangeLedger(params.arch.width)
    stopper = _Stopper(cfg.patience) if eval_fn is not None else None
    n = g.num_nodes
    for epoch in range(cfg.epochs):
        rng = _epoch_rng(cfg.rng_seed, 0, epoch)
        loss_sum = 0.0
        for batch in node_batches(n, cfg.batch_size, rng):
            bundle = loss_and_grad(params, g, batch)
            if not np.isfinite(bundle.loss):
                raise DivergenceError(
                    f"non-finite loss {bundle.loss!r} at epoch {epoch}"
                )
            params.flat -= cfg.lr * bundle.grad
            loss_sum += bundle.loss * batch.size
        history.loss.append(loss_sum / n)
        if stopper is not None:
            metric = eval_fn(params)
            history.val.append((epoch, metric))
            if stopper.update(metric, [params.flat], epoch):
                history.stopped_at = epoch
                break
    if stopper is not None:
        stopper.restore([params.flat])
        history.best_epoch = stopper.best_epoch
    return TrainResult(params, history, ledger)


def _client_states(g, part, params0: ModelParams) -> List[ClientState]:
    clients = build_clients(g, part)
    return [ClientState(rt, params0.copy(), int(rt.n_owned)) for rt in clients]


def train_local(
    g,
    part,
    params0: ModelParams,
    cfg: TrainConfig,
    eval_fn: Optional[Callable] = None,
    executor=None,
) -> TrainResult:
    """Independent per-client SGD; returns one ModelParams per client."""
    states = _client_states(g, part, params0)
    plan = ExchangePlan.from_partition(part)
    policy = _policy_for(cfg)
    history = History()
    ledger = ExchangeLedger(params0.arch.width)
    stopper = _Stopper(cfg.patience) if eval_fn is not None else None
    step = 0
    for epoch in range(cfg.epochs):
        step, losses, _ = _run_epochs(
            states, cfg, policy, plan, ledger, g, 1, epoch, step, False, executor
        )
        history.loss.extend(losses)
        if stopper is not None:
            metric = eval_fn([st.params for st in states])
            history.val.append((epoch, metric))
            if stopper.update(metric, [st.params.flat for st in states], epoch):
                history.stopped_at = epoch
                break
    if stopper is not None:
        stopper.restore([st.params.flat for st in states])
        history.best_epoch = stopper.best_epoch
    return TrainResult([st.params for st in states], history, ledger)


def train_fedavg(
    g,
    part,
    params0: ModelParams,
    cfg: TrainConfig,
    eval_fn: Optional[Callable] = None,
    executor=None,
) -> TrainResult:
    """Rounds of E local epochs, then average parameters weighted by K_c.

    The aggregate is computed as sum(K_c * theta_c) / sum(K_c), so the
    weights sum to one by construction.  cfg.epochs counts local epochs and
    must be a multiple of cfg.local_epochs.
    """
    if cfg.epochs % cfg.local_epochs != 0:
        raise ValueError("epochs must be a multiple of local_epochs")
    rounds = cfg.epochs // cfg.local_epochs
    states = _client_states(g, part, params0)
    plan = ExchangePlan.from_partition(part)
    policy = _policy_for(cfg)
    history = History()
    ledger = ExchangeLedger(params0.arch.width)
    stopper = _Stopper(cfg.patience) if eval_fn is not None else None
    global_params = params0.copy()
    total_weight = sum(st.weight for st in states)
    step = 0
    for r in range(rounds):
        for st in states:
            st.params = global_params.copy()
        if not _flats_equal(states):
            raise TrainingError(f"clients differ at the start of round {r}")
        step, losses, lost = _run_epochs(
            states,
            cfg,
            policy,
            plan,
            ledger,
            g,
            cfg.local_epochs,
            r * cfg.local_epochs,
            step,
            False,
            executor,
        )
        history.loss.extend(losses)
        if lost:
            history.param_drift_rounds.append(r)
        acc = np.zeros_like(global_params.flat)
        for st in states:
            acc += st.weight * st.params.flat
        global_params.flat[...] = acc / total_weight
        if stopper is not None:
            epoch = (r + 1) * cfg.local_epochs - 1
            metric = eval_fn(global_params)
            history.val.append((epoch, metric))
            if stopper.update(metric, [global_params.flat], epoch):
                history.stopped_at = epoch
                break
    if stopper is not None:
        stopper.restore([global_params.flat])
        history.best_epoch = stopper.best_epoch
    return TrainResult(global_params, history, ledger)


def train_syncsgd(
    g,
    part,
    params0: ModelParams,
    cfg: TrainConfig,
    eval_fn: Optional[Callable] = None,
    executor=None,
) -> TrainResult:
    """Batch-size-weighted gradient averaging every step.

    Every client applies the identical update vector, so flat parameters
    stay bitwise equal across clients; this is asserted before each step.
    """
    states = _client_states(g, part, params0)
    plan = ExchangePlan.from_partition(part)
    policy = _policy_for(cfg)
    history = History()
    ledger = ExchangeLedger(params0.arch.width)
    stopper = _Stopper(cfg.patience) if eval_fn is not None else None
    step = 0
    for epoch in range(cfg.epochs):
        step, losses, _ = _run_epochs(
            states, cfg, policy, plan, ledger, g, 1, epoch, step, True, executor
        )
        history.loss.extend(losses)
        if stopper is not None:
            metric = eval_fn(states[0].params)
            history.val.append((epoch, metric))
            if stopper.update(metric, [states[0].params.flat], epoch):
                history.stopped_at = epoch
                break
    if not _flats_equal(states):
        raise TrainingError("sync-sgd finished with unequal client parameters")
    if stopper is not None:
        for st in states:
            stopper.restore([st.params.flat])
        history.best_epoch = stopper.best_epoch
    return TrainResult(states[0].params, history, ledger)


def train(
    g,
    part,
    params0: ModelParams,
    cfg: TrainConfig,
    eval_fn: Optional[Callable] = None,
    executor=None,
) -> TrainResult:
    """Dispatch on cfg.regime.  ``part`` may be None for the centralized regime."""
    if cfg.regime == CENTRALIZED:
        return train_centralized(g, params0, cfg, eval_fn)
    if part is None:
        raise ValueError(f"regime {cfg.regime!r} needs a partition")
    if cfg.regime == LOCAL:
        return train_local(g, part, params0, cfg, eval_fn, executor)
    if cfg.regime == FEDAVG:
        return train_fedavg(g, part, params0, cfg, eval_fn, executor)
    return train_syncsgd(g, part, params0, cfg, eval_fn, executor)
