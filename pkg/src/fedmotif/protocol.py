"""Layer-wise embedding exchange between clients of a partitioned graph.

The forward pass runs in lockstep: a compute phase (clients independent,
optionally on a thread pool) alternates with an exchange barrier where every
owner broadcasts the just-computed embeddings of its boundary nodes to the
clients holding them as remote stubs.  With fresh per-layer exchange each
client reproduces the centralized embeddings of its owned nodes bit for bit;
the placeholder and stale policies exist to measure what breaks without it.

Only embedding rows ever travel: raw features and labels stay on their owner.
Transport is an in-memory mailbox per client pair with explicit enqueue and
drain phases; there is no central server.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from fedmotif.graph import Graph
from fedmotif.model import (
    ForwardState,
    MessageIndex,
    ModelParams,
    embed,
    forward_full,
    head_logits,
    layer_forward,
)
from fedmotif.partition import Partition, extend

__all__ = [
    "FRESH",
    "PLACEHOLDER",
    "STALE",
    "PROV_MISSING",
    "PROV_LOCAL",
    "PROV_RECEIVED",
    "PROV_PLACEHOLDER",
    "PROV_STALE",
    "BarrierError",
    "PolicyError",
    "RemotePolicy",
    "StaleCache",
    "ExchangePlan",
    "ExchangeLedger",
    "Mailbox",
    "LayerBank",
    "ClientRuntime",
    "build_clients",
    "exchange_layer",
    "distributed_forward",
    "snapshot_epoch",
    "measure_gap",
    "GapReport",
]

FRESH = "fresh_layerwise"
PLACEHOLDER = "placeholder_zero"
STALE = "stale_epoch"

PROV_MISSING = -1
PROV_LOCAL = 0
PROV_RECEIVED = 1
PROV_PLACEHOLDER = 2
PROV_STALE = 3


class BarrierError(RuntimeError):
    """A client ran ahead of (or skipped) an exchange barrier."""


class PolicyError(RuntimeError):
    """A remote policy was asked to do something its mode forbids."""


@dataclass
class StaleCache:
    """Boundary-row snapshots taken at an epoch boundary.

    Keys are (layer, global node id).  Reads of nodes never snapshotted fall
    back to the placeholder vector (the cold-start convention).
    """

    rows: dict = field(default_factory=dict)
    epoch: int = -1

    def get(self, layer: int, u: int, default_row: np.ndarray) -> np.ndarray:
        return self.rows.get((layer, int(u)), default_row)


@dataclass
class RemotePolicy:
    """How a client fills remote embedding rows before each layer."""

    mode: str = FRESH
    placeholder: Optional[np.ndarray] = None
    cache: Optional[StaleCache] = None

    def __post_init__(self):
        if self.mode not in (FRESH, PLACEHOLDER, STALE):
            raise PolicyError(f"unknown remote policy {self.mode!r}")

    def placeholder_row(self, d: int) -> np.ndarray:
        if self.placeholder is None:
            return np.zeros(d)
        if self.placeholder.shape != (d,):
            raise PolicyError("placeholder width does not match embedding width")
        return self.placeholder

    @classmethod
    def fresh(cls):
        return cls(FRESH)

    @classmethod
    def placeholder_zero(cls):
        return cls(PLACEHOLDER)

    @classmethod
    def stale(cls, cache: Optional[StaleCache] = None):
        return cls(STALE, cache=cache if cache is not None else StaleCache())


class ExchangePlan:
    """Static routing derived from a Partition: who sends which node where."""

    def __init__(self, num_clients, batches, sent_per_owner, subscribers):
        self.num_clients = num_clients
        # per owner: list of (receiver, global node ids) with receivers and
        # ids ascending; one mailbox message per entry per layer
        self.batches = batches
        self.sent_per_owner = sent_per_owner
        self.subscribers = subscribers  # global node id -> tuple of receivers

    @classmethod
    def from_partition(cls, part: Partition) -> "ExchangePlan":
        per_owner = [{} for _ in range(part.num_clients)]
        subscribers = {}
        for receiver in range(part.num_clients):
            for u in part.v_rem[receiver].tolist():
                per_owner[part.owner[u]].setdefault(receiver, []).append(u)
                subscribers.setdefault(u, []).append(receiver)
        batches, sent = [], []
        for c in range(part.num_clients):
            rows = [
                (receiver, np.array(sorted(us), dtype=np.int64))
                for receiver, us in sorted(per_owner[c].items())
            ]
            batches.append(rows)
            sent.append(sum(len(us) for _, us in rows))
        subs = {u: tuple(sorted(rs)) for u, rs in subscribers.items()}
        return cls(part.num_clients, batches, sent, subs)


class ExchangeLedger:
    """Embedding traffic accounting: one entry per (step, layer, sender)."""

    def __init__(self, d: int):
        self.d = d
        self.entries = []  # (step, layer, client, embeddings_sent, bytes)

    def record(self, step: int, layer: int, client: int, count: int) -> None:
        if count:
            self.entries.append((step, layer, client, count, count * self.d * 8))

    @property
    def total_embeddings(self) -> int:
        return sum(e[3] for e in self.entries)

    @property
    def total_bytes(self) -> int:
        return sum(e[4] for e in self.entries)

    def per_layer(self) -> dict:
        out = {}
        for _, layer, _, count, _ in self.entries:
            out[layer] = out.get(layer, 0) + count
        return out

    def per_step(self) -> dict:
        out = {}
        for step, _, _, count, _ in self.entries:
            out[step] = out.get(step, 0) + count
        return out

    @property
    def steps_observed(self):
        return sorted({e[0] for e in self.entries})

    def to_csv(self) -> str:
        lines = ["step,layer,client,embeddings_sent,bytes"]
        lines += [f"{s},{l},{c},{n},{b}" for s, l, c, n, b in self.entries]
        return "\n".join(lines) + "\n"


class Mailbox:
    """Point-to-point queues with explicit enqueue then drain per barrier."""

    def __init__(self):
        self._queues = {}

    def post(self, sender, receiver, layer, nodes, rows):
        self._queues.setdefault(receiver, []).append((sender, layer, nodes, rows))

    def drain(self, receiver):
        return self._queues.pop(receiver, [])

    @property
    def pending(self) -> int:
        return sum(len(q) for q in self._queues.values())


class LayerBank:
    """Per-client embedding rows for every layer, with provenance tracking."""

    def __init__(self, n_local: int, n_owned: int, d: int, layers: int):
        self.n_owned = n_owned
        self.h = [np.full((n_local, d), np.nan) for _ in range(layers + 1)]
        self.prov = [
            np.full(n_local, PROV_MISSING, dtype=np.int8) for _ in range(layers + 1)
        ]

    def set_owned(self, layer: int, rows: np.ndarray) -> None:
        self.h[layer][: self.n_owned] = rows
        self.prov[layer][: self.n_owned] = PROV_LOCAL

    def set_remote_block(self, layer: int, rows: np.ndarray, provenance: int) -> None:
        self.h[layer][self.n_owned :] = rows
        self.prov[layer][self.n_owned :] = provenance

    def set_rows(self, layer, local_ids, rows, provenance) -> None:
        self.h[layer][local_ids] = rows
        self.prov[layer][local_ids] = provenance


class ClientRuntime:
    """One client's static wiring: view, message index, owned features/labels.

    Built once per (graph, partition, client) and reused across every step;
    only owned feature and label rows are ever materialized here.
    """

    def __init__(self, g: Graph, part: Partition, client: int):
        self.client = client
        self.sub = extend(g, part, client)
        self.idx = MessageIndex.from_subgraph(self.sub)
        self.n_owned = self.sub.n_owned
        self.n_local = self.sub.n_local
        masked = self.sub.masked_features()
        self.features = np.asarray(masked[: self.n_owned].filled(np.nan))
        self.labels = g.labels[self.sub.owned]
        self.boundary_globals = part.boundary[client]
        self.boundary_locals = (
            self.sub.local_ids(self.boundary_globals)
            if len(self.boundary_globals)
            else np.empty(0, dtype=np.int64)
        )
        self.remote_globals = part.v_rem[client]
        self._owned_adj = None

    def local_ids(self, nodes) -> np.ndarray:
        return self.sub.local_ids(nodes)

    def owned_adjacency(self):
        """Undirected neighbor lists among owned nodes (local ids)."""
        if self._owned_adj is None:
            g = self.sub.graph
            adj = [[] for _ in range(self.n_owned)]
            for eid in self.sub.partition.e_intra[self.client]:
                a = self.sub.local_id(int(g.src[eid]))
                b = self.sub.local_id(int(g.dst[eid]))
                if a != b:
                    adj[a].append(b)
                    adj[b].append(a)
            self._owned_adj = adj
        return self._owned_adj

    def boundary_affected(self, layers: int) -> np.ndarray:
        """Owned nodes whose layer-`layers` output depends on a remote row.

        A placeholder insertion first corrupts layer 1 at boundary nodes and
        then spreads one owned hop per layer, so the affected set is the
        radius-(layers-1) ball around the boundary in the owned subgraph.
        """
        flags = np.zeros(self.n_owned, dtype=bool)
        if layers == 0 or len(self.boundary_locals) == 0:
            return flags
        adj = self.owned_adjacency()
        frontier = set(self.boundary_locals.tolist())
        flags[list(frontier)] = True
        for _ in range(layers - 1):
            nxt = {w for v in frontier for w in adj[v] if not flags[w]}
            if not nxt:
                break
            flags[list(nxt)] = True
            frontier = nxt
        return flags


def build_clients(g: Graph, part: Partition):
    return [ClientRuntime(g, part, c) for c in range(part.num_clients)]


# ---------------------------------------------------------------------------
# the barrier itself
# ---------------------------------------------------------------------------


def exchange_layer(layer, clients, banks, plan, mailbox, ledger, step=0):
    """Owners broadcast layer-`layer` boundary rows; receivers fill remotes.

    Raises BarrierError if an owner has not computed the rows it must send
    (the compute phase for this layer did not finish) or if a receiver ends
    the drain with remote rows still missing.
    """
    for c, rt in enumerate(clients):
        bank = banks[c]
        if not (bank.prov[layer][rt.boundary_locals] == PROV_LOCAL).all():
            raise BarrierError(
                f"client {c} must compute layer {layer} before broadcasting it"
            )
        for receiver, nodes in plan.batches[c]:
            rows = bank.h[layer][rt.local_ids(nodes)].copy()
            mailbox.post(c, receiver, layer, nodes, rows)
        ledger.record(step, layer, c, plan.sent_per_owner[c])
    for c, rt in enumerate(clients):
        bank = banks[c]
        for sender, msg_layer, nodes, rows in mailbox.drain(c):
            if msg_layer != layer:
                raise BarrierError(
                    f"client {c} drained a layer-{msg_layer} message at the "
                    f"layer-{layer} barrier"
                )
            bank.set_rows(layer, rt.local_ids(nodes), rows, PROV_RECEIVED)
        if (bank.prov[layer][rt.n_owned :] == PROV_MISSING).any():
            raise BarrierError(f"client {c}: remote rows missing after drain")


def _fill_remote(layer, clients, banks, policy, plan, mailbox, ledger, step, d):
    if policy.mode == FRESH:
        exchange_layer(layer, clients, banks, plan, mailbox, ledger, step)
        return
    if policy.mode == PLACEHOLDER:
        row = policy.placeholder_row(d)
        for rt, bank in zip(clients, banks):
            block = np.tile(row, (rt.n_local - rt.n_owned, 1))
            bank.set_remote_block(layer, block, PROV_PLACEHOLDER)
        return
    if policy.cache is None:
        raise PolicyError("stale policy requires a cache (possibly cold)")
    row = policy.placeholder_row(d)
    for rt, bank in zip(clients, banks):
        block = np.stack(
            [policy.cache.get(layer, u, row) for u in rt.remote_globals.tolist()]
        ) if rt.n_local > rt.n_owned else np.zeros((0, d))
        bank.set_remote_block(layer, block, PROV_STALE)


@dataclass
class DistributedForward:
    states: list  # per-client ForwardState, backward-ready
    banks: list  # per-client LayerBank with provenance

    @property
    def logits(self):
        return [s.logits for s in self.states]


def distributed_forward(
    params,
    clients,
    policy: RemotePolicy,
    ledger: Optional[ExchangeLedger] = None,
    step: int = 0,
    executor=None,
    plan: Optional[ExchangePlan] = None,
) -> DistributedForward:
    """One lockstep forward pass for every client under a remote policy.

    ``params`` is either one shared ModelParams (the A2 setting Theorem-1
    equivalence needs) or a per-client sequence (locally trained models whose
    weights have drifted apart; the protocol still runs, the guarantee does
    not).  Compute phases run per client (concurrently when an executor is
    given); remote rows are filled at a global barrier between layers.
    Exchanges cover layers 0..L-1: the final layer feeds only local heads.
    """
    if isinstance(params, (list, tuple)):
        ps = list(params)
        if len(ps) != len(clients):
            raise ValueError("need one ModelParams per client")
        if any(p.arch != ps[0].arch for p in ps):
            raise ValueError("clients must share one architecture")
    else:
        ps = [params] * len(clients)
    arch = ps[0].arch
    L, d = arch.layers, arch.width
    g = clients[0].sub.graph
    if plan is None:
        plan = ExchangePlan.from_partition(clients[0].sub.partition)
    if ledger is None:
        ledger = ExchangeLedger(d)
    banks = [LayerBank(rt.n_local, rt.n_owned, d, L) for rt in clients]
    mailbox = Mailbox()
    caches = [[] for _ in clients]

    def run_phase(fn):
        if executor is None:
            return [fn(i) for i in range(len(clients))]
        return list(executor.map(fn, range(len(clients))))

    def phase_embed(i):
        banks[i].set_owned(0, embed(ps[i], clients[i].features))

    run_phase(phase_embed)
    for l in range(L):
        _fill_remote(l, clients, banks, policy, plan, mailbox, ledger, step, d)

        def phase_layer(i, l=l):
            rt, bank = clients[i], banks[i]
            defined = bank.prov[l] != PROV_MISSING
            h_new, cache = layer_forward(
                ps[i], l, bank.h[l], rt.idx, g.edge_features, defined=defined
            )
            caches[i].append(cache)
            bank.set_owned(l + 1, h_new)

        run_phase(phase_layer)

    def phase_heads(i):
        return head_logits(ps[i], banks[i].h[L][: clients[i].n_owned])

    logits = run_phase(phase_heads)
    states = [
        ForwardState(
            banks=[banks[i].h[l] for l in range(L + 1)],
            caches=caches[i],
            x0=clients[i].features,
            logits=logits[i],
            head_rows=clients[i].idx.targets,
            idx=clients[i].idx,
        )
        for i in range(len(clients))
    ]
    return DistributedForward(states, banks)


def snapshot_epoch(clients, banks, plan, ledger=None, step=0, epoch=0) -> StaleCache:
    """Deep-copy every owner's boundary rows for layers 0..L-1 into a fresh
    cache; the accounting charges one broadcast per layer per epoch."""
    L = len(banks[0].h) - 1
    cache = StaleCache(epoch=epoch)
    for layer in range(L):
        for c, rt in enumerate(clients):
            bank = banks[c]
            if not (bank.prov[layer][rt.boundary_locals] == PROV_LOCAL).all():
                raise BarrierError(
                    f"client {c}: cannot snapshot layer {layer} before computing it"
                )
            for u, lid in zip(rt.boundary_globals.tolist(), rt.boundary_locals):
                cache.rows[(layer, u)] = bank.h[layer][lid].copy()
            if ledger is not None:
                ledger.record(step, layer, c, plan.sent_per_owner[c])
    return cache


# ---------------------------------------------------------------------------
# the gap a policy leaves open
# ---------------------------------------------------------------------------


@dataclass
class ClientGap:
    client: int
    owned: np.ndarray  # global node ids
    l2: np.ndarray  # per owned node, ||h_cent - h_client||_2 at layer L
    flagged: np.ndarray  # True where the receptive field crosses a boundary


@dataclass
class GapReport:
    clients: list
    max_abs: float

    def flagged_l2(self) -> np.ndarray:
        return np.concatenate([c.l2[c.flagged] for c in self.clients])

    def unflagged_l2(self) -> np.ndarray:
        return np.concatenate([c.l2[~c.flagged] for c in self.clients])

    @property
    def flagged_nonzero_fraction(self) -> float:
        gaps = self.flagged_l2()
        return float((gaps > 0).mean()) if len(gaps) else 1.0

    @property
    def unflagged_all_zero(self) -> bool:
        gaps = self.unflagged_l2()
        return bool((gaps == 0).all())


def measure_gap(params, g, clients, policy, executor=None) -> GapReport:
    """Layer-L deviation of each client's owned rows from centralized rows."""
    L = params.arch.layers
    cent = forward_full(params, g)
    dist = distributed_forward(params, clients, policy, executor=executor)
    per_client, max_abs = [], 0.0
    for rt, bank in zip(clients, dist.banks):
        delta = cent.banks[L][rt.sub.owned] - bank.h[L][: rt.n_owned]
        l2 = np.linalg.norm(delta, axis=1)
        if delta.size:
            max_abs = max(max_abs, float(np.abs(delta).max()))
        per_client.append(
            ClientGap(rt.client, rt.sub.owned, l2, rt.boundary_affected(L))
        )
    return GapReport(per_client, max_abs)
