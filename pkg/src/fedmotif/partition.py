"""Node partitioning into client-owned subgraphs, plus extended views.

Both partitioners work on the symmetrized simple graph (parallel-edge
multiplicities become weights, direction dropped); the returned Partition
classifies the original directed multigraph's edges.  Remote nodes are
visible through an ExtendedSubgraph only structurally: touching their
features or labels raises, so information-boundary violations fail loudly
instead of silently reading zeros.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fedmotif.graph import Graph


class PartitionError(ValueError):
    """Invalid partitioning request (bad k, infeasible balance)."""


class MaskedAccessError(RuntimeError):
    """Attempt to read a remote node's features or labels."""


# ---------------------------------------------------------------------------
# partition container
# ---------------------------------------------------------------------------


@dataclass
class Partition:
    """Ownership map plus the per-client derived sets.

    Attributes:
        num_clients: client count C
        owner: int64 [N], owner[v] = client id
        v_own: per client, owned node ids (ascending)
        v_rem: per client, remote neighbor node ids (ascending)
        e_intra: per client, edge ids with both endpoints owned
        e_rem: per client, edge ids with exactly one endpoint owned
        boundary: per client, owned nodes some other client sees as remote
        cut_edges: number of directed edges crossing clients
    """

    num_clients: int
    owner: np.ndarray
    v_own: list
    v_rem: list
    e_intra: list
    e_rem: list
    boundary: list
    cut_edges: int


def from_owner(g: Graph, owner: np.ndarray, num_clients: int) -> Partition:
    """Derive all per-client sets from an ownership vector."""
    owner = np.asarray(owner, dtype=np.int64)
    if owner.shape != (g.num_nodes,):
        raise PartitionError(f"owner vector shape {owner.shape} != ({g.num_nodes},)")
    if g.num_nodes and (owner.min() < 0 or owner.max() >= num_clients):
        raise PartitionError("owner ids out of range")

    so, do = owner[g.src], owner[g.dst]
    cross = so != do
    v_own, v_rem, e_intra, e_rem, boundary = [], [], [], [], []
    for c in range(num_clients):
        v_own.append(np.nonzero(owner == c)[0])
        e_intra.append(np.nonzero((so == c) & (do == c))[0])
        rem_ids = np.nonzero(cross & ((so == c) | (do == c)))[0]
        e_rem.append(rem_ids)
        out_cross = cross & (so == c)
        in_cross = cross & (do == c)
        v_rem.append(np.unique(np.concatenate([g.dst[out_cross], g.src[in_cross]])))
        boundary.append(np.unique(np.concatenate([g.src[out_cross], g.dst[in_cross]])))
    return Partition(
        num_clients=num_clients,
        owner=owner,
        v_own=v_own,
        v_rem=v_rem,
        e_intra=e_intra,
        e_rem=e_rem,
        boundary=boundary,
        cut_edges=int(cross.sum()),
    )


# ---------------------------------------------------------------------------
# symmetrized weighted view
# ---------------------------------------------------------------------------


def _sym_adj(g: Graph):
    """(adj, loop_w, deg): undirected weighted adjacency dicts.

    Each directed edge u->v (u != v) contributes weight 1 to both w[u][v]
    and w[v][u]; a self-loop contributes 2 to its node's loop weight (the
    usual undirected convention, so degrees stay consistent).
    """
    adj = [dict() for _ in range(g.num_nodes)]
    loop_w = np.zeros(g.num_nodes)
    for s, d in zip(g.src.tolist(), g.dst.tolist()):
        if s == d:
            loop_w[s] += 2.0
        else:
            adj[s][d] = adj[s].get(d, 0.0) + 1.0
            adj[d][s] = adj[d].get(s, 0.0) + 1.0
    deg = loop_w + np.array([sum(a.values()) for a in adj])
    return adj, loop_w, deg


def modularity(g: Graph, owner: np.ndarray) -> float:
    """Newman modularity of a node assignment on the symmetrized graph."""
    adj, loop_w, deg = _sym_adj(g)
    two_m = float(deg.sum())
    if two_m == 0:
        return 0.0
    owner = np.asarray(owner)
    n_comm = int(owner.max()) + 1 if len(owner) else 0
    internal = np.zeros(n_comm)
    tot = np.zeros(n_comm)
    for v in range(g.num_nodes):
        c = owner[v]
        tot[c] += deg[v]
        internal[c] += loop_w[v]
        for u, w in adj[v].items():
            if owner[u] == c:
                internal[c] += w
    return float(np.sum(internal / two_m - (tot / two_m) ** 2))


# ---------------------------------------------------------------------------
# Louvain
# ---------------------------------------------------------------------------


def _one_level(adj, loop_w, deg, two_m, rng):
    """Greedy modularity moves until no node improves; returns communities."""
    n = len(adj)
    comm = np.arange(n)
    tot = deg.copy()
    order = rng.permutation(n)
    improved = False
    moved = True
    while moved:
        moved = False
        for v in order:
            cv = comm[v]
            nw = {}
            for u, w in adj[v].items():
                cu = comm[u]
                nw[cu] = nw.get(cu, 0.0) + w
            tot[cv] -= deg[v]
            best, best_gain = cv, nw.get(cv, 0.0) - deg[v] * tot[cv] / two_m
            for c, wv in nw.items():
                if c == cv:
                    continue
                gain = wv - deg[v] * tot[c] / two_m
                if gain > best_gain + 1e-12:
                    best, best_gain = c, gain
            comm[v] = best
            tot[best] += deg[v]
            if best != cv:
                moved = improved = True
    return comm, improved


def _aggregate(adj, loop_w, comm):
    """Contract communities into super-nodes, summing weights."""
    labels, dense = np.unique(comm, return_inverse=True)
    k = len(labels)
    new_adj = [dict() for _ in range(k)]
    new_loop = np.zeros(k)
    for v, c in enumerate(dense):
        new_loop[c] += loop_w[v]
        for u, w in adj[v].items():
            cu = dense[u]
            if cu == c:
                new_loop[c] += w  # internal pair counted from both sides
            else:
                new_adj[c][cu] = new_adj[c].get(cu, 0.0) + w
    new_deg = new_loop + np.array([sum(a.values()) for a in new_adj])
    return new_adj, new_loop, new_deg, dense


def _louvain_communities(g: Graph, rng) -> np.ndarray:
    adj, loop_w, deg = _sym_adj(g)
    two_m = float(deg.sum())
    assign = np.arange(g.num_nodes)
    if two_m == 0:
        return assign
    while True:
        comm, improved = _one_level(adj, loop_w, deg, two_m, rng)
        if not improved:
            break
        adj, loop_w, deg, dense = _aggregate(adj, loop_w, comm)
        assign = dense[assign]
        if len(adj) <= 1:
            break
    labels, assign = np.unique(assign, return_inverse=True)
    return assign


def louvain(g: Graph, target_clients: int, rng_seed: int = 0) -> Partition:
    """Modularity communities coarsened or split to exactly target_clients.

    Louvain proper never decreases modularity; the forced merge/split to
    hit the requested client count can (Louvain's natural community count
    is data-driven and usually larger).
    """
    _check_k(g, target_clients)
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed, spawn_key=(17,)))
    assign = _louvain_communities(g, rng)
    assign = _to_exact_k(g, assign, target_clients, rng)
    return from_owner(g, assign, target_clients)


def _check_k(g: Graph, k: int) -> None:
    if k < 1:
        raise PartitionError("client count must be >= 1")
    if k > g.num_nodes:
        raise PartitionError(f"cannot split {g.num_nodes} nodes into {k} clients")


def _to_exact_k(g: Graph, assign: np.ndarray, k: int, rng) -> np.ndarray:
    """Merge highest-weight community pairs / bisect largest ones to hit k."""
    adj, _, _ = _sym_adj(g)
    assign = np.unique(assign, return_inverse=True)[1]

    while int(assign.max()) + 1 > k:
        n_comm = int(assign.max()) + 1
        inter = {}
        for v in range(g.num_nodes):
            for u, w in adj[v].items():
                a, b = assign[v], assign[u]
                if a < b:
                    inter[(a, b)] = inter.get((a, b), 0.0) + w
        if inter:
            a, b = max(sorted(inter), key=lambda p: inter[p])
        else:  # disconnected communities: merge the two smallest
            sizes = np.bincount(assign, minlength=n_comm)
            a, b = np.argsort(sizes, kind="stable")[:2]
        assign[assign == b] = a
        assign = np.unique(assign, return_inverse=True)[1]

    while int(assign.max()) + 1 < k:
        n_comm = int(assign.max()) + 1
        sizes = np.bincount(assign, minlength=n_comm)
        big = int(np.argmax(sizes))
        nodes = np.nonzero(assign == big)[0]
        if len(nodes) < 2:
            raise PartitionError("cannot split further: all communities are singletons")
        half = _bisect(nodes, adj, rng)
        assign[nodes[half]] = n_comm
        assign = np.unique(assign, return_inverse=True)[1]
    return assign


def _bisect(nodes: np.ndarray, adj, rng) -> np.ndarray:
    """Balanced seeded 2-way split of `nodes`; returns bool mask (True=side 1).

    Greedy swap refinement on the induced subgraph, sizes fixed at n/2.
    """
    n = len(nodes)
    local = {int(v): i for i, v in enumerate(nodes)}
    w_loc = [dict() for _ in range(n)]
    for i, v in enumerate(nodes):
        for u, w in adj[int(v)].items():
            j = local.get(int(u))
            if j is not None:
                w_loc[i][j] = w_loc[i].get(j, 0.0) + w
    side = np.zeros(n, dtype=bool)
    side[rng.permutation(n)[: n // 2]] = True

    def gain(i):  # cut reduction if i switches sides
        s = int(side[i])
        both = [0.0, 0.0]
        for j, w in w_loc[i].items():
            both[int(side[j])] += w
        return both[1 - s] - both[s]

    for _ in range(8):
        g0 = [(gain(i), i) for i in range(n) if not side[i]]
        g1 = [(gain(i), i) for i in range(n) if side[i]]
        if not g0 or not g1:
            break
        (ga, a) = max(g0)
        (gb, b) = max(g1)
        delta = ga + gb - 2.0 * w_loc[a].get(b, 0.0)
        if delta <= 1e-12:
            break
        side[a] = True
        side[b] = False
    return side


# ---------------------------------------------------------------------------
# balanced k-way
# ---------------------------------------------------------------------------


def balanced_kway(g: Graph, k: int, imbalance_eps: float = 0.0, rng_seed: int = 0) -> Partition:
    """Random balanced start + greedy move/swap refinement of the edge cut.

    Every part ends at size <= ceil((1+eps) * N / k); after refinement no
    single-node move that respects the cap can reduce the cut.  Swap passes
    let eps=0 partitions keep improving even though every part is full.
    """
    _check_k(g, k)
    if imbalance_eps < 0:
        raise PartitionError("imbalance_eps must be >= 0")
    n = g.num_nodes
    cap = math.ceil((1 + imbalance_eps) * n / k)
    if cap * k < n:
        raise PartitionError("infeasible balance constraint")

    rng = np.random.default_rng(np.random.SeedSequence(rng_seed, spawn_key=(23,)))
    owner = np.empty(n, dtype=np.int64)
    for c, chunk in enumerate(np.array_split(rng.permutation(n), k)):
        owner[chunk] = c
    adj, _, _ = _sym_adj(g)
    sizes = np.bincount(owner, minlength=k)

    def part_weights(v):
        pw = np.zeros(k)
        for u, w in adj[v].items():
            pw[owner[u]] += w
        return pw

    for _ in range(12):
        changed = False
        # single-node moves under the cap
        for v in rng.permutation(n):
            p = owner[v]
            pw = part_weights(v)
            q = int(np.argmax(pw - 1e9 * (sizes >= cap)))
            if q != p and sizes[q] < cap and pw[q] > pw[p] + 1e-12:
                owner[v] = q
                sizes[p] -= 1
                sizes[q] += 1
                changed = True
        # pairwise swaps (needed when eps=0 keeps all parts at cap)
        best_to = [dict() for _ in range(k)]  # part -> {target: (gain, node)}
        for v in range(n):
            p = owner[v]
            pw = part_weights(v)
            for q in range(k):
                if q == p:
                    continue
                gain = pw[q] - pw[p]
                cur = best_to[p].get(q)
                if cur is None or gain > cur[0]:
                    best_to[p][q] = (gain, v)
        for a in range(k):
            for b in range(a + 1, k):
                fa = best_to[a].get(b)
                fb = best_to[b].get(a)
                if fa is None or fb is None:
                    continue
                (ga, u), (gb, v) = fa, fb
                if owner[u] != a or owner[v] != b:
                    continue  # already moved this pass
                delta = ga + gb - 2.0 * adj[u].get(v, 0.0)
                if delta > 1e-12:
                    owner[u], owner[v] = b, a
                    changed = True
        if not changed:
            break
    return from_owner(g, owner, k)


# ---------------------------------------------------------------------------
# extended subgraphs (assumption: structure shared, data private)
# ---------------------------------------------------------------------------


class ExtendedSubgraph:
    """A client's owned nodes plus remote stubs and the edges touching them.

    Local node order is owned nodes (ascending global id) followed by
    remote nodes (ascending).  Feature/label access for remote nodes raises
    MaskedAccessError; `masked_features()` exposes the same boundary as a
    numpy masked array for bulk use.
    """

    def __init__(self, g: Graph, part: Partition, client: int):
        if not 0 <= client < part.num_clients:
            raise PartitionError(f"no such client {client}")
        self.graph = g
        self.partition = part
        self.client = client
        self.owned = part.v_own[client]
        self.remote = part.v_rem[client]
        self.all_nodes = np.concatenate([self.owned, self.remote]).astype(np.int64)
        self.n_owned = len(self.owned)
        self.n_local = len(self.all_nodes)
        self._local = np.full(g.num_nodes, -1, dtype=np.int64)
        self._local[self.all_nodes] = np.arange(self.n_local)
        self.edge_ids = np.sort(
            np.concatenate([part.e_intra[client], part.e_rem[client]])
        ).astype(np.int64)
        self.src_local = self._local[g.src[self.edge_ids]]
        self.dst_local = self._local[g.dst[self.edge_ids]]

    def is_owned(self, v: int) -> bool:
        return self._local[v] != -1 and self._local[v] < self.n_owned

    def local_id(self, v: int) -> int:
        lid = int(self._local[v])
        if lid == -1:
            raise KeyError(f"node {v} not visible to client {self.client}")
        return lid

    def local_ids(self, nodes) -> np.ndarray:
        lids = self._local[np.asarray(nodes, dtype=np.int64)]
        if (lids == -1).any():
            bad = np.asarray(nodes)[lids == -1][:3]
            raise KeyError(f"nodes {bad.tolist()} not visible to client {self.client}")
        return lids

    def node_features(self, v: int) -> np.ndarray:
        if not self.is_owned(v):
            raise MaskedAccessError(
                f"client {self.client} may not read features of remote node {v}"
            )
        return self.graph.node_features[v]

    def node_labels(self, v: int) -> np.ndarray:
        if not self.is_owned(v):
            raise MaskedAccessError(
                f"client {self.client} may not read labels of remote node {v}"
            )
        return self.graph.labels[v]

    def masked_features(self) -> np.ma.MaskedArray:
        """[n_local x d_in] with every remote row masked out."""
        data = self.graph.node_features[self.all_nodes]
        mask = np.zeros(data.shape, dtype=bool)
        mask[self.n_owned :] = True
        return np.ma.MaskedArray(data, mask=mask)


def extend(g: Graph, part: Partition, client: int) -> ExtendedSubgraph:
    return ExtendedSubgraph(g, part, client)


# ---------------------------------------------------------------------------
# text format: one "node client" line per node
# ---------------------------------------------------------------------------


def serialize_partition(part: Partition) -> bytes:
    lines = [f"clients={part.num_clients}"]
    lines += [f"{v} {c}" for v, c in enumerate(part.owner.tolist())]
    return ("\n".join(lines) + "\n").encode()


def deserialize_partition(data: bytes, g: Graph) -> Partition:
    lines = [ln for ln in data.decode().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("clients="):
        raise PartitionError("missing 'clients=<C>' header")
    k = int(lines[0].split("=", 1)[1])
    owner = np.full(g.num_nodes, -1, dtype=np.int64)
    for ln in lines[1:]:
        v_str, c_str = ln.split()
        owner[int(v_str)] = int(c_str)
    if (owner < 0).any():
        raise PartitionError("partition file does not cover every node")
    return from_owner(g, owner, k)
