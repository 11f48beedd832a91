"""Structural pattern detectors for the seven node-level tasks.

Two independent routes compute the same boolean [N x 7] label matrix:

* :func:`oracle_labels` is a transparent brute-force enumerator (per-node
  DFS for cycles, pairwise set intersections for the fan and biclique
  motifs).  It is the ground truth for tests and is fine up to a couple of
  thousand nodes.
* :func:`fast_labels` is the production path: vectorized min-node-rooted
  path extension with boolean-matrix-power pruning for cycles, and sparse
  matrix products for the fan and biclique motifs.  Required to agree with
  the oracle exactly.

Motif definitions (all on distinct nodes; parallel edges and self-loops
never change membership):

* Ck, k in 2..6: node lies on a simple directed cycle of exactly k nodes.
* SG (scatter-gather): ordered pair (s, t), s != t, with at least
  ``sg_min_fan`` intermediates m (m not in {s, t}) such that edges s->m and
  m->t both exist.  Source, sink, and every such intermediate are members.
* BC (directed biclique, left size 2): unordered pair {a, b} with at least
  ``bc_min_right`` common out-neighbors m (m not in {a, b}).  Both left
  nodes and every such common out-neighbor are members.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from fedmotif.graph import N_TASKS, TASKS, Graph

SG_MIN_FAN = 3
BC_MIN_RIGHT = 3
MAX_CYCLE_LEN = 6


@dataclass(frozen=True)
class PatternInstance:
    """One concrete motif occurrence: a task id plus its node and edge sets."""

    task: str
    member_nodes: frozenset
    member_edges: frozenset

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")


# ---------------------------------------------------------------------------
# brute-force oracle
# ---------------------------------------------------------------------------


def _neighbor_sets(g: Graph):
    """(out_sets, in_sets) of distinct neighbors, self-loops dropped."""
    out_sets = [set() for _ in range(g.num_nodes)]
    in_sets = [set() for _ in range(g.num_nodes)]
    for s, d in zip(g.src.tolist(), g.dst.tolist()):
        if s != d:
            out_sets[s].add(d)
            in_sets[d].add(s)
    return out_sets, in_sets


def _on_cycle(v: int, k: int, out_sets) -> bool:
    """True iff v lies on a simple directed cycle of exactly k nodes."""

    def dfs(u, depth, visited):
        if depth == k - 1:
            return v in out_sets[u]
        for w in out_sets[u]:
            if w not in visited:
                visited.add(w)
                if dfs(w, depth + 1, visited):
                    return True
                visited.remove(w)
        return False

    return dfs(v, 0, {v})


def oracle_labels(
    g: Graph,
    max_cycle_len: int = MAX_CYCLE_LEN,
    sg_min_fan: int = SG_MIN_FAN,
    bc_min_right: int = BC_MIN_RIGHT,
) -> np.ndarray:
    """Brute-force label matrix [N x 7]; columns follow TASKS order."""
    if not 2 <= max_cycle_len <= 6:
        raise ValueError("max_cycle_len must be in 2..6")
    n = g.num_nodes
    labels = np.zeros((n, N_TASKS), dtype=bool)
    out_sets, in_sets = _neighbor_sets(g)

    for k in range(2, max_cycle_len + 1):
        col = k - 2
        for v in range(n):
            if _on_cycle(v, k, out_sets):
                labels[v, col] = True

    sg_col = TASKS.index("SG")
    for s in range(n):
        for t in range(n):
            if s == t:
                continue
            inter = (out_sets[s] & in_sets[t]) - {s, t}
            if len(inter) >= sg_min_fan:
                labels[s, sg_col] = True
                labels[t, sg_col] = True
                for m in inter:
                    labels[m, sg_col] = True

    bc_col = TASKS.index("BC")
    for a in range(n):
        for b in range(a + 1, n):
            common = (out_sets[a] & out_sets[b]) - {a, b}
            if len(common) >= bc_min_right:
                labels[a, bc_col] = True
                labels[b, bc_col] = True
                for m in common:
                    labels[m, bc_col] = True

    return labels


# ---------------------------------------------------------------------------
# scalable detector
# ---------------------------------------------------------------------------


def _simple_adj(g: Graph) -> sparse.csr_matrix:
    """Boolean adjacency (int32 0/1), parallel edges merged, diagonal dropped."""
    mask = g.src != g.dst
    n = g.num_nodes
    a = sparse.csr_matrix(
        (np.ones(int(mask.sum()), dtype=np.int32), (g.src[mask], g.dst[mask])),
        shape=(n, n),
    )
    a.sum_duplicates()
    a.data[:] = 1
    return a


def _pair_keys(mat: sparse.csr_matrix, n: int) -> np.ndarray:
    """Sorted int64 keys src*n+dst of the nonzero entries."""
    coo = mat.tocoo()
    keys = coo.row.astype(np.int64) * n + coo.col.astype(np.int64)
    keys.sort()
    return keys


def _pairs_in(sorted_keys: np.ndarray, rows: np.ndarray, cols: np.ndarray, n: int) -> np.ndarray:
    """Vectorized membership test for (row, col) pairs against a key set."""
    if sorted_keys.size == 0 or rows.size == 0:
        return np.zeros(rows.size, dtype=bool)
    q = rows.astype(np.int64) * n + cols.astype(np.int64)
    pos = np.searchsorted(sorted_keys, q)
    ok = pos < sorted_keys.size
    ok[ok] = sorted_keys[pos[ok]] == q[ok]
    return ok


def _concat_ranges(starts: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Concatenation of arange(s, s+c) for each (s, c) pair, vectorized."""
    nz = counts > 0
    starts, counts = starts[nz], counts[nz]
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    out = np.ones(total, dtype=np.int64)
    ends = np.cumsum(counts)
    out[0] = starts[0]
    # at each segment boundary jump from previous end to next start
    out[ends[:-1]] = starts[1:] - (starts[:-1] + counts[:-1] - 1)
    return np.cumsum(out)


def _cycle_labels_fast(g: Graph, max_cycle_len: int) -> np.ndarray:
    """Columns C2..C6 via min-rooted path extension with walk-power pruning.

    Each simple cycle is enumerated exactly once, rooted at its smallest
    node-id; when a path closes, every node on it gets the Ck bit.  Paths
    are pruned once the remaining budget t = max_cycle_len - len drops to
    <= 3, using precomputed "walk of length <= t exists" relations; the
    relation ignores the visited set, so it only ever keeps a superset.
    """
    n = g.num_nodes
    labels = np.zeros((n, 5), dtype=bool)
    adj = _simple_adj(g)
    if adj.nnz == 0:
        return labels

    adj_keys = _pair_keys(adj, n)
    p2 = (adj @ adj).astype(bool).astype(np.int32)
    p3 = (p2 @ adj).astype(bool).astype(np.int32)
    reach = {
        1: adj_keys,
        2: np.union1d(adj_keys, _pair_keys(p2, n)),
    }
    reach[3] = np.union1d(reach[2], _pair_keys(p3, n))

    indptr, indices = adj.indptr, adj.indices
    coo = adj.tocoo()
    start = coo.col > coo.row
    paths = np.column_stack([coo.row[start], coo.col[start]]).astype(np.int64)

    length = 1
    while paths.shape[0]:
        closes = _pairs_in(adj_keys, paths[:, -1], paths[:, 0], n)
        if length + 1 >= 2 and np.any(closes):
            members = np.unique(paths[closes])
            labels[members, length + 1 - 2] = True
        if length + 1 >= max_cycle_len:
            break
        last = paths[:, -1]
        deg = (indptr[last + 1] - indptr[last]).astype(np.int64)
        rep = np.repeat(np.arange(paths.shape[0]), deg)
        nxt = indices[_concat_ranges(indptr[last].astype(np.int64), deg)].astype(np.int64)
        ext = np.column_stack([paths[rep], nxt])
        ok = nxt > ext[:, 0]
        for c in range(1, length + 1):
            ok &= nxt != ext[:, c]
        ext = ext[ok]
        remaining = max_cycle_len - (length + 1)
        if 1 <= remaining <= 3 and ext.shape[0]:
            keep = _pairs_in(reach[remaining], ext[:, -1], ext[:, 0], n)
            ext = ext[keep]
        paths = ext
        length += 1

    return labels


def fast_labels(
    g: Graph,
    max_cycle_len: int = MAX_CYCLE_LEN,
    sg_min_fan: int = SG_MIN_FAN,
    bc_min_right: int = BC_MIN_RIGHT,
) -> np.ndarray:
    """Scalable label matrix [N x 7]; agrees exactly with oracle_labels."""
    if not 2 <= max_cycle_len <= 6:
        raise ValueError("max_cycle_len must be in 2..6")
    n = g.num_nodes
    labels = np.zeros((n, N_TASKS), dtype=bool)
    labels[:, :5] = _cycle_labels_fast(g, max_cycle_len)

    adj = _simple_adj(g)
    if adj.nnz:
        # scatter-gather: count two-step walks s->m->t, threshold the fan
        c = adj @ adj
        c.setdiag(0)
        c.eliminate_zeros()
        q = (c >= sg_min_fan).astype(np.int32)
        if q.nnz:
            sg = TASKS.index("SG")
            labels[:, sg] |= np.asarray(q.sum(axis=1)).ravel() > 0  # sources
            labels[:, sg] |= np.asarray(q.sum(axis=0)).ravel() > 0  # sinks
            x = adj.T @ q  # x[m,t]: qualifying pairs with s->m
            inter = np.asarray(x.multiply(adj).sum(axis=1)).ravel() > 0
            labels[:, sg] |= inter

        # biclique: count common out-neighbors per left pair, threshold
        d = adj @ adj.T
        d.setdiag(0)
        d.eliminate_zeros()
        qb = (d >= bc_min_right).astype(np.int32)
        if qb.nnz:
            bc = TASKS.index("BC")
            labels[:, bc] |= np.asarray(qb.sum(axis=1)).ravel() > 0  # left nodes
            y = adj.T @ qb  # y[m,b]: qualifying partners a with a->m
            rights = np.asarray(y.multiply(adj.T).sum(axis=1)).ravel() > 0
            labels[:, bc] |= rights

    return labels


# ---------------------------------------------------------------------------
# instance verification
# ---------------------------------------------------------------------------


def check_instance(
    g: Graph,
    inst: PatternInstance,
    sg_min_fan: int = SG_MIN_FAN,
    bc_min_right: int = BC_MIN_RIGHT,
) -> bool:
    """True iff the instance's member edges form its motif exactly."""
    nodes = set(inst.member_nodes)
    eids = sorted(inst.member_edges)
    if any(not 0 <= e < g.num_edges for e in eids):
        return False
    ends = [(int(g.src[e]), int(g.dst[e])) for e in eids]
    if any(s not in nodes or d not in nodes for s, d in ends):
        return False
    outd = {v: 0 for v in nodes}
    ind = {v: 0 for v in nodes}
    succ = {}
    for s, d in ends:
        outd[s] += 1
        ind[d] += 1
        succ.setdefault(s, d)

    if inst.task in ("C2", "C3", "C4", "C5", "C6"):
        k = int(inst.task[1])
        if len(nodes) != k or len(eids) != k:
            return False
        if any(outd[v] != 1 or ind[v] != 1 for v in nodes):
            return False
        v0 = min(nodes)
        v = v0
        for step in range(1, k + 1):  # first return to v0 must be at step k
            v = succ[v]
            if v == v0:
                return step == k
        return False

    if inst.task == "SG":
        srcs = [v for v in nodes if ind[v] == 0 and outd[v] > 0]
        sinks = [v for v in nodes if outd[v] == 0 and ind[v] > 0]
        if len(srcs) != 1 or len(sinks) != 1:
            return False
        s, t = srcs[0], sinks[0]
        inter = nodes - {s, t}
        if len(inter) < sg_min_fan:
            return False
        expected = {(s, m) for m in inter} | {(m, t) for m in inter}
        return sorted(ends) == sorted(expected)

    if inst.task == "BC":
        lefts = [v for v in nodes if outd[v] > 0]
        rights = [v for v in nodes if ind[v] > 0]
        if len(lefts) != 2 or set(lefts) & set(rights):
            return False
        if len(rights) < bc_min_right:
            return False
        expected = {(a, m) for a in lefts for m in rights}
        return sorted(ends) == sorted(expected)

    return False
