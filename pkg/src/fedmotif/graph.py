"""Directed multigraph data model with canonical neighborhood ordering.

Parallel edges and self-loops are first-class: an edge is a (src, dst,
edge-id) triple and edge-ids are dense ``0..E-1``.  Neighbor listings are
always sorted by (neighbor node-id, edge-id), regardless of insertion order;
every downstream aggregation walks edges in this canonical order, which is
what makes floating-point results reproducible across centralized and
per-client computation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

TASKS = ("C2", "C3", "C4", "C5", "C6", "SG", "BC")
N_TASKS = len(TASKS)


class ValidationError(ValueError):
    """Structural validation failure (out-of-range ids, bad shapes)."""


class GraphFormatError(ValueError):
    """Parse failure; carries the 1-based line number and byte offset."""

    def __init__(self, message: str, line: int | None = None, offset: int | None = None):
        loc = ""
        if line is not None:
            loc += f" (line {line}"
            if offset is not None:
                loc += f", byte offset {offset}"
            loc += ")"
        super().__init__(message + loc)
        self.line = line
        self.offset = offset


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass
class Graph:
    """Immutable directed multigraph with features and per-node task labels.

    Attributes:
        num_nodes: node count; node ids are 0..num_nodes-1
        src, dst: int64 arrays of length E; edge-id i is (src[i], dst[i])
        node_features: float64 [num_nodes x d_in] (d_in may be 0)
        edge_features: float64 [num_edges x d_e] (d_e may be 0)
        labels: bool [num_nodes x 7], task order C2,C3,C4,C5,C6,S-G,B-C
    """

    num_nodes: int
    src: np.ndarray
    dst: np.ndarray
    node_features: np.ndarray
    edge_features: np.ndarray
    labels: np.ndarray
    _in_off: np.ndarray = field(repr=False, default=None)
    _in_eid: np.ndarray = field(repr=False, default=None)
    _out_off: np.ndarray = field(repr=False, default=None)
    _out_eid: np.ndarray = field(repr=False, default=None)

    @property
    def num_edges(self) -> int:
        return len(self.src)

    @property
    def d_in(self) -> int:
        return self.node_features.shape[1]

    @property
    def d_e(self) -> int:
        return self.edge_features.shape[1]

    @property
    def edges(self) -> list[tuple[int, int, int]]:
        return [(int(s), int(d), i) for i, (s, d) in enumerate(zip(self.src, self.dst))]

    def in_edges(self, v: int) -> list[tuple[int, int]]:
        """(neighbor, edge-id) pairs of edges u->v, canonical order."""
        eids = self._in_eid[self._in_off[v] : self._in_off[v + 1]]
        return [(int(self.src[e]), int(e)) for e in eids]

    def out_edges(self, v: int) -> list[tuple[int, int]]:
        """(neighbor, edge-id) pairs of edges v->w, canonical order."""
        eids = self._out_eid[self._out_off[v] : self._out_off[v + 1]]
        return [(int(self.dst[e]), int(e)) for e in eids]

    def neighbors(self, v: int) -> list[int]:
        """Distinct in- or out-neighbors, ascending (self-loops include v)."""
        eids_in = self._in_eid[self._in_off[v] : self._in_off[v + 1]]
        eids_out = self._out_eid[self._out_off[v] : self._out_off[v + 1]]
        return sorted(set(self.src[eids_in]) | set(self.dst[eids_out]))


def build(
    num_nodes: int,
    edge_list,
    features: np.ndarray | None = None,
    labels: np.ndarray | None = None,
    edge_features: np.ndarray | None = None,
) -> Graph:
    """Construct a Graph and materialize its canonical neighborhood indices.

    ``edge_list`` is any iterable of (src, dst) pairs; order defines edge-ids.
    Raises ValidationError for endpoints outside 0..num_nodes-1.
    """
    pairs = list(edge_list)
    e = len(pairs)
    src = np.array([p[0] for p in pairs], dtype=np.int64)
    dst = np.array([p[1] for p in pairs], dtype=np.int64)
    for name, arr in (("src", src), ("dst", dst)):
        if e and (arr.min() < 0 or arr.max() >= num_nodes):
            bad = int(np.argmax((arr < 0) | (arr >= num_nodes)))
            raise ValidationError(
                f"edge {bad}: {name} node-id {arr[bad]} out of range [0, {num_nodes})"
            )

    if features is None:
        features = np.zeros((num_nodes, 0), dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != num_nodes:
        raise ValidationError(f"node_features shape {features.shape} != ({num_nodes}, d_in)")

    if edge_features is None:
        edge_features = np.zeros((e, 0), dtype=np.float64)
    edge_features = np.asarray(edge_features, dtype=np.float64)
    if edge_features.ndim != 2 or edge_features.shape[0] != e:
        raise ValidationError(f"edge_features shape {edge_features.shape} != ({e}, d_e)")

    if labels is None:
        labels = np.zeros((num_nodes, N_TASKS), dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    if labels.shape != (num_nodes, N_TASKS):
        raise ValidationError(f"labels shape {labels.shape} != ({num_nodes}, {N_TASKS})")

    eid = np.arange(e, dtype=np.int64)
    # canonical order: (node, neighbor, edge-id) ascending
    in_order = np.lexsort((eid, src, dst))
    out_order = np.lexsort((eid, dst, src))
    in_off = np.zeros(num_nodes + 1, dtype=np.int64)
    out_off = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(in_off, dst + 1, 1)
    np.add.at(out_off, src + 1, 1)
    in_off = np.cumsum(in_off)
    out_off = np.cumsum(out_off)

    return Graph(
        num_nodes=num_nodes,
        src=_readonly(src),
        dst=_readonly(dst),
        node_features=_readonly(features),
        edge_features=_readonly(edge_features),
        labels=_readonly(labels),
        _in_off=_readonly(in_off),
        _in_eid=_readonly(in_order),
        _out_off=_readonly(out_off),
        _out_eid=_readonly(out_order),
    )


def constant_features(graph: Graph, value: float) -> Graph:
    """Replace node features with the constant width-1 vector (x_v = value)."""
    feats = np.full((graph.num_nodes, 1), float(value), dtype=np.float64)
    return build(
        graph.num_nodes,
        list(zip(graph.src.tolist(), graph.dst.tolist())),
        features=feats,
        labels=graph.labels,
        edge_features=graph.edge_features,
    )


def _fmt_float(x: float) -> str:
    return repr(float(x))


def serialize(graph: Graph) -> bytes:
    """Plain-text edge-list encoding; byte-exact under round-trip.

    Layout: header ``nodes=<N> din=<k> de=<m>``, then one ``src dst
    [e_feats...]`` line per edge in edge-id order, then (if d_in > 0) one
    ``feat <node> <values...>`` line per node, then ``label <node> <mask>``
    lines for nodes with a nonzero 7-bit task mask.
    """
    out = [f"nodes={graph.num_nodes} din={graph.d_in} de={graph.d_e}"]
    for i in range(graph.num_edges):
        line = f"{graph.src[i]} {graph.dst[i]}"
        if graph.d_e:
            line += " " + " ".join(_fmt_float(x) for x in graph.edge_features[i])
        out.append(line)
    if graph.d_in:
        for v in range(graph.num_nodes):
            out.append(f"feat {v} " + " ".join(_fmt_float(x) for x in graph.node_features[v]))
    masks = (graph.labels.astype(np.uint8) * (1 << np.arange(N_TASKS, dtype=np.uint8))).sum(axis=1)
    for v in np.nonzero(masks)[0]:
        out.append(f"label {v} {masks[v]}")
    return ("\n".join(out) + "\n").encode("utf-8")


def deserialize(data: bytes) -> Graph:
    """Inverse of :func:`serialize`; raises GraphFormatError on bad input."""
    text = data.decode("utf-8")
    lines = text.split("\n")
    offset = 0

    def err(msg: str, lineno: int) -> GraphFormatError:
        return GraphFormatError(msg, line=lineno, offset=offset)

    if not lines or not lines[0].startswith("nodes="):
        raise err("missing header line 'nodes=<N> din=<k> de=<m>'", 1)
    try:
        head = dict(tok.split("=", 1) for tok in lines[0].split())
        n = int(head["nodes"])
        din = int(head["din"])
        de = int(head["de"])
    except (ValueError, KeyError) as exc:
        raise err(f"malformed header: {exc}", 1)
    offset += len(lines[0].encode("utf-8")) + 1

    edges: list[tuple[int, int]] = []
    efeat_rows: list[list[float]] = []
    feats = np.zeros((n, din), dtype=np.float64)
    feat_seen = np.zeros(n, dtype=bool)
    labels = np.zeros((n, N_TASKS), dtype=bool)

    for lineno, line in enumerate(lines[1:], start=2):
        stripped = line.strip()
        if not stripped:
            offset += len(line.encode("utf-8")) + 1
            continue
        toks = stripped.split()
        if toks[0] == "feat":
            try:
                v = int(toks[1])
                row = [float(x) for x in toks[2:]]
            except (ValueError, IndexError):
                raise err("malformed feat line", lineno)
            if not 0 <= v < n:
                raise err(f"feat line names dangling node-id {toks[1]}", lineno)
            if len(row) != din:
                raise err(f"feat line has {len(row)} values, header says din={din}", lineno)
            feats[v] = row
            feat_seen[v] = True
        elif toks[0] == "label":
            try:
                v = int(toks[1])
                mask = int(toks[2])
            except (ValueError, IndexError):
                raise err("malformed label line", lineno)
            if not 0 <= v < n:
                raise err(f"label line names dangling node-id {toks[1]}", lineno)
            if not 0 <= mask < (1 << N_TASKS):
                raise err(f"label mask {mask} outside 7-bit range", lineno)
            labels[v] = [(mask >> t) & 1 for t in range(N_TASKS)]
        else:
            try:
                s, d = int(toks[0]), int(toks[1])
                row = [float(x) for x in toks[2:]]
            except (ValueError, IndexError):
                raise err("malformed edge line", lineno)
            if not 0 <= s < n or not 0 <= d < n:
                raise err(f"edge line names dangling node-id: '{stripped}'", lineno)
            if len(row) != de:
                raise err(f"edge line has {len(row)} features, header says de={de}", lineno)
            edges.append((s, d))
            efeat_rows.append(row)
        offset += len(line.encode("utf-8")) + 1

    if din and not feat_seen.all():
        raise GraphFormatError(
            f"truncated payload: {int((~feat_seen).sum())} feat lines missing", line=len(lines)
        )
    ef = np.array(efeat_rows, dtype=np.float64).reshape(len(edges), de)
    return build(n, edges, features=feats, labels=labels, edge_features=ef)


def save(graph: Graph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(graph))


def load(path) -> Graph:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
