"""Message-passing network over directed multigraphs, with manual gradients.

Per layer, every edge produces a message in each direction: for a node v,
in-messages are psi_in([h_v, h_u, e]) over edges u->v and out-messages are
psi_out([h_v, h_w, e]) over edges v->w.  Messages are reduced per node with
sum, mean and max (empty neighborhoods reduce to zeros), and the node update
is phi([h_v, agg_in, agg_out]).  psi and phi are one-hidden-layer ReLU MLPs.
Seven affine binary heads sit on the final layer.

Everything runs in float64 through the row-independent kernels in
``fedmotif.linalg`` so that a client computing a subset of rows reproduces
the full-batch rows bit for bit.  The backward pass is hand-written reverse
mode; gradients never flow into embedding rows the caller received from
elsewhere (they enter the bank as constants).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from fedmotif.graph import N_TASKS, Graph
from fedmotif.linalg import affine, relu, row_matmul, segment_reduce

__all__ = [
    "ArchSpec",
    "ModelParams",
    "MessageIndex",
    "LayerCache",
    "ForwardState",
    "GradientBundle",
    "UndefinedEmbeddingError",
    "embed",
    "layer_forward",
    "head_logits",
    "forward_full",
    "bce_loss",
    "backward",
    "save_params",
    "load_params",
]

DIRECTIONS = ("both", "in", "out")


class UndefinedEmbeddingError(RuntimeError):
    """A message referenced an embedding row nobody has produced yet."""


@dataclass(frozen=True)
class ArchSpec:
    """Shape of the network; the MLP hidden width equals the embedding width."""

    d_in: int
    width: int
    layers: int
    d_e: int = 0
    direction: str = "both"
    n_tasks: int = N_TASKS

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")
        if min(self.d_in, self.width) < 1 or self.layers < 0 or self.d_e < 0:
            raise ValueError("bad architecture sizes")

    @property
    def dirs(self) -> tuple:
        return ("in", "out") if self.direction == "both" else (self.direction,)


def param_segments(arch: ArchSpec):
    """Ordered (name, shape) table defining the flat parameter layout."""
    d = arch.width
    segs = [("emb.W", (arch.d_in, d)), ("emb.b", (d,))]
    for l in range(arch.layers):
        for dr in arch.dirs:
            p = f"l{l}.{dr}"
            segs += [
                (p + ".W1", (2 * d + arch.d_e, d)),
                (p + ".b1", (d,)),
                (p + ".W2", (d, d)),
                (p + ".b2", (d,)),
            ]
        p = f"l{l}.upd"
        segs += [
            (p + ".W1", ((1 + 3 * len(arch.dirs)) * d, d)),
            (p + ".b1", (d,)),
            (p + ".W2", (d, d)),
            (p + ".b2", (d,)),
        ]
    segs += [("head.W", (d, arch.n_tasks)), ("head.b", (arch.n_tasks,))]
    return tuple(segs)


class ModelParams:
    """All weights in one flat float64 vector plus named views into it.

    The named arrays share memory with ``flat``, so averaging flat vectors
    and averaging field by field are the same operation.
    """

    def __init__(self, arch: ArchSpec, flat: Optional[np.ndarray] = None):
        self.arch = arch
        self.segments = param_segments(arch)
        n = sum(int(np.prod(shape)) for _, shape in self.segments)
        if flat is None:
            flat = np.zeros(n, dtype=np.float64)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (n,):
            raise ValueError(f"flat vector must have length {n}, got {flat.shape}")
        self.flat = flat
        self._views = {}
        off = 0
        for name, shape in self.segments:
            k = int(np.prod(shape))
            self._views[name] = self.flat[off : off + k].reshape(shape)
            off += k

    @property
    def n_params(self) -> int:
        return len(self.flat)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __setitem__(self, name: str, value) -> None:
        self._views[name][...] = value

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.flat.copy())

    @classmethod
    def zeros(cls, arch: ArchSpec) -> "ModelParams":
        return cls(arch)

    @classmethod
    def init(cls, arch: ArchSpec, rng_seed: int) -> "ModelParams":
        """Seeded uniform(-a, a) with a = sqrt(6/(fan_in+fan_out)).

        Biases draw from their layer's range too.  Zero biases would pin
        every all-negative-ReLU row of an isolated node at exactly 0, and the
        next layer's ReLU would then sit exactly on its kink, where the loss
        is not differentiable; random biases make that configuration
        measure-zero and keep embeddings generically nonzero.
        """
        rng = np.random.default_rng(rng_seed)
        p = cls(arch)
        a = 1.0
        for name, shape in p.segments:
            if len(shape) == 2:
                a = np.sqrt(6.0 / (shape[0] + shape[1]))
            p._views[name][:] = rng.uniform(-a, a, size=shape)
        return p


@dataclass
class GradientBundle:
    """One client's contribution to a step: flat gradient, loss, node count."""

    grad: np.ndarray
    loss: float
    sample_count: int


# ---------------------------------------------------------------------------
# message index: who sends to whom, in canonical order
# ---------------------------------------------------------------------------


class MessageIndex:
    """CSR message lists per direction over a bank of embedding rows.

    ``targets`` are the bank rows this index updates (all rows for a full
    graph, the owned rows for a client view).  Per direction and target, the
    incident edges are ordered by (global neighbor id, edge id), the same
    canonical order ``Graph.in_edges``/``out_edges`` report, so reductions
    accumulate identically no matter who computes them.
    """

    def __init__(self, n_rows, targets, in_csr, out_csr):
        self.n_rows = int(n_rows)
        self.targets = targets
        # each CSR triple: (offsets [T+1], src_rows, edge_ids)
        self.in_off, self.in_src, self.in_eid = in_csr
        self.out_off, self.out_src, self.out_eid = out_csr
        self.in_rep = np.repeat(targets, np.diff(self.in_off))
        self.out_rep = np.repeat(targets, np.diff(self.out_off))

    @classmethod
    def from_graph(cls, g: Graph) -> "MessageIndex":
        n, eids = g.num_nodes, np.arange(g.num_edges, dtype=np.int64)
        targets = np.arange(n, dtype=np.int64)

        def csr(key_node, nbr_node):
            order = np.lexsort((eids, nbr_node, key_node))
            off = np.searchsorted(key_node[order], np.arange(n + 1))
            return off, nbr_node[order], eids[order]

        return cls(n, targets, csr(g.dst, g.src), csr(g.src, g.dst))

    @classmethod
    def from_subgraph(cls, sub) -> "MessageIndex":
        """Index over a client view: targets are the owned rows.

        Every edge of the view touches at least one owned endpoint, so the
        in-list keeps edges whose head is owned and the out-list those whose
        tail is owned; sort keys use global ids because the owned-then-remote
        local numbering is not globally monotone.
        """
        g = sub.graph
        targets = np.arange(sub.n_owned, dtype=np.int64)

        def csr(key_local, nbr_local, nbr_global):
            keep = key_local < sub.n_owned
            eids = sub.edge_ids[keep]
            key, nbr = key_local[keep], nbr_local[keep]
            order = np.lexsort((eids, nbr_global[keep], key))
            off = np.searchsorted(key[order], np.arange(sub.n_owned + 1))
            return off, nbr[order], eids[order]

        in_csr = csr(sub.dst_local, sub.src_local, g.src[sub.edge_ids])
        out_csr = csr(sub.src_local, sub.dst_local, g.dst[sub.edge_ids])
        return cls(sub.n_local, targets, in_csr, out_csr)

    def csr(self, direction: str):
        if direction == "in":
            return self.in_off, self.in_src, self.in_eid, self.in_rep
        return self.out_off, self.out_src, self.out_eid, self.out_rep


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class LayerCache:
    """Intermediate activations one layer's backward pass needs."""

    msg_z1: dict
    msg_argmax: dict
    u: np.ndarray
    z1u: np.ndarray


@dataclass
class ForwardState:
    banks: list
    caches: list
    x0: np.ndarray
    logits: np.ndarray
    head_rows: np.ndarray
    idx: "MessageIndex"


def embed(params: ModelParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.arch.d_in:
        raise ValueError(
            f"feature width {features.shape} does not match d_in={params.arch.d_in}"
        )
    return affine(features, params["emb.W"], params["emb.b"])


def head_logits(params: ModelParams, h: np.ndarray) -> np.ndarray:
    return affine(h, params["head.W"], params["head.b"])


def layer_forward(params, l, h, idx, edge_features, defined=None):
    """h^{l+1} rows for idx.targets given bank h of h^l rows.

    ``defined``, when given, is a boolean mask over bank rows; touching an
    undefined row raises UndefinedEmbeddingError (a protocol violation: some
    client ran ahead of an exchange barrier).
    """
    arch = params.arch
    d = arch.width
    if defined is not None and not defined[idx.targets].all():
        raise UndefinedEmbeddingError(f"layer {l}: target rows undefined")
    msg_z1, msg_argmax, aggs = {}, {}, []
    for dr in arch.dirs:
        off, src, eid, rep = idx.csr(dr)
        if defined is not None and not defined[src].all():
            raise UndefinedEmbeddingError(
                f"layer {l}: {dr}-messages reference embeddings never exchanged"
            )
        x = np.concatenate([h[rep], h[src], edge_features[eid]], axis=1)
        z1 = affine(x, params[f"l{l}.{dr}.W1"], params[f"l{l}.{dr}.b1"])
        m = affine(relu(z1), params[f"l{l}.{dr}.W2"], params[f"l{l}.{dr}.b2"])
        agg, amax = segment_reduce(m, off, d)
        msg_z1[dr], msg_argmax[dr] = z1, amax
        aggs.append(agg)
    u = np.concatenate([h[idx.targets]] + aggs, axis=1)
    z1u = affine(u, params[f"l{l}.upd.W1"], params[f"l{l}.upd.b1"])
    h_new = affine(relu(z1u), params[f"l{l}.upd.W2"], params[f"l{l}.upd.b2"])
    return h_new, LayerCache(msg_z1, msg_argmax, u, z1u)


def forward_full(params: ModelParams, g: Graph, features=None) -> ForwardState:
    """Centralized forward over the whole graph, all layers retained."""
    if features is None:
        features = g.node_features
    idx = MessageIndex.from_graph(g)
    h = embed(params, features)
    banks, caches = [h], []
    for l in range(params.arch.layers):
        h, cache = layer_forward(params, l, h, idx, g.edge_features)
        banks.append(h)
        caches.append(cache)
    logits = head_logits(params, banks[-1])
    return ForwardState(banks, caches, np.asarray(features, dtype=np.float64),
                        logits, idx.targets, idx)


# ---------------------------------------------------------------------------
# loss and backward
# ---------------------------------------------------------------------------


def bce_loss(logits: np.ndarray, labels: np.ndarray, batch: np.ndarray):
    """Multi-label binary cross-entropy, summed over tasks, mean over batch.

    ``labels`` rows align with ``logits`` rows; ``batch`` selects the rows
    that contribute.  Returns (loss, dlogits) with dlogits zero off-batch.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if len(batch) == 0:
        return 0.0, np.zeros_like(logits)
    z = logits[batch]
    y = labels[batch].astype(np.float64)
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float(per.sum() / len(batch))
    dlogits = np.zeros_like(logits)
    dlogits[batch] = (expit(z) - y) / len(batch)
    return loss, dlogits


def _tsum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a.T @ b without BLAS so concurrent clients stay bit-reproducible
    return np.einsum("ji,jk->ik", a, b, optimize=False)


def backward(params, state: ForwardState, dlogits, edge_features) -> np.ndarray:
    """Flat gradient of the loss whose dlogits are given.

    Walks the retained caches in reverse.  At each layer only the rows in
    ``state.idx.targets`` propagate further down; every other bank row was
    received from another party and acts as a constant input.
    """
    arch = params.arch
    d = arch.width
    idx = state.idx
    g = ModelParams.zeros(arch)

    h_last = state.banks[-1][state.head_rows]
    g["head.W"] += _tsum(h_last, dlogits)
    g["head.b"] += dlogits.sum(axis=0)
    d_bank = np.zeros((idx.n_rows, d))
    d_bank[state.head_rows] = row_matmul(dlogits, params["head.W"].T)

    for l in range(arch.layers - 1, -1, -1):
        cache = state.caches[l]
        h = state.banks[l]
        d_out = d_bank[idx.targets]

        a1u = relu(cache.z1u)
        g[f"l{l}.upd.W2"] += _tsum(a1u, d_out)
        g[f"l{l}.upd.b2"] += d_out.sum(axis=0)
        d_z1u = row_matmul(d_out, params[f"l{l}.upd.W2"].T) * (cache.z1u > 0)
        g[f"l{l}.upd.W1"] += _tsum(cache.u, d_z1u)
        g[f"l{l}.upd.b1"] += d_z1u.sum(axis=0)
        d_u = row_matmul(d_z1u, params[f"l{l}.upd.W1"].T)

        d_bank = np.zeros((idx.n_rows, d))
        np.add.at(d_bank, idx.targets, d_u[:, :d])
        for j, dr in enumerate(arch.dirs):
            off, src, eid, rep = idx.csr(dr)
            d_agg = d_u[:, (1 + 3 * j) * d : (1 + 3 * (j + 1)) * d]
            counts = np.diff(off)
            seg = np.repeat(np.arange(len(counts)), counts)
            d_m = d_agg[seg, :d] + d_agg[seg, d : 2 * d] / counts[seg, None]
            amax = cache.msg_argmax[dr]
            rows_t, cols = np.nonzero(amax >= 0)
            np.add.at(d_m, (amax[rows_t, cols], cols), d_agg[rows_t, 2 * d + cols])

            z1 = cache.msg_z1[dr]
            a1 = relu(z1)
            g[f"l{l}.{dr}.W2"] += _tsum(a1, d_m)
            g[f"l{l}.{dr}.b2"] += d_m.sum(axis=0)
            d_z1 = row_matmul(d_m, params[f"l{l}.{dr}.W2"].T) * (z1 > 0)
            x = np.concatenate([h[rep], h[src], edge_features[eid]], axis=1)
            g[f"l{l}.{dr}.W1"] += _tsum(x, d_z1)
            g[f"l{l}.{dr}.b1"] += d_z1.sum(axis=0)
            d_x = row_matmul(d_z1, params[f"l{l}.{dr}.W1"].T)
            np.add.at(d_bank, rep, d_x[:, :d])
            np.add.at(d_bank, src, d_x[:, d : 2 * d])

    d0 = d_bank[idx.targets]
    g["emb.W"] += _tsum(state.x0, d0)
    g["emb.b"] += d0.sum(axis=0)
    return g.flat


def loss_and_grad(params, g: Graph, batch, features=None) -> GradientBundle:
    """Centralized loss and gradient on a node batch; convenience wrapper."""
    state = forward_full(params, g, features)
    loss, dlogits = bce_loss(state.logits, g.labels, batch)
    grad = backward(params, state, dlogits, g.edge_features)
    return GradientBundle(grad, loss, len(batch))


# ---------------------------------------------------------------------------
# checkpoints: one JSON header line, then the flat vector as little-endian f64
# ---------------------------------------------------------------------------


def save_params(params: ModelParams, path) -> None:
    a = params.arch
    header = {
        "kind": "model-checkpoint",
        "version": 1,
        "arch": {
            "d_in": a.d_in, "width": a.width, "layers": a.layers,
            "d_e": a.d_e, "direction": a.direction, "n_tasks": a.n_tasks,
        },
        "n_params": params.n_params,
        "segments": [[name, list(shape)] for name, shape in params.segments],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode() + b"\n")
        f.write(params.flat.astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode())
        payload = f.read()
    if header.get("kind") != "model-checkpoint":
        raise ValueError(f"{path} is not a model checkpoint")
    arch = ArchSpec(**header["arch"])
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if len(flat) != header["n_params"]:
        raise ValueError("checkpoint payload length does not match header")
    return ModelParams(arch, flat)
