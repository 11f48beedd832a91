"""Synthetic directed-multigraph generator with planted structural patterns.

Base topology is circulant-like: every base edge goes from a uniformly
random node i to (i + offset) mod N with the offset drawn from a small
forward pool skewed toward short hops, after which a fixed fraction of the
edges is rewired to longer forward offsets.  All offsets stay forward, so
the base alone contains no short cycles and positive-class prevalence is
controlled by the injected patterns.

Two further choices keep incidental cycles from swamping the targets at
average degree 6 (a random degree-6 digraph puts ~95% of nodes on
6-cycles):

* every instance is wired over its node set in ascending id order, so each
  injected cycle contributes exactly one backward edge, and scatter-gather
  / biclique edges are forward; a stray composite cycle then needs several
  long random hops whose displacements cancel exactly, which is rare;
* cycle instances sample their nodes from a fixed random "cyclic stratum"
  (``cycle_frac`` of the nodes), so nodes outside it are structurally off
  all cycles and the stratum size caps cycle prevalence.

Labels are always recomputed by the detector afterwards, so motifs created
incidentally by overlap still get labeled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedmotif.graph import Graph, TASKS, build
from fedmotif.patterns import (
    BC_MIN_RIGHT,
    SG_MIN_FAN,
    PatternInstance,
    fast_labels,
)

SPLITS = ("train", "val", "test")

# injected instances per task for an 8192-node, degree-6 graph; chosen so
# detector-recomputed prevalences land on the reference mix (C2 19.3,
# C3 33.7, C4 52.0, C5 67.1, C6 77.7, S-G 31.4, B-C 31.5, in percent)
REFERENCE_NODES = 8192
REFERENCE_COUNTS = {
    "C2": 909,
    "C3": 1159,
    "C4": 1502,
    "C5": 1376,
    "C6": 387,
    "SG": 514,
    "BC": 574,
}


class GenerationError(ValueError):
    """Infeasible generator configuration."""


@dataclass
class GenConfig:
    """Generator parameters; identical configs give byte-identical graphs.

    Args:
        num_nodes: node count N
        avg_degree: target edge count is round(N * avg_degree), +-10%
        pattern_counts: task -> number of injected instances
        rng_seed: base seed; the split picks an independent child stream
        split: one of "train", "val", "test"
        rewire_frac: fraction of base edges re-pointed to random targets
        max_offset: base edges span offsets 1..max_offset (mod N)
        sg_fan: intermediates per injected scatter-gather instance
        bc_right: right-set size per injected biclique instance
    """

    num_nodes: int
    avg_degree: float
    pattern_counts: dict = field(default_factory=dict)
    rng_seed: int = 0
    split: str = "train"
    rewire_frac: float = 0.15
    max_offset: int = 16
    cycle_frac: float = 0.82
    sg_fan: int = SG_MIN_FAN
    bc_right: int = BC_MIN_RIGHT


def default_pattern_counts(num_nodes: int) -> dict:
    """Reference pattern mix scaled to the requested graph size."""
    scale = num_nodes / REFERENCE_NODES
    return {t: max(0, round(c * scale)) for t, c in REFERENCE_COUNTS.items()}


def _footprint(task: str, cfg: GenConfig) -> int:
    if task.startswith("C"):
        return int(task[1])
    if task == "SG":
        return cfg.sg_fan + 2
    return cfg.bc_right + 2


def _instance_edges(task: str, nodes: np.ndarray, cfg: GenConfig) -> list:
    """Directed edges wiring a node set into the motif, ascending id order."""
    ns = sorted(int(v) for v in nodes)
    if task.startswith("C"):
        k = len(ns)
        return [(ns[i], ns[(i + 1) % k]) for i in range(k)]
    if task == "SG":
        s, t, mids = ns[0], ns[-1], ns[1:-1]
        return [(s, m) for m in mids] + [(m, t) for m in mids]
    lefts, rights = ns[:2], ns[2:]
    return [(a, m) for a in lefts for m in rights]


def generate(cfg: GenConfig):
    """Build the graph, inject patterns, recompute labels.

    Returns:
        (Graph, list of PatternInstance).  Node features are zero-width
        (the harness substitutes constants); labels come from the detector.
    """
    n = cfg.num_nodes
    if cfg.avg_degree <= 0:
        raise GenerationError("avg_degree must be positive")
    if cfg.split not in SPLITS:
        raise GenerationError(f"split must be one of {SPLITS}")
    counts = {t: int(cfg.pattern_counts.get(t, 0)) for t in TASKS}
    if any(c < 0 for c in counts.values()):
        raise GenerationError("pattern counts must be nonnegative")
    for t, c in counts.items():
        if c > 0 and n < _footprint(t, cfg):
            raise GenerationError(
                f"{t} instance needs {_footprint(t, cfg)} nodes, graph has only {n}"
            )

    e_target = round(n * cfg.avg_degree)
    e_inject = sum(
        counts[t] * len(_instance_edges(t, np.arange(_footprint(t, cfg)), cfg)) for t in TASKS
    )
    if e_inject > 1.1 * e_target:
        raise GenerationError(
            f"pattern mix needs {e_inject} edges, budget is {e_target} (+10%)"
        )
    e_base = max(0, e_target - e_inject)

    rng = np.random.default_rng(
        np.random.SeedSequence(cfg.rng_seed, spawn_key=(SPLITS.index(cfg.split),))
    )

    # cyclic stratum = top of the id line.  Every base / fan / biclique edge
    # ascends, and cycle instances (the only source of descending edges)
    # sample inside the stratum, so a cycle's minimum node is always the
    # head of an in-stratum back edge: nodes below the floor are
    # structurally incapable of lying on any cycle.
    max_cycle = max([int(t[1]) for t in TASKS if t.startswith("C") and counts[t]] or [0])
    s_size = min(n, max(round(cfg.cycle_frac * n), max_cycle))
    stratum = np.arange(n - s_size, n)

    edges = []
    if e_base and n > 1:
        src = rng.integers(n, size=e_base)
        span = min(cfg.max_offset, n - 1)
        offs = rng.choice(np.arange(1, span + 1), size=e_base, p=_offset_weights(span))
        rewire = rng.random(e_base) < cfg.rewire_frac
        far = min(max(2, n // 16), n - 1)
        offs[rewire] = rng.integers(1, far + 1, size=int(rewire.sum()))
        # node ids form a line, not a ring: a wrapped hop would be a huge
        # backward jump and would put protected nodes back on cycles
        over = src + offs >= n
        src[over] = rng.integers(0, n - offs[over])
        edges.extend(zip(src.tolist(), (src + offs).tolist()))

    instances = []
    for t in TASKS:
        pool = stratum if t.startswith("C") else np.arange(n)
        for _ in range(counts[t]):
            nodes = rng.choice(pool, size=_footprint(t, cfg), replace=False)
            wired = _instance_edges(t, nodes, cfg)
            eids = range(len(edges), len(edges) + len(wired))
            edges.extend(wired)
            instances.append(
                PatternInstance(t, frozenset(int(v) for v in nodes), frozenset(eids))
            )

    g = build(n, edges)
    labels = fast_labels(g)
    g = build(n, edges, labels=labels)
    return g, instances


def _offset_weights(span: int) -> np.ndarray:
    w = 1.0 / np.arange(1, span + 1)
    return w / w.sum()


def prevalence(g: Graph) -> dict:
    """Positive-class share per task, in percent."""
    return {t: 100.0 * float(g.labels[:, i].mean()) for i, t in enumerate(TASKS)}
