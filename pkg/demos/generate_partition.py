"""
Synthetic graphs with planted patterns, and two ways to split them
===================================================================

The generator plants directed cycles (lengths 2..6), scatter-gather motifs
and small bicliques into a random directed multigraph, then labels every
node by brute-force detection, so injected and naturally occurring
instances both count.  The two partitioners sit at opposite ends: Louvain
follows community structure (few cut edges), balanced k-way keeps client
sizes equal (many more cut edges, which is what makes missing-neighbor
effects visible).
"""

from fedmotif.generate import GenConfig, default_pattern_counts, generate, prevalence
from fedmotif.partition import balanced_kway, louvain

n = 512
cfg = GenConfig(n, 6.0, default_pattern_counts(n), rng_seed=0)
g, instances = generate(cfg)
print(f"{g.num_nodes} nodes, {g.num_edges} edges, {len(instances)} planted instances")

# positive-class share per task, in percent of nodes
print("\ntask prevalence (% of nodes):")
for task, pct in prevalence(g).items():
    print(f"  {task:3s} {pct:5.1f}")

# same graph, two splits
print("\npartitioner comparison at k=8:")
for name, part in (
    ("louvain", louvain(g, 8, rng_seed=0)),
    ("kway", balanced_kway(g, 8, rng_seed=0)),
):
    sizes = [len(v) for v in part.v_own]
    remotes = sum(len(v) for v in part.v_rem)
    print(f"  {name:8s} cut {part.cut_edges:4d}/{g.num_edges} edges "
          f"({100 * part.cut_edges / g.num_edges:4.1f}%), "
          f"client sizes {min(sizes)}..{max(sizes)}, "
          f"{remotes} remote-node references")
