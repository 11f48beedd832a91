"""Network engine: parameter layout, forward vs a naive per-node oracle,
and analytic gradients vs central finite differences."""

import numpy as np
import pytest

from fedmotif import graph as G
from fedmotif.linalg import affine, relu
from fedmotif.model import (
    ArchSpec,
    ModelParams,
    backward,
    bce_loss,
    embed,
    forward_full,
    head_logits,
    load_params,
    loss_and_grad,
    param_segments,
    save_params,
)


def random_instance(seed, n_max=32, d_in=2, d_e=1, labeled=True):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, n_max))
    e = int(rng.integers(0, 4 * n))
    edges = [(int(rng.integers(n)), int(rng.integers(n))) for _ in range(e)]
    labels = rng.integers(0, 2, size=(n, 7)).astype(bool) if labeled else None
    return G.build(
        n, edges,
        features=rng.normal(size=(n, d_in)),
        edge_features=rng.normal(size=(e, d_e)),
        labels=labels,
    ), rng


def naive_forward(params, g):
    """Per-node reference: python loops, no batching, no shared index."""
    arch = params.arch
    d = arch.width
    h = np.stack([
        affine(g.node_features[v][None, :], params["emb.W"], params["emb.b"])[0]
        for v in range(g.num_nodes)
    ])
    for l in range(arch.layers):
        nxt = []
        for v in range(g.num_nodes):
            parts = [h[v]]
            for dr in arch.dirs:
                edges = g.in_edges(v) if dr == "in" else g.out_edges(v)
                msgs = []
                for u, eid in edges:
                    x = np.concatenate([h[v], h[u], g.edge_features[eid]])
                    z = affine(x[None, :], params[f"l{l}.{dr}.W1"],
                               params[f"l{l}.{dr}.b1"])
                    m = affine(relu(z), params[f"l{l}.{dr}.W2"],
                               params[f"l{l}.{dr}.b2"])[0]
                    msgs.append(m)
                if msgs:
                    mm = np.stack(msgs)
                    agg = np.concatenate([mm.sum(0), mm.sum(0) / len(msgs), mm.max(0)])
                else:
                    agg = np.zeros(3 * d)
                parts.append(agg)
            u_in = np.concatenate(parts)[None, :]
            z = affine(u_in, params[f"l{l}.upd.W1"], params[f"l{l}.upd.b1"])
            nxt.append(affine(relu(z), params[f"l{l}.upd.W2"],
                              params[f"l{l}.upd.b2"])[0])
        h = np.stack(nxt)
    return affine(h, params["head.W"], params["head.b"])


class TestParams:
    def test_flat_roundtrip_and_count(self):
        arch = ArchSpec(d_in=3, width=8, layers=2, d_e=2)
        p = ModelParams.init(arch, rng_seed=0)
        q = ModelParams(arch, p.flat.copy())
        for name, _ in param_segments(arch):
            assert np.array_equal(p[name], q[name])
        expect = sum(int(np.prod(s)) for _, s in param_segments(arch))
        assert p.n_params == len(p.flat) == expect

    def test_views_share_memory_with_flat(self):
        p = ModelParams.init(ArchSpec(d_in=2, width=4, layers=1), rng_seed=1)
        p["head.b"][:] = 7.0
        assert (p.flat[-p.arch.n_tasks:] == 7.0).all()

    def test_equal_flats_equal_forward(self):
        g, _ = random_instance(5)
        arch = ArchSpec(d_in=2, width=6, layers=2, d_e=1)
        p = ModelParams.init(arch, rng_seed=3)
        q = ModelParams(arch, p.flat.copy())
        assert np.array_equal(forward_full(p, g).logits, forward_full(q, g).logits)

    def test_flat_average_is_fieldwise_average(self):
        arch = ArchSpec(d_in=2, width=4, layers=1)
        a = ModelParams.init(arch, 0)
        b = ModelParams.init(arch, 1)
        avg = ModelParams(arch, 0.5 * a.flat + 0.5 * b.flat)
        for name, _ in param_segments(arch):
            assert np.array_equal(avg[name], 0.5 * a[name] + 0.5 * b[name])

    def test_bad_flat_length(self):
        arch = ArchSpec(d_in=2, width=4, layers=1)
        with pytest.raises(ValueError):
            ModelParams(arch, np.zeros(3))


class TestEmbed:
    def test_zero_params_zero_embeddings(self):
        arch = ArchSpec(d_in=3, width=5, layers=0)
        h = embed(ModelParams.zeros(arch), np.random.default_rng(0).normal(size=(4, 3)))
        assert (h == 0).all()

    def test_identity_embedding(self):
        arch = ArchSpec(d_in=4, width=4, layers=0)
        p = ModelParams.zeros(arch)
        p["emb.W"][:] = np.eye(4)
        x = np.random.default_rng(1).normal(size=(6, 4))
        assert np.array_equal(embed(p, x), x)

    def test_constant_input_identical_rows(self):
        arch = ArchSpec(d_in=1, width=8, layers=0)
        p = ModelParams.init(arch, rng_seed=2)
        h = embed(p, np.ones((5, 1)))
        assert (h == h[0]).all()

    def test_width_mismatch(self):
        p = ModelParams.init(ArchSpec(d_in=3, width=4, layers=0), 0)
        with pytest.raises(ValueError):
            embed(p, np.zeros((2, 5)))


class TestForward:
    @pytest.mark.parametrize("direction", ["both", "in", "out"])
    def test_matches_naive_oracle_bitwise(self, direction):
        for seed in range(6):
            g, _ = random_instance(seed)
            arch = ArchSpec(d_in=2, width=8, layers=3, d_e=1, direction=direction)
            p = ModelParams.init(arch, rng_seed=seed + 100)
            got = forward_full(p, g).logits
            assert np.array_equal(got, naive_forward(p, g))

    def test_isolated_nodes_and_self_loops(self):
        g = G.build(4, [(0, 0), (0, 1)], features=np.ones((4, 1)))
        arch = ArchSpec(d_in=1, width=6, layers=2)
        p = ModelParams.init(arch, rng_seed=4)
        assert np.array_equal(forward_full(p, g).logits, naive_forward(p, g))

    def test_zero_layers_is_heads_on_embedding(self):
        g, _ = random_instance(9)
        p = ModelParams.init(ArchSpec(d_in=2, width=5, layers=0, d_e=1), 0)
        state = forward_full(p, g)
        assert np.array_equal(state.logits, head_logits(p, embed(p, g.node_features)))

    def test_forward_is_deterministic(self):
        g, _ = random_instance(11)
        p = ModelParams.init(ArchSpec(d_in=2, width=8, layers=3, d_e=1), 7)
        assert np.array_equal(forward_full(p, g).logits, forward_full(p, g).logits)

    def test_permutation_equivariance(self):
        # relabeling reorders each neighborhood's reduction, so equality is
        # mathematical, not bitwise; check to tight tolerance
        g, rng = random_instance(13)
        n = g.num_nodes
        perm = rng.permutation(n)
        feats = np.empty_like(g.node_features)
        feats[perm] = g.node_features  # relabeled node perm[v] keeps v's features
        g2 = G.build(n, list(zip(perm[g.src].tolist(), perm[g.dst].tolist())),
                     features=feats, edge_features=g.edge_features)
        p = ModelParams.init(ArchSpec(d_in=2, width=8, layers=3, d_e=1), 21)
        a = forward_full(p, g).logits
        b = forward_full(p, g2).logits
        np.testing.assert_allclose(b[perm], a, rtol=1e-9, atol=1e-12)


def central_diff_rel_err(flat, loss_at, analytic, eps=1e-4, rel_tol=1e-3):
    """Max relative error of analytic vs central differences, per coordinate.

    The loss of a ReLU/max network is piecewise smooth; when a breakpoint
    falls inside a coordinate's +-eps stencil the central difference mixes
    two slopes and stops estimating the derivative at the base point.  Such
    coordinates are re-sampled with the step shrunk 10x and 100x and must
    converge to the analytic value; a coordinate that stays off even as the
    stencil no longer straddles the kink is a genuine gradient error.
    """

    def rel(a, b):
        return abs(a - b) / max(abs(a), abs(b), 1e-6)

    def fd_at(i, e):
        up, dn = flat.copy(), flat.copy()
        up[i] += e
        dn[i] -= e
        return (loss_at(up) - loss_at(dn)) / (2 * e)

    worst = 0.0
    for i in range(len(flat)):
        err = rel(fd_at(i, eps), analytic[i])
        if err > rel_tol:
            err = min(err, *(rel(fd_at(i, eps / s), analytic[i]) for s in (10, 100)))
        worst = max(worst, err)
    return worst


def fd_check(arch, seed, eps=1e-4):
    g, rng = random_instance(seed, n_max=24, d_in=arch.d_in, d_e=arch.d_e)
    p = ModelParams.init(arch, rng_seed=seed + 1)
    batch = np.arange(g.num_nodes)

    def loss_at(flat):
        state = forward_full(ModelParams(arch, flat), g)
        return bce_loss(state.logits, g.labels, batch)[0]

    analytic = loss_and_grad(p, g, batch).grad
    return central_diff_rel_err(p.flat, loss_at, analytic, eps=eps)


class TestBackward:
    def test_gradient_matches_finite_differences(self):
        errs = [
            fd_check(ArchSpec(d_in=2, width=4, layers=2, d_e=1, direction=dr), seed)
            for seed, dr in zip(range(6), ["both", "in", "out", "both", "both", "in"])
        ]
        assert max(errs) <= 1e-3

    def test_gradient_with_parallel_edges(self):
        # duplicated edges produce tied max messages; the first-row routing
        # must still agree with finite differences
        g = G.build(3, [(0, 1), (0, 1), (0, 1), (1, 2)],
                    features=np.random.default_rng(0).normal(size=(3, 2)),
                    edge_features=np.zeros((4, 0)),
                    labels=np.eye(3, 7, dtype=bool))
        arch = ArchSpec(d_in=2, width=4, layers=2)
        p = ModelParams.init(arch, 5)
        batch = np.arange(3)

        def loss_at(flat):
            state = forward_full(ModelParams(arch, flat), g)
            return bce_loss(state.logits, g.labels, batch)[0]

        analytic = loss_and_grad(p, g, batch).grad
        assert central_diff_rel_err(p.flat, loss_at, analytic) <= 1e-3

    def test_saturated_correct_logits_flat_gradient(self):
        g, _ = random_instance(17)
        arch = ArchSpec(d_in=2, width=6, layers=1, d_e=1)
        p = ModelParams.init(arch, 8)
        state = forward_full(p, g)
        labels = state.logits > 0
        g2 = G.build(g.num_nodes, list(zip(g.src.tolist(), g.dst.tolist())),
                     features=g.node_features, edge_features=g.edge_features,
                     labels=labels)
        scale = 45.0 / np.abs(state.logits).min()  # drive every |logit| past 45
        p["head.W"][:] *= scale
        p["head.b"][:] *= scale
        bundle = loss_and_grad(p, g2, np.arange(g2.num_nodes))
        assert np.linalg.norm(bundle.grad) < 1e-6

    def test_empty_batch(self):
        g, _ = random_instance(19)
        p = ModelParams.init(ArchSpec(d_in=2, width=4, layers=1, d_e=1), 0)
        bundle = loss_and_grad(p, g, np.array([], dtype=np.int64))
        assert bundle.loss == 0.0 and (bundle.grad == 0).all()

    def test_loss_mean_over_batch(self):
        g, _ = random_instance(23)
        p = ModelParams.init(ArchSpec(d_in=2, width=4, layers=1, d_e=1), 2)
        state = forward_full(p, g)
        full, _ = bce_loss(state.logits, g.labels, np.arange(g.num_nodes))
        per = [bce_loss(state.logits, g.labels, np.array([v]))[0]
               for v in range(g.num_nodes)]
        assert full == pytest.approx(np.mean(per), rel=1e-12)

    def test_grad_length(self):
        g, _ = random_instance(29)
        p = ModelParams.init(ArchSpec(d_in=2, width=4, layers=2, d_e=1), 3)
        bundle = loss_and_grad(p, g, np.arange(g.num_nodes))
        assert bundle.grad.shape == (p.n_params,)
        assert bundle.sample_count == g.num_nodes


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        p = ModelParams.init(ArchSpec(d_in=2, width=8, layers=2, d_e=1), 9)
        path = tmp_path / "model.ckpt"
        save_params(p, path)
        q = load_params(path)
        assert q.arch == p.arch
        assert np.array_equal(q.flat, p.flat)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "bogus"
        path.write_bytes(b'{"kind": "something-else"}\n')
        with pytest.raises(ValueError):
            load_params(path)
