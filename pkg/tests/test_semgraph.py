import numpy as np
import pytest

from mscrs import numcore as nc
from mscrs import semgraph as sg
from mscrs.corpus import Conversation, EntityRegistry, KGTriples, Turn
from mscrs.numcore import Tensor


def conv(cid, entity_sets):
    turns = [Turn("seeker", ["x"], list(es)) for es in entity_sets]
    return Conversation(cid, turns)


def brute_force_comention(conversations, n):
    mat = np.zeros((n, n), dtype=int)
    for c in conversations:
        ents = sorted(set(c.mentioned_entities()))
        for i in ents:
            for j in ents:
                if i != j:
                    mat[i, j] += 1
    return mat


class TestCoMention:
    def test_hand_counts(self):
        convs = [conv(0, [[0, 1, 2]]), conv(1, [[0, 1]]), conv(2, [[1, 2]])]
        com = sg.build_comention(convs, 3)
        assert com.count(0, 1) == 2
        assert com.count(0, 2) == 1
        assert com.count(1, 2) == 2

    def test_single_entity_contributes_nothing(self):
        com = sg.build_comention([conv(0, [[3]])], 5)
        assert com.counts == {}

    def test_duplicate_mentions_count_once(self):
        a = sg.build_comention([conv(0, [[0, 1], [0], [1, 0]])], 2)
        b = sg.build_comention([conv(0, [[0, 1]])], 2)
        assert a.counts == b.counts

    def test_matches_brute_force_on_random_corpora(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            n = int(rng.integers(3, 30))
            convs = []
            for cid in range(int(rng.integers(1, 25))):
                ents = rng.choice(n, size=int(rng.integers(1, min(6, n) + 1)),
                                  replace=True).tolist()
                convs.append(conv(cid, [ents]))
            com = sg.build_comention(convs, n)
            ref = brute_force_comention(convs, n)
            for i in range(n):
                for j in range(n):
                    assert com.count(i, j) == ref[i, j]


class TestThreshold:
    def setup_method(self):
        self.convs = [conv(0, [[0, 1, 2]]), conv(1, [[0, 1]]), conv(2, [[1, 2]])]
        self.com = sg.build_comention(self.convs, 3)

    def test_minimal_threshold_keeps_everything(self):
        g = sg.threshold_graph(self.com, 1)
        assert {(i, j) for i, j, _ in g.edges} == {(0, 1), (0, 2), (1, 2)}

    def test_above_max_gives_empty_graph(self):
        g = sg.threshold_graph(self.com, self.com.max_count() + 1)
        assert g.edges == []

    def test_threshold_two(self):
        g = sg.threshold_graph(self.com, 2)
        assert {(i, j) for i, j, _ in g.edges} == {(0, 1), (1, 2)}


class TestSimilarity:
    def test_identical_rows_give_one(self):
        x = np.array([[1.0, 2.0], [1.0, 2.0]])
        assert sg.similarity_matrix(x)[0, 1] == pytest.approx(1.0)

    def test_orthogonal_rows_give_zero(self):
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        assert sg.similarity_matrix(x)[0, 1] == 0.0

    def test_negative_clamped(self):
        x = np.array([[1.0, 0.0], [-1.0, 0.0]])
        assert sg.similarity_matrix(x)[0, 1] == 0.0

    def test_zero_row_similarity_zero_everywhere(self):
        x = np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 0.0]])
        sim = sg.similarity_matrix(x)
        assert np.all(sim[0] == 0) and np.all(sim[:, 0] == 0)


class TestKnn:
    def test_saturated_k_connects_everything(self):
        rng = np.random.default_rng(2)
        feats = np.abs(rng.normal(size=(5, 4))) + 0.1
        adj = sg.knn_sparsify(sg.similarity_matrix(feats), k=10)
        off = ~np.eye(5, dtype=bool)
        assert np.all(adj[off] == 1.0)

    def test_k1_keeps_best_neighbor_per_row(self):
        sim = np.array([
            [0.0, 0.9, 0.1, 0.2],
            [0.9, 0.0, 0.3, 0.1],
            [0.1, 0.3, 0.0, 0.8],
            [0.2, 0.1, 0.8, 0.0],
        ])
        mask = sg.topk_row_mask(sim, 1)
        for i in range(4):
            js = np.nonzero(mask[i])[0]
            assert len(js) == 1
            assert sim[i, js[0]] == sim[i][np.arange(4) != i].max()
        adj = sg.knn_sparsify(sim, 1)
        assert np.array_equal(adj, adj.T)

    def test_zero_row_contributes_no_edges(self):
        sim = np.zeros((3, 3))
        sim[1, 2] = sim[2, 1] = 0.5
        adj = sg.knn_sparsify(sim, 2)
        assert np.all(adj[0] == 0) and np.all(adj[:, 0] == 0)

    def test_row_budget_before_symmetrization(self):
        rng = np.random.default_rng(3)
        for k in (1, 2, 3):
            sim = sg.similarity_matrix(rng.normal(size=(8, 5)))
            mask = sg.topk_row_mask(sim, k)
            assert np.all(mask.sum(axis=1) <= k)
            adj = sg.knn_sparsify(sim, k)
            assert np.array_equal(adj, adj.T) and np.trace(adj) == 0


class TestNormalize:
    def test_single_edge_weight_one(self):
        adj = np.array([[0.0, 1.0], [1.0, 0.0]])
        g = sg.sym_normalize(adj, "text")
        assert g.edges == [(0, 1, 1.0)]

    def test_star_weights(self):
        adj = np.zeros((5, 5))
        adj[0, 1:] = adj[1:, 0] = 1.0
        g = sg.sym_normalize(adj, "text")
        for i, j, w in g.edges:
            assert w == pytest.approx(0.5)  # 1/sqrt(4*1)

    def test_edgeless(self):
        g = sg.sym_normalize(np.zeros((4, 4)), "image")
        assert g.edges == []

    def test_regular_graph_weights(self):
        # 4-cycle: every node degree 2 -> all weights 1/2
        adj = np.zeros((4, 4))
        for i in range(4):
            adj[i, (i + 1) % 4] = adj[(i + 1) % 4, i] = 1.0
        g = sg.sym_normalize(adj, "text")
        assert all(w == pytest.approx(0.5) for _, _, w in g.edges)


class TestRgcn:
    def test_isolated_node_self_term_only(self):
        kg = KGTriples([], 1)
        graph = sg.RelationalGraph.from_triples(kg, 2)
        emb = Tensor([[1.0, -2.0], [3.0, 4.0]])
        w = Tensor(np.eye(2))
        out = sg.rgcn_layer(graph, emb, [w], w, activation="relu")
        assert np.array_equal(out.values, np.maximum(emb.values, 0))

    def test_two_node_hand_case(self):
        kg = KGTriples([(0, 0, 1)], 1)
        graph = sg.RelationalGraph.from_triples(kg, 2)
        emb = Tensor([[1.0, 2.0], [10.0, 20.0]])
        eye = Tensor(np.eye(2))
        out = sg.rgcn_layer(graph, emb, [eye], eye, activation="identity")
        assert np.allclose(out.values[0], [11.0, 22.0])
        assert np.allclose(out.values[1], [11.0, 22.0])

    def test_zero_embeddings_stay_zero(self):
        kg = KGTriples([(0, 0, 1), (1, 0, 2)], 1)
        graph = sg.RelationalGraph.from_triples(kg, 3)
        out = sg.rgcn_layer(graph, Tensor(np.zeros((3, 2))),
                            [Tensor(np.eye(2))], Tensor(np.eye(2)))
        assert np.all(out.values == 0)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            k = int(rng.integers(3, 20))
            nrel = int(rng.integers(1, 4))
            triples = []
            for _ in range(int(rng.integers(1, 3 * k))):
                h, t = rng.integers(k, size=2)
                if h != t:
                    triples.append((int(h), int(rng.integers(nrel)), int(t)))
            if not triples:
                triples = [(0, 0, 1 % k if k > 1 else 0)]
            kg = KGTriples(triples, nrel)
            graph = sg.RelationalGraph.from_triples(kg, k)
            d = 4
            emb = rng.normal(size=(k, d))
            weights = [rng.normal(size=(d, d)) for _ in range(nrel)]
            self_w = rng.normal(size=(d, d))

            # dense per-relation message-passing oracle
            expected = emb @ self_w
            for r in range(nrel):
                nbrs = [set() for _ in range(k)]
                for h, rel, t in triples:
                    if rel == r:
                        nbrs[h].add(t)
                        nbrs[t].add(h)
                for e in range(k):
                    if nbrs[e]:
                        agg = sum(emb[o] for o in sorted(nbrs[e])) / len(nbrs[e])
                        expected[e] += agg @ weights[r]
            expected = np.maximum(expected, 0)

            out = sg.rgcn_layer(graph, Tensor(emb),
                                [Tensor(w) for w in weights], Tensor(self_w))
            assert np.max(np.abs(out.values - expected)) <= 1e-9


class TestLightGcn:
    def test_edgeless_graph_zeroes_layers(self):
        g = sg.SemanticGraph.empty(3, "text")
        layers = sg.lightgcn_propagate(g, Tensor(np.ones((3, 2))), 2)
        assert np.all(layers[1].values == 0) and np.all(layers[2].values == 0)

    def test_two_node_swap(self):
        g = sg.sym_normalize(np.array([[0.0, 1.0], [1.0, 0.0]]), "text")
        layers = sg.lightgcn_propagate(g, Tensor(np.eye(2)), 1)
        assert np.array_equal(layers[1].values, [[0.0, 1.0], [1.0, 0.0]])

    def test_linearity(self):
        rng = np.random.default_rng(4)
        adj = sg.knn_sparsify(sg.similarity_matrix(np.abs(rng.normal(size=(6, 3)))), 2)
        g = sg.sym_normalize(adj, "text")
        e0 = rng.normal(size=(6, 4))
        one = sg.lightgcn_propagate(g, Tensor(e0), 3)
        scaled = sg.lightgcn_propagate(g, Tensor(2.5 * e0), 3)
        for a, b in zip(one, scaled):
            assert np.allclose(2.5 * a.values, b.values, atol=1e-12)

    def test_matches_dense_power_oracle(self):
        rng = np.random.default_rng(31)
        for _ in range(10):
            n = int(rng.integers(2, 50))
            feats = rng.normal(size=(n, 6))
            adj = sg.knn_sparsify(sg.similarity_matrix(feats), int(rng.integers(1, 5)))
            g = sg.sym_normalize(adj, "image")
            dense = g.to_dense()
            e0 = rng.normal(size=(n, 3))
            layers = sg.lightgcn_propagate(g, Tensor(e0), 3)
            acc = e0
            for t in range(1, 4):
                acc = dense @ acc
                assert np.max(np.abs(layers[t].values - acc)) <= 1e-9


class TestFusion:
    def test_layer_average_single_identity(self):
        e = Tensor([[1.0, 2.0]])
        out = sg.layer_average([e])
        assert np.array_equal(out.values, e.values)

    def test_layer_average_edgeless_quarters(self):
        g = sg.SemanticGraph.empty(2, "text")
        e0 = Tensor([[4.0, 8.0], [-2.0, 0.0]])
        out = sg.layer_average(sg.lightgcn_propagate(g, e0, 3))
        assert np.array_equal(out.values, e0.values / 4.0)

    def test_layer_average_cancellation(self):
        e = Tensor([[1.0, -3.0]])
        neg = Tensor([[-1.0, 3.0]])
        assert np.all(sg.layer_average([e, neg]).values == 0)

    def test_fuse_modalities_endpoints_bit_exact(self):
        rng = np.random.default_rng(6)
        t = Tensor(rng.normal(size=(4, 3)))
        v = Tensor(rng.normal(size=(4, 3)))
        assert np.array_equal(sg.fuse_modalities(t, v, 1.0).values, t.values)
        assert np.array_equal(sg.fuse_modalities(t, v, 0.0).values, v.values)

    def test_fuse_modalities_cancellation(self):
        t = Tensor([[2.0, -4.0]])
        v = Tensor([[-2.0, 4.0]])
        assert np.all(sg.fuse_modalities(t, v, 0.5).values == 0)

    def test_fuse_collaborative_idempotent_and_halving(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(5, 2)))
        assert np.array_equal(sg.fuse_collaborative(x, x).values, x.values)
        zero = Tensor(np.zeros((5, 2)))
        assert np.array_equal(sg.fuse_collaborative(zero, x).values, x.values / 2.0)
        y = Tensor(rng.normal(size=(5, 2)))
        assert np.max(np.abs(sg.fuse_collaborative(x, y).values
                             - (x.values + y.values) / 2)) <= 1e-12

    def test_fuse_final_zero_modality_is_item_rows(self):
        reg = EntityRegistry(["item-0", "item-1", "topic-0"], [True, True, False])
        rng = np.random.default_rng(8)
        entity = Tensor(rng.normal(size=(3, 4)))
        zero = Tensor(np.zeros((2, 4)))
        final, scoring = sg.fuse_final(entity, zero, reg)
        assert np.array_equal(final.values, entity.values[[0, 1]])
        assert np.array_equal(scoring.values, entity.values)

    def test_fuse_final_addition(self):
        reg = EntityRegistry(["item-0"], [True])
        final, scoring = sg.fuse_final(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0]]), reg)
        assert np.array_equal(final.values, [[4.0, 6.0]])
        assert np.array_equal(scoring.values, [[4.0, 6.0]])

    def test_fuse_final_scoring_table_mixes_rows(self):
        reg = EntityRegistry(["topic-0", "item-0", "topic-1"], [False, True, False])
        entity = Tensor([[1.0], [2.0], [3.0]])
        final, scoring = sg.fuse_final(entity, Tensor([[10.0]]), reg)
        assert np.array_equal(final.values, [[12.0]])
        assert np.array_equal(scoring.values, [[1.0], [12.0], [3.0]])


class TestGraphIO:
    def test_tsv_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        adj = sg.knn_sparsify(sg.similarity_matrix(np.abs(rng.normal(size=(7, 4)))), 2)
        g = sg.sym_normalize(adj, "text")
        path = tmp_path / "g.tsv"
        sg.save_graph_tsv(path, g)
        g2 = sg.load_graph_tsv(path)
        assert g2.node_count == g.node_count
        assert g2.modality == g.modality
        assert g2.edges == sorted(g.edges)
        first = path.read_bytes()
        sg.save_graph_tsv(path, g2)
        assert path.read_bytes() == first


class TestGradientFlow:
    def test_full_graph_pipeline_grad_check(self):
        rng = np.random.default_rng(10)
        reg = EntityRegistry([f"item-{i}" for i in range(3)] + ["topic-0", "topic-1"],
                             [True] * 3 + [False] * 2)
        kg = KGTriples([(0, 0, 3), (1, 0, 4), (2, 1, 3)], 2)
        rel = sg.RelationalGraph.from_triples(kg, 5)
        collab = sg.sym_normalize(np.array([
            [0, 1, 0, 1, 0],
            [1, 0, 1, 0, 0],
            [0, 1, 0, 0, 1],
            [1, 0, 0, 0, 0],
            [0, 0, 1, 0, 0],
        ], dtype=float), "collaborative")
        text = sg.sym_normalize(np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]],
                                         dtype=float), "text")
        w_rel = [Tensor(rng.normal(size=(3, 3))) for _ in range(2)]
        w_self = Tensor(rng.normal(size=(3, 3)))

        def pipeline(entity_table):
            enhanced = sg.rgcn_layer(rel, entity_table, w_rel, w_self)
            collab_avg = sg.layer_average(sg.lightgcn_propagate(collab, enhanced, 2))
            item_rows = nc.embedding_gather(enhanced, reg.items)
            text_avg = sg.layer_average(sg.lightgcn_propagate(text, item_rows, 2))
            fused_entities = sg.fuse_collaborative(collab_avg, enhanced)
            final, scoring = sg.fuse_final(fused_entities, text_avg, reg)
            return nc.tsum(nc.mul(final, final)), scoring

        base = rng.normal(size=(5, 3)) + 0.3
        err = nc.grad_check(lambda x: pipeline(x)[0], Tensor(base), 1e-3)
        assert err <= 1e-4
