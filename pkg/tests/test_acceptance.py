"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with -s or check captured output). The heavy
training-based criteria live at the bottom; run the whole module with
plain `pytest tests/test_acceptance.py`.
"""

import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from conftest import tiny_run_config
from mscrs import convgen as cg
from mscrs import corpus as cp
from mscrs import lm as lmmod
from mscrs import metrics as mx
from mscrs import numcore as nc
from mscrs import pipeline as pl
from mscrs import recsys as rs
from mscrs import semgraph as sg
from mscrs.config import config_from_json
from mscrs.numcore import Tensor


def report(name: str, ok: bool, detail: str = "") -> None:
    print(f"[ACCEPTANCE] {name}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# 1. Oracle equivalence (graph construction + propagation), <= 1e-9, < 30 s
# ---------------------------------------------------------------------------

class TestOracleEquivalence:
    def test_graph_ops_match_dense_oracles(self):
        start = time.time()
        rng = np.random.default_rng(2024)
        worst = 0.0
        for trial in range(50):
            k = int(rng.integers(4, 51))
            n = max(2, k // 2)

            # co-mention counts vs brute-force recount
            convs = []
            for cid in range(int(rng.integers(1, 20))):
                ents = rng.choice(k, size=int(rng.integers(1, 6)), replace=True)
                convs.append(cp.Conversation(cid, [
                    cp.Turn("seeker", ["x"], [int(e) for e in ents])]))
            com = sg.build_comention(convs, k)
            dense_counts = np.zeros((k, k))
            for c in convs:
                ents = sorted(set(c.mentioned_entities()))
                for a in ents:
                    for b in ents:
                        if a != b:
                            dense_counts[a, b] += 0.5  # both orders visited
            dense_counts = dense_counts + dense_counts.T
            for i in range(k):
                for j in range(k):
                    worst = max(worst, abs(com.count(i, j) - dense_counts[i, j]))

            # threshold graph + symmetric normalization vs formula
            theta = int(rng.integers(1, 3))
            graph = sg.threshold_graph(com, theta)
            adj = np.zeros((k, k))
            for i in range(k):
                for j in range(k):
                    if i != j and dense_counts[i, j] >= theta:
                        adj[i, j] = 1.0
            deg = adj.sum(axis=1)
            expected_edges = {}
            for i in range(k):
                for j in range(i + 1, k):
                    if adj[i, j]:
                        expected_edges[(i, j)] = 1.0 / np.sqrt(deg[i] * deg[j])
            got_edges = {(i, j): w for i, j, w in graph.edges}
            assert set(got_edges) == set(expected_edges)
            for key, w in expected_edges.items():
                worst = max(worst, abs(w - got_edges[key]))

            # kNN sparsification vs per-row sort oracle
            feats = rng.normal(size=(n, 5))
            feats[rng.random(n) < 0.15] = 0.0  # some missing rows
            sim = sg.similarity_matrix(feats)
            kk = int(rng.integers(1, 6))
            mask = sg.topk_row_mask(sim, kk)
            for i in range(n):
                ranked = sorted((j for j in range(n) if j != i and sim[i, j] > 0),
                                key=lambda j: (-sim[i, j], j))[:kk]
                expected_row = np.zeros(n)
                expected_row[ranked] = 1.0
                worst = max(worst, float(np.abs(mask[i] - expected_row).max()))

            # LightGCN propagation vs dense power oracle
            g = sg.sym_normalize(sg.knn_sparsify(sim, kk), "text")
            e0 = rng.normal(size=(n, 4))
            layers = sg.lightgcn_propagate(g, Tensor(e0), 3)
            acc = e0
            dense = g.to_dense()
            for t in range(1, 4):
                acc = dense @ acc
                worst = max(worst, float(np.abs(layers[t].values - acc).max()))

            # R-GCN layer vs per-relation message-passing oracle
            nrel = int(rng.integers(1, 4))
            triples = []
            for _ in range(int(rng.integers(1, 2 * k))):
                h, t = (int(x) for x in rng.integers(k, size=2))
                if h != t:
                    triples.append((h, int(rng.integers(nrel)), t))
            if not triples:
                triples = [(0, 0, k - 1)]
            rel = sg.RelationalGraph.from_triples(cp.KGTriples(triples, nrel), k)
            emb = rng.normal(size=(k, 4))
            weights = [rng.normal(size=(4, 4)) for _ in range(nrel)]
            self_w = rng.normal(size=(4, 4))
            expected = emb @ self_w
            for r in range(nrel):
                nbrs = [set() for _ in range(k)]
                for h, rr, t in triples:
                    if rr == r:
                        nbrs[h].add(t)
                        nbrs[t].add(h)
                for e in range(k):
                    if nbrs[e]:
                        agg = sum(emb[o] for o in sorted(nbrs[e])) / len(nbrs[e])
                        expected[e] += agg @ weights[r]
            expected = np.maximum(expected, 0.0)
            out = sg.rgcn_layer(rel, Tensor(emb), [Tensor(w) for w in weights],
                                Tensor(self_w))
            worst = max(worst, float(np.abs(out.values - expected).max()))

        elapsed = time.time() - start
        report("oracle-equivalence", worst <= 1e-9 and elapsed < 30,
               f"max_abs_err={worst:.2e} elapsed={elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. Gradient suite: ops + full rec/conv pipelines, h=1e-3, <= 1e-4, < 2 min
# ---------------------------------------------------------------------------

class TestGradientSuite:
    def test_all_ops_and_full_pipelines(self):
        start = time.time()
        h, tol = 1e-3, 1e-4
        rng = np.random.default_rng(7)
        worst_op = 0.0

        other = Tensor(rng.normal(size=(4, 3)))
        square = Tensor(rng.normal(size=(3, 3)))
        vec = Tensor(rng.normal(size=3))
        vec2 = Tensor(rng.normal(size=3))
        mask = rng.random((4, 3)) < 0.3
        builders = {
            "matmul": lambda x: nc.matmul(x, square),
            "add": lambda x: nc.add(x, other),
            "add-rowvec": lambda x: nc.add_rowvec(x, vec),
            "scale": lambda x: nc.scale(x, -0.7),
            "concat-rows": lambda x: nc.concat_rows([x, other]),
            "concat-cols": lambda x: nc.concat_cols([x, other]),
            "slice-rows": lambda x: nc.slice_rows(x, 1, 3),
            "slice-cols": lambda x: nc.slice_cols(x, 0, 2),
            "mean-rows": lambda x: nc.reshape(nc.mean_rows(x), (1, 3)),
            "sum": lambda x: x,
            "dot-product": lambda x: nc.reshape(nc.dot(nc.mean_rows(x), vec2), (1, 1)),
            "reshape": lambda x: nc.reshape(x, (2, 6)),
            "transpose": lambda x: nc.transpose(x),
            "row-softmax": lambda x: nc.mul(nc.row_softmax(x), other),
            "row-logsumexp": lambda x: nc.reshape(nc.row_logsumexp(x), (4, 1)),
            "log": lambda x: nc.tlog(nc.texp(x)),
            "exp": lambda x: nc.texp(x),
            "relu": lambda x: nc.relu(x),
            "layer-normalize": lambda x: nc.layer_normalize(x),
            "elementwise-multiply": lambda x: nc.mul(x, other),
            "mul-rowvec": lambda x: nc.mul_rowvec(x, vec),
            "masked-fill": lambda x: nc.masked_fill(x, mask, -2.0),
            "embedding-gather": lambda x: nc.embedding_gather(x, [0, 2, 2, 1]),
            "take-entries": lambda x: nc.reshape(
                nc.take_entries(x, [0, 1, 3], [2, 0, 1]), (1, 3)),
        }
        assert sorted(builders) == nc.op_kinds()
        for kind, build in builders.items():
            x0 = rng.normal(size=(4, 3))
            if kind == "relu":
                x0 = np.where(np.abs(x0) < 0.05, 0.5, x0)

            def f(x, _build=build):
                out = _build(x)
                return nc.tsum(nc.mul(out, Tensor(np.ones_like(out.values))))

            worst_op = max(worst_op, nc.grad_check(f, Tensor(x0), h))

        # full recommendation pipeline: entity table -> relational conv ->
        # propagation -> fusion -> bilinear -> LM -> loss, on K=8 / N=4
        registry = cp.EntityRegistry(
            [f"item-{i}" for i in range(4)] + [f"topic-{i}" for i in range(4)],
            [True] * 4 + [False] * 4)
        kg = cp.KGTriples([(0, 0, 4), (1, 0, 5), (2, 1, 6), (3, 1, 7)], 2)
        convs = [cp.Conversation(0, [cp.Turn("seeker", ["a", "b"], [4, 0]),
                                     cp.Turn("recommender", ["c"], [], labels=[1])])]
        vocab = cp.build_vocab(convs)
        lm_state = lmmod.LMState(lmmod.LMConfig(vocab_size=len(vocab),
                                                hidden_width=16, layers=1, heads=2,
                                                max_len=32, soft_prompt_len=4),
                                 seed=3)
        lm_state.freeze()
        com = sg.build_comention(convs, 8)
        graphs = rs.GraphBundle(
            registry, sg.RelationalGraph.from_triples(kg, 8),
            sg.threshold_graph(com, 1),
            sg.sym_normalize(np.array([[0, 1, 0, 0], [1, 0, 1, 0],
                                       [0, 1, 0, 1], [0, 0, 1, 0]],
                                      dtype=float), "text"),
            None)
        cfg = rs.RecConfig(embed_dim=12, prefix_len=4, entity_slots=4,
                           lightgcn_layers=2)
        model = rs.RecModel(lm_state, vocab, graphs, cfg, seed=1)
        inst = cp.Instance(0, 1, ["a", "b"], [4, 0], 1)
        base = model.entity_table.values.copy()

        def rec_loss(table):
            model.entity_table = table
            item_final, scoring = model.semantic_tables()
            prompt, pc, pe = model.encode(inst.context_tokens, inst.entities, scoring)
            nll = rs.item_nll(model.user_vector(prompt), item_final, 1)
            return nc.add(nll, nc.scale(rs.fuse_loss([pc], [pe], cfg.temperature),
                                        cfg.fuse_weight))

        rec_err = nc.grad_check(rec_loss, Tensor(base), h)
        model.entity_table = Tensor(base, requires_grad=True)

        # full conversation pipeline through the correlation enhancement
        gen_insts = cg.gen_instances(convs)
        correlation = cg.build_correlation_map(gen_insts, graphs, lm_state, vocab, 1)
        gen_model = cg.GenModel(lm_state, vocab, graphs,
                                np.random.default_rng(5).normal(size=(8, 12)),
                                correlation, prefix_len=3, entity_slots=3, seed=2)
        target = cg.encode_target(vocab, ["c"], set())
        gen_base = gen_model.enhance_weight.values.copy()

        def conv_loss(w):
            gen_model.enhance_weight = w
            prompt = gen_model.build_prompt(gen_insts[0], 0,
                                            budget_margin=len(target) - 1)
            return lmmod.token_nll(lm_state, prompt, target)

        conv_err = nc.grad_check(conv_loss, Tensor(gen_base), h)
        gen_model.enhance_weight = Tensor(gen_base, requires_grad=True)

        elapsed = time.time() - start
        ok = worst_op <= 1e-4 and rec_err <= 1e-4 and conv_err <= 1e-4 \
            and elapsed < 120
        report("gradient-suite", ok,
               f"ops={worst_op:.2e} rec={rec_err:.2e} conv={conv_err:.2e} "
               f"elapsed={elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. Fusion endpoint identities (bit-exact)
# ---------------------------------------------------------------------------

class TestFusionEndpoints:
    def test_bit_exact_identities(self):
        rng = np.random.default_rng(11)
        text = Tensor(rng.normal(size=(6, 5)))
        image = Tensor(rng.normal(size=(6, 5)))
        lam1 = np.array_equal(sg.fuse_modalities(text, image, 1.0).values, text.values)
        lam0 = np.array_equal(sg.fuse_modalities(text, image, 0.0).values, image.values)

        registry = cp.EntityRegistry(
            [f"item-{i}" for i in range(6)] + ["topic-0"], [True] * 6 + [False])
        entity = Tensor(rng.normal(size=(7, 5)))
        zero = Tensor(np.zeros((6, 5)))
        final, _ = sg.fuse_final(entity, zero, registry)
        additive = np.array_equal(final.values, entity.values[registry.items])
        report("fusion-endpoints", lam1 and lam0 and additive,
               f"lam1={lam1} lam0={lam0} zero-modality={additive}")


# ---------------------------------------------------------------------------
# 7. Metric fidelity vs independent references (exact / <= 1e-9)
# ---------------------------------------------------------------------------

class TestMetricFidelity:
    def test_two_hundred_random_cases(self):
        import random as pyrandom

        from test_metrics import (ref_bleu, ref_distinct, ref_rank_metrics,
                                  ref_rouge_l)
        rng = pyrandom.Random(99)
        exact = True
        worst = 0.0
        for _ in range(200):
            n = rng.randrange(3, 70)
            ranked = list(range(n))
            rng.shuffle(ranked)
            label = rng.randrange(n + 4)
            ours = mx.rank_metrics([(ranked, label)], (1, 10, 50), (10, 50), (10, 50))
            ref = ref_rank_metrics([(ranked, label)], (1, 10, 50), (10, 50), (10, 50))
            exact = exact and ours == ref

            vocabulary = ["a", "b", "c", "d"]
            hyps = [[rng.choice(vocabulary) for _ in range(rng.randrange(0, 9))]
                    for _ in range(rng.randrange(1, 4))]
            refs = [[rng.choice(vocabulary) for _ in range(rng.randrange(1, 9))]
                    for _ in range(len(hyps))]
            for order in (2, 3):
                worst = max(worst, abs(mx.bleu(hyps, refs, order)
                                       - ref_bleu(hyps, refs, order)))
            worst = max(worst, abs(mx.rouge(hyps[0], refs[0], "L")
                                   - ref_rouge_l(hyps[0], refs[0])))
            for order in (2, 3, 4):
                worst = max(worst, abs(mx.distinct(hyps, order)
                                       - ref_distinct(hyps, order)))
        report("metric-fidelity", exact and worst <= 1e-9,
               f"rank_exact={exact} gen_err={worst:.2e}")


# ---------------------------------------------------------------------------
# 6. Sweep harness: exact grids, deterministic
# ---------------------------------------------------------------------------

class TestSweepHarness:
    def test_grids_complete_and_deterministic(self, tmp_path):
        cfg = tiny_run_config(str(tmp_path / "corpus"))
        cfg.rec.steps = 2
        cfg.rec.pretrain_steps = 0
        cfg.lm.warmup_steps = 2
        cp.synth_corpus(pl.synth_settings_to_config(cfg), tmp_path / "corpus")
        k1 = pl.run_sweep_k(cfg)
        k2 = pl.run_sweep_k(cfg)
        lam1 = pl.run_sweep_lambda(cfg)
        lam2 = pl.run_sweep_lambda(cfg)
        ok_k = [row["k"] for row in k1["rows"]] == [5, 10, 20, 30, 50, 100]
        ok_lam = [row["lambda"] for row in lam1["rows"]] == [0.1, 0.3, 0.5, 0.7, 0.9]
        ok_det = json.dumps(k1) == json.dumps(k2) and \
            json.dumps(lam1) == json.dumps(lam2)
        report("sweep-harness", ok_k and ok_lam and ok_det,
               f"k_grid={ok_k} lambda_grid={ok_lam} deterministic={ok_det}")


# ---------------------------------------------------------------------------
# 9. Replay determinism: 10-turn scripted session, byte-identical responses
# ---------------------------------------------------------------------------

class TestReplayDeterminism:
    def test_scripted_session_replay(self, toy_bundle, tmp_path):
        from mscrs.server import EngineState, create_app
        from mscrs.sessions import SessionStore

        script = [f"i am looking for something like item-{i % 9}" for i in range(10)]

        def run(run_dir):
            loaded = pl.load_bundle(toy_bundle["bundle_dir"],
                                    corpus_dir=str(toy_bundle["corpus_dir"]))
            store = SessionStore(run_dir / "sessions.jsonl")
            engine = EngineState(loaded, store, top_k=3, max_new_tokens=6)
            client = TestClient(create_app(engine))
            payloads = [client.post("/sessions").content]
            sid = json.loads(payloads[0])["id"]
            for text in script:
                resp = client.post(f"/sessions/{sid}/utterances",
                                   json={"text": text})
                payloads.append(resp.content)
            payloads.append(client.get(f"/sessions/{sid}").content)
            return payloads

        first = run(tmp_path / "a")
        second = run(tmp_path / "b")
        identical = first == second
        report("replay-determinism", identical,
               f"responses={len(first)} byte_identical={identical}")


# ---------------------------------------------------------------------------
# 8. Generation memorization: 20 templated pairs, BLEU-2 >= 0.5 in <= 300 steps
# ---------------------------------------------------------------------------

OFFER_TEMPLATES = [
    ["you", "should", "watch", cp.ITEM_SLOT, "tonight"],
    ["maybe", "try", cp.ITEM_SLOT, "this", "weekend"],
    ["definitely", "check", "out", cp.ITEM_SLOT, "soon"],
]

OPENERS = [
    ["hi", "i", "want", "a", "movie"],
    ["hello", "suggest", "me", "something"],
]


def templated_pairs_corpus(directory, n_pairs=20, n_clusters=3):
    """Two-turn conversations whose response template is keyed by the
    cluster of the mentioned entities (deterministic, memorizable)."""
    n_items, n_entities = 9, 18
    names = [f"item-{i}" if i < n_items else f"topic-{i - n_items}"
             for i in range(n_entities)]
    registry = cp.EntityRegistry(names, [i < n_items for i in range(n_entities)])
    rng = np.random.default_rng(0)
    conversations = []
    for cid in range(n_pairs):
        cluster = cid % n_clusters
        pool = [e for e in range(n_entities)
                if cp.cluster_of(e if e < n_items else e - n_items,
                                 n_clusters) == cluster]
        picks = rng.permutation(len(pool))[:2]
        mentioned = [pool[int(i)] for i in picks]
        label = next(e for e in mentioned if e < n_items) \
            if any(e < n_items for e in mentioned) else cluster
        conversations.append(cp.Conversation(cid, [
            cp.Turn("seeker", list(OPENERS[cid % len(OPENERS)]), mentioned),
            cp.Turn("recommender", list(OFFER_TEMPLATES[cluster]), [],
                    labels=[label]),
        ]))
    kg = cp.KGTriples([(e, 0, n_items) for e in range(n_entities)
                       if e != n_items], 1)
    corpus = cp.Corpus(registry, conversations, kg)
    cp.save_corpus(directory, corpus)
    feats = np.zeros((n_items, 8))
    feats[:, 0] = 1.0
    cp.save_feature_matrix(directory / "features_text.msfm", feats)
    cp.save_feature_matrix(directory / "features_image.msfm", feats)
    return corpus


class TestGenerationMemorization:
    def test_templated_pairs_memorized(self, tmp_path):
        start = time.time()
        corpus_dir = tmp_path / "corpus"
        corpus_dir.mkdir()
        templated_pairs_corpus(corpus_dir)
        cfg = config_from_json({
            "corpus_dir": str(corpus_dir),
            "seed": 0,
            "split": {"ratios": [1.0, 0.0, 0.0]},
            "graph": {"comention_threshold": 1, "knn_k": 3, "context_knn_k": 3},
            "lm": {"hidden_width": 48, "layers": 1, "heads": 2, "max_len": 64,
                   "soft_prompt_len": 20, "warmup_steps": 150},
            "rec": {"embed_dim": 48, "prefix_len": 4, "entity_slots": 4},
            "conv": {"batch_size": 16, "steps": 300, "lr": 1e-3,
                     "max_new_tokens": 10},
        })
        world = pl.load_world(cfg)
        graphs = pl.build_graphs(cfg, world)
        gen_model = pl.train_generator(cfg, world, graphs, None, seed=0)
        train_insts = cg.gen_instances(world.conversations(world.split.train))
        assert len(train_insts) == 20
        item_names = {world.corpus.registry.names[eid]
                      for eid in world.corpus.registry.items}
        report_metrics, hyps = pl.generation_eval(
            gen_model, train_insts, item_names, world.vocab,
            cfg.conv.max_new_tokens)
        elapsed = time.time() - start
        ok = report_metrics["bleu@2"] >= 0.5 and report_metrics["distinct@2"] > 0
        report("generation-memorization", ok,
               f"bleu2={report_metrics['bleu@2']:.3f} "
               f"distinct2={report_metrics['distinct@2']:.3f} "
               f"elapsed={elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 4. Overfit: N=30, K=60, M=200 -> train recall@1 >= 0.9 within 500 steps
# ---------------------------------------------------------------------------

class TestOverfit:
    def test_train_recall_reaches_090(self, tmp_path):
        start = time.time()
        cfg = config_from_json({
            "corpus_dir": str(tmp_path / "corpus"),
            "seed": 0,
            "synth": {"n_items": 30, "n_entities": 60, "n_conversations": 200,
                      "n_clusters": 3, "text_dim": 32, "image_dim": 32},
            "split": {"ratios": [1.0, 0.0, 0.0]},
            "graph": {"comention_threshold": 2, "knn_k": 5, "context_knn_k": 5},
            "lm": {"hidden_width": 64, "layers": 2, "heads": 2, "max_len": 128,
                   "soft_prompt_len": 10, "warmup_steps": 100},
            "rec": {"embed_dim": 64, "prefix_len": 8, "entity_slots": 8,
                    "batch_size": 64, "steps": 500, "pretrain_steps": 0,
                    "lr": 1e-3, "early_stop_recall1": 0.9},
        })
        cp.synth_corpus(pl.synth_settings_to_config(cfg), tmp_path / "corpus")
        world = pl.load_world(cfg)
        graphs = pl.build_graphs(cfg, world)
        model = pl.train_recommender(cfg, world, graphs, seed=0)
        train_inst = cp.corpus_instances(world.conversations(world.split.train))
        recall1 = pl.evaluate_ranking(model, train_inst, (1,), (1,), (1,))["recall@1"]
        elapsed = time.time() - start
        report("overfit-check", recall1 >= 0.9 and elapsed < 300,
               f"train_recall@1={recall1:.3f} elapsed={elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 5. Ablation direction: full >= each single removal >= wo-r, gap >= 0.05
# ---------------------------------------------------------------------------

ABLATION_CONFIG = {
    "seed": 5,
    "synth": {"n_items": 64, "n_entities": 128, "n_conversations": 600,
              "n_clusters": 8, "text_dim": 32, "image_dim": 32,
              "fresh_text_items_per_cluster": 2,
              "fresh_image_items_per_cluster": 2,
              "fringe_entities_per_cluster": 4,
              "fringe_train_occurrences": 2,
              "eval_fraction": 0.3},
    "split": {"ratios": [1.0, 0.0, 0.0], "use_generator_holdout": True},
    "graph": {"comention_threshold": 1, "knn_k": 5, "context_knn_k": 5},
    "lm": {"hidden_width": 64, "layers": 1, "heads": 2, "max_len": 128,
           "soft_prompt_len": 10, "warmup_steps": 100},
    "rec": {"embed_dim": 64, "prefix_len": 8, "entity_slots": 8,
            "batch_size": 24, "steps": 450, "pretrain_steps": 0, "lr": 1e-3},
}


class TestAblationDirection:
    def test_graph_removal_ordering(self, tmp_path):
        start = time.time()
        obj = dict(ABLATION_CONFIG)
        obj["corpus_dir"] = str(tmp_path / "corpus")
        cfg = config_from_json(obj)
        cp.synth_corpus(pl.synth_settings_to_config(cfg), tmp_path / "corpus")
        result = pl.run_ablation(cfg, seeds=[0, 1, 2, 3, 4], tasks=("rec",))
        means = {row["variant"]: row["mean"] for row in result["rows"]}
        elapsed = time.time() - start

        full = means["full"]
        floor = means["wo-r"]
        singles = [means["wo-co"], means["wo-t"], means["wo-i"]]
        ordering = all(full >= s >= floor for s in singles)
        gap = full - floor
        ok = ordering and gap >= 0.05 and elapsed < 1800
        report("ablation-direction", ok,
               f"means={ {k: round(v, 3) for k, v in means.items()} } "
               f"gap={gap:.3f} elapsed={elapsed:.0f}s")
