"""End-to-end recipes: data prep, graph building, training, evaluation,
ablations, sweeps, and checkpoint bundles.

A bundle directory holds everything the server and evaluator need:
config.json, vocab.json, split.json, lm.ckpt, rec.ckpt, optional gen.ckpt,
exported graph TSVs, and a manifest with file hashes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import convgen as cg
from . import corpus as cp
from . import lm as lmmod
from . import metrics as mx
from . import numcore as nc
from . import recsys as rs
from . import semgraph as sg
from .config import RunConfig

log = logging.getLogger("mscrs.pipeline")


@dataclass
class World:
    corpus: cp.Corpus
    text_features: cp.FeatureMatrix
    image_features: cp.FeatureMatrix
    vocab: cp.Vocab
    split: cp.DatasetSplit

    def conversations(self, ids: list[int]) -> list[cp.Conversation]:
        wanted = set(ids)
        return [c for c in self.corpus.conversations if c.conv_id in wanted]


def synth_settings_to_config(cfg: RunConfig) -> cp.SynthConfig:
    s = cfg.synth
    return cp.SynthConfig(
        seed=cfg.seed, n_items=s.n_items, n_entities=s.n_entities,
        n_conversations=s.n_conversations, n_relations=s.n_relations,
        n_clusters=s.n_clusters, text_dim=s.text_dim, image_dim=s.image_dim,
        feature_noise=s.feature_noise,
        text_informative_fraction=s.text_informative_fraction,
        image_informative_fraction=s.image_informative_fraction,
        fresh_text_items_per_cluster=s.fresh_text_items_per_cluster,
        fresh_image_items_per_cluster=s.fresh_image_items_per_cluster,
        fringe_entities_per_cluster=s.fringe_entities_per_cluster,
        fringe_train_occurrences=s.fringe_train_occurrences,
        eval_fraction=s.eval_fraction,
        mentions_per_conversation=(s.mentions_min, s.mentions_max),
        offcluster_mention_rate=s.offcluster_mention_rate)


def make_split(cfg: RunConfig, corpus: cp.Corpus) -> cp.DatasetSplit:
    if cfg.split.use_generator_holdout:
        holdout = set(cp.eval_conversation_ids(synth_settings_to_config(cfg)))
        rest = [c.conv_id for c in corpus.conversations if c.conv_id not in holdout]
        test = [c.conv_id for c in corpus.conversations if c.conv_id in holdout]
        r_train, r_valid, _ = cfg.split.ratios
        denom = max(r_train + r_valid, 1e-12)
        n_valid = int(round(len(rest) * r_valid / denom))
        rng = np.random.default_rng(cfg.split.seed)
        order = rng.permutation(len(rest))
        shuffled = [rest[i] for i in order]
        return cp.DatasetSplit(shuffled[n_valid:], shuffled[:n_valid], test)
    return cp.split(corpus.conversations, cfg.split.ratios, cfg.split.seed)


def load_world(cfg: RunConfig) -> World:
    directory = Path(cfg.corpus_dir)
    corpus = cp.load_corpus(directory)
    text = cp.load_feature_matrix(directory / "features_text.msfm", "text",
                                  corpus.registry)
    image = cp.load_feature_matrix(directory / "features_image.msfm", "image",
                                   corpus.registry)
    vocab = cp.build_vocab(corpus.conversations)
    return World(corpus, text, image, vocab, make_split(cfg, corpus))


def build_graphs(cfg: RunConfig, world: World) -> rs.GraphBundle:
    """Train-split graphs only; ablation flags drop individual graphs."""
    registry = world.corpus.registry
    g = cfg.graph
    train_convs = world.conversations(world.split.train)
    collab = text = image = None
    if g.use_collab:
        com = sg.build_comention(train_convs, registry.entity_count)
        collab = sg.threshold_graph(com, g.comention_threshold)
    if g.use_text:
        text = sg.sym_normalize(
            sg.knn_sparsify(sg.similarity_matrix(world.text_features.matrix), g.knn_k),
            "text")
    if g.use_image:
        image = sg.sym_normalize(
            sg.knn_sparsify(sg.similarity_matrix(world.image_features.matrix), g.knn_k),
            "image")
    kg = sg.RelationalGraph.from_triples(world.corpus.kg, registry.entity_count)
    return rs.GraphBundle(registry, kg, collab, text, image)


def export_graphs(bundle: rs.GraphBundle, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, graph in (("collaborative", bundle.collab), ("text", bundle.text),
                        ("image", bundle.image)):
        if graph is not None:
            path = out_dir / f"graph_{name}.tsv"
            sg.save_graph_tsv(path, graph)
            written.append(path)
    return written


# ---------------------------------------------------------------------------
# Training recipes
# ---------------------------------------------------------------------------

def prepare_lm(cfg: RunConfig, world: World, seed: int) -> lmmod.LMState:
    lm_cfg = lmmod.LMConfig(vocab_size=len(world.vocab),
                            hidden_width=cfg.lm.hidden_width,
                            layers=cfg.lm.layers, heads=cfg.lm.heads,
                            max_len=cfg.lm.max_len,
                            soft_prompt_len=cfg.lm.soft_prompt_len)
    state = lmmod.LMState(lm_cfg, seed=seed)
    utterances = lmmod.tokenize_utterances(world.conversations(world.split.train),
                                           world.vocab)
    lmmod.warmup_pretrain(state, utterances, steps=cfg.lm.warmup_steps,
                          lr=cfg.lm.warmup_lr, batch_size=cfg.lm.warmup_batch_size,
                          seed=seed, bos=world.vocab.bos, eos=world.vocab.eos)
    return state


def rec_config(cfg: RunConfig) -> rs.RecConfig:
    return rs.RecConfig(embed_dim=cfg.rec.embed_dim, prefix_len=cfg.rec.prefix_len,
                        entity_slots=cfg.rec.entity_slots,
                        temperature=cfg.rec.temperature,
                        fuse_weight=cfg.rec.fuse_weight,
                        text_weight=cfg.graph.text_weight,
                        lightgcn_layers=cfg.graph.lightgcn_layers)


def train_recommender(cfg: RunConfig, world: World, graphs: rs.GraphBundle,
                      seed: int, metrics_path: Path | None = None,
                      lm_state: lmmod.LMState | None = None) -> rs.RecModel:
    """Warmup LM, entity-prediction pretraining, then recommendation training."""
    if lm_state is None:
        lm_state = prepare_lm(cfg, world, seed)
    model = rs.RecModel(lm_state, world.vocab, graphs, rec_config(cfg), seed=seed)
    train_inst = cp.corpus_instances(world.conversations(world.split.train))
    if not train_inst:
        raise rs.RecError("train split has no labeled instances")
    rng = np.random.default_rng(seed)
    stream = open(metrics_path, "w", encoding="utf-8") if metrics_path else None

    def emit(phase, step, stats):
        if stream:
            stream.write(json.dumps({"phase": phase, "step": step,
                                     "lr": cfg.rec.lr, **stats}) + "\n")

    opt = nc.AdamState(model.trainables(), lr=cfg.rec.lr)
    for step in range(1, cfg.rec.pretrain_steps + 1):
        picks = rng.integers(len(train_inst), size=cfg.rec.batch_size)
        stats = rs.pretrain_step(model, [train_inst[int(i)] for i in picks], opt)
        emit("pretrain", step, stats)

    opt = nc.AdamState(model.trainables(), lr=cfg.rec.lr)
    check_every = 25
    for step in range(1, cfg.rec.steps + 1):
        picks = rng.integers(len(train_inst), size=cfg.rec.batch_size)
        stats = rs.train_step(model, [train_inst[int(i)] for i in picks], opt)
        emit("rec", step, stats)
        if (cfg.rec.early_stop_recall1 <= 1.0 and step % check_every == 0):
            r1 = evaluate_ranking(model, train_inst, (1,), (1,), (1,))["recall@1"]
            emit("rec-eval", step, {"train_recall@1": r1})
            if r1 >= cfg.rec.early_stop_recall1:
                log.info("early stop at step %d (train recall@1 %.3f)", step, r1)
                break
    if stream:
        stream.close()
    return model


def evaluate_ranking(model: rs.RecModel, instances: list[cp.Instance],
                     recall_ks=(1, 10, 50), ndcg_ks=(10, 50),
                     mrr_ks=(10, 50)) -> dict[str, float]:
    ranked = rs.rank_instances(model, instances)
    results = [(r, inst.label) for r, inst in zip(ranked, instances)]
    return mx.rank_metrics(results, recall_ks, ndcg_ks, mrr_ks)


def train_generator(cfg: RunConfig, world: World, graphs: rs.GraphBundle,
                    rec_model: rs.RecModel | None, seed: int,
                    metrics_path: Path | None = None,
                    lm_state: lmmod.LMState | None = None) -> cg.GenModel:
    if lm_state is None:
        lm_state = rec_model.lm if rec_model is not None else prepare_lm(cfg, world, seed)
    train_insts = cg.gen_instances(world.conversations(world.split.train))
    if not train_insts:
        raise cg.GenError("train split has no recommender turns")
    correlation = cg.build_correlation_map(train_insts, graphs, lm_state, world.vocab,
                                           cfg.graph.context_knn_k) \
        if cfg.conv.use_correlation else None
    if rec_model is not None:
        _, scoring = rec_model.semantic_tables()
        entity_matrix = scoring.values.copy()
    else:
        entity_matrix = np.random.default_rng(seed).normal(
            0.0, 0.1, size=(world.corpus.registry.entity_count, cfg.rec.embed_dim))
    model = cg.GenModel(lm_state, world.vocab, graphs, entity_matrix, correlation,
                        prefix_len=cfg.rec.prefix_len,
                        entity_slots=cfg.rec.entity_slots, seed=seed,
                        use_entity_prefix=cfg.conv.use_entity_prefix,
                        use_correlation=cfg.conv.use_correlation)
    item_names = {world.corpus.registry.names[eid]
                  for eid in world.corpus.registry.items}
    rng = np.random.default_rng(seed)
    opt = nc.AdamState(model.trainables(), lr=cfg.conv.lr)
    stream = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    for step in range(1, cfg.conv.steps + 1):
        picks = rng.integers(len(train_insts), size=cfg.conv.batch_size)
        batch = [(train_insts[int(i)], int(i)) for i in picks]
        stats = cg.gen_train_step(model, batch, opt, item_names)
        if stream:
            stream.write(json.dumps({"phase": "conv", "step": step,
                                     "lr": cfg.conv.lr, **stats}) + "\n")
    if stream:
        stream.close()
    return model


def generation_eval(model: cg.GenModel, instances: list[cg.GenInstance],
                    item_names: set[str], vocab: cp.Vocab,
                    max_new_tokens: int) -> tuple[dict[str, float], list[list[str]]]:
    """Greedy generations against slotified references."""
    hyps, refs = [], []
    for inst in instances:
        out = cg.generate_response(model, inst, None, None,
                                   max_new_tokens=max_new_tokens)
        hyps.append(out.tokens)
        ref_ids = cg.encode_target(vocab, inst.target_tokens, item_names)[:-1]
        refs.append(vocab.decode(ref_ids))
    return mx.generation_report(hyps, refs), hyps


# ---------------------------------------------------------------------------
# Bundles
# ---------------------------------------------------------------------------

BUNDLE_VERSION = 1


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: RunConfig,
                   extra: dict | None = None) -> None:
    files = sorted(p for p in out_dir.rglob("*")
                   if p.is_file() and p.name != "manifest.json")
    manifest = {
        "bundle_version": BUNDLE_VERSION,
        "command": command,
        "seed": cfg.seed,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "files": {str(p.relative_to(out_dir)): _sha256(p) for p in files},
    }
    manifest.update(extra or {})
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def save_bundle(out_dir: Path, cfg: RunConfig, world: World,
                graphs: rs.GraphBundle, rec_model: rs.RecModel | None,
                gen_model: cg.GenModel | None, command: str) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    from .config import save_config
    save_config(out_dir / "config.json", cfg)
    (out_dir / "vocab.json").write_text(
        json.dumps(world.vocab.to_json(), sort_keys=True), encoding="utf-8")
    (out_dir / "split.json").write_text(json.dumps({
        "train": world.split.train, "valid": world.split.valid,
        "test": world.split.test}, sort_keys=True), encoding="utf-8")
    export_graphs(graphs, out_dir / "graphs")
    if rec_model is not None:
        lmmod.save_lm_checkpoint(out_dir / "lm.ckpt", rec_model.lm)
        lmmod.save_params(out_dir / "rec.ckpt", rs.named_trainables(rec_model))
    if gen_model is not None:
        if rec_model is None:
            lmmod.save_lm_checkpoint(out_dir / "lm.ckpt", gen_model.lm)
        lmmod.save_params(out_dir / "gen.ckpt", cg.named_trainables(gen_model),
                          {"entity_matrix_rows": gen_model.entity_matrix.shape[0]})
        cp.save_feature_matrix(out_dir / "gen_entity_matrix.msfm",
                               gen_model.entity_matrix.values)
    write_manifest(out_dir, command, cfg)


@dataclass
class LoadedBundle:
    cfg: RunConfig
    world: World
    graphs: rs.GraphBundle
    rec_model: rs.RecModel | None
    gen_model: cg.GenModel | None


def load_bundle(bundle_dir: Path, corpus_dir: str | None = None) -> LoadedBundle:
    bundle_dir = Path(bundle_dir)
    from .config import load_config
    cfg = load_config(bundle_dir / "config.json")
    if corpus_dir:
        cfg.corpus_dir = corpus_dir
    corpus = cp.load_corpus(Path(cfg.corpus_dir))
    text = cp.load_feature_matrix(Path(cfg.corpus_dir) / "features_text.msfm",
                                  "text", corpus.registry)
    image = cp.load_feature_matrix(Path(cfg.corpus_dir) / "features_image.msfm",
                                   "image", corpus.registry)
    vocab = cp.Vocab.from_json(json.loads(
        (bundle_dir / "vocab.json").read_text(encoding="utf-8")))
    split_obj = json.loads((bundle_dir / "split.json").read_text(encoding="utf-8"))
    split = cp.DatasetSplit(split_obj["train"], split_obj["valid"], split_obj["test"])
    world = World(corpus, text, image, vocab, split)
    graphs = build_graphs(cfg, world)

    rec_model = None
    if (bundle_dir / "rec.ckpt").exists():
        lm_state = lmmod.load_lm_checkpoint(bundle_dir / "lm.ckpt")
        rec_model = rs.RecModel(lm_state, vocab, graphs, rec_config(cfg), seed=cfg.seed)
        _, arrays = lmmod.load_params(bundle_dir / "rec.ckpt")
        named = rs.named_trainables(rec_model)
        for name, arr in arrays.items():
            named[name].values[...] = arr

    gen_model = None
    if (bundle_dir / "gen.ckpt").exists():
        lm_state = rec_model.lm if rec_model is not None \
            else lmmod.load_lm_checkpoint(bundle_dir / "lm.ckpt")
        entity_matrix = cp.read_matrix(bundle_dir / "gen_entity_matrix.msfm")
        train_insts = cg.gen_instances(world.conversations(world.split.train))
        correlation = cg.build_correlation_map(train_insts, graphs, lm_state, vocab,
                                               cfg.graph.context_knn_k) \
            if cfg.conv.use_correlation else None
        gen_model = cg.GenModel(lm_state, vocab, graphs, entity_matrix, correlation,
                                prefix_len=cfg.rec.prefix_len,
                                entity_slots=cfg.rec.entity_slots, seed=cfg.seed,
                                use_entity_prefix=cfg.conv.use_entity_prefix,
                                use_correlation=cfg.conv.use_correlation)
        _, arrays = lmmod.load_params(bundle_dir / "gen.ckpt")
        named = cg.named_trainables(gen_model)
        for name, arr in arrays.items():
            named[name].values[...] = arr
    return LoadedBundle(cfg, world, graphs, rec_model, gen_model)


# ---------------------------------------------------------------------------
# Experiment recipes: ablations and sweeps
# ---------------------------------------------------------------------------

REC_ABLATION_VARIANTS = ("full", "wo-co", "wo-t", "wo-i", "wo-r")
CONV_ABLATION_VARIANTS = ("wo-s", "wo-c", "wo-all")
SWEEP_K_GRID = (5, 10, 20, 30, 50, 100)
SWEEP_LAMBDA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    import copy
    out = copy.deepcopy(cfg)
    if variant == "full":
        pass
    elif variant == "wo-co":
        out.graph.use_collab = False
    elif variant == "wo-t":
        out.graph.use_text = False
    elif variant == "wo-i":
        out.graph.use_image = False
    elif variant == "wo-r":
        out.graph.use_collab = out.graph.use_text = out.graph.use_image = False
    elif variant == "wo-s":
        out.conv.use_entity_prefix = False
    elif variant == "wo-c":
        out.conv.use_correlation = False
    elif variant == "wo-all":
        out.conv.use_entity_prefix = False
        out.conv.use_correlation = False
    else:
        raise ValueError(f"unknown ablation variant {variant!r}")
    return out


def run_rec_variant(cfg: RunConfig, world: World, seed: int) -> dict[str, float]:
    graphs = build_graphs(cfg, world)
    model = train_recommender(cfg, world, graphs, seed)
    test_inst = cp.corpus_instances(world.conversations(world.split.test))
    if not test_inst:
        test_inst = cp.corpus_instances(world.conversations(world.split.train))
    return evaluate_ranking(model, test_inst, tuple(cfg.eval.recall_ks),
                            tuple(cfg.eval.ndcg_ks), tuple(cfg.eval.mrr_ks))


def run_conv_variant(cfg: RunConfig, world: World, seed: int) -> dict[str, float]:
    graphs = build_graphs(cfg, world)
    gen_model = train_generator(cfg, world, graphs, None, seed)
    test_insts = cg.gen_instances(world.conversations(world.split.test)) or \
        cg.gen_instances(world.conversations(world.split.train))
    item_names = {world.corpus.registry.names[eid]
                  for eid in world.corpus.registry.items}
    report, _ = generation_eval(gen_model, test_insts, item_names, world.vocab,
                                cfg.conv.max_new_tokens)
    return report


def run_ablation(cfg: RunConfig, seeds: list[int],
                 tasks: tuple = ("rec", "conv")) -> dict:
    """Recommendation and/or conversation ablation variants."""
    world = load_world(cfg)
    rows = []
    if "rec" in tasks:
        for variant in REC_ABLATION_VARIANTS:
            vals = []
            for seed in seeds:
                metrics = run_rec_variant(variant_config(cfg, variant), world, seed)
                vals.append(metrics["recall@10"])
            rows.append({"task": "rec", "variant": variant, "metric": "recall@10",
                         "seeds": len(seeds), "values": vals,
                         "mean": float(np.mean(vals))})
            log.info("ablation %s: mean recall@10 %.3f", variant, rows[-1]["mean"])
    if "conv" in tasks:
        for variant in CONV_ABLATION_VARIANTS:
            vals = []
            for seed in seeds:
                report = run_conv_variant(variant_config(cfg, variant), world, seed)
                vals.append(report["bleu@2"])
            rows.append({"task": "conv", "variant": variant, "metric": "bleu@2",
                         "seeds": len(seeds), "values": vals,
                         "mean": float(np.mean(vals))})
            log.info("ablation %s: mean bleu@2 %.3f", variant, rows[-1]["mean"])
    return {"rows": rows}


def run_sweep_k(cfg: RunConfig) -> dict:
    world = load_world(cfg)
    rows = []
    for k in SWEEP_K_GRID:
        import copy
        c = copy.deepcopy(cfg)
        c.graph.knn_k = k
        metrics = run_rec_variant(c, world, cfg.seed)
        rows.append({"k": k, "recall@10": metrics["recall@10"]})
        log.info("sweep k=%d: recall@10 %.3f", k, metrics["recall@10"])
    return {"grid": list(SWEEP_K_GRID), "rows": rows}


def run_sweep_lambda(cfg: RunConfig) -> dict:
    world = load_world(cfg)
    rows = []
    for lam in SWEEP_LAMBDA_GRID:
        import copy
        c = copy.deepcopy(cfg)
        c.graph.text_weight = lam
        metrics = run_rec_variant(c, world, cfg.seed)
        rows.append({"lambda": lam, "recall@10": metrics["recall@10"]})
        log.info("sweep lambda=%.1f: recall@10 %.3f", lam, metrics["recall@10"])
    return {"grid": list(SWEEP_LAMBDA_GRID), "rows": rows}
