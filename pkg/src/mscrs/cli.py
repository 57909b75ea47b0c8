"""Command-line entry point.

    mscrs <command> --config <path> [--seed N] [--out DIR]

Commands: synth, prepare-graphs, pretrain, train-rec, train-conv, evaluate,
ablate, sweep-k, sweep-lambda, serve. Every command validates the JSON
config against the published schema and writes its artifacts under --out
with a manifest. MSCRS_LOG in {error, info, debug} controls verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import convgen as cg
from . import corpus as cp
from . import pipeline as pl
from . import recsys as rs
from .config import ConfigError, RunConfig, load_config


def setup_logging() -> None:
    level = {"error": logging.ERROR, "info": logging.INFO,
             "debug": logging.DEBUG}.get(os.environ.get("MSCRS_LOG", "info"),
                                         logging.INFO)
    logging.basicConfig(level=level,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


log = logging.getLogger("mscrs.cli")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    synth_cfg = pl.synth_settings_to_config(cfg)
    corpus = cp.synth_corpus(synth_cfg, Path(cfg.corpus_dir))
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "synth_summary.json", {
        "corpus_dir": cfg.corpus_dir,
        "conversations": len(corpus.conversations),
        "entities": corpus.registry.entity_count,
        "items": corpus.registry.item_count,
    })
    pl.write_manifest(out, "synth", cfg)
    log.info("synthesized %d conversations into %s", len(corpus.conversations),
             cfg.corpus_dir)
    return 0


def cmd_prepare_graphs(cfg: RunConfig, out: Path) -> int:
    world = pl.load_world(cfg)
    graphs = pl.build_graphs(cfg, world)
    written = pl.export_graphs(graphs, out / "graphs")
    _write_json(out / "vocab.json", world.vocab.to_json())
    _write_json(out / "split.json", {"train": world.split.train,
                                     "valid": world.split.valid,
                                     "test": world.split.test})
    pl.write_manifest(out, "prepare-graphs", cfg)
    log.info("exported %d graphs to %s", len(written), out / "graphs")
    return 0


def cmd_pretrain(cfg: RunConfig, out: Path) -> int:
    import copy
    pre_cfg = copy.deepcopy(cfg)
    pre_cfg.rec.steps = 0  # warmup + entity-prediction pre-training only
    world = pl.load_world(pre_cfg)
    graphs = pl.build_graphs(pre_cfg, world)
    model = pl.train_recommender(pre_cfg, world, graphs, cfg.seed,
                                 metrics_path=out_metrics(out))
    pl.save_bundle(out, cfg, world, graphs, model, None, "pretrain")
    return 0


def out_metrics(out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    return out / "metrics.jsonl"


def cmd_train_rec(cfg: RunConfig, out: Path) -> int:
    world = pl.load_world(cfg)
    graphs = pl.build_graphs(cfg, world)
    model = pl.train_recommender(cfg, world, graphs, cfg.seed,
                                 metrics_path=out_metrics(out))
    pl.save_bundle(out, cfg, world, graphs, model, None, "train-rec")
    train_inst = cp.corpus_instances(world.conversations(world.split.train))
    report = pl.evaluate_ranking(model, train_inst, tuple(cfg.eval.recall_ks),
                                 tuple(cfg.eval.ndcg_ks), tuple(cfg.eval.mrr_ks))
    _write_json(out / "train_metrics.json", report)
    pl.write_manifest(out, "train-rec", cfg)
    log.info("train split metrics: %s", report)
    return 0


def cmd_train_conv(cfg: RunConfig, out: Path, from_bundle: str | None) -> int:
    if from_bundle:
        loaded = pl.load_bundle(Path(from_bundle), corpus_dir=cfg.corpus_dir)
        world, graphs, rec_model = loaded.world, loaded.graphs, loaded.rec_model
        cfg = loaded.cfg if rec_model is not None else cfg
    else:
        world = pl.load_world(cfg)
        graphs = pl.build_graphs(cfg, world)
        rec_model = pl.train_recommender(cfg, world, graphs, cfg.seed)
    gen_model = pl.train_generator(cfg, world, graphs, rec_model, cfg.seed,
                                   metrics_path=out_metrics(out))
    pl.save_bundle(out, cfg, world, graphs, rec_model, gen_model, "train-conv")
    return 0


def cmd_evaluate(cfg: RunConfig, out: Path, bundle_dir: str | None,
                 split_name: str, untrained: bool) -> int:
    if bundle_dir and not untrained:
        loaded = pl.load_bundle(Path(bundle_dir), corpus_dir=cfg.corpus_dir)
        cfg, world, graphs = loaded.cfg, loaded.world, loaded.graphs
        rec_model, gen_model = loaded.rec_model, loaded.gen_model
    else:
        import copy
        init_cfg = copy.deepcopy(cfg)
        if untrained:
            init_cfg.lm.warmup_steps = 0
        world = pl.load_world(cfg)
        graphs = pl.build_graphs(cfg, world)
        lm_state = pl.prepare_lm(init_cfg, world, cfg.seed)
        rec_model = rs.RecModel(lm_state, world.vocab, graphs, pl.rec_config(cfg),
                                seed=cfg.seed)
        gen_model = None

    ids = getattr(world.split, split_name)
    convs = world.conversations(ids)
    report: dict = {"split": split_name, "instances": 0}
    instances = cp.corpus_instances(convs)
    rows = []
    if instances and rec_model is not None:
        from mscrs.metrics import rank_metrics
        ranked = rs.rank_instances(rec_model, instances)
        results = [(r, inst.label) for r, inst in zip(ranked, instances)]
        report.update(rank_metrics(results, tuple(cfg.eval.recall_ks),
                                   tuple(cfg.eval.ndcg_ks),
                                   tuple(cfg.eval.mrr_ks)))
        report["instances"] = len(instances)
        for inst, r in zip(instances, ranked):
            rank = r.index(inst.label) + 1 if inst.label in r else 0
            rows.append(f"{inst.conv_id},{inst.turn_index},{inst.label},{rank}")
    if gen_model is not None:
        gen_insts = cg.gen_instances(convs)
        if gen_insts:
            item_names = {world.corpus.registry.names[eid]
                          for eid in world.corpus.registry.items}
            gen_report, _ = pl.generation_eval(gen_model, gen_insts, item_names,
                                               world.vocab,
                                               cfg.conv.max_new_tokens)
            report.update(gen_report)

    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval_report.json", report)
    (out / "per_instance.csv").write_text(
        "conv_id,turn_index,label,rank\n" + "".join(r + "\n" for r in rows),
        encoding="utf-8")
    pl.write_manifest(out, "evaluate", cfg)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_ablate(cfg: RunConfig, out: Path, n_seeds: int) -> int:
    result = pl.run_ablation(cfg, list(range(n_seeds)))
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "ablation.json", result)
    lines = ["task,variant,metric,mean"]
    for row in result["rows"]:
        lines.append(f"{row['task']},{row['variant']},{row['metric']},{row['mean']:.6f}")
    (out / "ablation.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    pl.write_manifest(out, "ablate", cfg)
    print("\n".join(lines))
    return 0


def cmd_sweep(cfg: RunConfig, out: Path, which: str) -> int:
    result = pl.run_sweep_k(cfg) if which == "k" else pl.run_sweep_lambda(cfg)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / f"sweep_{which}.json", result)
    pl.write_manifest(out, f"sweep-{which}", cfg)
    print(json.dumps(result, sort_keys=True))
    return 0


def cmd_serve(cfg: RunConfig, bundle_dir: str | None, ui_dir: str | None,
              host: str | None, port: int | None) -> int:
    import uvicorn

    from .server import EngineState, create_app
    from .sessions import SessionStore

    engine = None
    if bundle_dir:
        loaded = pl.load_bundle(Path(bundle_dir), corpus_dir=None)
        store = SessionStore(Path(bundle_dir) / "sessions.jsonl")
        engine = EngineState(loaded, store, loaded.cfg.serve.top_k,
                             loaded.cfg.serve.max_new_tokens)
    app = create_app(engine, Path(ui_dir) if ui_dir else None)
    uvicorn.run(app, host=host or cfg.serve.host, port=port or cfg.serve.port,
                log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mscrs")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out")

    for name in ("synth", "prepare-graphs", "pretrain", "train-rec"):
        common(sub.add_parser(name))
    p = sub.add_parser("train-conv")
    common(p)
    p.add_argument("--from-bundle", dest="from_bundle", default=None)
    p = sub.add_parser("evaluate")
    common(p)
    p.add_argument("--bundle", default=None)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--untrained", action="store_true")
    p = sub.add_parser("ablate")
    common(p)
    p.add_argument("--seeds", type=int, default=5)
    for name in ("sweep-k", "sweep-lambda"):
        common(sub.add_parser(name))
    p = sub.add_parser("serve")
    common(p)
    p.add_argument("--bundle", default=None)
    p.add_argument("--ui", default=None)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.seed = args.seed
    out = Path(args.out)

    try:
        if args.command == "synth":
            return cmd_synth(cfg, out)
        if args.command == "prepare-graphs":
            return cmd_prepare_graphs(cfg, out)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, out)
        if args.command == "train-rec":
            return cmd_train_rec(cfg, out)
        if args.command == "train-conv":
            return cmd_train_conv(cfg, out, args.from_bundle)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out, args.bundle, args.split, args.untrained)
        if args.command == "ablate":
            return cmd_ablate(cfg, out, args.seeds)
        if args.command == "sweep-k":
            return cmd_sweep(cfg, out, "k")
        if args.command == "sweep-lambda":
            return cmd_sweep(cfg, out, "lambda")
        if args.command == "serve":
            return cmd_serve(cfg, args.bundle, args.ui, args.host, args.port)
    except (ConfigError, cp.CorpusError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
