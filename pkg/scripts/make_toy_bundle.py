#!/usr/bin/env python3
"""Build a tiny corpus + trained checkpoint bundle for integration tests.

Usage: make_toy_bundle.py OUT_DIR [--seed N]
Creates OUT_DIR/corpus and OUT_DIR/bundle (with config.json inside).
"""

import argparse
import sys
from pathlib import Path

from mscrs import corpus as cp
from mscrs import pipeline as pl
from mscrs.config import config_from_json, save_config


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("out_dir")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out_dir)
    corpus_dir = out / "corpus"
    bundle_dir = out / "bundle"
    cfg = config_from_json({
        "corpus_dir": str(corpus_dir),
        "seed": args.seed,
        "synth": {"n_items": 9, "n_entities": 18, "n_conversations": 24,
                  "n_clusters": 3, "text_dim": 8, "image_dim": 8},
        "graph": {"comention_threshold": 1, "knn_k": 3, "context_knn_k": 3},
        "lm": {"hidden_width": 32, "layers": 1, "heads": 2, "max_len": 64,
               "soft_prompt_len": 10, "warmup_steps": 30},
        "rec": {"embed_dim": 32, "prefix_len": 4, "entity_slots": 4,
                "batch_size": 8, "steps": 300, "pretrain_steps": 10, "lr": 1e-3},
        "conv": {"batch_size": 4, "steps": 30, "lr": 1e-3, "max_new_tokens": 8},
    })
    cp.synth_corpus(pl.synth_settings_to_config(cfg), corpus_dir)
    world = pl.load_world(cfg)
    graphs = pl.build_graphs(cfg, world)
    rec_model = pl.train_recommender(cfg, world, graphs, cfg.seed)
    gen_model = pl.train_generator(cfg, world, graphs, rec_model, cfg.seed)
    pl.save_bundle(bundle_dir, cfg, world, graphs, rec_model, gen_model,
                   "make-toy-bundle")
    save_config(bundle_dir / "config.json", cfg)
    print(bundle_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
