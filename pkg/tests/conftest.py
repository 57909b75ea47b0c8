import json

import pytest

from mscrs import pipeline as pl
from mscrs.config import RunConfig, config_from_json


def tiny_run_config(corpus_dir: str, **overrides) -> RunConfig:
    """A configuration small enough for seconds-scale training in tests."""
    obj = {
        "corpus_dir": corpus_dir,
        "seed": 0,
        "synth": {"n_items": 9, "n_entities": 18, "n_conversations": 24,
                  "n_clusters": 3, "text_dim": 8, "image_dim": 8},
        "split": {"ratios": [0.8, 0.1, 0.1], "seed": 0},
        "graph": {"comention_threshold": 1, "knn_k": 3, "context_knn_k": 3},
        "lm": {"hidden_width": 32, "layers": 1, "heads": 2, "max_len": 64,
               "soft_prompt_len": 10, "warmup_steps": 30},
        "rec": {"embed_dim": 32, "prefix_len": 4, "entity_slots": 4,
                "batch_size": 8, "steps": 300, "pretrain_steps": 10, "lr": 1e-3},
        "conv": {"batch_size": 4, "steps": 30, "lr": 1e-3, "max_new_tokens": 8},
    }
    obj.update(overrides)
    return config_from_json(obj)


@pytest.fixture(scope="session")
def toy_bundle(tmp_path_factory):
    """A fully trained (tiny) bundle: corpus, rec model, gen model."""
    root = tmp_path_factory.mktemp("toy")
    corpus_dir = root / "corpus"
    bundle_dir = root / "bundle"
    cfg = tiny_run_config(str(corpus_dir))
    import mscrs.corpus as cp
    cp.synth_corpus(pl.synth_settings_to_config(cfg), corpus_dir)
    world = pl.load_world(cfg)
    graphs = pl.build_graphs(cfg, world)
    rec_model = pl.train_recommender(cfg, world, graphs, cfg.seed)
    gen_model = pl.train_generator(cfg, world, graphs, rec_model, cfg.seed)
    pl.save_bundle(bundle_dir, cfg, world, graphs, rec_model, gen_model, "test")
    return {"cfg": cfg, "corpus_dir": corpus_dir, "bundle_dir": bundle_dir,
            "world": world}


def write_config(path, cfg: RunConfig) -> str:
    from mscrs.config import save_config
    save_config(path, cfg)
    return str(path)
