"""Run configuration: one JSON document drives every CLI command.

Validated against CONFIG_SCHEMA (jsonschema). Defaults follow the reference
setup: one relation-typed convolution layer, three propagation layers, soft
prompts of length 10 to 50, learning rate within [1e-5, 1e-3], a 0.5
text/image blend, and kNN presets of 10 or 20 neighbors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema


class ConfigError(ValueError):
    pass


CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "corpus_dir": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_items": {"type": "integer", "minimum": 1},
                "n_entities": {"type": "integer", "minimum": 1},
                "n_conversations": {"type": "integer", "minimum": 1},
                "n_relations": {"type": "integer", "minimum": 1},
                "n_clusters": {"type": "integer", "minimum": 1},
                "text_dim": {"type": "integer", "minimum": 1},
                "image_dim": {"type": "integer", "minimum": 1},
                "feature_noise": {"type": "number", "minimum": 0},
                "text_informative_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "image_informative_fraction": {"type": "number", "minimum": 0, "maximum": 1},
                "fresh_text_items_per_cluster": {"type": "integer", "minimum": 0},
                "fresh_image_items_per_cluster": {"type": "integer", "minimum": 0},
                "fringe_entities_per_cluster": {"type": "integer", "minimum": 0},
                "fringe_train_occurrences": {"type": "integer", "minimum": 0},
                "eval_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "mentions_min": {"type": "integer", "minimum": 1},
                "mentions_max": {"type": "integer", "minimum": 1},
                "offcluster_mention_rate": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "split": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ratios": {
                    "type": "array",
                    "items": {"type": "number", "minimum": 0},
                    "minItems": 3,
                    "maxItems": 3,
                },
                "seed": {"type": "integer", "minimum": 0},
                "use_generator_holdout": {"type": "boolean"},
            },
        },
        "graph": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "comention_threshold": {"type": "integer", "minimum": 1},
                "knn_k": {"type": "integer", "minimum": 1},
                "context_knn_k": {"type": "integer", "minimum": 1},
                "text_weight": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "lightgcn_layers": {"type": "integer", "minimum": 1},
                "rgcn_layers": {"type": "integer", "minimum": 1, "maximum": 1},
                "use_collab": {"type": "boolean"},
                "use_text": {"type": "boolean"},
                "use_image": {"type": "boolean"},
            },
        },
        "lm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden_width": {"type": "integer", "minimum": 4},
                "layers": {"type": "integer", "minimum": 1},
                "heads": {"type": "integer", "minimum": 1},
                "max_len": {"type": "integer", "minimum": 8},
                "soft_prompt_len": {"type": "integer", "minimum": 10, "maximum": 50},
                "warmup_steps": {"type": "integer", "minimum": 0},
                "warmup_lr": {"type": "number", "minimum": 1e-5, "maximum": 1e-3},
                "warmup_batch_size": {"type": "integer", "minimum": 1},
            },
        },
        "rec": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "embed_dim": {"type": "integer", "minimum": 2},
                "prefix_len": {"type": "integer", "minimum": 1},
                "entity_slots": {"type": "integer", "minimum": 1},
                "temperature": {"type": "number", "exclusiveMinimum": 0},
                "fuse_weight": {"type": "number", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "steps": {"type": "integer", "minimum": 0},
                "pretrain_steps": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "minimum": 1e-5, "maximum": 1e-3},
                "early_stop_recall1": {"type": "number", "minimum": 0, "maximum": 2},
            },
        },
        "conv": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch_size": {"type": "integer", "minimum": 1},
                "steps": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "minimum": 1e-5, "maximum": 1e-3},
                "use_entity_prefix": {"type": "boolean"},
                "use_correlation": {"type": "boolean"},
                "max_new_tokens": {"type": "integer", "minimum": 1},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "recall_ks": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "ndcg_ks": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "mrr_ks": {"type": "array", "items": {"type": "integer", "minimum": 1}},
            },
        },
        "serve": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "host": {"type": "string"},
                "port": {"type": "integer", "minimum": 1, "maximum": 65535},
                "top_k": {"type": "integer", "minimum": 1},
                "max_new_tokens": {"type": "integer", "minimum": 1},
            },
        },
    },
}


@dataclass
class SplitSettings:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    # when true, the generator's cold-label conversations form the test set
    use_generator_holdout: bool = False


@dataclass
class GraphSettings:
    comention_threshold: int = 2
    knn_k: int = 20
    context_knn_k: int = 20
    text_weight: float = 0.5
    lightgcn_layers: int = 3
    rgcn_layers: int = 1
    use_collab: bool = True
    use_text: bool = True
    use_image: bool = True


@dataclass
class LMSettings:
    hidden_width: int = 64
    layers: int = 2
    heads: int = 2
    max_len: int = 128
    soft_prompt_len: int = 10
    warmup_steps: int = 100
    warmup_lr: float = 1e-3
    warmup_batch_size: int = 8


@dataclass
class RecSettings:
    embed_dim: int = 64
    prefix_len: int = 8
    entity_slots: int = 8
    temperature: float = 0.07
    fuse_weight: float = 0.1
    batch_size: int = 64
    steps: int = 400
    pretrain_steps: int = 50
    lr: float = 1e-3
    early_stop_recall1: float = 2.0  # any value above 1 disables early stopping


@dataclass
class ConvSettings:
    batch_size: int = 8
    steps: int = 200
    lr: float = 1e-3
    use_entity_prefix: bool = True
    use_correlation: bool = True
    max_new_tokens: int = 20


@dataclass
class EvalSettings:
    recall_ks: tuple = (1, 10, 50)
    ndcg_ks: tuple = (10, 50)
    mrr_ks: tuple = (10, 50)


@dataclass
class ServeSettings:
    host: str = "127.0.0.1"
    port: int = 8080
    top_k: int = 5
    max_new_tokens: int = 20


@dataclass
class SynthSettings:
    n_items: int = 30
    n_entities: int = 60
    n_conversations: int = 200
    n_relations: int = 2
    n_clusters: int = 3
    text_dim: int = 32
    image_dim: int = 32
    feature_noise: float = 0.05
    text_informative_fraction: float = 0.8
    image_informative_fraction: float = 0.8
    fresh_text_items_per_cluster: int = 0
    fresh_image_items_per_cluster: int = 0
    fringe_entities_per_cluster: int = 0
    fringe_train_occurrences: int = 1
    eval_fraction: float = 0.0
    mentions_min: int = 2
    mentions_max: int = 4
    offcluster_mention_rate: float = 0.05


@dataclass
class RunConfig:
    corpus_dir: str = "corpus"
    seed: int = 0
    synth: SynthSettings = field(default_factory=SynthSettings)
    split: SplitSettings = field(default_factory=SplitSettings)
    graph: GraphSettings = field(default_factory=GraphSettings)
    lm: LMSettings = field(default_factory=LMSettings)
    rec: RecSettings = field(default_factory=RecSettings)
    conv: ConvSettings = field(default_factory=ConvSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    serve: ServeSettings = field(default_factory=ServeSettings)

    def to_json(self) -> dict:
        obj = asdict(self)
        obj["split"]["ratios"] = list(self.split.ratios)
        for key in ("recall_ks", "ndcg_ks", "mrr_ks"):
            obj["eval"][key] = list(getattr(self.eval, key))
        return obj


def _merge(settings_cls, obj: dict | None, extra_fix=None):
    if obj is None:
        return settings_cls()
    kwargs = dict(obj)
    if extra_fix:
        kwargs = extra_fix(kwargs)
    return settings_cls(**kwargs)


def config_from_json(obj: dict) -> RunConfig:
    try:
        jsonschema.validate(obj, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        raise ConfigError(f"config schema violation: {e.message}") from None

    def fix_ratios(kw):
        if "ratios" in kw:
            kw["ratios"] = tuple(kw["ratios"])
        return kw

    def fix_ks(kw):
        for key in ("recall_ks", "ndcg_ks", "mrr_ks"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return kw

    cfg = RunConfig(
        corpus_dir=obj.get("corpus_dir", "corpus"),
        seed=obj.get("seed", 0),
        synth=_merge(SynthSettings, obj.get("synth")),
        split=_merge(SplitSettings, obj.get("split"), fix_ratios),
        graph=_merge(GraphSettings, obj.get("graph")),
        lm=_merge(LMSettings, obj.get("lm")),
        rec=_merge(RecSettings, obj.get("rec")),
        conv=_merge(ConvSettings, obj.get("conv")),
        eval=_merge(EvalSettings, obj.get("eval"), fix_ks),
        serve=_merge(ServeSettings, obj.get("serve")),
    )
    if cfg.synth.mentions_max < cfg.synth.mentions_min:
        raise ConfigError("synth.mentions_max must be >= synth.mentions_min")
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return config_from_json(obj)


def save_config(path: str | Path, cfg: RunConfig) -> None:
    Path(path).write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")
