"""Corpus data model, file formats, splitting, and a synthetic generator.

File formats (all UTF-8, integers ASCII decimal):

 - conversations.jsonl: one object per line,
   {"id": int, "turns": [{"role": "seeker"|"recommender",
   "tokens": [str], "entities": [int], "labels": [int]}]}
 - entities.tsv: id <TAB> name <TAB> is_item(0|1)
 - kg_triples.tsv: head <TAB> relation <TAB> tail
 - feature matrices: magic "MSFM", u32 version=1, u64 rows, u64 cols,
   then rows*cols little-endian f64, row-major.

Entities arrive pre-linked: conversations carry explicit entity ids, so no
entity-linking stage exists here.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger("mscrs.corpus")

MSFM_MAGIC = b"MSFM"
MSFM_VERSION = 1

PAD, BOS, EOS, UNK, ITEM_SLOT = "<pad>", "<bos>", "<eos>", "<unk>", "<item>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK, ITEM_SLOT)


class CorpusError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Data model
# ---------------------------------------------------------------------------

@dataclass
class EntityRegistry:
    """Dense entity ids [0, K); items are the subset flagged is_item.

    ``item_index`` maps an item's entity id to its dense row in item-level
    tables; ``items`` is the inverse (row -> entity id).
    """

    names: list[str]
    is_item: list[bool]

    def __post_init__(self):
        if len(self.names) != len(self.is_item):
            raise CorpusError("names/is_item length mismatch")
        self.items = [eid for eid, flag in enumerate(self.is_item) if flag]
        self.item_index = {eid: row for row, eid in enumerate(self.items)}

    @property
    def entity_count(self) -> int:
        return len(self.names)

    @property
    def item_count(self) -> int:
        return len(self.items)

    def check_entity(self, eid: int) -> None:
        if not (0 <= eid < len(self.names)):
            raise CorpusError(f"unknown entity id {eid}")

    def name_of(self, eid: int) -> str:
        self.check_entity(eid)
        return self.names[eid]


@dataclass
class Turn:
    role: str
    tokens: list[str]
    entities: list[int]
    labels: list[int] = field(default_factory=list)


@dataclass
class Conversation:
    conv_id: int
    turns: list[Turn]

    def mentioned_entities(self) -> list[int]:
        seen, out = set(), []
        for turn in self.turns:
            for eid in turn.entities:
                if eid not in seen:
                    seen.add(eid)
                    out.append(eid)
        return out


@dataclass
class KGTriples:
    triples: list[tuple[int, int, int]]
    relation_count: int

    def validate(self, registry: EntityRegistry) -> None:
        for h, r, t in self.triples:
            registry.check_entity(h)
            registry.check_entity(t)
            if not (0 <= r < self.relation_count):
                raise CorpusError(f"relation id {r} out of range")


@dataclass
class FeatureMatrix:
    modality: str
    matrix: np.ndarray

    def __post_init__(self):
        if self.matrix.ndim != 2:
            raise CorpusError("feature matrix must be 2-D")
        if np.isnan(self.matrix).any():
            raise CorpusError("NaN payload in feature matrix")
        self.missing_rows = [
            i for i in range(self.matrix.shape[0]) if not self.matrix[i].any()
        ]

    @property
    def width(self) -> int:
        return self.matrix.shape[1]


@dataclass
class DatasetSplit:
    train: list[int]
    valid: list[int]
    test: list[int]

    def validate(self, conv_ids: set[int]) -> None:
        parts = [set(self.train), set(self.valid), set(self.test)]
        union = parts[0] | parts[1] | parts[2]
        if union != conv_ids:
            raise CorpusError("split does not cover the corpus")
        if sum(len(p) for p in parts) != len(union):
            raise CorpusError("split parts are not disjoint")


@dataclass
class Corpus:
    registry: EntityRegistry
    conversations: list[Conversation]
    kg: KGTriples

    def by_id(self, conv_id: int) -> Conversation:
        for c in self.conversations:
            if c.conv_id == conv_id:
                return c
        raise CorpusError(f"unknown conversation id {conv_id}")


# ---------------------------------------------------------------------------
# Readers / writers
# ---------------------------------------------------------------------------

def save_entities(path: Path, registry: EntityRegistry) -> None:
    lines = [
        f"{eid}\t{registry.names[eid]}\t{1 if registry.is_item[eid] else 0}"
        for eid in range(registry.entity_count)
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_entities(path: Path) -> EntityRegistry:
    names: list[str] = []
    flags: list[bool] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw:
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise CorpusError(f"{path}:{lineno}: expected 3 tab-separated fields")
        try:
            eid, flag = int(parts[0]), int(parts[2])
        except ValueError as e:
            raise CorpusError(f"{path}:{lineno}: {e}") from None
        if eid != len(names):
            raise CorpusError(f"{path}:{lineno}: ids must be dense, expected {len(names)}")
        if flag not in (0, 1):
            raise CorpusError(f"{path}:{lineno}: is_item must be 0 or 1")
        names.append(parts[1])
        flags.append(bool(flag))
    return EntityRegistry(names, flags)


def save_triples(path: Path, kg: KGTriples) -> None:
    lines = [f"{h}\t{r}\t{t}" for h, r, t in kg.triples]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def load_triples(path: Path, registry: EntityRegistry) -> KGTriples:
    triples: list[tuple[int, int, int]] = []
    max_rel = -1
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not raw:
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise CorpusError(f"{path}:{lineno}: expected 3 tab-separated fields")
        try:
            h, r, t = (int(p) for p in parts)
        except ValueError as e:
            raise CorpusError(f"{path}:{lineno}: {e}") from None
        if not (0 <= h < registry.entity_count) or not (0 <= t < registry.entity_count):
            raise CorpusError(f"{path}:{lineno}: unknown entity in triple")
        if r < 0:
            raise CorpusError(f"{path}:{lineno}: negative relation id")
        triples.append((h, r, t))
        max_rel = max(max_rel, r)
    return KGTriples(triples, max_rel + 1)


def _turn_to_json(turn: Turn) -> dict:
    return {
        "role": turn.role,
        "tokens": turn.tokens,
        "entities": turn.entities,
        "labels": turn.labels,
    }


def save_conversations(path: Path, conversations: list[Conversation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for conv in conversations:
            obj = {"id": conv.conv_id, "turns": [_turn_to_json(t) for t in conv.turns]}
            fh.write(json.dumps(obj, separators=(",", ":"), ensure_ascii=False))
            fh.write("\n")


def load_conversations(path: Path, registry: EntityRegistry) -> list[Conversation]:
    conversations: list[Conversation] = []
    seen_ids: set[int] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: {e}") from None
            cid = obj.get("id")
            if not isinstance(cid, int):
                raise CorpusError(f"{path}:{lineno}: conversation id must be an integer")
            if cid in seen_ids:
                raise CorpusError(f"{path}:{lineno}: duplicate conversation id {cid}")
            seen_ids.add(cid)
            turns = []
            for turn in obj.get("turns", []):
                role = turn.get("role")
                if role not in ("seeker", "recommender"):
                    raise CorpusError(f"{path}:{lineno}: bad role {role!r}")
                tokens = turn.get("tokens", [])
                if not tokens:
                    raise CorpusError(f"{path}:{lineno}: empty token sequence")
                for eid in turn.get("entities", []) + turn.get("labels", []):
                    if not (0 <= eid < registry.entity_count):
                        raise CorpusError(f"{path}:{lineno}: unknown entity {eid}")
                turns.append(Turn(role, list(tokens), list(turn.get("entities", [])),
                                  list(turn.get("labels", []))))
            conversations.append(Conversation(cid, turns))
    return conversations


def load_corpus(directory: Path) -> Corpus:
    directory = Path(directory)
    registry = load_entities(directory / "entities.tsv")
    kg = load_triples(directory / "kg_triples.tsv", registry)
    conversations = load_conversations(directory / "conversations.jsonl", registry)
    kg.validate(registry)
    return Corpus(registry, conversations, kg)


def save_corpus(directory: Path, corpus: Corpus) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_entities(directory / "entities.tsv", corpus.registry)
    save_triples(directory / "kg_triples.tsv", corpus.kg)
    save_conversations(directory / "conversations.jsonl", corpus.conversations)


def save_feature_matrix(path: Path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype=np.float64)
    if np.isnan(matrix).any():
        raise CorpusError("refusing to write NaN payload")
    rows, cols = matrix.shape
    with open(path, "wb") as fh:
        fh.write(MSFM_MAGIC)
        fh.write(struct.pack("<I", MSFM_VERSION))
        fh.write(struct.pack("<QQ", rows, cols))
        fh.write(matrix.astype("<f8").tobytes())


def read_matrix(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MSFM_MAGIC:
            raise CorpusError(f"{path}: bad magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != MSFM_VERSION:
            raise CorpusError(f"{path}: unsupported version {version}")
        rows, cols = struct.unpack("<QQ", fh.read(16))
        payload = fh.read(rows * cols * 8)
        if len(payload) != rows * cols * 8:
            raise CorpusError(f"{path}: truncated payload")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()


def load_feature_matrix(path: Path, modality: str,
                        registry: EntityRegistry | None = None) -> FeatureMatrix:
    matrix = read_matrix(path)
    if registry is not None and matrix.shape[0] != registry.item_count:
        raise CorpusError(
            f"{path}: row count {matrix.shape[0]} != item count {registry.item_count}")
    fm = FeatureMatrix(modality, matrix)
    if fm.missing_rows:
        log.info("%s: %d of %d rows have no features", path, len(fm.missing_rows),
                 matrix.shape[0])
    return fm


def average_image_vectors(vectors: list[np.ndarray]) -> np.ndarray:
    """Coordinate-wise mean of the per-still embeddings of one item."""
    if not vectors:
        raise CorpusError("cannot average an empty vector list")
    dims = {np.asarray(v).shape for v in vectors}
    if len(dims) != 1 or len(next(iter(dims))) != 1:
        raise CorpusError(f"inconsistent vector shapes {sorted(dims)}")
    return np.mean(np.stack([np.asarray(v, dtype=np.float64) for v in vectors]), axis=0)


# ---------------------------------------------------------------------------
# Vocabulary
# ---------------------------------------------------------------------------

class Vocab:
    """Whitespace-token vocabulary with pad/bos/eos/unk/item-slot specials.

    Word ids are assigned in sorted order, so the same corpus always yields
    the same vocabulary.
    """

    def __init__(self, words: list[str]):
        self.id_to_token = list(SPECIAL_TOKENS) + list(words)
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise CorpusError("duplicate token in vocabulary")
        self.pad = self.token_to_id[PAD]
        self.bos = self.token_to_id[BOS]
        self.eos = self.token_to_id[EOS]
        self.unk = self.token_to_id[UNK]
        self.item_slot = self.token_to_id[ITEM_SLOT]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.token_to_id.get(tok, self.unk) for tok in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def to_json(self) -> dict:
        return {"words": self.id_to_token[len(SPECIAL_TOKENS):]}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocab":
        return cls(obj["words"])


def build_vocab(conversations: list[Conversation]) -> Vocab:
    words = set()
    for conv in conversations:
        for turn in conv.turns:
            words.update(turn.tokens)
    words -= set(SPECIAL_TOKENS)
    return Vocab(sorted(words))


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def split(conversations: list[Conversation], ratios: tuple[float, float, float],
          seed: int) -> DatasetSplit:
    """Shuffle by seed, then floor each ratio and hand out the remainder in
    descending fractional-part order (ties resolved train, valid, test)."""
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise CorpusError(f"ratios must be nonnegative and sum to 1, got {ratios}")
    ids = [c.conv_id for c in conversations]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]

    n = len(ids)
    raw = [r * n for r in ratios]
    sizes = [int(np.floor(x)) for x in raw]
    remainder = n - sum(sizes)
    fracs = sorted(range(3), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in range(remainder):
        sizes[fracs[i % 3]] += 1

    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(shuffled[:a], shuffled[a:b], shuffled[b:])


# ---------------------------------------------------------------------------
# Synthetic corpus with planted cluster structure
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs for the generator.

    Items and non-item entities are partitioned into ``n_clusters`` groups.
    Every conversation draws its mentioned entities from one home cluster
    (plus occasional off-cluster noise) and its label item is a
    deterministic function of the mention sequence over the cluster's
    regular ("warm") items, so a brute-force rule check reproduces every
    label. Text/image features sit near per-cluster centers, with a
    configurable share of items getting an uninformative random direction
    per modality.

    To give each graph a distinct generalization role, every cluster can
    reserve:

     - text-fresh and image-fresh items: never mentioned or labeled in the
       warm phase, informative in exactly one modality (so only that
       modality's similarity graph links them to their cluster);
     - fringe non-item entities: injected into exactly
       ``fringe_train_occurrences`` warm conversations as extra mentions
       (so the co-mention graph links them, while direct gradient exposure
       stays minimal).

    The last ``round(eval_fraction * n_conversations)`` conversations cycle
    through evaluation slices that mention only text-fresh items,
    image-fresh items, or fringe entities of the home cluster; their labels
    still come from the warm items, so held-out accuracy hinges on reaching
    the warm items from barely-trained mentions through graph structure.
    """

    seed: int = 0
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
    mentions_per_conversation: tuple[int, int] = (2, 4)
    offcluster_mention_rate: float = 0.05
    kg_informative_fraction: float = 0.0
    preference_rule: str = "majority-cluster"

    def validate(self) -> None:
        if self.n_items > self.n_entities:
            raise CorpusError("n_items must not exceed n_entities")
        if self.n_conversations < 1:
            raise CorpusError("need at least one conversation")
        if self.n_clusters < 1 or self.n_items < self.n_clusters:
            raise CorpusError("each cluster needs at least one item")
        if self.preference_rule != "majority-cluster":
            raise CorpusError(f"unknown preference rule {self.preference_rule!r}")
        if not (0.0 <= self.eval_fraction < 1.0):
            raise CorpusError("eval_fraction must be in [0, 1)")
        lo, hi = self.mentions_per_conversation
        if lo < 1 or hi < lo:
            raise CorpusError("bad mentions_per_conversation range")
        per_cluster_items = self.n_items // self.n_clusters
        fresh = self.fresh_text_items_per_cluster + self.fresh_image_items_per_cluster
        if fresh >= per_cluster_items:
            raise CorpusError("fresh items would leave no warm items in a cluster")
        if self.fringe_entities_per_cluster and \
                (self.n_entities - self.n_items) // self.n_clusters \
                <= self.fringe_entities_per_cluster:
            raise CorpusError("fringe entities would leave no common entities")
        if self.fringe_train_occurrences < 0:
            raise CorpusError("fringe_train_occurrences cannot be negative")


SEEKER_OPENERS = [
    ["hi", "i", "want", "a", "movie", "recommendation"],
    ["hello", "looking", "for", "something", "new", "to", "watch"],
    ["hey", "can", "you", "suggest", "a", "film"],
]
SEEKER_FOLLOWUPS = [
    ["i", "really", "liked", "those"],
    ["something", "with", "a", "similar", "vibe", "please"],
    ["that", "style", "works", "for", "me"],
]
RECOMMENDER_ACKS = [
    ["sure", "tell", "me", "more"],
    ["got", "it", "any", "other", "favorites"],
    ["okay", "what", "else", "do", "you", "enjoy"],
]
RECOMMENDER_OFFER = ["you", "should", "watch", ITEM_SLOT, "tonight"]


def cluster_of(index: int, n_clusters: int) -> int:
    return index % n_clusters


def majority_cluster(mentioned: list[int], registry_clusters: dict[int, int],
                     n_clusters: int) -> int:
    votes = [0] * n_clusters
    for eid in set(mentioned):
        votes[registry_clusters[eid]] += 1
    best = max(votes)
    return votes.index(best)  # lowest cluster id wins ties


def planted_label(mentioned: list[int], clusters: dict[int, int], n_clusters: int,
                  warm_by_cluster: list[list[int]]) -> int:
    """Deterministic label for a mention sequence.

    The first mentioned entity belonging to the majority cluster anchors the
    choice; its within-cluster ordinal indexes the cluster's warm items
    (ids step by n_clusters inside a cluster, so the plain id modulo the
    candidate count can degenerate to a constant). Labels are thus a pure
    function of the annotated mentions, learnable at the entity level, and
    always land in the majority cluster.
    """
    maj = majority_cluster(mentioned, clusters, n_clusters)
    candidates = warm_by_cluster[maj]
    if not candidates:
        raise CorpusError("no candidate items for label")
    anchor = next(eid for eid in mentioned if clusters[eid] == maj)
    return candidates[(anchor // n_clusters) % len(candidates)]


def cluster_layout(cfg: SynthConfig) -> dict:
    """Deterministic partition of items/entities into roles per cluster.

    Within each cluster's ascending item list, the trailing items are the
    fresh ones (text-fresh first, then image-fresh); the rest are warm.
    Within each cluster's non-item entities, the trailing ones are fringe.
    """
    clusters = {eid: cluster_of(eid if eid < cfg.n_items else eid - cfg.n_items,
                                cfg.n_clusters)
                for eid in range(cfg.n_entities)}
    items_by_cluster: list[list[int]] = [[] for _ in range(cfg.n_clusters)]
    topics_by_cluster: list[list[int]] = [[] for _ in range(cfg.n_clusters)]
    for eid in range(cfg.n_entities):
        (items_by_cluster if eid < cfg.n_items else topics_by_cluster)[
            clusters[eid]].append(eid)
    warm, fresh_text, fresh_image = [], [], []
    for group in items_by_cluster:
        ft, fi = cfg.fresh_text_items_per_cluster, cfg.fresh_image_items_per_cluster
        ft = min(ft, max(0, len(group) - 1))
        fi = min(fi, max(0, len(group) - 1 - ft))
        cut = len(group) - ft - fi
        warm.append(group[:cut])
        fresh_text.append(group[cut:cut + ft])
        fresh_image.append(group[cut + ft:])
    commons, fringe = [], []
    for group in topics_by_cluster:
        nf = min(cfg.fringe_entities_per_cluster, max(0, len(group) - 1))
        commons.append(group[:len(group) - nf] if nf else list(group))
        fringe.append(group[len(group) - nf:] if nf else [])
    return {"clusters": clusters, "warm": warm, "fresh_text": fresh_text,
            "fresh_image": fresh_image, "commons": commons, "fringe": fringe}


def synth_corpus(cfg: SynthConfig, out_dir: Path) -> Corpus:
    """Generate a corpus plus text/image feature matrices under ``out_dir``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    n_items, n_entities, k = cfg.n_items, cfg.n_entities, cfg.n_clusters
    names = [f"item-{i}" if i < n_items else f"topic-{i - n_items}"
             for i in range(n_entities)]
    registry = EntityRegistry(names, [i < n_items for i in range(n_entities)])
    layout = cluster_layout(cfg)
    clusters = layout["clusters"]
    fresh_text_all = {e for group in layout["fresh_text"] for e in group}
    fresh_image_all = {e for group in layout["fresh_image"] for e in group}

    # KG: one hub relation (uninformative star) plus optional same-cluster links.
    triples: list[tuple[int, int, int]] = []
    hub = n_items if n_items < n_entities else 0
    for eid in range(n_entities):
        if eid != hub:
            triples.append((eid, 0, hub))
    if cfg.n_relations > 1 and cfg.kg_informative_fraction > 0:
        for eid in range(n_entities):
            if rng.random() < cfg.kg_informative_fraction:
                group = [e for e in range(n_entities) if clusters[e] == clusters[eid]]
                other = group[int(rng.integers(len(group)))]
                if other != eid:
                    triples.append((eid, 1, other))
    kg = KGTriples(triples, max(cfg.n_relations, 1))

    # Feature matrices. Fresh items are informative in exactly one modality
    # and have MISSING (all-zero) features in the other, so exactly one
    # similarity graph ties them to their cluster and the other contributes
    # neither edges nor noise.
    def make_features(dim: int, informative_fraction: float,
                      always_informative: set[int], missing: set[int]
                      ) -> np.ndarray:
        if dim < k:
            raise CorpusError("feature dimension must be at least n_clusters")
        # orthonormal cluster centers: inter-cluster similarity starts at zero
        # regardless of the seed, so no modality is accidentally degenerate
        centers, _ = np.linalg.qr(rng.normal(size=(dim, k)))
        centers = centers.T[:k]
        rows = np.zeros((n_items, dim))
        for row, eid in enumerate(registry.items):
            informative = rng.random() < informative_fraction  # consume rng uniformly
            if eid in always_informative:
                informative = True
            elif eid in missing:
                continue
            if informative:
                vec = centers[clusters[eid]] + cfg.feature_noise * rng.normal(size=dim)
            else:
                vec = rng.normal(size=dim)
            rows[row] = vec / np.linalg.norm(vec)
        return rows

    text = make_features(cfg.text_dim, cfg.text_informative_fraction,
                         fresh_text_all, fresh_image_all)
    image = make_features(cfg.image_dim, cfg.image_informative_fraction,
                          fresh_image_all, fresh_text_all)

    n_eval = int(round(cfg.eval_fraction * cfg.n_conversations))
    n_warm_convs = cfg.n_conversations - n_eval
    lo, hi = cfg.mentions_per_conversation
    pick = lambda options: options[int(rng.integers(len(options)))]

    def build_conversation(cid: int, mentioned: list[int], label: int) -> Conversation:
        first = mentioned[: (len(mentioned) + 1) // 2]
        second = mentioned[len(first):]
        return Conversation(cid, [
            Turn("seeker", pick(SEEKER_OPENERS), first),
            Turn("recommender", pick(RECOMMENDER_ACKS), []),
            Turn("seeker", pick(SEEKER_FOLLOWUPS), second),
            Turn("recommender", list(RECOMMENDER_OFFER), [], labels=[label]),
        ])

    # warm phase: mentions from the home cluster's warm items + common topics
    warm_pools = [layout["warm"][c] + layout["commons"][c] for c in range(k)]
    global_warm_pool = [e for pool in warm_pools for e in pool]
    conversations: list[Conversation] = []
    for cid in range(n_warm_convs):
        home = int(rng.integers(k))
        n_mentions = int(rng.integers(lo, hi + 1))
        mentioned: list[int] = []
        while len(mentioned) < n_mentions:
            if rng.random() < cfg.offcluster_mention_rate:
                eid = global_warm_pool[int(rng.integers(len(global_warm_pool)))]
            else:
                pool = warm_pools[home]
                eid = pool[int(rng.integers(len(pool)))]
            if eid not in mentioned:
                mentioned.append(eid)
        label = planted_label(mentioned, clusters, k, layout["warm"])
        conversations.append(build_conversation(cid, mentioned, label))

    # fringe injection: each fringe entity joins a few same-majority warm
    # conversations as a trailing mention (anchor and majority unchanged)
    if cfg.fringe_train_occurrences > 0:
        for cluster in range(k):
            eligible = [conv for conv in conversations
                        if majority_cluster(conv.mentioned_entities(), clusters, k)
                        == cluster]
            for fringe in layout["fringe"][cluster]:
                for _ in range(min(cfg.fringe_train_occurrences, len(eligible))):
                    conv = eligible[int(rng.integers(len(eligible)))]
                    if fringe not in conv.mentioned_entities():
                        conv.turns[2].entities.append(fringe)

    # evaluation phase: slices that mention only barely-trained entities
    slice_pools = []
    if any(layout["fresh_text"]):
        slice_pools.append("text")
    if any(layout["fresh_image"]):
        slice_pools.append("image")
    if any(layout["fringe"]):
        slice_pools.append("fringe")
    for idx in range(n_eval):
        cid = n_warm_convs + idx
        home = int(rng.integers(k))
        if slice_pools:
            kind = slice_pools[idx % len(slice_pools)]
            pool = {"text": layout["fresh_text"], "image": layout["fresh_image"],
                    "fringe": layout["fringe"]}[kind][home]
        else:
            pool = warm_pools[home]
        n_mentions = min(int(rng.integers(lo, hi + 1)), len(pool))
        order = rng.permutation(len(pool))
        mentioned = [pool[int(i)] for i in order[:n_mentions]]
        label = planted_label(mentioned, clusters, k, layout["warm"])
        conversations.append(build_conversation(cid, mentioned, label))

    corpus = Corpus(registry, conversations, kg)
    save_corpus(out_dir, corpus)
    save_feature_matrix(out_dir / "features_text.msfm", text)
    save_feature_matrix(out_dir / "features_image.msfm", image)
    return corpus


def eval_conversation_ids(cfg: SynthConfig) -> list[int]:
    """Ids of the cold-label conversations emitted by ``synth_corpus``."""
    n_eval = int(round(cfg.eval_fraction * cfg.n_conversations))
    return list(range(cfg.n_conversations - n_eval, cfg.n_conversations))


# ---------------------------------------------------------------------------
# Instances: one (context, entities, label) per labeled recommender turn
# ---------------------------------------------------------------------------

@dataclass
class Instance:
    conv_id: int
    turn_index: int
    context_tokens: list[str]
    entities: list[int]
    label: int


def conversation_instances(conv: Conversation) -> list[Instance]:
    """Each labeled recommender turn yields one instance per label, with the
    context and entity mentions taken from the preceding turns only."""
    out = []
    for idx, turn in enumerate(conv.turns):
        if turn.role != "recommender" or not turn.labels:
            continue
        context: list[str] = []
        entities: list[int] = []
        seen = set()
        for prev in conv.turns[:idx]:
            context.extend(prev.tokens)
            for eid in prev.entities:
                if eid not in seen:
                    seen.add(eid)
                    entities.append(eid)
        for label in turn.labels:
            out.append(Instance(conv.conv_id, idx, list(context), list(entities), label))
    return out


def corpus_instances(conversations: list[Conversation]) -> list[Instance]:
    out: list[Instance] = []
    for conv in conversations:
        out.extend(conversation_instances(conv))
    return out
