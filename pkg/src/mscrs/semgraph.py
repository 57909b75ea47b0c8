"""Multi-modal semantic graphs and the embedding-fusion pipeline.

Three semantic graphs are built from the training split only: a
collaborative graph over entities (thresholded co-mention counts), and
text/image graphs over items (cosine similarity, kNN-sparsified). All are
symmetrically normalized and encoded with parameter-free propagation;
the knowledge graph is encoded with one relation-typed convolution layer.
Graphs are structural (edge lists); propagation runs dense through numcore
so gradients reach the learnable tables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .corpus import Conversation, EntityRegistry, KGTriples
from .numcore import Tensor


class GraphError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Graph containers
# ---------------------------------------------------------------------------

@dataclass
class CoMentionMatrix:
    """Symmetric co-mention counts with zero diagonal, stored as an edge list."""

    node_count: int
    counts: dict[tuple[int, int], int] = field(default_factory=dict)  # key i < j

    def count(self, i: int, j: int) -> int:
        if i == j:
            return 0
        key = (i, j) if i < j else (j, i)
        return self.counts.get(key, 0)

    def max_count(self) -> int:
        return max(self.counts.values(), default=0)


@dataclass
class SemanticGraph:
    """Symmetric normalized adjacency: weight(i,j) = 1/sqrt(deg_i * deg_j)."""

    node_count: int
    edges: list[tuple[int, int, float]]  # i < j, weight in (0, 1]
    modality: str

    def __post_init__(self):
        self._adj: dict[int, list[int]] = {}
        for i, j, _ in self.edges:
            self._adj.setdefault(i, []).append(j)
            self._adj.setdefault(j, []).append(i)

    def neighbors(self, node: int) -> list[int]:
        return self._adj.get(node, [])

    def to_dense(self) -> np.ndarray:
        mat = np.zeros((self.node_count, self.node_count))
        for i, j, w in self.edges:
            mat[i, j] = w
            mat[j, i] = w
        return mat

    @classmethod
    def empty(cls, node_count: int, modality: str) -> "SemanticGraph":
        return cls(node_count, [], modality)


@dataclass
class RelationalGraph:
    """KG triples grouped by relation, with per-(node, relation) neighbor sets.

    A triple <h, r, t> makes t a neighbor of h and h a neighbor of t under
    relation r; the message normalizer is the neighbor-set size.
    """

    node_count: int
    relation_count: int
    neighbor_sets: list[dict[int, list[int]]]  # per relation: node -> sorted neighbors

    @classmethod
    def from_triples(cls, kg: KGTriples, node_count: int) -> "RelationalGraph":
        sets: list[dict[int, set[int]]] = [dict() for _ in range(kg.relation_count)]
        for h, r, t in kg.triples:
            if not (0 <= h < node_count) or not (0 <= t < node_count):
                raise GraphError(f"dangling triple endpoint ({h},{r},{t})")
            sets[r].setdefault(h, set()).add(t)
            sets[r].setdefault(t, set()).add(h)
        frozen = [{n: sorted(s) for n, s in by_node.items()} for by_node in sets]
        return cls(node_count, kg.relation_count, frozen)

    def message_matrices(self) -> list[np.ndarray]:
        """Per relation, the row-normalized neighbor matrix (1/Z_{e,r}).

        Cached: these are rebuilt-free constants reused on every training step.
        """
        cached = getattr(self, "_message_cache", None)
        if cached is not None:
            return cached
        out = []
        for by_node in self.neighbor_sets:
            mat = np.zeros((self.node_count, self.node_count))
            for node, nbrs in by_node.items():
                z = len(nbrs)
                for other in nbrs:
                    mat[node, other] = 1.0 / z
            out.append(mat)
        self._message_cache = out
        return out

    def neighbors(self, node: int) -> list[int]:
        seen = set()
        for by_node in self.neighbor_sets:
            seen.update(by_node.get(node, []))
        return sorted(seen)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def build_comention(conversations: list[Conversation], node_count: int) -> CoMentionMatrix:
    """Count, once per conversation, every unordered pair of co-mentioned entities."""
    counts: dict[tuple[int, int], int] = {}
    for conv in conversations:
        mentioned = sorted(set(conv.mentioned_entities()))
        for a in range(len(mentioned)):
            for b in range(a + 1, len(mentioned)):
                key = (mentioned[a], mentioned[b])
                counts[key] = counts.get(key, 0) + 1
    return CoMentionMatrix(node_count, counts)


def threshold_graph(com: CoMentionMatrix, threshold: int) -> SemanticGraph:
    if threshold < 1:
        raise GraphError("co-mention threshold must be >= 1")
    adj = np.zeros((com.node_count, com.node_count))
    for (i, j), c in com.counts.items():
        if c >= threshold:
            adj[i, j] = adj[j, i] = 1.0
    return sym_normalize(adj, "collaborative")


def similarity_matrix(features: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity with negatives clamped to zero.

    All-zero feature rows (missing modality data) get zero similarity
    against everything, so they contribute no edges downstream.
    """
    feats = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(feats, axis=1)
    safe = np.where(norms == 0, 1.0, norms)
    unit = feats / safe[:, None]
    sim = unit @ unit.T
    sim[norms == 0, :] = 0.0
    sim[:, norms == 0] = 0.0
    return np.maximum(sim, 0.0)


def topk_row_mask(sim: np.ndarray, k: int) -> np.ndarray:
    """Per row, mark the k largest positive off-diagonal similarities.

    Ties break toward the lower column index; rows with fewer than k
    positive entries keep what they have.
    """
    if k < 1:
        raise GraphError("k must be >= 1")
    n = sim.shape[0]
    mask = np.zeros((n, n))
    for i in range(n):
        candidates = [(-sim[i, j], j) for j in range(n) if j != i and sim[i, j] > 0]
        candidates.sort()
        for _, j in candidates[:k]:
            mask[i, j] = 1.0
    return mask


def knn_sparsify(sim: np.ndarray, k: int) -> np.ndarray:
    """Binary adjacency: per-row top-k, then OR-symmetrized."""
    mask = topk_row_mask(sim, k)
    return np.maximum(mask, mask.T)


def sym_normalize(adj: np.ndarray, modality: str) -> SemanticGraph:
    """Degree-normalize a symmetric binary adjacency with zero diagonal."""
    adj = np.asarray(adj, dtype=np.float64)
    n = adj.shape[0]
    if adj.shape != (n, n) or not np.array_equal(adj, adj.T):
        raise GraphError("adjacency must be square and symmetric")
    if np.trace(adj) != 0:
        raise GraphError("adjacency must have a zero diagonal")
    deg = adj.sum(axis=1)
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if adj[i, j] != 0:
                edges.append((i, j, float(1.0 / np.sqrt(deg[i] * deg[j]))))
    return SemanticGraph(n, edges, modality)


# ---------------------------------------------------------------------------
# Propagation and fusion (differentiable)
# ---------------------------------------------------------------------------

def rgcn_layer(graph: RelationalGraph, embeddings: Tensor,
               relation_weights: list[Tensor], self_weight: Tensor,
               activation: str = "relu") -> Tensor:
    """One relation-typed convolution:
    out_e = act( sum_r sum_{e' in N_r(e)} W_r n_e' / |N_r(e)|  +  W n_e ).
    """
    if len(relation_weights) != graph.relation_count:
        raise GraphError("one weight matrix per relation required")
    mats = graph.message_matrices()
    total = nc.matmul(embeddings, self_weight)
    for rel, w_rel in enumerate(relation_weights):
        total = nc.add(total, nc.matmul(nc.matmul(Tensor(mats[rel]), embeddings), w_rel))
    if activation == "relu":
        return nc.relu(total)
    if activation == "identity":
        return total
    raise GraphError(f"unknown activation {activation!r}")


def lightgcn_propagate(graph: SemanticGraph, table: Tensor, layers: int) -> list[Tensor]:
    """Repeated multiplication by the normalized adjacency, no transforms."""
    if layers < 1:
        raise GraphError("need at least one propagation layer")
    if table.shape[0] != graph.node_count:
        raise GraphError(f"table rows {table.shape[0]} != nodes {graph.node_count}")
    adj = Tensor(graph.to_dense())
    out = [table]
    for _ in range(layers):
        out.append(nc.matmul(adj, out[-1]))
    return out


def layer_average(layers: list[Tensor]) -> Tensor:
    if not layers:
        raise GraphError("cannot average zero layers")
    total = layers[0]
    for layer in layers[1:]:
        total = nc.add(total, layer)
    return nc.scale(total, 1.0 / len(layers))


def fuse_modalities(text_table: Tensor, image_table: Tensor, text_weight: float) -> Tensor:
    """Convex blend of the text and image tables (endpoints are exact)."""
    if text_table.shape != image_table.shape:
        raise GraphError("modality tables must share a shape")
    if text_weight == 1.0:
        return nc.scale(text_table, 1.0)
    if text_weight == 0.0:
        return nc.scale(image_table, 1.0)
    return nc.add(nc.scale(text_table, text_weight),
                  nc.scale(image_table, 1.0 - text_weight))


def fuse_collaborative(collab_table: Tensor, kg_table: Tensor) -> Tensor:
    """Elementwise mean of the collaborative average and the KG encoding."""
    if collab_table.shape != kg_table.shape:
        raise GraphError("entity tables must share a shape")
    return nc.scale(nc.add(collab_table, kg_table), 0.5)


def fuse_final(entity_fused: Tensor, modality_fused: Tensor,
               registry: EntityRegistry) -> tuple[Tensor, Tensor]:
    """Item-level fusion plus the entity-scoring companion table.

    Returns (item_final, entity_scoring): item_final[i] is the entity-fused
    row of item i plus its modality row; entity_scoring is the K-row table
    with item rows replaced by their item_final rows.
    """
    n = registry.item_count
    if modality_fused.shape[0] != n:
        raise GraphError("modality table must have one row per item")
    if entity_fused.shape[0] != registry.entity_count:
        raise GraphError("entity table must have one row per entity")
    item_rows = nc.embedding_gather(entity_fused, registry.items)
    item_final = nc.add(item_rows, modality_fused)

    scatter = np.zeros((registry.entity_count, n))
    for row, eid in enumerate(registry.items):
        scatter[eid, row] = 1.0
    # entity row of an item becomes exactly item_final; other rows unchanged
    delta = nc.add(item_final, nc.scale(item_rows, -1.0))
    entity_scoring = nc.add(entity_fused, nc.matmul(Tensor(scatter), delta))
    return item_final, entity_scoring


# ---------------------------------------------------------------------------
# Inspection I/O
# ---------------------------------------------------------------------------

def save_graph_tsv(path: Path, graph: SemanticGraph) -> None:
    lines = [f"{i}\t{j}\t{float(w)!r}" for i, j, w in sorted(graph.edges)]
    header = f"# nodes={graph.node_count} modality={graph.modality}\n"
    Path(path).write_text(header + "\n".join(lines) + ("\n" if lines else ""),
                          encoding="utf-8")


def load_graph_tsv(path: Path) -> SemanticGraph:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("# nodes="):
        raise GraphError(f"{path}: missing graph header")
    head = dict(part.split("=", 1) for part in text[0][2:].split())
    edges = []
    for raw in text[1:]:
        if not raw:
            continue
        i, j, w = raw.split("\t")
        edges.append((int(i), int(j), float(w)))
    return SemanticGraph(int(head["nodes"]), edges, head["modality"])
