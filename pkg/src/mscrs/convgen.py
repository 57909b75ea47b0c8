"""Conversation-task prompt learning and response generation.

Entity sets are expanded with one-hop neighbors across all four graphs;
train contexts whose expanded sets overlap get edges in a correlation map,
whose one-layer propagation (through a learned affine) enhances each
context vector. The enhanced context fuses into the prompt prefix and the
model trains by next-token loss on recommender responses, with item names
replaced by the item-slot token. At inference the slot is filled with the
top-ranked item.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from . import semgraph as sg
from .corpus import Conversation, Vocab
from .lm import LMState, PoolingHead, PromptSequence, decode, lm_forward, pool_last, token_nll
from .numcore import Tensor
from .recsys import (GraphBundle, _near_identity, assemble_rec_prompt,
                     bilinear_map, pool_rows_to)


class GenError(ValueError):
    pass


def expand_entities(base: set[int], graphs: GraphBundle) -> set[int]:
    """Base entities plus their one-hop neighbors in any of the four graphs.

    Item-graph neighbors are item rows and map back to entity ids.
    """
    registry = graphs.registry
    out = set(base)
    for eid in base:
        out.update(graphs.kg.neighbors(eid))
        if graphs.collab is not None:
            out.update(graphs.collab.neighbors(eid))
        row = registry.item_index.get(eid)
        if row is not None:
            for g in (graphs.text, graphs.image):
                if g is not None:
                    out.update(registry.items[j] for j in g.neighbors(row))
    return out


@dataclass
class GenInstance:
    conv_id: int
    turn_index: int
    context_tokens: list[str]
    entities: list[int]
    target_tokens: list[str]


def gen_instances(conversations: list[Conversation]) -> list[GenInstance]:
    """One training pair per recommender turn: prior turns -> response."""
    out = []
    for conv in conversations:
        for idx, turn in enumerate(conv.turns):
            if turn.role != "recommender":
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
            out.append(GenInstance(conv.conv_id, idx, context, entities,
                                   list(turn.tokens)))
    return out


@dataclass
class CorrelationMap:
    """Similarity structure over the train conversational contexts."""

    graph: sg.SemanticGraph
    base_vectors: np.ndarray            # (M, d_c) mean context token embeddings
    expanded_sets: list[set[int]]
    conv_ids: list[int]
    k_neighbors: int
    degrees: np.ndarray = field(init=False)
    dense: np.ndarray = field(init=False)

    def __post_init__(self):
        self.degrees = np.zeros(self.graph.node_count)
        for i, j, _ in self.graph.edges:
            self.degrees[i] += 1
            self.degrees[j] += 1
        self.dense = self.graph.to_dense()


def context_base_vector(lm_state: LMState, vocab: Vocab,
                        tokens: list[str]) -> np.ndarray:
    ids = [vocab.bos] + vocab.encode(tokens)
    rows = lm_state.params["tok"].values[ids]
    return rows.mean(axis=0)


def build_correlation_map(instances: list[GenInstance], graphs: GraphBundle,
                          lm_state: LMState, vocab: Vocab,
                          k_neighbors: int) -> CorrelationMap:
    """Edges weighted by shared expanded-entity counts, kNN + normalization."""
    if not instances:
        raise GenError("need at least one context")
    expanded = [expand_entities(set(inst.entities), graphs) for inst in instances]
    m = len(instances)
    weights = np.zeros((m, m))
    for a in range(m):
        for b in range(a + 1, m):
            shared = len(expanded[a] & expanded[b])
            weights[a, b] = weights[b, a] = shared
    adj = sg.knn_sparsify(weights, k_neighbors)
    graph = sg.sym_normalize(adj, "correlation")
    base = np.stack([context_base_vector(lm_state, vocab, inst.context_tokens)
                     for inst in instances])
    return CorrelationMap(graph, base, expanded, [i.conv_id for i in instances],
                          k_neighbors)


class GenModel:
    """Trainable state for the conversation task over a frozen LM.

    ``entity_matrix`` is a frozen snapshot of the entity scoring table from
    the recommendation side; gradients here touch only conversation-task
    parameters.
    """

    def __init__(self, lm_state: LMState, vocab: Vocab, graphs: GraphBundle,
                 entity_matrix: np.ndarray, correlation: CorrelationMap | None,
                 prefix_len: int = 8, entity_slots: int = 8, seed: int = 0,
                 use_entity_prefix: bool = True, use_correlation: bool = True):
        self.lm = lm_state
        self.vocab = vocab
        self.graphs = graphs
        self.entity_matrix = Tensor(entity_matrix)
        self.correlation = correlation
        self.prefix_len = prefix_len
        self.entity_slots = entity_slots
        self.use_entity_prefix = use_entity_prefix
        self.use_correlation = use_correlation
        d = entity_matrix.shape[1]
        d_c = lm_state.config.hidden_width
        rng = np.random.default_rng(seed)

        self.soft_prompt = Tensor(
            rng.normal(0.0, 0.02, size=(lm_state.config.soft_prompt_len, d_c)),
            requires_grad=True)
        self.length_adapter = Tensor(
            np.eye(prefix_len, entity_slots)
            + rng.normal(0.0, 0.02, size=(prefix_len, entity_slots)),
            requires_grad=True)
        self.feature_map = Tensor(_near_identity(d, d_c, rng), requires_grad=True)
        self.null_entity = Tensor(rng.normal(0.0, 0.1, size=(1, d)), requires_grad=True)
        self.enhance_weight = Tensor(np.eye(d_c) + rng.normal(0.0, 0.02, size=(d_c, d_c)),
                                     requires_grad=True)
        self.enhance_bias = Tensor(np.zeros(d_c), requires_grad=True)
        self.pool = PoolingHead.init(d_c, d, rng)

    def trainables(self) -> list[Tensor]:
        return [self.soft_prompt, self.length_adapter, self.feature_map,
                self.null_entity, self.enhance_weight, self.enhance_bias,
                *self.pool.params()]

    # -- correlation enhancement ----------------------------------------------

    def _enhance(self, base_vec: Tensor, aggregated: Tensor) -> Tensor:
        mapped = nc.add_rowvec(nc.matmul(aggregated, self.enhance_weight),
                               self.enhance_bias)
        return nc.scale(nc.add(base_vec, mapped), 0.5)

    def enhanced_context_vector(self, inst: GenInstance,
                                train_index: int | None) -> Tensor:
        """One (1, d_c) enhanced vector; unseen contexts attach to train rows.

        Isolated contexts (and unseen contexts with no overlapping train
        context) aggregate their own base vector, so the enhancement never
        silently zeroes out.
        """
        cm = self.correlation
        base = Tensor(context_base_vector(self.lm, self.vocab,
                                          inst.context_tokens)[None, :])
        if cm is None:
            return base
        if train_index is not None:
            if cm.degrees[train_index] > 0:
                agg = Tensor(cm.dense[train_index][None, :] @ cm.base_vectors)
            else:
                agg = Tensor(cm.base_vectors[train_index][None, :])
            return self._enhance(base, agg)
        # test-time attachment: intersections against train contexts only
        expanded = expand_entities(set(inst.entities), self.graphs)
        shared = np.array([len(expanded & s) for s in cm.expanded_sets], dtype=float)
        order = np.argsort(-shared, kind="stable")
        picked = [int(j) for j in order if shared[j] > 0][: cm.k_neighbors]
        if not picked:
            agg = base
        else:
            deg_self = len(picked)
            row = np.zeros((1, cm.graph.node_count))
            for j in picked:
                deg_j = max(cm.degrees[j], 1.0)
                row[0, j] = 1.0 / np.sqrt(deg_self * deg_j)
            agg = Tensor(row @ cm.base_vectors)
        return self._enhance(base, agg)

    # -- prompt assembly --------------------------------------------------------

    def context_ids(self, tokens: list[str]) -> list[int]:
        # trailing separator: the response continues from an utterance start,
        # matching how the backbone saw utterances during warmup
        return [self.vocab.bos] + self.vocab.encode(tokens) + [self.vocab.bos]

    def build_prompt(self, inst: GenInstance, train_index: int | None,
                     budget_margin: int = 0) -> PromptSequence:
        """Prompt for one context; ``budget_margin`` reserves room for the
        target continuation (or for decoding)."""
        ids = self.context_ids(inst.context_tokens)
        context_emb = nc.embedding_gather(self.lm.params["tok"], ids)
        pooled_context = pool_rows_to(context_emb, self.prefix_len)
        if self.use_entity_prefix:
            if inst.entities:
                rows = nc.embedding_gather(self.entity_matrix, inst.entities)
            else:
                rows = self.null_entity
            mapped = bilinear_map(self.length_adapter, self.feature_map, rows,
                                  self.entity_slots)
            enriched = nc.add(pooled_context, mapped)
        else:
            enriched = pooled_context
        if self.use_correlation and self.correlation is not None:
            enhanced = self.enhanced_context_vector(inst, train_index)
            prefix = fuse_context(enriched, enhanced)
        else:
            prefix = enriched
        return assemble_rec_prompt(prefix, self.soft_prompt, ids,
                                   self.lm.config.max_len - budget_margin)

    def conversation_state(self, prompt: PromptSequence) -> Tensor:
        """Pooled representation of the assembled prompt (1, d)."""
        return pool_last(lm_forward(self.lm, prompt), self.pool)


def fuse_context(enriched_context: Tensor, enhanced_vec: Tensor) -> Tensor:
    """Positionwise mean of the broadcast enhanced vector and the context rows."""
    p, d = enriched_context.shape
    if enhanced_vec.shape != (1, d):
        raise GenError(f"enhanced vector must be (1, {d})")
    ones = Tensor(np.ones((p, 1)))
    broadcast = nc.matmul(ones, enhanced_vec)
    return nc.scale(nc.add(broadcast, enriched_context), 0.5)


def encode_target(vocab: Vocab, tokens: list[str], item_names: set[str]) -> list[int]:
    """Targets for generation training: item names collapse to the slot token."""
    ids = []
    for tok in tokens:
        if tok in item_names:
            ids.append(vocab.item_slot)
        else:
            ids.append(vocab.token_to_id.get(tok, vocab.unk))
    return ids + [vocab.eos]


def gen_train_step(model: GenModel, batch: list[tuple[GenInstance, int | None]],
                   opt: nc.AdamState, item_names: set[str]) -> dict[str, float]:
    """Teacher-forced response loss, averaged per conversation; one update."""
    if not batch:
        raise GenError("empty batch")
    with nc.Tape():
        total = None
        for inst, train_index in batch:
            if not inst.target_tokens:
                raise GenError("empty target response")
            target = encode_target(model.vocab, inst.target_tokens, item_names)
            prompt = model.build_prompt(inst, train_index,
                                        budget_margin=len(target) - 1)
            nll = token_nll(model.lm, prompt, target)
            total = nll if total is None else nc.add(total, nll)
        loss = nc.scale(total, 1.0 / len(batch))
        nc.backward(loss)
    nc.adam_step(opt)
    return {"loss": loss.item()}


@dataclass
class GeneratedResponse:
    tokens: list[str]
    filled_items: list[dict]


def generate_response(model: GenModel, inst: GenInstance, top_item: int | None,
                      item_name: str | None, max_new_tokens: int = 20,
                      strategy: str = "greedy", seed: int = 0) -> GeneratedResponse:
    """Decode a response and fill item slots with the top recommendation."""
    prompt = model.build_prompt(inst, None, budget_margin=max_new_tokens)
    ids = decode(model.lm, prompt, max_new_tokens, strategy=strategy, seed=seed,
                 eos=model.vocab.eos)
    if ids and ids[-1] == model.vocab.eos:
        ids = ids[:-1]
    tokens = model.vocab.decode(ids)
    filled = []
    out_tokens = []
    for pos, tok in enumerate(tokens):
        if tok == model.vocab.id_to_token[model.vocab.item_slot] and top_item is not None:
            out_tokens.append(item_name if item_name is not None else tok)
            filled.append({"slot_position": pos, "item_id": top_item})
        else:
            out_tokens.append(tok)
    return GeneratedResponse(out_tokens, filled)


def named_trainables(model: GenModel) -> dict[str, Tensor]:
    return {
        "soft_prompt": model.soft_prompt,
        "length_adapter": model.length_adapter,
        "feature_map": model.feature_map,
        "null_entity": model.null_entity,
        "enhance_weight": model.enhance_weight,
        "enhance_bias": model.enhance_bias,
        "pool_weight": model.pool.weight,
        "pool_bias": model.pool.bias,
    }
