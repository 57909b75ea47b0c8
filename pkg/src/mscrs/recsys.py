"""Recommendation-task prompt learning.

Per conversation: gather entity embeddings from the fused graph tables, map
them into the LM token space with a bilinear adapter, add the (length-
matched) context embedding to form the prefix, assemble
[prefix; soft prompt; context] and pool the last hidden state into a user
preference vector that scores entities (pre-training) or items (the
recommendation task). A symmetric contrastive loss ties the context and
entity views together.

The graph tables are recomputed inside every training step so gradients
reach the entity table and the relation-typed convolution weights; the LM
backbone stays frozen throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from . import semgraph as sg
from .corpus import EntityRegistry, Instance, Vocab
from .lm import LMState, PoolingHead, PromptSequence, lm_forward, pool_last
from .numcore import Tensor


class RecError(ValueError):
    pass


@dataclass
class RecConfig:
    embed_dim: int = 64            # d, graph-side embedding width
    prefix_len: int = 8            # fixed prefix rows fed to the LM
    entity_slots: int = 8          # fixed rows the length adapter consumes
    temperature: float = 0.07      # contrastive temperature
    fuse_weight: float = 0.1       # weight of the contrastive term
    text_weight: float = 0.5       # text share in the modality blend
    lightgcn_layers: int = 3
    rgcn_layers: int = 1

    def validate(self) -> None:
        if self.temperature <= 0:
            raise RecError("temperature must be positive")
        if self.fuse_weight < 0:
            raise RecError("fuse weight cannot be negative")
        if not (0.0 <= self.text_weight <= 1.0):
            raise RecError("text weight must lie in [0, 1]")
        if self.prefix_len < 1 or self.entity_slots < 1:
            raise RecError("prefix length and entity slots must be positive")


@dataclass
class GraphBundle:
    """Train-split graphs; any semantic graph may be absent (ablations)."""

    registry: EntityRegistry
    kg: sg.RelationalGraph
    collab: sg.SemanticGraph | None
    text: sg.SemanticGraph | None
    image: sg.SemanticGraph | None

    def semantic_graphs(self) -> list[sg.SemanticGraph]:
        return [g for g in (self.collab, self.text, self.image) if g is not None]


def _near_identity(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    if rows == cols:
        return np.eye(rows) + rng.normal(0.0, 0.02, size=(rows, cols))
    return rng.normal(0.0, 1.0 / np.sqrt(rows), size=(rows, cols))


def pool_rows_to(x: Tensor, rows: int) -> Tensor:
    """Length-adapt a (n, d) tensor to exactly ``rows`` rows.

    n == rows passes through; longer inputs are mean-pooled in contiguous
    near-equal groups; shorter ones are zero-padded at the bottom.
    """
    n, d = x.shape
    if n == 0 or rows < 1:
        raise RecError("cannot length-adapt an empty tensor")
    if n == rows:
        return x
    if n < rows:
        pad = Tensor(np.zeros((rows - n, d)))
        return nc.concat_rows([x, pad])
    base, rem = divmod(n, rows)
    parts = []
    start = 0
    for g in range(rows):
        size = base + (1 if g < rem else 0)
        parts.append(nc.reshape(nc.mean_rows(nc.slice_rows(x, start, start + size)),
                                (1, d)))
        start += size
    return nc.concat_rows(parts)


def bilinear_map(length_adapter: Tensor, feature_map: Tensor, entity_rows: Tensor,
                 slots: int) -> Tensor:
    """The two-sided map: adapter mixes rows, feature map changes width."""
    if entity_rows.shape[0] < 1:
        raise RecError("bilinear map needs at least one entity row")
    slotted = pool_rows_to(entity_rows, slots)
    return nc.matmul(nc.matmul(length_adapter, slotted), feature_map)


def fuse_loss(context_vecs: list[Tensor], entity_vecs: list[Tensor],
              temperature: float) -> Tensor:
    """Symmetric in-batch contrastive loss over pooled (context, entity) pairs.

    Each direction contrasts a matched cross-view dot product against
    same-view dot products over the whole batch (self included).
    """
    if temperature <= 0:
        raise RecError("temperature must be positive")
    if not context_vecs or len(context_vecs) != len(entity_vecs):
        raise RecError("need equally many context and entity vectors")
    b = len(context_vecs)
    tmat = nc.concat_rows(context_vecs) if b > 1 else context_vecs[0]
    vmat = nc.concat_rows(entity_vecs) if b > 1 else entity_vecs[0]
    inv_t = 1.0 / temperature
    cross = nc.scale(nc.matmul(tmat, nc.transpose(vmat)), inv_t)
    matched = nc.take_entries(cross, list(range(b)), list(range(b)))
    tt = nc.scale(nc.matmul(tmat, nc.transpose(tmat)), inv_t)
    vv = nc.scale(nc.matmul(vmat, nc.transpose(vmat)), inv_t)
    denoms = nc.add(nc.row_logsumexp(tt), nc.row_logsumexp(vv))
    per_pair = nc.add(denoms, nc.scale(matched, -2.0))
    return nc.scale(nc.tsum(per_pair), 1.0 / b)


def assemble_rec_prompt(prefix: Tensor, soft_prompt: Tensor | None,
                        context_ids: list[int], budget: int) -> PromptSequence:
    """[entity prefix; task soft prompt; context], truncating old context only."""
    fixed = prefix.shape[0] + (soft_prompt.shape[0] if soft_prompt is not None else 0)
    if fixed > budget:
        raise RecError(f"prefix blocks ({fixed}) exceed the sequence budget {budget}")
    keep = budget - fixed
    ids = context_ids[-keep:] if keep < len(context_ids) else list(context_ids)
    return PromptSequence(prefix, soft_prompt, ids)


class RecModel:
    """Trainable state for the recommendation task over a frozen LM."""

    def __init__(self, lm_state: LMState, vocab: Vocab, graphs: GraphBundle,
                 cfg: RecConfig, seed: int = 0):
        cfg.validate()
        self.lm = lm_state
        self.vocab = vocab
        self.graphs = graphs
        self.cfg = cfg
        d, d_c = cfg.embed_dim, lm_state.config.hidden_width
        rng = np.random.default_rng(seed)

        self.entity_table = Tensor(
            rng.normal(0.0, 0.3, size=(graphs.registry.entity_count, d)),
            requires_grad=True)
        self.relation_weights = [
            Tensor(np.eye(d) + rng.normal(0.0, 0.05, size=(d, d)), requires_grad=True)
            for _ in range(graphs.kg.relation_count)]
        self.self_weight = Tensor(np.eye(d) + rng.normal(0.0, 0.05, size=(d, d)),
                                  requires_grad=True)
        self.length_adapter = Tensor(
            np.eye(cfg.prefix_len, cfg.entity_slots)
            + rng.normal(0.0, 0.02, size=(cfg.prefix_len, cfg.entity_slots)),
            requires_grad=True)
        self.feature_map = Tensor(_near_identity(d, d_c, rng), requires_grad=True)
        self.soft_prompt = Tensor(
            rng.normal(0.0, 0.02, size=(lm_state.config.soft_prompt_len, d_c)),
            requires_grad=True)
        self.null_entity = Tensor(rng.normal(0.0, 0.1, size=(1, d)), requires_grad=True)
        self.pool = PoolingHead.init(d_c, d, rng)

    def trainables(self) -> list[Tensor]:
        return ([self.entity_table, *self.relation_weights, self.self_weight,
                 self.length_adapter, self.feature_map, self.soft_prompt,
                 self.null_entity] + self.pool.params())

    # -- graph pipeline -----------------------------------------------------

    def semantic_tables(self) -> tuple[Tensor, Tensor]:
        """(item_final, entity_scoring) recomputed from current parameters."""
        g, cfg = self.graphs, self.cfg
        registry = g.registry
        enhanced = sg.rgcn_layer(g.kg, self.entity_table, self.relation_weights,
                                 self.self_weight)
        if g.collab is not None:
            collab_avg = sg.layer_average(
                sg.lightgcn_propagate(g.collab, enhanced, cfg.lightgcn_layers))
            entity_fused = sg.fuse_collaborative(collab_avg, enhanced)
        else:
            entity_fused = enhanced

        item_rows = nc.embedding_gather(enhanced, registry.items)
        modality = None
        text_avg = image_avg = None
        if g.text is not None:
            text_avg = sg.layer_average(
                sg.lightgcn_propagate(g.text, item_rows, cfg.lightgcn_layers))
        if g.image is not None:
            image_avg = sg.layer_average(
                sg.lightgcn_propagate(g.image, item_rows, cfg.lightgcn_layers))
        if text_avg is not None and image_avg is not None:
            modality = sg.fuse_modalities(text_avg, image_avg, cfg.text_weight)
        else:
            modality = text_avg if text_avg is not None else image_avg

        if modality is None:
            return nc.embedding_gather(entity_fused, registry.items), entity_fused
        return sg.fuse_final(entity_fused, modality, registry)

    # -- per-conversation encoding -------------------------------------------

    def context_ids(self, tokens: list[str]) -> list[int]:
        return [self.vocab.bos] + self.vocab.encode(tokens)

    def entity_rows(self, entity_ids: list[int], scoring_table: Tensor) -> Tensor:
        if entity_ids:
            return nc.embedding_gather(scoring_table, entity_ids)
        return self.null_entity

    def encode(self, instance_tokens: list[str], entity_ids: list[int],
               scoring_table: Tensor) -> tuple[PromptSequence, Tensor, Tensor]:
        """Build the prompt plus the pooled (context, entity) pair views."""
        cfg = self.cfg
        ids = self.context_ids(instance_tokens)
        context_emb = nc.embedding_gather(self.lm.params["tok"], ids)
        mapped = bilinear_map(self.length_adapter, self.feature_map,
                              self.entity_rows(entity_ids, scoring_table),
                              cfg.entity_slots)
        prefix = nc.add(mapped, pool_rows_to(context_emb, cfg.prefix_len))
        prompt = assemble_rec_prompt(prefix, self.soft_prompt, ids,
                                     self.lm.config.max_len)
        pooled_context = nc.reshape(nc.mean_rows(context_emb), (1, context_emb.shape[1]))
        pooled_entities = nc.reshape(nc.mean_rows(mapped), (1, mapped.shape[1]))
        return prompt, pooled_context, pooled_entities

    def user_vector(self, prompt: PromptSequence) -> Tensor:
        return pool_last(lm_forward(self.lm, prompt), self.pool)


def entity_nll(user_vec: Tensor, scoring_table: Tensor, targets: list[int]) -> Tensor:
    """Cross-entropy of each target entity under softmax over all entities."""
    logits = nc.matmul(user_vec, nc.transpose(scoring_table))
    lse = nc.row_logsumexp(logits)
    picked = nc.take_entries(logits, [0] * len(targets), targets)
    return nc.add(nc.scale(nc.tsum(lse), float(len(targets))),
                  nc.scale(nc.tsum(picked), -1.0))


def item_nll(user_vec: Tensor, item_table: Tensor, label_row: int) -> Tensor:
    logits = nc.matmul(user_vec, nc.transpose(item_table))
    lse = nc.row_logsumexp(logits)
    picked = nc.take_entries(logits, [0], [label_row])
    return nc.add(nc.tsum(lse), nc.scale(nc.tsum(picked), -1.0))


def score_items(user_vec: Tensor, item_table: Tensor,
                registry: EntityRegistry) -> tuple[np.ndarray, list[int]]:
    """Softmax item probabilities and the full descending ranking.

    Ties break toward the lower item id (the dense-row order is ascending by
    item id, and the sort is stable).
    """
    logits = nc.matmul(user_vec, nc.transpose(item_table))
    probs = nc.row_softmax(logits).values[0]
    order = np.argsort(-probs, kind="stable")
    ranked = [registry.items[int(r)] for r in order]
    return probs, ranked


def pretrain_step(model: RecModel, batch: list[Instance],
                  opt: nc.AdamState) -> dict[str, float]:
    """Entity-prediction pre-training plus the contrastive term; one update."""
    if not batch:
        raise RecError("empty batch")
    with nc.Tape():
        _, scoring = model.semantic_tables()
        ce_terms = []
        ctx_vecs, ent_vecs = [], []
        for inst in batch:
            prompt, pooled_ctx, pooled_ent = model.encode(
                inst.context_tokens, inst.entities, scoring)
            ctx_vecs.append(pooled_ctx)
            ent_vecs.append(pooled_ent)
            if inst.entities:
                ce_terms.append(entity_nll(model.user_vector(prompt), scoring,
                                           inst.entities))
        fuse = fuse_loss(ctx_vecs, ent_vecs, model.cfg.temperature)
        loss = nc.scale(fuse, model.cfg.fuse_weight)
        if ce_terms:
            total = ce_terms[0]
            for term in ce_terms[1:]:
                total = nc.add(total, term)
            loss = nc.add(nc.scale(total, 1.0 / len(batch)), loss)
        nc.backward(loss)
    nc.adam_step(opt)
    return {"loss": loss.item(), "fuse": fuse.item()}


def train_step(model: RecModel, batch: list[Instance],
               opt: nc.AdamState) -> dict[str, float]:
    """Recommendation cross-entropy plus the contrastive term; one update."""
    if not batch:
        raise RecError("empty batch")
    registry = model.graphs.registry
    with nc.Tape():
        item_final, scoring = model.semantic_tables()
        total = None
        ctx_vecs, ent_vecs = [], []
        for inst in batch:
            row = registry.item_index.get(inst.label)
            if row is None:
                raise RecError(f"label {inst.label} is not an item")
            prompt, pooled_ctx, pooled_ent = model.encode(
                inst.context_tokens, inst.entities, scoring)
            ctx_vecs.append(pooled_ctx)
            ent_vecs.append(pooled_ent)
            nll = item_nll(model.user_vector(prompt), item_final, row)
            total = nll if total is None else nc.add(total, nll)
        fuse = fuse_loss(ctx_vecs, ent_vecs, model.cfg.temperature)
        loss = nc.add(nc.scale(total, 1.0 / len(batch)),
                      nc.scale(fuse, model.cfg.fuse_weight))
        nc.backward(loss)
    nc.adam_step(opt)
    return {"loss": loss.item(), "fuse": fuse.item()}


def rank_for_instance(model: RecModel, inst: Instance, item_final: Tensor,
                      scoring: Tensor) -> list[int]:
    prompt, _, _ = model.encode(inst.context_tokens, inst.entities, scoring)
    _, ranked = score_items(model.user_vector(prompt), item_final,
                            model.graphs.registry)
    return ranked


def rank_instances(model: RecModel, instances: list[Instance]) -> list[list[int]]:
    """Frozen-parameter ranking pass (no tape) over a list of instances."""
    item_final, scoring = model.semantic_tables()
    item_final = item_final.detach()
    scoring = scoring.detach()
    return [rank_for_instance(model, inst, item_final, scoring)
            for inst in instances]


# -- persistence -------------------------------------------------------------

def named_trainables(model: RecModel) -> dict[str, Tensor]:
    named = {
        "entity_table": model.entity_table,
        "self_weight": model.self_weight,
        "length_adapter": model.length_adapter,
        "feature_map": model.feature_map,
        "soft_prompt": model.soft_prompt,
        "null_entity": model.null_entity,
        "pool_weight": model.pool.weight,
        "pool_bias": model.pool.bias,
    }
    for i, w in enumerate(model.relation_weights):
        named[f"relation_weight_{i}"] = w
    return named
