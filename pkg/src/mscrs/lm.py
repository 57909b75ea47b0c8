"""Small decoder-only causal LM with continuous prefix injection.

A deliberately tiny GPT-style stand-in: pre-LN blocks, learned positions,
tied input/output embeddings, whitespace tokens. Prompts are sequences of
continuous blocks (entity-derived prefix, task soft prompt) followed by
context token embeddings; after warmup the backbone is frozen and only
prompt-side parameters train.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numcore as nc
from .corpus import MSFM_MAGIC, MSFM_VERSION, Vocab
from .numcore import Tensor


class LMError(ValueError):
    pass


@dataclass
class LMConfig:
    vocab_size: int
    hidden_width: int = 64        # d_c
    layers: int = 2
    heads: int = 2
    max_len: int = 128
    soft_prompt_len: int = 10

    def validate(self) -> None:
        if self.hidden_width % self.heads != 0:
            raise LMError("hidden width must be divisible by head count")
        if self.vocab_size < 1 or self.max_len < 1:
            raise LMError("vocab size and max length must be positive")
        if self.soft_prompt_len < 0:
            raise LMError("soft prompt length cannot be negative")


@dataclass
class PromptSequence:
    """Ordered blocks fed to the LM: [prefix rows; soft prompt rows; context]."""

    prefix: Tensor | None
    soft: Tensor | None
    context_ids: list[int] = field(default_factory=list)

    @property
    def prefix_len(self) -> int:
        n = 0
        if self.prefix is not None:
            n += self.prefix.shape[0]
        if self.soft is not None:
            n += self.soft.shape[0]
        return n

    def __len__(self) -> int:
        return self.prefix_len + len(self.context_ids)


class LMState:
    """Backbone parameters; call ``freeze`` after warmup pretraining."""

    def __init__(self, config: LMConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.frozen = False
        rng = np.random.default_rng(seed)
        d = config.hidden_width

        def gauss(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

        self.params: dict[str, Tensor] = {
            "tok": gauss(config.vocab_size, d),
            "pos": gauss(config.max_len, d),
            "ln_f_gain": Tensor(np.ones(d), requires_grad=True),
            "ln_f_bias": Tensor(np.zeros(d), requires_grad=True),
        }
        for i in range(config.layers):
            self.params.update({
                f"l{i}_ln1_gain": Tensor(np.ones(d), requires_grad=True),
                f"l{i}_ln1_bias": Tensor(np.zeros(d), requires_grad=True),
                f"l{i}_wq": gauss(d, d),
                f"l{i}_wk": gauss(d, d),
                f"l{i}_wv": gauss(d, d),
                f"l{i}_wo": gauss(d, d),
                f"l{i}_ln2_gain": Tensor(np.ones(d), requires_grad=True),
                f"l{i}_ln2_bias": Tensor(np.zeros(d), requires_grad=True),
                f"l{i}_ff1": gauss(d, 4 * d),
                f"l{i}_ff1_bias": Tensor(np.zeros(4 * d), requires_grad=True),
                f"l{i}_ff2": gauss(4 * d, d),
                f"l{i}_ff2_bias": Tensor(np.zeros(d), requires_grad=True),
            })

    def backbone_params(self) -> list[Tensor]:
        return list(self.params.values())

    def freeze(self) -> None:
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.params.items()}


def _ln(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return nc.add_rowvec(nc.mul_rowvec(nc.layer_normalize(x), gain), bias)


def forward_embedded(state: LMState, x: Tensor) -> Tensor:
    """Run the transformer stack over an already-embedded (T, d_c) sequence.

    Positional rows are added here; attention is causally masked, so prefix
    positions see only themselves and earlier prefix rows.
    """
    cfg = state.config
    t = x.shape[0]
    if t > cfg.max_len:
        raise LMError(f"sequence length {t} exceeds budget {cfg.max_len}")
    if t == 0:
        raise LMError("empty sequence")
    p = state.params
    pos = nc.slice_rows(p["pos"], 0, t)
    h = nc.add(x, pos)
    heads, dh = cfg.heads, cfg.hidden_width // cfg.heads
    causal = np.triu(np.ones((t, t), dtype=bool), k=1)
    inv_sqrt = 1.0 / np.sqrt(dh)

    for i in range(cfg.layers):
        a = _ln(h, p[f"l{i}_ln1_gain"], p[f"l{i}_ln1_bias"])
        q = nc.matmul(a, p[f"l{i}_wq"])
        k = nc.matmul(a, p[f"l{i}_wk"])
        v = nc.matmul(a, p[f"l{i}_wv"])
        ctx_heads = []
        for hh in range(heads):
            lo, hi = hh * dh, (hh + 1) * dh
            scores = nc.scale(nc.matmul(nc.slice_cols(q, lo, hi),
                                        nc.transpose(nc.slice_cols(k, lo, hi))),
                              inv_sqrt)
            probs = nc.row_softmax(nc.masked_fill(scores, causal, -1e30))
            ctx_heads.append(nc.matmul(probs, nc.slice_cols(v, lo, hi)))
        h = nc.add(h, nc.matmul(nc.concat_cols(ctx_heads), p[f"l{i}_wo"]))
        a2 = _ln(h, p[f"l{i}_ln2_gain"], p[f"l{i}_ln2_bias"])
        ff = nc.relu(nc.add_rowvec(nc.matmul(a2, p[f"l{i}_ff1"]), p[f"l{i}_ff1_bias"]))
        ff = nc.add_rowvec(nc.matmul(ff, p[f"l{i}_ff2"]), p[f"l{i}_ff2_bias"])
        h = nc.add(h, ff)

    return _ln(h, p["ln_f_gain"], p["ln_f_bias"])


def embed_prompt(state: LMState, prompt: PromptSequence,
                 extra_ids: list[int] | None = None) -> Tensor:
    """Concatenate prompt blocks and token embeddings into one (T, d_c) input."""
    blocks: list[Tensor] = []
    if prompt.prefix is not None:
        blocks.append(prompt.prefix)
    if prompt.soft is not None and prompt.soft.shape[0] > 0:
        blocks.append(prompt.soft)
    ids = list(prompt.context_ids) + list(extra_ids or [])
    if ids:
        blocks.append(nc.embedding_gather(state.params["tok"], ids))
    if not blocks:
        raise LMError("prompt has no content")
    return nc.concat_rows(blocks) if len(blocks) > 1 else blocks[0]


def lm_forward(state: LMState, prompt: PromptSequence,
               extra_ids: list[int] | None = None) -> Tensor:
    """Hidden states for a prompt (plus optional teacher-forced target ids)."""
    return forward_embedded(state, embed_prompt(state, prompt, extra_ids))


def logits_for_rows(state: LMState, hidden: Tensor, start: int, stop: int) -> Tensor:
    """Next-token logits for hidden rows [start, stop) under tied embeddings."""
    if not (0 <= start < stop <= hidden.shape[0]):
        raise LMError(f"logit span [{start}:{stop}) out of range")
    return nc.matmul(nc.slice_rows(hidden, start, stop),
                     nc.transpose(state.params["tok"]))


def token_nll(state: LMState, prompt: PromptSequence, target_ids: list[int]) -> Tensor:
    """Summed next-token cross-entropy over the target continuation.

    The position just before each target predicts it; targets are appended
    to the prompt for teacher forcing.
    """
    if not target_ids:
        raise LMError("empty target")
    hidden = lm_forward(state, prompt, extra_ids=target_ids[:-1])
    t = hidden.shape[0]
    n = len(target_ids)
    logits = logits_for_rows(state, hidden, t - n, t)
    lse = nc.tsum(nc.row_logsumexp(logits))
    picked = nc.tsum(nc.take_entries(logits, list(range(n)), target_ids))
    return nc.add(lse, nc.scale(picked, -1.0))


@dataclass
class PoolingHead:
    """Affine map from the last hidden state to the embedding space (d)."""

    weight: Tensor  # (d_c, d)
    bias: Tensor    # (d,)

    @classmethod
    def init(cls, d_c: int, d: int, rng: np.random.Generator) -> "PoolingHead":
        # near-identity when square: the pooled vector starts as the (normalized)
        # last hidden state, which shortens the optimization path considerably
        if d_c == d:
            w = np.eye(d_c) + rng.normal(0.0, 0.02, size=(d_c, d))
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(d_c), size=(d_c, d))
        return cls(Tensor(w, requires_grad=True),
                   Tensor(np.zeros(d), requires_grad=True))

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]


def pool_last(hidden: Tensor, head: PoolingHead) -> Tensor:
    """Last-position hidden state through the learned affine map -> (1, d)."""
    if hidden.shape[0] < 1:
        raise LMError("cannot pool an empty sequence")
    last = nc.slice_rows(hidden, hidden.shape[0] - 1, hidden.shape[0])
    return nc.add_rowvec(nc.matmul(last, head.weight), head.bias)


# ---------------------------------------------------------------------------
# Warmup pretraining (stand-in for an externally pre-trained backbone)
# ---------------------------------------------------------------------------

def warmup_pretrain(state: LMState, utterances: list[list[int]], steps: int,
                    lr: float = 1e-3, batch_size: int = 8, seed: int = 0,
                    bos: int = 1, eos: int = 2,
                    log_every: int | None = None) -> list[float]:
    """Next-token training on raw utterances, then freeze the backbone.

    Returns the per-step mean token losses (useful for trend checks).
    """
    if state.frozen:
        raise LMError("backbone already frozen")
    losses: list[float] = []
    if steps > 0:
        if not utterances:
            raise LMError("no utterances to pretrain on")
        rng = np.random.default_rng(seed)
        opt = nc.AdamState(state.backbone_params(), lr=lr)
        for step in range(steps):
            picks = rng.integers(len(utterances), size=batch_size)
            with nc.Tape():
                total = None
                count = 0
                for idx in picks:
                    ids = utterances[int(idx)]
                    prompt = PromptSequence(None, None, [bos] + ids[: state.config.max_len - 2])
                    nll = token_nll(state, prompt, ids[: state.config.max_len - 2] + [eos])
                    total = nll if total is None else nc.add(total, nll)
                    count += len(ids[: state.config.max_len - 2]) + 1
                loss = nc.scale(total, 1.0 / count)
                nc.backward(loss)
            nc.adam_step(opt)
            losses.append(loss.item())
    state.freeze()
    return losses


def mean_token_loss(state: LMState, utterances: list[list[int]],
                    bos: int = 1, eos: int = 2) -> float:
    total, count = 0.0, 0
    for ids in utterances:
        ids = ids[: state.config.max_len - 2]
        prompt = PromptSequence(None, None, [bos] + ids)
        total += token_nll(state, prompt, ids + [eos]).item()
        count += len(ids) + 1
    return total / max(count, 1)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def decode(state: LMState, prompt: PromptSequence, max_new_tokens: int,
           strategy: str = "greedy", top_k: int = 10, seed: int = 0,
           eos: int = 2) -> list[int]:
    """Autoregressive decoding; greedy is deterministic, sampling is seeded.

    The terminating end-of-sequence token, when produced, is included in the
    returned ids.
    """
    if max_new_tokens < 1:
        raise LMError("decode budget must be at least 1")
    if strategy not in ("greedy", "top-k"):
        raise LMError(f"unknown decode strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    out: list[int] = []
    budget = min(max_new_tokens, state.config.max_len - len(prompt))
    if budget < 1:
        raise LMError("prompt leaves no room to decode")
    for _ in range(budget):
        hidden = lm_forward(state, prompt, extra_ids=out)
        t = hidden.shape[0]
        logits = logits_for_rows(state, hidden, t - 1, t).values[0]
        if strategy == "greedy":
            nxt = int(np.argmax(logits))  # argmax ties break to the lowest id
        else:
            k = min(top_k, logits.size)
            top = np.argsort(-logits, kind="stable")[:k]
            shifted = logits[top] - logits[top].max()
            probs = np.exp(shifted) / np.exp(shifted).sum()
            nxt = int(rng.choice(top, p=probs))
        out.append(nxt)
        if nxt == eos:
            break
    return out


# ---------------------------------------------------------------------------
# Checkpoints: JSON header + MSFM parameter blocks
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def _write_block(fh, array: np.ndarray) -> None:
    mat = np.ascontiguousarray(array if array.ndim == 2 else array[None, :],
                               dtype="<f8")
    fh.write(MSFM_MAGIC)
    fh.write(struct.pack("<I", MSFM_VERSION))
    fh.write(struct.pack("<QQ", *mat.shape))
    fh.write(mat.tobytes())


def _read_block(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != MSFM_MAGIC:
        raise LMError(f"bad parameter block magic {magic!r}")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != MSFM_VERSION:
        raise LMError(f"unsupported block version {version}")
    rows, cols = struct.unpack("<QQ", fh.read(16))
    payload = fh.read(rows * cols * 8)
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()


def save_params(path, named: dict[str, Tensor], header_extra: dict | None = None) -> None:
    names = sorted(named)
    header = {
        "version": CHECKPOINT_VERSION,
        "params": [{"name": n, "ndim": named[n].values.ndim} for n in names],
    }
    header.update(header_extra or {})
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for n in names:
            _write_block(fh, named[n].values)


def load_params(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise LMError(f"unsupported checkpoint version {header.get('version')}")
        out = {}
        for meta in header["params"]:
            block = _read_block(fh)
            out[meta["name"]] = block[0] if meta["ndim"] == 1 else block
    return header, out


def save_lm_checkpoint(path, state: LMState) -> None:
    save_params(path, state.params,
                {"config": asdict(state.config), "frozen": state.frozen})


def load_lm_checkpoint(path) -> LMState:
    header, arrays = load_params(path)
    config = LMConfig(**header["config"])
    state = LMState(config, seed=0)
    for name, arr in arrays.items():
        if name not in state.params:
            raise LMError(f"unexpected parameter {name!r} in checkpoint")
        if state.params[name].values.shape != arr.shape:
            raise LMError(f"shape mismatch for {name!r}")
        state.params[name].values[...] = arr
    if header.get("frozen"):
        state.freeze()
    return state


def tokenize_utterances(conversations, vocab: Vocab) -> list[list[int]]:
    out = []
    for conv in conversations:
        for turn in conv.turns:
            out.append(vocab.encode(turn.tokens))
    return out
