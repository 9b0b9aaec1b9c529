"""Backbone language-model pretraining and frozen-backbone prefix-expert training."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import (BackboneConfig, BackboneParams, PrefixExpert, forward_tensors,
                       init_backbone, weight_tensors)
from .corpus import NONE_VALUE, Dialogue, Schema, Slot, Turn, Vocab, encode_prompt, render_history
from .errors import ContractError, ShapeError
from .seeding import stream

log = logging.getLogger(__name__)


# --- optimizer -------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(state: OptimState, params: dict[str, np.ndarray],
               grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One AdamW update with bias correction; returns new arrays and advances ``state``."""
    if set(grads) - set(params):
        raise ContractError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        m_hat = m / bc1
        v_hat = v / bc2
        new = p - state.lr * state.weight_decay * p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        out[name] = new.astype(p.dtype)
    return out


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if total <= max_norm or total == 0.0:
        return grads
    factor = max_norm / total
    return {n: (g * factor).astype(g.dtype) for n, g in grads.items()}


# --- examples --------------------------------------------------------------


@dataclass(frozen=True)
class TrainExample:
    slot: Slot
    prompt: tuple[int, ...]
    target: tuple[int, ...]

    @property
    def tokens(self) -> list[int]:
        return list(self.prompt) + list(self.target)

    @property
    def mask(self) -> list[int]:
        return [0] * len(self.prompt) + [1] * len(self.target)


def build_example(vocab: Vocab, history: Sequence[Turn], slot: Slot, value: str | None,
                  max_context: int) -> TrainExample:
    """QA example for ``slot`` given turns ``history``; missing values become "none"."""
    answer = NONE_VALUE if value is None else value
    target = vocab.encode(answer) + [vocab.eoa_id]
    prompt = encode_prompt(vocab, history, slot, max_context - len(target))
    return TrainExample(slot, tuple(prompt), tuple(target))


def dialogue_examples(vocab: Vocab, schema: Schema, dialogues: Sequence[Dialogue],
                      max_context: int) -> list[TrainExample]:
    """One example per (turn, slot of the dialogue's domains), gold from the cumulative state."""
    out = []
    for dlg in dialogues:
        slots = schema.slots(dlg.domains)
        for t, turn in enumerate(dlg.turns):
            state = turn.state_dict()
            for slot in slots:
                out.append(build_example(vocab, dlg.turns[: t + 1], slot, state.get(slot),
                                         max_context))
    return out


def subsample_dialogues(dialogues: Sequence[Dialogue], fraction: float, seed: int) -> list[Dialogue]:
    """Keep each dialogue whose seeded hash falls below ``fraction``."""
    if not 0.0 < fraction <= 1.0:
        raise ContractError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(dialogues)
    kept = []
    for d in dialogues:
        h = hashlib.sha256(f"{seed}:{d.id}".encode()).digest()
        if int.from_bytes(h[:8], "big") / 2**64 < fraction:
            kept.append(d)
    return kept


def collate(sequences: Sequence[Sequence[int]], masks: Sequence[Sequence[int]], pad_id: int = 0):
    """Right-pad and shift into (inputs, labels, loss_mask), each ``(B, n - 1)``."""
    n = max(len(s) for s in sequences)
    toks = np.full((len(sequences), n), pad_id, dtype=np.int64)
    msk = np.zeros((len(sequences), n), dtype=np.int64)
    for i, (s, m) in enumerate(zip(sequences, masks)):
        toks[i, : len(s)] = s
        msk[i, : len(m)] = m
    return toks[:, :-1], toks[:, 1:], msk[:, 1:]


BUCKET_POOL = 32  # batches per length-sorted pool


def bucketed_batches(lengths: Sequence[int], batch_size: int,
                     rng: np.random.Generator) -> list[list[int]]:
    """Shuffled index batches of similar length, to cut padding.

    Indices are shuffled, cut into pools of ``BUCKET_POOL`` batches, sorted by length
    inside each pool and chunked; the batch order is then shuffled again.
    """
    order = rng.permutation(len(lengths))
    pool = batch_size * BUCKET_POOL
    batches = []
    for start in range(0, len(order), pool):
        chunk = sorted(order[start:start + pool].tolist(), key=lambda j: lengths[j])
        batches.extend(chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


# --- backbone pretraining --------------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 3
    lr: float = 3e-4
    batch_size: int = 8
    weight_decay: float = 0.01
    clip: float = 1.0


def lm_sequences(vocab: Vocab, dialogues: Sequence[Dialogue], max_context: int) -> list[list[int]]:
    """Each dialogue rendered as plain text and closed by the end marker, split into
    windows of ``max_context`` tokens."""
    seqs = []
    for dlg in dialogues:
        ids = vocab.encode(render_history(dlg.turns)) + [vocab.eoa_id]
        for start in range(0, len(ids), max_context):
            chunk = ids[start:start + max_context]
            if len(chunk) >= 2:
                seqs.append(chunk)
    return seqs


def _lm_loss(config: BackboneConfig, weights, batch: Sequence[Sequence[int]]):
    inputs, labels, mask = collate(batch, [[1] * len(s) for s in batch])
    logits, _ = forward_tensors(config, weights, None, inputs)
    return T.cross_entropy(logits, labels, mask)


def lm_eval_loss(params: BackboneParams, seqs: Sequence[Sequence[int]], batch_size: int = 32) -> float:
    """Token-weighted mean next-token loss over ``seqs``."""
    weights = weight_tensors(params)
    total, count = 0.0, 0
    for i in range(0, len(seqs), batch_size):
        batch = seqs[i:i + batch_size]
        n = sum(len(s) - 1 for s in batch)
        total += float(_lm_loss(params.config, weights, batch).data) * n
        count += n
    return total / count


def pretrain_backbone(dialogues: Sequence[Dialogue], vocab: Vocab, config: BackboneConfig,
                      seed: int, train_config: PretrainConfig | None = None
                      ) -> tuple[BackboneParams, list[float]]:
    """Next-token training of a fresh backbone; returns params and per-epoch corpus loss.

    ``losses[0]`` is the loss at initialization, ``losses[e]`` after epoch ``e``.
    """
    cfg = train_config or PretrainConfig()
    if not dialogues:
        raise ContractError("pretraining corpus is empty")
    if config.vocab_size != len(vocab):
        raise ShapeError(f"config vocab_size={config.vocab_size} but vocabulary has {len(vocab)}")
    params = init_backbone(config, seed)
    seqs = lm_sequences(vocab, dialogues, config.max_context)
    rng = stream(seed, "pretrain-order")
    state = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    losses = [lm_eval_loss(params, seqs)]
    lengths = [len(q) for q in seqs]
    for epoch in range(cfg.epochs):
        for idx in bucketed_batches(lengths, cfg.batch_size, rng):
            batch = [seqs[j] for j in idx]
            tape = T.Tape()
            weights = {n: tape.param(n, a) for n, a in params.arrays.items()}
            loss = _lm_loss(config, weights, batch)
            grads = clip_by_global_norm(T.backward(tape, loss), cfg.clip)
            params = BackboneParams(config, adamw_step(state, params.arrays, grads))
        losses.append(lm_eval_loss(params, seqs))
        log.info("pretrain epoch %d loss %.4f", epoch + 1, losses[-1])
    return params, losses


# --- expert training -------------------------------------------------------


@dataclass
class ExpertTrainConfig:
    epochs: int = 3
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 8
    clip: float = 1.0

    def to_json(self) -> dict:
        return asdict(self)


def expert_loss(backbone: BackboneParams, expert: PrefixExpert, examples: Sequence[TrainExample],
                tape: T.Tape | None = None, weights=None):
    """Masked answer-token cross-entropy of a batch; prefixes are tape params when ``tape`` is given."""
    config = backbone.config
    weights = weight_tensors(backbone) if weights is None else weights
    if tape is None:
        prefixes = [(T.Tensor(k), T.Tensor(v)) for k, v in zip(expert.keys, expert.values)]
    else:
        prefixes = [(tape.param(f"layer.{i}.key", k), tape.param(f"layer.{i}.value", v))
                    for i, (k, v) in enumerate(zip(expert.keys, expert.values))]
    inputs, labels, mask = collate([e.tokens for e in examples], [e.mask for e in examples])
    logits, _ = forward_tensors(config, weights, prefixes, inputs)
    return T.cross_entropy(logits, labels, mask)


def train_expert(backbone: BackboneParams, expert: PrefixExpert, examples: Sequence[TrainExample],
                 seed: int, train_config: ExpertTrainConfig | None = None
                 ) -> tuple[PrefixExpert, list[float]]:
    """AdamW on the prefix matrices only; the backbone is read, never written.

    Returns the trained expert (a new object) and the mean batch loss of each epoch.
    """
    cfg = train_config or ExpertTrainConfig()
    if not examples:
        raise ContractError(f"expert {expert.index} has no training examples")
    rng = stream(seed, "expert-order", expert.index)
    state = OptimState(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    weights = weight_tensors(backbone)
    current = expert.copy()
    n_layers = current.n_layers
    losses = []
    lengths = [len(e.prompt) + len(e.target) for e in examples]
    for epoch in range(cfg.epochs):
        batch_losses = []
        for idx in bucketed_batches(lengths, cfg.batch_size, rng):
            batch = [examples[j] for j in idx]
            tape = T.Tape()
            loss = expert_loss(backbone, current, batch, tape, weights)
            grads = clip_by_global_norm(T.backward(tape, loss), cfg.clip)
            flat = {f"layer.{i}.key": current.keys[i] for i in range(n_layers)}
            flat.update({f"layer.{i}.value": current.values[i] for i in range(n_layers)})
            new = adamw_step(state, flat, grads)
            current = PrefixExpert(current.index,
                                   [new[f"layer.{i}.key"] for i in range(n_layers)],
                                   [new[f"layer.{i}.value"] for i in range(n_layers)])
            batch_losses.append(float(loss.data))
        losses.append(float(np.mean(batch_losses)))
        log.info("expert %d epoch %d loss %.4f", expert.index, epoch, losses[-1])
    return current, losses
