"""Greedy value generation with an optional prefix expert, and an in-context baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backbone import BackboneParams, PrefixExpert, forward_tensors, prefix_tensors, weight_tensors
from .corpus import NONE_VALUE, Slot, Turn, Vocab, encode_prompt
from .errors import ContractError
from .seeding import stream

MAX_ANSWER_LEN = 8
DECODE_BATCH = 64


@dataclass(frozen=True)
class Prediction:
    slot: Slot
    value: str
    expert_used: int | str


@dataclass(frozen=True)
class Exemplar:
    history: tuple[Turn, ...]
    slot: Slot
    value: str


def greedy_decode(backbone: BackboneParams, expert: PrefixExpert | None,
                  prompts: Sequence[Sequence[int]], eoa_id: int,
                  max_answer_len: int = MAX_ANSWER_LEN) -> list[list[int]]:
    """Argmax continuation of each prompt until the end marker or ``max_answer_len`` tokens."""
    config = backbone.config
    weights = weight_tensors(backbone)
    prefixes = None if expert is None else prefix_tensors(expert)
    outputs: list[list[int]] = [[] for _ in prompts]
    for start in range(0, len(prompts), DECODE_BATCH):
        idx = list(range(start, min(start + DECODE_BATCH, len(prompts))))
        seqs = {i: list(prompts[i]) for i in idx}
        active = idx
        for _ in range(max_answer_len):
            if not active:
                break
            if max(len(seqs[i]) for i in active) > config.max_context:
                raise ContractError("prompt plus answer exceeds the context window")
            n = max(len(seqs[i]) for i in active)
            toks = np.zeros((len(active), n), dtype=np.int64)
            for row, i in enumerate(active):
                toks[row, : len(seqs[i])] = seqs[i]
            logits, _ = forward_tensors(config, weights, prefixes, toks)
            still = []
            for row, i in enumerate(active):
                nxt = int(np.argmax(logits.data[row, len(seqs[i]) - 1]))
                if nxt == eoa_id:
                    continue
                outputs[i].append(nxt)
                seqs[i].append(nxt)
                still.append(i)
            active = still
    return outputs


def _finish(vocab: Vocab, ids: Sequence[int]) -> str:
    text = vocab.decode(ids).strip()
    return text if text else NONE_VALUE


def generate_values(backbone: BackboneParams, vocab: Vocab, expert: PrefixExpert | None,
                    queries: Sequence[tuple[Sequence[Turn], Slot]],
                    expert_used: int | str | None = None) -> list[Prediction]:
    budget = backbone.config.max_context - MAX_ANSWER_LEN
    prompts = [encode_prompt(vocab, hist, slot, budget) for hist, slot in queries]
    outs = greedy_decode(backbone, expert, prompts, vocab.eoa_id)
    tag = expert_used if expert_used is not None else ("frozen" if expert is None else expert.index)
    return [Prediction(slot, _finish(vocab, ids), tag) for (_, slot), ids in zip(queries, outs)]


def generate_value(backbone: BackboneParams, vocab: Vocab, expert: PrefixExpert | None,
                   history: Sequence[Turn], slot: Slot) -> Prediction:
    return generate_values(backbone, vocab, expert, [(history, slot)])[0]


# --- in-context learning baseline ------------------------------------------


def exemplar_ids(vocab: Vocab, ex: Exemplar, budget: int) -> list[int]:
    # exemplars keep only their latest turn so several fit in the window
    return (encode_prompt(vocab, ex.history[-1:], ex.slot, budget)
            + vocab.encode(ex.value) + [vocab.eoa_id])


def icl_prompt(vocab: Vocab, exemplars: Sequence[Exemplar], history: Sequence[Turn], slot: Slot,
               budget: int) -> tuple[list[int], int]:
    """Exemplars followed by the query; the oldest exemplars are dropped first to fit."""
    query = encode_prompt(vocab, history, slot, budget)
    shots = [exemplar_ids(vocab, ex, budget) for ex in exemplars]
    while shots and sum(map(len, shots)) + len(query) > budget:
        shots.pop(0)
    return [t for s in shots for t in s] + query, len(shots)


def select_exemplars(pool: Sequence[Exemplar], n: int, seed: int) -> list[Exemplar]:
    """First ``n`` of a seeded shuffle of ``pool``."""
    if n not in (0, 1, 3, 5):
        raise ContractError(f"exemplar count must be one of 0, 1, 3, 5, got {n}")
    order = stream(seed, "icl-exemplars").permutation(len(pool))
    return [pool[i] for i in order[:n]]


def generate_icl(backbone: BackboneParams, vocab: Vocab, exemplars: Sequence[Exemplar],
                 history: Sequence[Turn], slot: Slot) -> Prediction:
    return generate_icl_batch(backbone, vocab, [(exemplars, history, slot)])[0][0]


def generate_icl_batch(backbone: BackboneParams, vocab: Vocab,
                       queries: Sequence[tuple[Sequence[Exemplar], Sequence[Turn], Slot]]
                       ) -> tuple[list[Prediction], list[int]]:
    """Frozen-backbone predictions; also returns how many exemplars survived truncation."""
    budget = backbone.config.max_context - MAX_ANSWER_LEN
    prompts, used = [], []
    for exemplars, history, slot in queries:
        ids, n = icl_prompt(vocab, exemplars, history, slot, budget)
        prompts.append(ids)
        used.append(n)
    outs = greedy_decode(backbone, None, prompts, vocab.eoa_id)
    preds = [Prediction(slot, _finish(vocab, ids), "icl") for (_, _, slot), ids in zip(queries, outs)]
    return preds, used

