"""Minimal pre-norm decoder-only transformer with deep prefix injection.

Each layer's attention may be extended by a prefix expert: learned key rows are
prepended to the layer's keys and learned value rows to its values. Prefix
slots carry no positional encoding and are visible to every query position.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .corpus import Vocab
from .errors import CapacityError, ContractError, FormatError, ShapeError
from .seeding import stream
from .tensor import Tensor

LN_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    max_context: int = 128
    prefix_len: int = 10

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value < 1:
                raise ContractError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: Mapping) -> BackboneConfig:
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})


def param_shapes(config: BackboneConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = config.d_model, config.d_ff
    shapes = [("tok_emb", (config.vocab_size, d)), ("pos_emb", (config.max_context, d))]
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes += [
            (p + "ln1.gain", (d,)), (p + "ln1.bias", (d,)),
            (p + "attn.wq", (d, d)), (p + "attn.wk", (d, d)),
            (p + "attn.wv", (d, d)), (p + "attn.wo", (d, d)),
            (p + "ln2.gain", (d,)), (p + "ln2.bias", (d,)),
            (p + "ff.w1", (d, f)), (p + "ff.b1", (f,)),
            (p + "ff.w2", (f, d)), (p + "ff.b2", (d,)),
        ]
    shapes += [("ln_f.gain", (d,)), ("ln_f.bias", (d,))]
    return shapes


def param_count(config: BackboneConfig) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(config))


@dataclass
class BackboneParams:
    config: BackboneConfig
    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return [n for n, _ in param_shapes(self.config)]

    def to_bytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(self.arrays[n], dtype="<f4").tobytes()
                        for n in self.names())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def astype(self, dtype) -> BackboneParams:
        return BackboneParams(self.config, {n: a.astype(dtype) for n, a in self.arrays.items()})

    def freeze(self) -> BackboneParams:
        for a in self.arrays.values():
            a.flags.writeable = False
        return self


@dataclass
class PrefixExpert:
    """One prefix expert: per layer a key prefix and a value prefix.

    Stored head-partitioned as ``(n_heads, prefix_len, head_dim)`` arrays.
    """

    index: int
    keys: list[np.ndarray]
    values: list[np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.keys)

    @property
    def prefix_len(self) -> int:
        return self.keys[0].shape[1] if self.keys else 0

    def matrices(self) -> list[np.ndarray]:
        """The 2L logical ``(prefix_len, d_model)`` matrices: key_1, value_1, key_2, ..."""
        out = []
        for k, v in zip(self.keys, self.values):
            out.append(_merge_heads(k))
            out.append(_merge_heads(v))
        return out

    @classmethod
    def from_matrices(cls, index: int, mats: Sequence[np.ndarray], n_heads: int) -> PrefixExpert:
        if len(mats) % 2:
            raise ShapeError(f"expected an even number of prefix matrices, got {len(mats)}")
        keys = [_split_heads(m, n_heads) for m in mats[0::2]]
        values = [_split_heads(m, n_heads) for m in mats[1::2]]
        return cls(index, keys, values)

    def copy(self) -> PrefixExpert:
        return PrefixExpert(self.index, [k.copy() for k in self.keys],
                            [v.copy() for v in self.values])


def _split_heads(m: np.ndarray, n_heads: int) -> np.ndarray:
    p, d = m.shape
    return np.ascontiguousarray(m.reshape(p, n_heads, d // n_heads).transpose(1, 0, 2))


def _merge_heads(m: np.ndarray) -> np.ndarray:
    h, p, dh = m.shape
    return np.ascontiguousarray(m.transpose(1, 0, 2).reshape(p, h * dh))


def init_backbone(config: BackboneConfig, seed: int) -> BackboneParams:
    rng = stream(seed, "backbone-init")
    arrays = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            arrays[name] = np.ones(shape, dtype=np.float32)
        elif leaf in ("bias", "b1", "b2"):
            arrays[name] = np.zeros(shape, dtype=np.float32)
        else:
            arrays[name] = (rng.standard_normal(shape) * INIT_STD).astype(np.float32)
    return BackboneParams(config, arrays)


# --- computation -----------------------------------------------------------


def attention_mask(n_queries: int, prefix_len: int, dtype=np.float32) -> np.ndarray:
    """Additive mask: prefix columns always open, token columns causal."""
    causal = np.triu(np.ones((n_queries, n_queries), dtype=bool), k=1)
    blocked = np.concatenate([np.zeros((n_queries, prefix_len), dtype=bool), causal], axis=1)
    return np.where(blocked, dtype(T.MASK_VALUE), dtype(0)).astype(dtype)


def attend_with_prefix(queries: Tensor, keys: Tensor, values: Tensor,
                       prefix: tuple[Tensor, Tensor] | None = None) -> tuple[Tensor, np.ndarray]:
    """Causal multi-head attention over ``[prefix; tokens]``.

    ``queries``/``keys``/``values`` are ``(B, H, n, head_dim)``; prefix tensors are
    ``(H, p, head_dim)``. Returns the attended values and the attention weights of
    shape ``(B, H, n, p + n)``.
    """
    b, h, n, dh = queries.shape
    p = 0
    if prefix is not None:
        pk, pv = prefix
        if pk.shape != pv.shape or len(pk.shape) != 3 or pk.shape[0] != h or pk.shape[2] != dh:
            raise ShapeError(f"prefix shapes {pk.shape}/{pv.shape} incompatible with "
                             f"{h} heads of width {dh}")
        p = pk.shape[1]
        keys = T.concat([T.broadcast_to(pk, (b, h, p, dh)), keys], axis=2)
        values = T.concat([T.broadcast_to(pv, (b, h, p, dh)), values], axis=2)
    scores = T.scale(T.matmul(queries, T.transpose(keys, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    scores = T.add(scores, attention_mask(n, p, queries.data.dtype.type))
    weights = T.softmax_rows(scores)
    return T.matmul(weights, values), weights.data


def weight_tensors(params: BackboneParams) -> dict[str, Tensor]:
    return {n: Tensor(a) for n, a in params.arrays.items()}


def prefix_tensors(expert: PrefixExpert) -> list[tuple[Tensor, Tensor]]:
    return [(Tensor(k), Tensor(v)) for k, v in zip(expert.keys, expert.values)]


def forward_tensors(config: BackboneConfig, weights: Mapping[str, Tensor],
                    prefixes: Sequence[tuple[Tensor, Tensor]] | None, tokens,
                    attention: list | None = None) -> tuple[Tensor, Tensor]:
    """Batched forward pass over ``tokens`` of shape ``(B, n)``; returns logits and hiddens."""
    tokens = np.asarray(tokens, dtype=np.int64)
    b, n = tokens.shape
    if n > config.max_context:
        raise CapacityError(f"sequence of {n} tokens exceeds max_context={config.max_context}")
    if n == 0:
        raise ContractError("empty token sequence")
    if prefixes is not None and len(prefixes) != config.n_layers:
        raise ShapeError(f"expert has {len(prefixes)} layers, backbone has {config.n_layers}")
    d, h, dh = config.d_model, config.n_heads, config.head_dim

    x = T.add(T.embedding(weights["tok_emb"], tokens), T.embedding(weights["pos_emb"], np.arange(n)))
    for i in range(config.n_layers):
        w = lambda s: weights[f"layers.{i}.{s}"]  # noqa: E731
        hn = T.layer_norm(x, w("ln1.gain"), w("ln1.bias"), LN_EPS)

        def heads(proj):
            return T.transpose(T.reshape(T.matmul(hn, proj), (b, n, h, dh)), (0, 2, 1, 3))

        q, k, v = heads(w("attn.wq")), heads(w("attn.wk")), heads(w("attn.wv"))
        att, probs = attend_with_prefix(q, k, v, None if prefixes is None else prefixes[i])
        if attention is not None:
            attention.append(probs)
        merged = T.reshape(T.transpose(att, (0, 2, 1, 3)), (b, n, d))
        x = T.add(x, T.matmul(merged, w("attn.wo")))
        hn = T.layer_norm(x, w("ln2.gain"), w("ln2.bias"), LN_EPS)
        ff = T.gelu(T.add(T.matmul(hn, w("ff.w1")), w("ff.b1")))
        x = T.add(x, T.add(T.matmul(ff, w("ff.w2")), w("ff.b2")))
    hidden = T.layer_norm(x, weights["ln_f.gain"], weights["ln_f.bias"], LN_EPS)
    logits = T.matmul(hidden, T.transpose(weights["tok_emb"], (1, 0)))
    return logits, hidden


def forward(params: BackboneParams, expert: PrefixExpert | None, tokens,
            attention: list | None = None) -> tuple[Tensor, Tensor]:
    """Inference forward pass. 1-D ``tokens`` give ``(n, V)`` / ``(n, d)`` outputs."""
    tokens = np.asarray(tokens, dtype=np.int64)
    single = tokens.ndim == 1
    batch = tokens[None, :] if single else tokens
    prefixes = None if expert is None else prefix_tensors(expert)
    logits, hidden = forward_tensors(params.config, weight_tensors(params), prefixes, batch,
                                     attention)
    if single:
        return Tensor(logits.data[0]), Tensor(hidden.data[0])
    return logits, hidden


def hidden_feature(params: BackboneParams, tokens: Sequence[int]) -> np.ndarray:
    """Final-layer hidden state at the last position, no expert attached."""
    if len(tokens) == 0:
        raise ContractError("hidden_feature needs a nonempty token sequence")
    _, hidden = forward(params, None, list(tokens))
    return hidden.data[-1].copy()


def embedding_feature(params: BackboneParams, tokens: Sequence[int]) -> np.ndarray:
    if len(tokens) == 0:
        raise ContractError("embedding_feature needs a nonempty token sequence")
    return params["tok_emb"][np.asarray(tokens)].mean(axis=0)


# --- persistence -----------------------------------------------------------


def save_backbone(params: BackboneParams, stem: str | Path, vocab: Vocab | None = None) -> Path:
    meta = {"config": params.config.to_json()}
    if vocab is not None:
        meta["vocab"] = vocab.words
    arrays = [(n, params[n]) for n in params.names()]
    return save_arrays(stem, "backbone", arrays, meta)


def load_backbone(stem: str | Path) -> tuple[BackboneParams, Vocab | None]:
    manifest, arrays = load_arrays(stem, "backbone")
    config = BackboneConfig.from_json(manifest["config"])
    expected = param_shapes(config)
    got = [(n, a.shape) for n, a in arrays]
    if got != [(n, tuple(s)) for n, s in expected]:
        raise FormatError("backbone payload does not match the parameter layout of its config")
    vocab = Vocab(manifest["vocab"]) if "vocab" in manifest else None
    return BackboneParams(config, dict(arrays)), vocab
