"""Pool of K prefix experts, one per slot cluster."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import INIT_STD, BackboneConfig, PrefixExpert
from .checkpoint import load_arrays, save_arrays
from .errors import ContractError, FormatError
from .seeding import stream


@dataclass
class ExpertPool:
    config: BackboneConfig
    experts: list[PrefixExpert]
    provenance: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.experts)


def new_expert(config: BackboneConfig, index: int, seed: int) -> PrefixExpert:
    rng = stream(seed, "expert-init", index)
    shape = (config.prefix_len, config.d_model)
    mats = [(rng.standard_normal(shape) * INIT_STD).astype(np.float32)
            for _ in range(2 * config.n_layers)]
    return PrefixExpert.from_matrices(index, mats, config.n_heads)


def init_pool(config: BackboneConfig, k: int, seed: int, provenance: dict | None = None) -> ExpertPool:
    if k < 1:
        raise ContractError(f"pool needs at least one expert, got K={k}")
    experts = [new_expert(config, i, seed) for i in range(k)]
    prov = {"k": k, "seed": seed} if provenance is None else dict(provenance)
    return ExpertPool(config, experts, prov)


def select_expert(pool: ExpertPool, cluster_index: int) -> PrefixExpert:
    if not 0 <= cluster_index < pool.k:
        raise ContractError(f"cluster index {cluster_index} outside [0, {pool.k})")
    return pool.experts[cluster_index]


def _param_name(k: int, layer: int, which: str) -> str:
    return f"expert.{k}.layer.{layer}.{which}"


def save_pool(pool: ExpertPool, stem: str | Path) -> Path:
    arrays = []
    for e in pool.experts:
        mats = e.matrices()
        for layer in range(e.n_layers):
            arrays.append((_param_name(e.index, layer, "key"), mats[2 * layer]))
            arrays.append((_param_name(e.index, layer, "value"), mats[2 * layer + 1]))
    meta = {"config": pool.config.to_json(), "k": pool.k, "provenance": pool.provenance}
    return save_arrays(stem, "experts", arrays, meta)


def load_pool(stem: str | Path) -> ExpertPool:
    manifest, arrays = load_arrays(stem, "experts")
    config = BackboneConfig.from_json(manifest["config"])
    k = manifest.get("k")
    n_layers, shape = config.n_layers, (config.prefix_len, config.d_model)
    if not isinstance(k, int) or k < 1:
        raise FormatError(f"manifest K must be a positive integer, got {k!r}")
    if len(arrays) != 2 * n_layers * k:
        raise FormatError(f"manifest declares K={k} experts of {2 * n_layers} matrices, "
                          f"payload holds {len(arrays)} matrices")
    experts, it = [], iter(arrays)
    for idx in range(k):
        mats = []
        for layer in range(n_layers):
            for which in ("key", "value"):
                name, arr = next(it)
                if name != _param_name(idx, layer, which) or arr.shape != shape:
                    raise FormatError(f"unexpected entry {name!r} {arr.shape}, wanted "
                                      f"{_param_name(idx, layer, which)!r} {shape}")
                mats.append(arr)
        experts.append(PrefixExpert.from_matrices(idx, mats, config.n_heads))
    return ExpertPool(config, experts, dict(manifest.get("provenance", {})))
