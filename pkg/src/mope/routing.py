"""Slot featurization, k-means clustering and nearest-centroid expert routing."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .backbone import BackboneParams, embedding_feature, hidden_feature
from .corpus import Schema, Slot, Vocab, slot_text
from .errors import ContractError, FormatError, ShapeError
from .seeding import stream

MODES = ("embedding", "hidden")
N_INIT = 10
MAX_ITER = 100
MAX_REPAIRS = 10


@dataclass(frozen=True)
class SlotFeature:
    slot: Slot
    vector: np.ndarray
    mode: str = "hidden"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown feature mode {self.mode!r}")
        if not np.all(np.isfinite(self.vector)):
            raise ContractError(f"non-finite feature for {slot_text(self.slot)}")


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    assignments: dict[Slot, int]
    mode: str = "hidden"
    seed: int = 0
    # within-cluster SSE after each Lloyd iteration; not persisted
    sse_history: list[float] = field(default_factory=list, compare=False)

    def to_json(self) -> dict:
        return {
            "k": self.k,
            "mode": self.mode,
            "seed": self.seed,
            "centroids": [[float(x) for x in row] for row in self.centroids],
            "assignments": {slot_text(s): int(c) for s, c in self.assignments.items()},
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> ClusterModel:
        try:
            centroids = np.asarray(doc["centroids"], dtype=np.float64)
            assignments = {}
            for key, c in doc["assignments"].items():
                domain, name = key.split(" ", 1)
                assignments[(domain, name)] = int(c)
            model = cls(int(doc["k"]), centroids, assignments, doc["mode"], int(doc["seed"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"malformed cluster model: {exc}") from exc
        if centroids.ndim != 2 or centroids.shape[0] != model.k:
            raise FormatError(f"expected {model.k} centroids, got shape {centroids.shape}")
        if any(not 0 <= c < model.k for c in assignments.values()):
            raise FormatError("assignment outside [0, k)")
        return model

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n",
                              encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> ClusterModel:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: unreadable cluster model ({exc})") from exc
        return cls.from_json(doc)


def featurize(params: BackboneParams, vocab: Vocab, slots: Sequence[Slot],
              mode: str) -> list[SlotFeature]:
    if mode not in MODES:
        raise ContractError(f"unknown feature mode {mode!r}")
    fn = hidden_feature if mode == "hidden" else embedding_feature
    return [SlotFeature(s, fn(params, vocab.encode(slot_text(s))).astype(np.float64), mode)
            for s in slots]


def _sse(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def _nearest(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1)  # first minimum wins ties


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [int(rng.integers(n))]
    d2 = ((x - x[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # remaining points coincide with chosen centers; pick any unused index
            idx = next(i for i in range(n) if i not in centers)
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return x[centers].copy()


def _lloyd(x: np.ndarray, k: int, rng: np.random.Generator):
    """One Lloyd run from a k-means++ start; stops when assignments stop changing."""
    centroids = _kmeans_pp(x, k, rng)
    labels = _nearest(x, centroids)
    history = [_sse(x, centroids, labels)]
    repairs = 0
    for _ in range(MAX_ITER):
        for c in range(k):
            if np.any(labels == c):
                continue
            repairs += 1
            if repairs > MAX_REPAIRS:
                raise ContractError("k-means kept producing empty clusters")
            far = int(np.argmax(((x - centroids[labels]) ** 2).sum(axis=1)))
            centroids[c] = x[far]
            labels = _nearest(x, centroids)
        centroids = np.stack([x[labels == c].mean(axis=0) for c in range(k)])
        new_labels = _nearest(x, centroids)
        history.append(_sse(x, centroids, new_labels))
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centroids, labels, history


def fit_kmeans(features: Sequence[SlotFeature], k: int, seed: int) -> ClusterModel:
    """Lloyd's algorithm from ``N_INIT`` k-means++ starts, keeping the lowest final SSE.

    A single start can settle in a local optimum even on well-separated data.
    """
    if not features:
        raise ContractError("cannot cluster an empty feature list")
    if k < 1:
        raise ContractError(f"K must be at least 1, got {k}")
    x = np.stack([f.vector for f in features]).astype(np.float64)
    n_distinct = len(np.unique(x, axis=0))
    if k > n_distinct:
        raise ContractError(f"K={k} exceeds the {n_distinct} distinct feature vectors")
    rng = stream(seed, "kmeans")
    best = None
    for _ in range(N_INIT):
        run = _lloyd(x, k, rng)
        if best is None or run[2][-1] < best[2][-1] - 1e-12:
            best = run
    centroids, labels, history = best
    assignments = {f.slot: int(c) for f, c in zip(features, labels)}
    return ClusterModel(k, centroids, assignments, features[0].mode, seed, history)


def assign_nearest(model: ClusterModel, feature: SlotFeature | np.ndarray) -> int:
    vec = feature.vector if isinstance(feature, SlotFeature) else np.asarray(feature)
    if vec.shape != (model.centroids.shape[1],):
        raise ShapeError(f"feature of shape {vec.shape} vs centroids {model.centroids.shape}")
    return int(_nearest(vec[None, :].astype(np.float64), model.centroids)[0])


def cluster_slots(params: BackboneParams, vocab: Vocab, schema: Schema, mode: str, k: int,
                  seed: int) -> ClusterModel:
    """Fit k-means over the features of every training-domain slot."""
    slots = schema.train_slots()
    if len(slots) < k:
        raise ContractError(f"schema has {len(slots)} training slots, fewer than K={k}")
    return fit_kmeans(featurize(params, vocab, slots, mode), k, seed)


def random_assignment(model: ClusterModel, seed: int,
                      slots: Sequence[Slot] | None = None) -> dict[Slot, int]:
    """Ablation: a uniformly random expert for each slot, ignoring the clustering."""
    rng = stream(seed, "random-routing")
    slots = list(model.assignments) if slots is None else list(slots)
    return {s: int(rng.integers(model.k)) for s in slots}
