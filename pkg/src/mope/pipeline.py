"""Glue for whole experiments: route training data to experts, predict a domain's grid,
and sweep cluster counts and feature modes."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

from .backbone import BackboneParams
from .corpus import Dialogue, Schema, Slot, Vocab, slot_text
from .decode import Exemplar, Prediction, generate_icl_batch, generate_values, select_exemplars
from .errors import ContractError
from .evaluate import EvalReport, GridKey, average_cosine_similarity, build_report, gold_grid
from .experts import ExpertPool, init_pool
from .routing import ClusterModel, assign_nearest, cluster_slots, featurize, random_assignment
from .train import ExpertTrainConfig, TrainExample, build_example, train_expert

log = logging.getLogger(__name__)

ROUTINGS = ("specialized", "random", "single")


# --- training ----------------------------------------------------------------


def cluster_examples(vocab: Vocab, schema: Schema, dialogues: Sequence[Dialogue],
                     model: ClusterModel, max_context: int) -> dict[int, list[TrainExample]]:
    """Training examples grouped by the cluster of their slot."""
    groups: dict[int, list[TrainExample]] = {c: [] for c in range(model.k)}
    for dlg in dialogues:
        slots = schema.slots(dlg.domains)
        for t, turn in enumerate(dlg.turns):
            state = turn.state_dict()
            for slot in slots:
                if slot not in model.assignments:
                    raise ContractError(f"training slot {slot_text(slot)} has no cluster")
                ex = build_example(vocab, dlg.turns[: t + 1], slot, state.get(slot), max_context)
                groups[model.assignments[slot]].append(ex)
    return groups


def train_pool(backbone: BackboneParams, model: ClusterModel,
               groups: dict[int, list[TrainExample]], seed: int,
               config: ExpertTrainConfig | None = None) -> tuple[ExpertPool, list[dict]]:
    """One expert per cluster, each trained only on its own cluster's examples.

    Returns the pool and loss rows ``{"epoch", "expert", "mean_loss"}``.
    """
    cfg = config or ExpertTrainConfig()
    pool = init_pool(backbone.config, model.k, seed,
                     {"k": model.k, "seed": seed, "mode": model.mode, "cluster_seed": model.seed})
    trained, rows = [], []
    for expert in pool.experts:
        examples = groups.get(expert.index, [])
        if not examples:
            raise ContractError(f"cluster {expert.index} has no training examples")
        new, losses = train_expert(backbone, expert, examples, seed, cfg)
        trained.append(new)
        rows.extend({"epoch": e, "expert": expert.index, "mean_loss": l}
                    for e, l in enumerate(losses))
    rows.sort(key=lambda r: (r["epoch"], r["expert"]))
    return ExpertPool(pool.config, trained, pool.provenance), rows


# --- routing and prediction --------------------------------------------------


def route_slots(backbone: BackboneParams, vocab: Vocab, model: ClusterModel,
                slots: Sequence[Slot], routing: str, seed: int, pool_k: int) -> dict[Slot, int]:
    if routing not in ROUTINGS:
        raise ContractError(f"unknown routing {routing!r}")
    if pool_k != model.k:
        raise ContractError(f"pool has {pool_k} experts but the cluster model has K={model.k}")
    if routing == "single":
        if pool_k != 1:
            raise ContractError("single routing needs a one-expert pool")
        return {s: 0 for s in slots}
    if routing == "random":
        return random_assignment(model, seed, slots)
    feats = featurize(backbone, vocab, slots, model.mode)
    return {f.slot: assign_nearest(model, f) for f in feats}


def domain_queries(schema: Schema, dialogues: Sequence[Dialogue], domain: str):
    """``(grid key, history, slot)`` for every cell of the domain's evaluation grid."""
    if domain not in schema.domains:
        raise ContractError(f"unknown domain {domain!r}")
    out = []
    for dlg in dialogues:
        if domain not in dlg.domains:
            continue
        for t in range(len(dlg.turns)):
            for name in schema.domains[domain]:
                out.append(((dlg.id, t, domain, name), dlg.turns[: t + 1], (domain, name)))
    return out


def predict_grid(backbone: BackboneParams, vocab: Vocab, pool: ExpertPool,
                 queries: Sequence, routes: dict[Slot, int]) -> dict[GridKey, Prediction]:
    by_expert: dict[int, list] = {}
    for key, history, slot in queries:
        by_expert.setdefault(routes[slot], []).append((key, history, slot))
    out = {}
    for k in sorted(by_expert):
        items = by_expert[k]
        preds = generate_values(backbone, vocab, pool.experts[k],
                                [(h, s) for _, h, s in items], expert_used=k)
        out.update({key: p for (key, _, _), p in zip(items, preds)})
    return {key: out[key] for key, _, _ in queries}


def prediction_records(preds: dict[GridKey, Prediction]) -> list[dict]:
    return [{"dialogue_id": k[0], "turn": k[1], "domain": k[2], "slot": k[3],
             "value": p.value, "expert_used": p.expert_used} for k, p in preds.items()]


def evaluate_pool(backbone: BackboneParams, vocab: Vocab, schema: Schema,
                  dialogues: Sequence[Dialogue], domain: str, pool: ExpertPool,
                  model: ClusterModel, routing: str, seed: int,
                  meta: dict | None = None) -> tuple[EvalReport, dict[GridKey, Prediction]]:
    queries = domain_queries(schema, dialogues, domain)
    if not queries:
        raise ContractError(f"no test dialogue involves {domain!r}")
    routes = route_slots(backbone, vocab, model, schema.slots([domain]), routing, seed, pool.k)
    preds = predict_grid(backbone, vocab, pool, queries, routes)
    golds = gold_grid(schema, dialogues, domain)
    # the routing name is left out so a K=1 pool reports identically under every routing
    info = {"domain": domain, "k": pool.k, "mode": model.mode, "seed": seed,
            "routes": {slot_text(s): k for s, k in routes.items()}}
    info.update(meta or {})
    report = build_report({k: p.value for k, p in preds.items()}, golds, info)
    return report, preds


# --- in-context baseline -----------------------------------------------------


def exemplar_pool(schema: Schema, dialogues: Sequence[Dialogue],
                  slots: Sequence[Slot] | None = None) -> list[Exemplar]:
    """Every (turn, slot) training example as an exemplar, optionally limited to ``slots``."""
    keep = None if slots is None else set(slots)
    out = []
    for dlg in dialogues:
        for t, turn in enumerate(dlg.turns):
            state = turn.state_dict()
            for slot in schema.slots(dlg.domains):
                if keep is None or slot in keep:
                    out.append(Exemplar(dlg.turns[: t + 1], slot, state.get(slot, "none")))
    return out


def evaluate_icl(backbone: BackboneParams, vocab: Vocab, schema: Schema,
                 train: Sequence[Dialogue], test: Sequence[Dialogue], domain: str, shots: int,
                 seed: int, model: ClusterModel | None = None) -> tuple[EvalReport, dict]:
    """Frozen backbone with ``shots`` exemplars before each query.

    With a cluster model the exemplars come from training slots in the query slot's
    cluster; otherwise from every training slot.
    """
    queries = domain_queries(schema, test, domain)
    if not queries:
        raise ContractError(f"no test dialogue involves {domain!r}")
    shots_for: dict[Slot, list[Exemplar]] = {}
    all_pool = exemplar_pool(schema, train) if model is None else None
    if model is not None:
        feats = featurize(backbone, vocab, schema.slots([domain]), model.mode)
    for slot in schema.slots([domain]):
        if model is None:
            pool = all_pool
        else:
            c = assign_nearest(model, next(f for f in feats if f.slot == slot))
            pool = exemplar_pool(schema, train, [s for s, k in model.assignments.items() if k == c])
        shots_for[slot] = select_exemplars(pool, shots, seed)
    preds, used = generate_icl_batch(backbone, vocab,
                                     [(shots_for[s], h, s) for _, h, s in queries])
    grid = {key: p for (key, _, _), p in zip(queries, preds)}
    golds = gold_grid(schema, test, domain)
    report = build_report({k: p.value for k, p in grid.items()}, golds,
                          {"domain": domain, "shots": shots, "seed": seed,
                           "mean_exemplars_used": sum(used) / len(used)})
    return report, grid


# --- sweeps ------------------------------------------------------------------


@dataclass
class SweepRow:
    mode: str
    k: int
    domain: str
    seed: int
    train_acs: float
    test_acs: float
    jga: float
    sa_with_none: float
    sa_without_none: float

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    model: ClusterModel
    pool: ExpertPool
    losses: list[dict]
    reports: dict[str, EvalReport] = field(default_factory=dict)  # by domain


def run_mope(backbone: BackboneParams, vocab: Vocab, schema: Schema, train: Sequence[Dialogue],
             test: Sequence[Dialogue], domains: Sequence[str], k: int, mode: str, seed: int,
             config: ExpertTrainConfig | None = None, pool: ExpertPool | None = None,
             losses: list[dict] | None = None) -> RunResult:
    """Cluster the training slots, train one expert per cluster (unless ``pool`` is
    given) and evaluate each of ``domains`` with specialized routing."""
    model = cluster_slots(backbone, vocab, schema, mode, k, seed)
    if pool is None:
        groups = cluster_examples(vocab, schema, train, model, backbone.config.max_context)
        pool, losses = train_pool(backbone, model, groups, seed, config)
    result = RunResult(model, pool, list(losses or []))
    for domain in domains:
        result.reports[domain], _ = evaluate_pool(backbone, vocab, schema, test, domain, pool,
                                                  model, "specialized", seed)
    return result


def sweep_clusters(backbone: BackboneParams, vocab: Vocab, schema: Schema,
                   train: Sequence[Dialogue], test: Sequence[Dialogue], domains: Sequence[str],
                   ks: Sequence[int], modes: Sequence[str], seeds: Sequence[int],
                   config: ExpertTrainConfig | None = None,
                   on_run: Callable[[int, str, int, RunResult], None] | None = None
                   ) -> list[SweepRow]:
    """Full pipeline for every (seed, mode, K); one row per evaluated domain.

    ``on_run(seed, mode, k, run)`` is called after each run, e.g. to save artifacts.

    With K=1 every training slot lands in the same cluster whatever the feature
    mode, so that pool is trained once per seed and shared across modes.
    """
    n_train = len(schema.train_slots())
    bad = [k for k in ks if not 1 <= k <= n_train]
    if bad:
        raise ContractError(f"K values {bad} outside [1, {n_train}]")
    rows = []
    for seed in seeds:
        single: RunResult | None = None
        for mode in modes:
            feats = {f.slot: f.vector for f in featurize(backbone, vocab, schema.slots(), mode)}
            for k in ks:
                log.info("sweep seed=%d mode=%s K=%d", seed, mode, k)
                shared = single if k == 1 and single is not None else None
                run = run_mope(backbone, vocab, schema, train, test, domains, k, mode, seed,
                               config, shared.pool if shared else None,
                               shared.losses if shared else None)
                if k == 1:
                    single = run
                if on_run is not None:
                    on_run(seed, mode, k, run)
                for domain in domains:
                    rep = run.reports[domain]
                    tr_acs, te_acs = average_cosine_similarity(feats, run.model,
                                                               schema.slots([domain]))
                    rows.append(SweepRow(mode, k, domain, seed, tr_acs, te_acs, rep.overall.jga,
                                         rep.overall.sa_with_none, rep.overall.sa_without_none))
    return rows


def spearman_by_group(rows: Sequence[SweepRow]) -> dict[str, float]:
    """Spearman correlation of test ACS against JGA across K, per (mode, domain, seed)."""
    from .evaluate import spearman

    groups: dict[str, list[SweepRow]] = {}
    for r in rows:
        groups.setdefault(f"{r.mode}/{r.domain}/{r.seed}", []).append(r)
    out = {}
    for name, rs in sorted(groups.items()):
        pts = [(r.test_acs, r.jga) for r in rs if not math.isnan(r.test_acs)]
        out[name] = spearman([p[0] for p in pts], [p[1] for p in pts]) if len(pts) >= 2 else math.nan
    return out
