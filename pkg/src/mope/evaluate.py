"""Slot accuracy, joint goal accuracy, error taxonomy and slot-similarity analyses.

Predictions and golds are grids: mappings from ``(dialogue_id, turn, domain, slot)``
to a value string, where ``"none"`` marks an unfilled slot.
"""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import NONE_VALUE, Dialogue, Schema, Slot, normalize_text, slot_text
from .errors import ContractError
from .routing import ClusterModel, assign_nearest

GridKey = tuple[str, int, str, str]
Grid = Mapping[GridKey, str]


def gold_grid(schema: Schema, dialogues: Sequence[Dialogue], domain: str) -> dict[GridKey, str]:
    """Every turn of every dialogue touching ``domain``, over all of that domain's slots."""
    grid = {}
    for dlg in dialogues:
        if domain not in dlg.domains:
            continue
        for t, turn in enumerate(dlg.turns):
            state = turn.state_dict()
            for slot in schema.domains[domain]:
                grid[(dlg.id, t, domain, slot)] = state.get((domain, slot), NONE_VALUE)
    return grid


def _pairs(preds: Grid, golds: Grid):
    missing = [k for k in golds if k not in preds]
    if missing:
        raise ContractError(f"{len(missing)} grid cells have no prediction, e.g. {missing[0]}")
    for key, gold in golds.items():
        yield key, normalize_text(preds[key]), normalize_text(gold)


def slot_accuracy(preds: Grid, golds: Grid, include_none: bool = True) -> float:
    """Exact-match rate over cells; without ``include_none`` only gold-filled cells count.

    An empty denominator yields 1.0 (see :func:`vacuous_without_none`).
    """
    hit = total = 0
    for _, p, g in _pairs(preds, golds):
        if not include_none and g == NONE_VALUE:
            continue
        total += 1
        hit += p == g
    return hit / total if total else 1.0


def vacuous_without_none(golds: Grid) -> bool:
    return all(normalize_text(g) == NONE_VALUE for g in golds.values())


def joint_goal_accuracy(preds: Grid, golds: Grid) -> float:
    turns: dict[tuple[str, int], bool] = {}
    for key, p, g in _pairs(preds, golds):
        turn = key[:2]
        turns[turn] = turns.get(turn, True) and p == g
    return sum(turns.values()) / len(turns) if turns else 1.0


def error_taxonomy(preds: Grid, golds: Grid) -> dict[str, int]:
    """Partial (missed a value), over (invented a value), other (wrong value)."""
    counts = {"partial": 0, "over": 0, "other": 0}
    for _, p, g in _pairs(preds, golds):
        if p == g:
            continue
        if p == NONE_VALUE:
            counts["partial"] += 1
        elif g == NONE_VALUE:
            counts["over"] += 1
        else:
            counts["other"] += 1
    return counts


@dataclass
class DomainScores:
    sa_with_none: float
    sa_without_none: float
    jga: float
    turns: int
    cells: int
    filled_cells: int
    sa_without_none_vacuous: bool


@dataclass
class EvalReport:
    overall: DomainScores
    per_domain: dict[str, DomainScores]
    error_counts: dict[str, int]
    total_errors: int
    meta: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "overall": asdict(self.overall),
            "per_domain": {d: asdict(s) for d, s in sorted(self.per_domain.items())},
            "error_counts": dict(self.error_counts),
            "total_errors": self.total_errors,
            "meta": self.meta,
            "warnings": list(self.warnings),
        }


def _scores(preds: Grid, golds: Grid) -> DomainScores:
    return DomainScores(
        sa_with_none=slot_accuracy(preds, golds, True),
        sa_without_none=slot_accuracy(preds, golds, False),
        jga=joint_goal_accuracy(preds, golds),
        turns=len({k[:2] for k in golds}),
        cells=len(golds),
        filled_cells=sum(normalize_text(g) != NONE_VALUE for g in golds.values()),
        sa_without_none_vacuous=vacuous_without_none(golds),
    )


def build_report(preds: Grid, golds: Grid, meta: dict | None = None) -> EvalReport:
    by_domain: dict[str, dict] = defaultdict(dict)
    for key, g in golds.items():
        by_domain[key[2]][key] = g
    per_domain = {d: _scores(preds, sub) for d, sub in by_domain.items()}
    overall = _scores(preds, golds)
    counts = error_taxonomy(preds, golds)
    total = sum(normalize_text(preds[k]) != normalize_text(g) for k, g in golds.items())
    warnings = [f"{d}: no filled gold cells, SA without none reported as 1.0"
                for d, s in sorted(per_domain.items()) if s.sa_without_none_vacuous]
    return EvalReport(overall, per_domain, counts, total, dict(meta or {}), warnings)


# --- slot similarity -------------------------------------------------------


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass
class AcsEntry:
    domain: str
    k: int
    train_acs: float
    test_acs: float
    jga: float | None = None


def average_cosine_similarity(features: Mapping[Slot, np.ndarray], model: ClusterModel,
                              test_slots: Sequence[Slot]) -> tuple[float, float]:
    """(train ACS, test ACS).

    Train ACS pools every unordered pair of train slots sharing a cluster. Test ACS
    pools every (test slot, train slot in the test slot's nearest cluster) pair.
    """
    members: dict[int, list[Slot]] = defaultdict(list)
    for slot, c in model.assignments.items():
        members[c].append(slot)
    train_sims = []
    for c in sorted(members):
        group = members[c]
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                train_sims.append(cosine(features[group[i]], features[group[j]]))
    test_sims = []
    for slot in test_slots:
        c = assign_nearest(model, np.asarray(features[slot], dtype=np.float64))
        test_sims.extend(cosine(features[slot], features[m]) for m in members.get(c, []))
    train_acs = float(np.mean(train_sims)) if train_sims else math.nan
    test_acs = float(np.mean(test_sims)) if test_sims else math.nan
    return train_acs, test_acs


def similarity_matrix(features: Mapping[Slot, np.ndarray]) -> tuple[list[str], np.ndarray, list[str]]:
    """Pairwise cosine matrix; zero-norm features get cosine 0 and are listed as flagged."""
    if not features:
        raise ContractError("similarity matrix needs at least one feature")
    names = [slot_text(s) for s in features]
    vecs = [np.asarray(v, dtype=np.float64) for v in features.values()]
    n = len(vecs)
    mat = np.eye(n)
    flagged = [names[i] for i, v in enumerate(vecs) if np.linalg.norm(v) == 0.0]
    for i in range(n):
        if names[i] in flagged:
            mat[i, i] = 0.0
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = cosine(vecs[i], vecs[j])
    return names, mat, flagged


def matrix_csv(names: Sequence[str], mat: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["slot", *names])
    for name, row in zip(names, mat):
        w.writerow([name, *(f"{x:.6f}" for x in row)])
    return buf.getvalue()


def rows_csv(rows: Sequence[Mapping], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    from scipy.stats import spearmanr

    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return math.nan
    return float(spearmanr(x, y).statistic)


# --- figures ---------------------------------------------------------------


def taxonomy_svg(counts: Mapping[str, Mapping[str, int]], title: str = "slot errors") -> str:
    """Grouped bars: one group per error type, one bar per labelled run."""
    kinds = ["partial", "over", "other"]
    runs = list(counts)
    colors = ["#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3"]
    top = max([1] + [c[k] for c in counts.values() for k in kinds])
    width, height, pad = 120 * len(kinds) + 80, 260, 40
    bar = 80 / max(1, len(runs))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{pad}" y="20" font-size="14">{title}</text>']
    for gi, kind in enumerate(kinds):
        x0 = pad + gi * 120
        for ri, run in enumerate(runs):
            v = counts[run][kind]
            h = 180 * v / top
            x = x0 + ri * bar
            parts.append(f'<rect x="{x:.1f}" y="{220 - h:.1f}" width="{bar - 2:.1f}" '
                         f'height="{h:.1f}" fill="{colors[ri % len(colors)]}"/>')
            parts.append(f'<text x="{x:.1f}" y="{215 - h:.1f}" font-size="10">{v}</text>')
        parts.append(f'<text x="{x0}" y="240" font-size="12">{kind}</text>')
    for ri, run in enumerate(runs):
        parts.append(f'<text x="{width - 70}" y="{40 + 14 * ri}" font-size="11" '
                     f'fill="{colors[ri % len(colors)]}">{run}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def heatmap_svg(names: Sequence[str], mat: np.ndarray, cell: int = 14) -> str:
    n = len(names)
    margin = 8 * max(len(s) for s in names) + 10
    size = margin + n * cell + 10
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">']
    for i in range(n):
        parts.append(f'<text x="{margin - 4}" y="{margin + i * cell + cell - 3}" font-size="9" '
                     f'text-anchor="end">{names[i]}</text>')
        parts.append(f'<text x="0" y="0" font-size="9" transform="translate('
                     f'{margin + i * cell + cell - 3},{margin - 4}) rotate(-90)">{names[i]}</text>')
        for j in range(n):
            v = float(np.clip((mat[i, j] + 1) / 2, 0, 1))
            shade = int(255 * (1 - v))
            parts.append(f'<rect x="{margin + j * cell}" y="{margin + i * cell}" width="{cell}" '
                         f'height="{cell}" fill="rgb(255,{shade},{shade})"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
