import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mope.errors import ContractError
from mope.evaluate import (average_cosine_similarity, build_report, error_taxonomy,
                           heatmap_svg, joint_goal_accuracy, matrix_csv, similarity_matrix,
                           slot_accuracy, spearman, taxonomy_svg, vacuous_without_none)
from mope.routing import ClusterModel

from oracles import (acs_pairwise, cosine_loop, count_slot_accuracy, count_taxonomy,
                     set_equality_jga)

VALUES = ("none", "north", "south", "centre")


@st.composite
def grids(draw):
    n_dialogues = draw(st.integers(1, 3))
    slots = [f"s{i}" for i in range(draw(st.integers(1, 4)))]
    golds, preds = {}, {}
    for d in range(n_dialogues):
        for t in range(draw(st.integers(1, 3))):
            for s in slots:
                key = (f"d{d}", t, "hotel", s)
                golds[key] = draw(st.sampled_from(VALUES))
                preds[key] = draw(st.sampled_from(VALUES))
    return preds, golds


def grid(cells):
    """``cells``: list of (turn, slot, pred, gold)."""
    preds = {("x", t, "hotel", s): p for t, s, p, _ in cells}
    golds = {("x", t, "hotel", s): g for t, s, _, g in cells}
    return preds, golds


def test_perfect_predictions():
    p, g = grid([(0, "a", "north", "north"), (0, "b", "none", "none")])
    assert slot_accuracy(p, g) == slot_accuracy(p, g, False) == joint_goal_accuracy(p, g) == 1.0


def test_all_none_without_none_is_flagged_vacuous():
    p, g = grid([(0, "a", "none", "none"), (1, "a", "none", "none")])
    assert slot_accuracy(p, g, include_none=False) == 1.0
    assert vacuous_without_none(g)
    report = build_report(p, g)
    assert report.overall.sa_without_none_vacuous and report.warnings


def test_one_wrong_slot_breaks_the_turn():
    cells = [(0, s, "north", "north") for s in "abcd"] + [(0, "e", "south", "north")]
    assert joint_goal_accuracy(*grid(cells)) == 0.0


def test_taxonomy_definitions():
    p, g = grid([(0, "a", "none", "centre"), (0, "b", "centre", "none"),
                 (0, "c", "north", "centre"), (0, "d", "north", "north")])
    assert error_taxonomy(p, g) == {"partial": 1, "over": 1, "other": 1}


def test_missing_prediction_is_contract_error():
    p, g = grid([(0, "a", "none", "none")])
    g[("x", 0, "hotel", "b")] = "north"
    with pytest.raises(ContractError):
        slot_accuracy(p, g)


def test_matching_is_case_and_space_insensitive():
    p, g = grid([(0, "a", "Golden  House", "golden house")])
    assert slot_accuracy(p, g) == 1.0


@given(grids())
def test_metrics_match_counting_oracles(pg):
    p, g = pg
    assert slot_accuracy(p, g, True) == count_slot_accuracy(p, g, True)
    assert slot_accuracy(p, g, False) == count_slot_accuracy(p, g, False)
    assert joint_goal_accuracy(p, g) == set_equality_jga(p, g)
    assert error_taxonomy(p, g) == count_taxonomy(p, g)


@given(grids())
def test_report_invariants(pg):
    p, g = pg
    r = build_report(p, g)
    assert sum(r.error_counts.values()) == r.total_errors
    assert r.total_errors == sum(p[k] != g[k] for k in g)
    for s in [r.overall, *r.per_domain.values()]:
        assert s.jga <= s.sa_with_none + 1e-12
        assert 0 <= s.sa_without_none <= 1


@given(grids(), st.randoms())
def test_metrics_ignore_record_order(pg, rnd):
    p, g = pg
    keys = list(p)
    rnd.shuffle(keys)
    shuffled = {k: p[k] for k in keys}
    assert build_report(shuffled, g).to_json() == build_report(p, g).to_json()


def test_report_json_fields():
    doc = build_report(*grid([(0, "a", "north", "south")]), {"domain": "hotel"}).to_json()
    assert {"sa_with_none", "sa_without_none", "jga"} <= set(doc["overall"])
    assert set(doc["error_counts"]) == {"partial", "over", "other"}
    assert doc["meta"] == {"domain": "hotel"}


def model_for(assign, centroids):
    return ClusterModel(len(centroids), np.asarray(centroids, float), assign, "hidden", 0)


def test_acs_identical_features():
    f = {("a", "x"): np.ones(3), ("b", "x"): np.ones(3), ("t", "x"): np.ones(3)}
    m = model_for({("a", "x"): 0, ("b", "x"): 0}, [[1, 1, 1]])
    assert average_cosine_similarity(f, m, [("t", "x")]) == pytest.approx((1.0, 1.0))


def test_acs_orthogonal_pair():
    f = {("a", "x"): np.array([1.0, 0]), ("b", "x"): np.array([0.0, 1])}
    m = model_for({("a", "x"): 0, ("b", "x"): 0}, [[0.5, 0.5]])
    assert average_cosine_similarity(f, m, [])[0] == pytest.approx(0.0)


@given(st.integers(0, 10_000))
def test_acs_matches_pairwise_loop(seed):
    rng = np.random.default_rng(seed)
    train = [("d", f"s{i}") for i in range(6)]
    test = [("t", f"s{i}") for i in range(2)]
    f = {s: rng.standard_normal(4) for s in train + test}
    cents = rng.standard_normal((2, 4))
    assign = {s: int(rng.integers(2)) for s in train}
    m = model_for(assign, cents)
    tr, te = average_cosine_similarity(f, m, test)
    test_clusters = {s: int(np.argmin(((cents - f[s]) ** 2).sum(1))) for s in test}
    otr, ote = acs_pairwise(f, assign, test, test_clusters)
    for got, want in ((tr, otr), (te, ote)):
        assert (math.isnan(got) and math.isnan(want)) or got == pytest.approx(want, abs=1e-6)


def test_similarity_matrix_cases(rng):
    names, mat, flagged = similarity_matrix({("h", "a"): rng.standard_normal(3)})
    assert mat.tolist() == [[1.0]] and not flagged
    feats = {("d", f"s{i}"): rng.standard_normal(5) for i in range(3)}
    names, mat, _ = similarity_matrix(feats)
    assert names == ["d s0", "d s1", "d s2"]
    np.testing.assert_array_equal(mat, mat.T)
    np.testing.assert_allclose(np.diag(mat), 1.0, atol=1e-6)
    vs = list(feats.values())
    for i in range(3):
        for j in range(3):
            assert mat[i, j] == pytest.approx(cosine_loop(vs[i], vs[j]), abs=1e-6)


def test_zero_norm_feature_is_flagged():
    names, mat, flagged = similarity_matrix({("a", "x"): np.zeros(2), ("b", "y"): np.ones(2)})
    assert flagged == ["a x"] and mat[0, 1] == 0.0


def test_matrix_csv_is_symmetric_text(rng):
    names, mat, _ = similarity_matrix({("d", f"s{i}"): rng.standard_normal(4) for i in range(4)})
    rows = [line.split(",") for line in matrix_csv(names, mat).strip().splitlines()]
    assert rows[0] == ["slot", *names]
    body = [r[1:] for r in rows[1:]]
    assert all(body[i][j] == body[j][i] for i in range(4) for j in range(4))


def test_spearman():
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert math.isnan(spearman([1, 1, 1], [1, 2, 3]))


def test_svgs_are_well_formed():
    import xml.etree.ElementTree as ET

    ET.fromstring(taxonomy_svg({"a": {"partial": 2, "over": 0, "other": 1}}))
    ET.fromstring(heatmap_svg(["x a", "y b"], np.array([[1.0, 0.2], [0.2, 1.0]])))
