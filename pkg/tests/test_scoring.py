"""Scoring-harness tests: parsing, unit conversion, tolerance band, aggregation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geofuse.errors import DataError
from geofuse.scoring import (CATEGORIES, EvalRecord, Quantity, UNIT_FACTORS,
                             aggregate, parse_quantity, score, score_record,
                             to_meters)


# -- parsing -------------------------------------------------------------------


def test_parse_canonical_phrasing():
    q = parse_quantity("The table is about 1.2 meters wide.")
    assert q == Quantity(1.2, "meter")


def test_parse_first_number_wins():
    q = parse_quantity("roughly 45 cm, maybe 50")
    assert q == Quantity(45.0, "centimeter")


def test_parse_failure_without_numeral():
    assert parse_quantity("It is quite far away.") is None


def test_parse_failure_without_unit():
    assert parse_quantity("I would say 42, more or less.") is None


def test_parse_unit_must_follow_in_same_clause():
    # the unit appears only after a clause break: no parse
    assert parse_quantity("maybe 42, in meters that is") is None


def test_parse_unit_before_number_is_not_recognized():
    assert parse_quantity("cm: 45") is None


@pytest.mark.parametrize("text,value,unit", [
    ("45cm,", 45.0, "centimeter"),
    ("about 5ft.", 5.0, "foot"),
    ("12 in", 12.0, "inch"),
    ('roughly 30" wide', 30.0, "inch"),
    ("6' tall", 6.0, "foot"),
    ("2 yards away", 2.0, "yard"),
    ("1500 millimetres", 1500.0, "millimeter"),
    ("0.4 km", 0.4, "kilometer"),
    (".75 meters", 0.75, "meter"),
    ("-1.5 m (impossible but parseable)", -1.5, "meter"),
    ("It measures 3 metres exactly", 3.0, "meter"),
    ("around 7 feet or so", 7.0, "foot"),
])
def test_parse_variants(text, value, unit):
    q = parse_quantity(text)
    assert q is not None
    assert (q.value, q.unit) == (value, unit)


def test_parse_appending_words_preserves_result():
    base = "about 1.2 meters"
    q0 = parse_quantity(base)
    for suffix in (" wide", " wide or so", " and then some words"):
        assert parse_quantity(base + suffix) == q0


# -- unit conversion ----------------------------------------------------------------


def test_unit_factors_are_the_standard_definitions():
    assert UNIT_FACTORS == {"millimeter": 0.001, "centimeter": 0.01, "meter": 1.0,
                            "kilometer": 1000.0, "inch": 0.0254, "foot": 0.3048,
                            "yard": 0.9144}


@pytest.mark.parametrize("q,expected", [
    (Quantity(1.0, "meter"), 1.0),
    (Quantity(150, "centimeter"), 1.5),
    (Quantity(5, "foot"), 1.524),
    (Quantity(2, "yard"), 1.8288),
    (Quantity(10, "inch"), 0.254),
    (Quantity(2500, "millimeter"), 2.5),
    (Quantity(0.75, "kilometer"), 750.0),
])
def test_to_meters(q, expected):
    assert abs(to_meters(q) - expected) < 1e-12


def test_to_meters_is_linear_in_value():
    for unit, factor in UNIT_FACTORS.items():
        for value in (0.5, 2.0, 4.0):  # power-of-two scaling is float-exact
            assert to_meters(Quantity(value, unit)) / value == factor
        q = Quantity(3.7, unit)
        assert abs(to_meters(q) / q.value - factor) < 1e-15


def test_quantity_rejects_unknown_unit():
    with pytest.raises(DataError):
        Quantity(1.0, "furlong")


# -- tolerance band -------------------------------------------------------------------


def test_score_exact_match():
    assert score(2.0, 2.0)


def test_score_boundaries_inclusive():
    assert score(1.5, 2.0)      # ratio exactly 0.75
    assert score(2.5, 2.0)      # ratio exactly 1.25
    assert not score(1.4999, 2.0)
    assert not score(2.5001, 2.0)


def test_score_outside_band():
    assert not score(2.6, 2.0)  # ratio 1.3


def test_score_rejects_non_positive_ground_truth():
    with pytest.raises(DataError):
        score(1.0, 0.0)
    with pytest.raises(DataError):
        score(1.0, -2.0)


@given(st.floats(min_value=0.01, max_value=1000.0),
       st.floats(min_value=0.3, max_value=3.0),
       st.sampled_from([0.5, 2.0, 4.0, 8.0, 0.25]))
@settings(max_examples=200, deadline=None)
def test_score_scale_invariance(gt, ratio, k):
    # power-of-two scale factors keep the boundary arithmetic exact
    pred = gt * ratio
    assert score(pred, gt) == score(pred * k, gt * k)


# -- aggregation ---------------------------------------------------------------------


def make_records(spec):
    """spec: list of (category, gt_meters, answer_text)."""
    return [EvalRecord(id=f"r{i}", category=cat, gt=Quantity(gt, "meter"), answer=ans)
            for i, (cat, gt, ans) in enumerate(spec)]


def test_aggregate_all_correct():
    recs = [score_record(r) for r in make_records(
        [(cat, 2.0, "2.0 meters") for cat in CATEGORIES])]
    report = aggregate(recs)
    assert report.average_accuracy == 100.0
    for entry in report.per_category.values():
        assert entry["accuracy"] == 100.0
    assert report.parse_failures == 0


def test_aggregate_quarter_correct():
    recs = [score_record(r) for r in make_records([
        ("height", 2.0, "2.0 meters"),
        ("height", 2.0, "9.0 meters"),
        ("height", 2.0, "no idea"),
        ("height", 2.0, "0.1 meters"),
    ])]
    report = aggregate(recs)
    assert report.per_category["height"]["accuracy"] == 25.0
    assert report.average_accuracy == 25.0
    assert report.parse_failures == 1


def test_aggregate_empty_raises():
    with pytest.raises(DataError):
        aggregate([])


def test_aggregate_mixed_fixture_matches_bruteforce_tally():
    rng = np.random.default_rng(31)
    spec = []
    for i in range(50):
        cat = CATEGORIES[int(rng.integers(0, 5))]
        gt = float(rng.uniform(0.5, 5.0))
        style = rng.integers(0, 4)
        if style == 0:
            ans = f"{gt * float(rng.uniform(0.8, 1.2)):.3f} meters"
        elif style == 1:
            ans = f"{gt * 100 * float(rng.uniform(0.5, 1.6)):.1f} cm"
        elif style == 2:
            ans = f"{gt * float(rng.uniform(1.3, 3.0)):.3f} m"
        else:
            ans = "hard to say"
        spec.append((cat, gt, ans))
    recs = [score_record(r) for r in make_records(spec)]
    report = aggregate(recs)

    # independent tally
    totals = {c: [0, 0] for c in CATEGORIES}
    correct_all = failures = 0
    for cat, gt, ans in spec:
        q = parse_quantity(ans)
        ok = False
        if q is None:
            failures += 1
        else:
            m = to_meters(q)
            ok = 0.75 * gt <= m <= 1.25 * gt
        totals[cat][0] += 1
        if ok:
            totals[cat][1] += 1
            correct_all += 1

    assert report.parse_failures == failures
    assert abs(report.average_accuracy - 100.0 * correct_all / 50) < 1e-12
    for cat, (n, good) in totals.items():
        if n:
            assert report.per_category[cat]["total"] == n
            assert report.per_category[cat]["correct"] == good
    assert sum(e["total"] for e in report.per_category.values()) == report.total


def test_record_category_validation():
    with pytest.raises(DataError):
        EvalRecord(id="x", category="diagonal", gt=Quantity(1, "meter"), answer="1 m")
