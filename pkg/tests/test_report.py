from __future__ import annotations

import random
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bugimpact.report import (
    AGGREGATE_COLUMNS,
    ROW_COLUMNS,
    AggregateRow,
    ImpactRow,
    PackageRecord,
    ReportError,
    aggregate,
    build_row,
    format_percent,
    function_fraction,
    render,
)

from published_rows import FUZZERS, descriptor, load_rows, records

ROWS = {r.bug_id: r for r in load_rows()}


def _row(bug_id: str) -> ImpactRow:
    p = ROWS[bug_id]
    return build_row(descriptor(p), records(p), manual_rating=p.manual)


ALL_ROWS = [_row(b) for b in ROWS]


def test_fixture_has_45_bugs() -> None:
    assert len(ROWS) == 45
    assert sum(r.tool in FUZZERS for r in ROWS.values()) == 27


def test_row_27392() -> None:
    row = _row("27392")
    assert (row.builds_ok, row.reached_pkgs, row.triggered_pkgs, row.diff_pkgs,
            row.diff_functions, row.test_diffs) == (308, 205, 205, 202, 4997, 0)
    assert row.diff_function_fraction.text == "2.5%"


def test_zero_packages() -> None:
    row = build_row(descriptor(ROWS["27392"]), [])
    assert (row.builds_ok, row.reached_pkgs, row.triggered_pkgs, row.diff_pkgs,
            row.diff_functions, row.test_diffs) == (0, 0, 0, 0, 0, 0)


def test_three_synthetic_packages() -> None:
    bug = descriptor(ROWS["11964"])
    recs = [
        PackageRecord(bug.bug_id, "reached-only", True, reached_count=2),
        PackageRecord(bug.bug_id, "hit", True, reached_count=1, triggered_count=1, binary_diff=True,
                      differing_functions=3),
        PackageRecord(bug.bug_id, "untouched", True, binary_diff=False),
    ]
    row = build_row(bug, recs)
    assert (row.builds_ok, row.reached_pkgs, row.triggered_pkgs, row.diff_pkgs) == (3, 2, 1, 1)


def test_mixed_bugs_rejected() -> None:
    bug = descriptor(ROWS["11964"])
    with pytest.raises(ReportError, match="mixed"):
        build_row(bug, [PackageRecord("other", "p", True)])


def test_precise_bug_diff_without_trigger() -> None:
    precise = next(r for r in ROWS.values() if r.precise)
    bug = descriptor(precise)
    recs = [PackageRecord(bug.bug_id, "p", True, reached_count=1, binary_diff=True)]
    with pytest.raises(ReportError):
        build_row(bug, recs)
    row = build_row(bug, recs, strict=False)
    assert row.diff_pkgs == 1 and row.anomalies


def test_imprecise_bug_diff_without_trigger_is_soft() -> None:
    bug = descriptor(ROWS["11964"])
    row = build_row(bug, [PackageRecord(bug.bug_id, "p", True, binary_diff=True)])
    assert row.anomalies


def test_test_diff_needs_binary_diff() -> None:
    bug = descriptor(ROWS["11964"])
    with pytest.raises(ReportError):
        build_row(bug, [PackageRecord(bug.bug_id, "p", True, divergence="divergent")])


def test_symbolless_packages_excluded_from_functions() -> None:
    bug = descriptor(ROWS["11964"])
    recs = [
        PackageRecord(bug.bug_id, "a", True, 1, 1, True, True, 10),
        PackageRecord(bug.bug_id, "b", True, 1, 1, True, False, 99),
    ]
    row = build_row(bug, recs)
    assert (row.diff_pkgs, row.diff_functions, row.symbolless_diff_pkgs) == (2, 10, 1)
    only = build_row(bug, recs[1:])
    assert only.diff_function_fraction.text == "-"


def test_failed_builds_excluded() -> None:
    bug = descriptor(ROWS["11964"])
    row = build_row(bug, [PackageRecord(bug.bug_id, "p", False, 1, 1, True)])
    assert row.builds_ok == row.reached_pkgs == row.diff_pkgs == 0


@pytest.mark.parametrize(
    "num, den, text",
    [
        (4997, 202000, "2.5%"),
        (0, 202000, "0%"),
        (52, 202000, "<0.1%"),
        (202, 202000, "0.1%"),
        (1, 1000, "0.1%"),
        (999, 1000000, "<0.1%"),
    ],
)
def test_function_fraction(num: int, den: int, text: str) -> None:
    assert function_fraction(num, den).text == text


def test_function_fraction_unknown_and_invalid() -> None:
    assert function_fraction(5, None).text == "-"
    with pytest.raises(ValueError):
        function_fraction(1, 0)


@pytest.mark.parametrize(
    "num, den, text",
    [
        (2482, 3062, "81%"),
        (8, 1535, "1%"),
        (0, 615, "0%"),
        (1, 3076, "<0.1%"),
        (1, 2, "50%"),
        (1, 200, "1%"),
        (4, 1000, "0.4%"),
        (3, 1000, "0.3%"),
        (5, 0, "-"),
    ],
)
def test_format_percent(num: int, den: int, text: str) -> None:
    assert format_percent(num, den) == text


@given(st.integers(0, 10_000), st.integers(1, 10_000))
def test_percent_bounds(num: int, extra: int) -> None:
    den = num + extra
    text = format_percent(num, den)
    assert text.endswith("%")
    f = Fraction(num, den)
    assert (text == "<0.1%") == (0 < f < Fraction(1, 1000))
    if text != "<0.1%":
        assert 0 <= float(text[:-1]) <= 100
    assert (text == "0%") == (num == 0)


def test_csmith_aggregate_integers() -> None:
    (csmith,) = [a for a in aggregate(ALL_ROWS, "tool") if a.group_key == "csmith"]
    assert (csmith.builds_ok, csmith.reached_pkgs, csmith.diff_pkgs, csmith.test_diffs) == (3062, 2482, 318, 0)
    assert csmith.percent("reached_pkgs") == "81%"
    assert csmith.percent("triggered_pkgs") == "34%"
    assert csmith.percent("diff_pkgs") == "10%"


def test_csmith_bug_level_counts() -> None:
    (csmith,) = [a for a in aggregate(ALL_ROWS, "tool") if a.group_key == "csmith"]
    assert csmith.bugs == 10
    assert csmith.bug_counts == {"reached": 10, "triggered": 10, "precise": 1, "diff": 7, "test_diff": 0}
    text = render([csmith], "csv")
    assert text.splitlines()[1].endswith(",10,10,1,7,0")


def test_fuzzer_bug_level_totals() -> None:
    fuzz = [r for r in ALL_ROWS if r.tool_family in FUZZERS]
    (total,) = aggregate(fuzz, "all")
    assert total.bugs == 27
    assert total.bug_counts["triggered"] == 22
    assert total.bug_counts["diff"] == 12
    assert total.bug_counts["test_diff"] == 1


def test_singleton_group() -> None:
    row = _row("27392")
    (agg,) = aggregate([row], "bug")
    assert (agg.builds_ok, agg.reached_pkgs, agg.diff_functions) == (row.builds_ok, row.reached_pkgs, 4997)
    assert agg.percent("reached_pkgs") == format_percent(205, 308)


@given(st.randoms(use_true_random=False))
def test_aggregate_order_independent(rnd: random.Random) -> None:
    shuffled = list(ALL_ROWS)
    rnd.shuffle(shuffled)
    for key in ("tool", "severity", "all"):
        assert aggregate(shuffled, key) == aggregate(ALL_ROWS, key)


def test_reconcile_detects_tampering() -> None:
    (agg,) = aggregate(ALL_ROWS, "all")
    bad = AggregateRow(**{**agg.__dict__, "diff_pkgs": agg.diff_pkgs + 1})
    with pytest.raises(ReportError):
        bad.reconcile()
    with pytest.raises(ReportError):
        render([bad])


def test_render_empty_and_one_row_csv() -> None:
    assert render([], "csv") == ",".join(ROW_COLUMNS) + "\n"
    assert render([], "markdown").count("\n") == 2
    text = render([_row("27392")], "csv")
    lines = text.split("\n")
    assert lines[0] == "bug_id,severity,builds_ok,reached,triggered,precision,diff_pkgs,diff_functions,diff_fraction,test_diffs,manual_rating"
    assert len(text.splitlines()) == 2 and text.endswith("\n") and "\r" not in text
    assert lines[1].startswith("27392,")
    assert ",202,4997,2.5%,0," in lines[1]


def test_render_dashes_for_absent_values() -> None:
    row = _row("12885")
    cells = render([row], "csv").splitlines()[1].split(",")
    named = dict(zip(ROW_COLUMNS, cells))
    assert named["diff_pkgs"] == "0"
    assert named["diff_functions"] == named["diff_fraction"] == named["test_diffs"] == "-"
    assert named["manual_rating"] == "-"


def test_render_aggregate_header() -> None:
    text = render(aggregate(ALL_ROWS, "severity"), "csv")
    assert text.splitlines()[0] == ",".join(AGGREGATE_COLUMNS)
    assert [ln.split(",")[0] for ln in text.splitlines()[1:]] == ["enhancement", "normal", "release_blocker"]


def test_render_deterministic() -> None:
    assert render(aggregate(ALL_ROWS, "tool")) == render(aggregate(list(reversed(ALL_ROWS)), "tool"))


def test_unknown_format() -> None:
    with pytest.raises(ValueError):
        render([_row("27392")], "html")


def test_record_round_trip() -> None:
    rec = PackageRecord("b", "p", True, 3, 1, True, True, 7, "divergent", ("x",))
    assert PackageRecord.from_json(rec.to_json()) == rec
