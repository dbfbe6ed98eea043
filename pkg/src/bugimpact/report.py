"""Impact tables: per-bug rows, grouped aggregates and their rendering.

Percentages are computed on exact rationals and rounded half away from
zero. Two display rules apply:

* aggregate percentages are whole percents; a nonzero value below 0.1%
  shows as ``<0.1%``, and a value that would round to ``0%`` while being
  at least 0.1% keeps one decimal;
* function fractions use one decimal, ``<0.1%`` below 0.1%, and ``0%``
  only when no function differs.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from typing import Any, Iterable, Sequence

from .toolchain import BugDescriptor, Precision

DEFAULT_FUNCTION_TOTAL = 202_000
_TENTH = Fraction(1, 1000)

ROW_COLUMNS = (
    "bug_id", "severity", "builds_ok", "reached", "triggered", "precision",
    "diff_pkgs", "diff_functions", "diff_fraction", "test_diffs", "manual_rating",
)
AGGREGATE_COLUMNS = (
    "group", "bugs", "builds_ok", "reached", "reached_pct", "triggered", "triggered_pct",
    "diff_pkgs", "diff_pkgs_pct", "diff_functions", "diff_fraction", "test_diffs",
    "test_diffs_pct", "bugs_reached", "bugs_triggered", "bugs_precise", "bugs_diff",
    "bugs_test_diff",
)


class ReportError(ValueError):
    pass


def _round_half_up(x: Fraction, places: int = 0) -> Decimal:
    d = Decimal(x.numerator) / Decimal(x.denominator)
    return d.quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP)


def format_percent(numerator: int, denominator: int) -> str:
    """Whole-percent display of ``numerator / denominator``."""
    if denominator <= 0:
        return "-"
    frac = Fraction(numerator, denominator)
    if frac == 0:
        return "0%"
    if frac < _TENTH:
        return "<0.1%"
    whole = _round_half_up(frac * 100)
    if whole == 0:
        return f"{_round_half_up(frac * 100, 1)}%"
    return f"{whole}%"


@dataclass(frozen=True)
class FunctionFraction:
    value: Fraction | None

    @property
    def text(self) -> str:
        if self.value is None:
            return "-"
        if self.value == 0:
            return "0%"
        if self.value < _TENTH:
            return "<0.1%"
        return f"{_round_half_up(self.value * 100, 1)}%"

    def __str__(self) -> str:
        return self.text


def function_fraction(diff_functions: int, total_functions: int | None) -> FunctionFraction:
    if total_functions is None:
        return FunctionFraction(None)
    if total_functions <= 0:
        raise ValueError("total_functions must be positive")
    return FunctionFraction(Fraction(diff_functions, total_functions))


@dataclass(frozen=True)
class PackageRecord:
    """Everything the report needs about one (bug, package) pair."""

    bug_id: str
    package: str
    builds_ok: bool
    reached_count: int = 0
    triggered_count: int = 0
    binary_diff: bool | None = None
    symbols_available: bool = True
    differing_functions: int = 0
    divergence: str | None = None
    anomalies: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        d = dict(self.__dict__)
        d["anomalies"] = list(self.anomalies)
        return d

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> PackageRecord:
        obj = dict(obj)
        obj["anomalies"] = tuple(obj.get("anomalies", ()))
        return cls(**obj)


@dataclass(frozen=True)
class ImpactRow:
    bug_id: str
    tool_family: str
    severity: str
    precision: str
    builds_ok: int = 0
    reached_pkgs: int = 0
    triggered_pkgs: int = 0
    diff_pkgs: int = 0
    diff_functions: int = 0
    symbolless_diff_pkgs: int = 0
    test_diffs: int = 0
    manual_rating: str | None = None
    function_total: int | None = DEFAULT_FUNCTION_TOTAL
    anomalies: tuple[str, ...] = ()

    @property
    def diff_function_fraction(self) -> FunctionFraction:
        if self.diff_pkgs == 0 or self.diff_pkgs == self.symbolless_diff_pkgs:
            return FunctionFraction(None)
        return function_fraction(self.diff_functions, self.function_total)

    @property
    def precise(self) -> bool:
        return self.precision == Precision.PRECISE.value


def build_row(
    bug: BugDescriptor,
    records: Iterable[PackageRecord],
    *,
    manual_rating: str | None = None,
    function_total: int | None = DEFAULT_FUNCTION_TOTAL,
    strict: bool = True,
) -> ImpactRow:
    """Count one bug's packages at each stage.

    ``strict`` turns more diff packages than triggered packages into an
    error for a bug with precise conditions; otherwise it is only noted.
    """
    builds_ok = reached = triggered = diff_pkgs = diff_functions = symbolless = test_diffs = 0
    anomalies: list[str] = []
    for r in records:
        if r.bug_id != bug.bug_id:
            raise ReportError(f"record for bug {r.bug_id} mixed into bug {bug.bug_id}")
        if not r.builds_ok:
            continue
        builds_ok += 1
        reached += r.reached_count >= 1
        triggered += r.triggered_count >= 1
        if r.triggered_count > r.reached_count:
            anomalies.append(f"{r.package}: triggered_count exceeds reached_count")
        if r.binary_diff:
            diff_pkgs += 1
            if r.symbols_available:
                diff_functions += r.differing_functions
            else:
                symbolless += 1
        if r.divergence == "divergent":
            test_diffs += 1
    if triggered > reached:
        anomalies.append("more packages triggered than reached")
    if diff_pkgs > triggered:
        msg = f"bug {bug.bug_id}: {diff_pkgs} packages differ but only {triggered} triggered"
        if strict and bug.precision is Precision.PRECISE:
            raise ReportError(msg)
        anomalies.append(msg)
    if test_diffs > diff_pkgs:
        raise ReportError(f"bug {bug.bug_id}: test divergence without a binary difference")
    return ImpactRow(
        bug_id=bug.bug_id,
        tool_family=bug.tool_family.value,
        severity=bug.severity.value,
        precision=bug.precision.value,
        builds_ok=builds_ok,
        reached_pkgs=reached,
        triggered_pkgs=triggered,
        diff_pkgs=diff_pkgs,
        diff_functions=diff_functions,
        symbolless_diff_pkgs=symbolless,
        test_diffs=test_diffs,
        manual_rating=manual_rating,
        function_total=function_total,
        anomalies=tuple(anomalies),
    )


_SUMMED = ("builds_ok", "reached_pkgs", "triggered_pkgs", "diff_pkgs", "diff_functions", "test_diffs")


@dataclass(frozen=True)
class AggregateRow:
    group_key: str
    members: tuple[ImpactRow, ...]
    builds_ok: int
    reached_pkgs: int
    triggered_pkgs: int
    diff_pkgs: int
    diff_functions: int
    test_diffs: int
    function_total: int | None = DEFAULT_FUNCTION_TOTAL
    bug_counts: dict[str, int] = field(default_factory=dict)

    @property
    def bugs(self) -> int:
        return len(self.members)

    def percent(self, name: str) -> str:
        return format_percent(getattr(self, name), self.builds_ok)

    @property
    def diff_function_fraction(self) -> FunctionFraction:
        """Differing functions over all functions of the bugs that caused any.

        Each bug with measured differences contributes one corpus-wide
        function total to the denominator.
        """
        bugs = [m for m in self.members if m.diff_function_fraction.value is not None]
        if not bugs or self.function_total is None:
            return FunctionFraction(None)
        return function_fraction(self.diff_functions, len(bugs) * self.function_total)

    def reconcile(self) -> None:
        for name in _SUMMED:
            expected = sum(getattr(m, name) for m in self.members)
            if getattr(self, name) != expected:
                raise ReportError(f"group {self.group_key}: {name} {getattr(self, name)} != {expected}")
        if self.bug_counts != _bug_counts(self.members):
            raise ReportError(f"group {self.group_key}: bug-level counts do not reconcile")


def _bug_counts(rows: Sequence[ImpactRow]) -> dict[str, int]:
    return {
        "reached": sum(r.reached_pkgs >= 1 for r in rows),
        "triggered": sum(r.triggered_pkgs >= 1 for r in rows),
        "precise": sum(r.triggered_pkgs >= 1 and r.precise for r in rows),
        "diff": sum(r.diff_pkgs >= 1 for r in rows),
        "test_diff": sum(r.test_diffs >= 1 for r in rows),
    }


GROUPINGS = ("bug", "tool", "severity", "all")


def group_key(row: ImpactRow, key: str) -> str:
    if key == "tool":
        return row.tool_family
    if key == "severity":
        return row.severity
    if key == "bug":
        return row.bug_id
    if key == "all":
        return "ALL"
    raise ValueError(f"unknown grouping {key!r}")


def aggregate(rows: Iterable[ImpactRow], key: str) -> list[AggregateRow]:
    """Sum rows per group. Groups come out sorted by key, members by bug id,
    so the result does not depend on input order."""
    groups: dict[str, list[ImpactRow]] = {}
    for r in rows:
        groups.setdefault(group_key(r, key), []).append(r)
    out = []
    for k in sorted(groups):
        members = tuple(sorted(groups[k], key=lambda r: r.bug_id))
        totals = {name: sum(getattr(m, name) for m in members) for name in _SUMMED}
        function_totals = {m.function_total for m in members}
        out.append(
            AggregateRow(
                group_key=k,
                members=members,
                function_total=function_totals.pop() if len(function_totals) == 1 else None,
                bug_counts=_bug_counts(members),
                **totals,
            )
        )
    return out


def _dash(value: Any) -> str:
    return "-" if value is None else str(value)


def row_cells(row: ImpactRow) -> list[str]:
    no_stage3 = row.diff_pkgs == 0
    return [
        row.bug_id,
        row.severity,
        str(row.builds_ok),
        str(row.reached_pkgs),
        str(row.triggered_pkgs),
        row.precision,
        str(row.diff_pkgs),
        str(row.diff_functions) if row.diff_pkgs else "-",
        row.diff_function_fraction.text,
        "-" if no_stage3 else str(row.test_diffs),
        _dash(row.manual_rating),
    ]


def aggregate_cells(agg: AggregateRow) -> list[str]:
    c = agg.bug_counts
    return [
        agg.group_key,
        str(agg.bugs),
        str(agg.builds_ok),
        str(agg.reached_pkgs),
        agg.percent("reached_pkgs"),
        str(agg.triggered_pkgs),
        agg.percent("triggered_pkgs"),
        str(agg.diff_pkgs),
        agg.percent("diff_pkgs"),
        str(agg.diff_functions),
        agg.diff_function_fraction.text,
        str(agg.test_diffs),
        agg.percent("test_diffs"),
        str(c["reached"]),
        str(c["triggered"]),
        str(c["precise"]),
        str(c["diff"]),
        "-" if c["diff"] == 0 else str(c["test_diff"]),
    ]


def render(table: Sequence[ImpactRow] | Sequence[AggregateRow], format: str = "markdown",
           *, aggregated: bool | None = None) -> str:
    """Render rows as markdown or CSV (LF newlines, ``-`` for absent values).

    Aggregate rows are reconciled against their members first.
    """
    if aggregated is None:
        aggregated = bool(table) and isinstance(table[0], AggregateRow)
    if aggregated:
        for agg in table:
            agg.reconcile()  # type: ignore[union-attr]
        header, rows = AGGREGATE_COLUMNS, [aggregate_cells(a) for a in table]  # type: ignore[arg-type]
    else:
        header, rows = ROW_COLUMNS, [row_cells(r) for r in table]  # type: ignore[arg-type]
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if format == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(cells) + " |" for cells in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown format {format!r}")
