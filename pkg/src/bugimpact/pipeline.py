"""Staged runs over a corpus and the on-disk record store.

Layout of a run directory::

    <run_dir>/<bug>/bug.json
    <run_dir>/<bug>/anomalies.json
    <run_dir>/<bug>/<pkg>/record.json
    <run_dir>/<bug>/<pkg>/<role>/{build.log,outcome.json,artifacts/}
    <run_dir>/<bug>/<pkg>/stage2/{<artifact>.json,summary.json}
    <run_dir>/<bug>/<pkg>/stage3/{verdict.json,tests/,worksheet.md,worksheet.json}

Each (bug, package) subtree is written by exactly one worker. Build
outcomes and test verdicts already on disk are reused, so rerunning the
same configuration rederives identical records.
"""

from __future__ import annotations

import json
import os
import shutil
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .asmdiff import (
    DEFAULT_DISASSEMBLER_CMD,
    ArtifactSetDiff,
    BinaryDiffReport,
    diff_artifact_sets,
    has_symbols,
    load_functions,
    parse_functions,
    write_reports,
)
from .builder import (
    DEFAULT_BUILD_TIMEOUT,
    BuildOutcome,
    WorkdirPolicy,
    build_package,
    read_outcome,
    write_outcome,
)
from .corpus import CorpusManifest, PackageSpec, load_manifest
from .dyncompare import (
    DEFAULT_RERUN_COUNT,
    DEFAULT_TEST_TIMEOUT,
    Classification,
    DivergenceVerdict,
    ImpactRating,
    assess_divergence,
    emit_worksheet,
    run_tests,
    write_worksheets,
)
from .report import DEFAULT_FUNCTION_TOTAL, ImpactRow, PackageRecord, build_row
from .toolchain import (
    BugDescriptor,
    Precision,
    Role,
    bug_from_json,
    load_bug,
    WitnessCompileError,
    validate_variant,
    witness_sanity_check,
)

ALL_STAGES = frozenset({1, 2, 3})


class ConfigError(ValueError):
    """Invalid run configuration; raised before any build starts."""


def _dump(obj: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


@dataclass
class RunConfig:
    run_dir: Path
    bug_file: Path
    manifest_file: Path
    stages: frozenset[int] = ALL_STAGES
    parallelism: int = 1
    rerun_count: int = DEFAULT_RERUN_COUNT
    build_timeout: float = DEFAULT_BUILD_TIMEOUT
    test_timeout: float = DEFAULT_TEST_TIMEOUT
    disassembler_cmd: str = DEFAULT_DISASSEMBLER_CMD
    seed: int = 0
    sample_size: int = 10
    workdir_root: Path | None = None
    dry_run: bool = False

    def validate(self) -> None:
        if not self.stages or not self.stages <= ALL_STAGES:
            raise ConfigError(f"stages must be a nonempty subset of 1,2,3, got {sorted(self.stages)}")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be positive")
        if self.rerun_count < 1:
            raise ConfigError("rerun_count must be positive")
        if self.sample_size < 0:
            raise ConfigError("sample_size must be >= 0")
        for path, what in ((self.bug_file, "bug file"), (self.manifest_file, "manifest")):
            if not Path(path).is_file():
                raise ConfigError(f"{what} {path} does not exist")


@dataclass
class PackageResult:
    record: PackageRecord
    progress: str


@dataclass
class RunSummary:
    bug_id: str
    row: ImpactRow
    builds: dict[str, int]
    anomalies: list[dict[str, str]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        r = self.row
        return {
            "bug_id": self.bug_id,
            "builds_ok_by_variant": self.builds,
            "builds_ok": r.builds_ok,
            "reached": r.reached_pkgs,
            "triggered": r.triggered_pkgs,
            "diff_pkgs": r.diff_pkgs,
            "diff_functions": r.diff_functions,
            "test_diffs": r.test_diffs,
            "anomalies": len(self.anomalies),
        }


class Pipeline:
    def __init__(self, config: RunConfig, progress: Callable[[str], None] | None = None) -> None:
        self.config = config
        self._lock = threading.Lock()
        self._progress = progress or (lambda line: print(line, file=sys.stderr, flush=True))
        self.bug: BugDescriptor
        self.manifest: CorpusManifest

    # -- setup -----------------------------------------------------------
    def prepare(self) -> None:
        """Load and check everything; raises ConfigError before any build."""
        cfg = self.config
        cfg.validate()
        try:
            self.bug = load_bug(cfg.bug_file)
            self.manifest = load_manifest(cfg.manifest_file)
        except (ValueError, OSError) as exc:
            raise ConfigError(str(exc)) from exc
        self._check_stage_prerequisites()
        roles = self._required_roles()
        for role in sorted(roles, key=lambda r: r.value):
            report = validate_variant(self.bug.variant(role))
            if not report.runs:
                raise ConfigError(
                    f"{role.value} compiler {report.variant_id} unusable: {report.reason} {report.detail}".strip()
                )
        if self.bug.witness_path is not None:
            try:
                result = witness_sanity_check(self.bug, timeout=cfg.build_timeout)
            except WitnessCompileError as exc:
                raise ConfigError(str(exc)) from exc
            if not result.passed:
                raise ConfigError(
                    f"witness sanity check failed for bug {self.bug.bug_id}: "
                    f"reached={result.reached} triggered={result.triggered}"
                )

    def _required_roles(self) -> set[Role]:
        roles = set()
        if 1 in self.config.stages:
            roles.add(Role.WARNING_LADEN)
        if self.config.stages & {2, 3}:
            roles |= {Role.BUGGY, Role.FIXED}
        return roles

    def _check_stage_prerequisites(self) -> None:
        stages = self.config.stages
        bug_dir = self.config.run_dir / self.bug.bug_id
        if 2 in stages and 1 not in stages:
            if not any(bug_dir.glob(f"*/{Role.WARNING_LADEN.value}/outcome.json")):
                raise ConfigError("stage 2 needs stage 1 selected or stage-1 records in run_dir")
        if 3 in stages and 2 not in stages:
            if not any(bug_dir.glob("*/stage2/summary.json")):
                raise ConfigError("stage 3 needs stage 2 selected or stage-2 records in run_dir")

    # -- paths -----------------------------------------------------------
    def pkg_dir(self, pkg: PackageSpec) -> Path:
        return self.config.run_dir / self.bug.bug_id / pkg.name

    def _policy(self, timeout: float) -> WorkdirPolicy:
        return WorkdirPolicy(root=self.config.workdir_root, timeout=timeout)

    # -- stages ----------------------------------------------------------
    def _build(self, pkg: PackageSpec, role: Role, with_markers: bool) -> BuildOutcome:
        vdir = self.pkg_dir(pkg) / role.value
        cached = vdir / "outcome.json"
        if cached.is_file():
            return read_outcome(cached)
        art_dir = vdir / "artifacts"
        if art_dir.exists():
            shutil.rmtree(art_dir)
        outcome = build_package(
            pkg,
            self.bug.variant(role),
            self._policy(self.config.build_timeout),
            log_path=vdir / "build.log",
            artifact_dir=art_dir,
            bug=self.bug if with_markers else None,
        )
        write_outcome(outcome, cached)
        return outcome

    def _stage2(self, pkg: PackageSpec, buggy: BuildOutcome, fixed: BuildOutcome,
                triggered: int, anomalies: list[str]) -> ArtifactSetDiff:
        gated = self.bug.precision is Precision.PRECISE and triggered == 0
        diff = diff_artifact_sets(
            buggy, fixed,
            disassembler_cmd=self.config.disassembler_cmd,
            disassemble_diffs=not gated,
        )
        if diff.structural_anomaly:
            anomalies.append(
                f"structural: artifacts only in buggy build {diff.only_a}, only in fixed build {diff.only_b}"
            )
        if gated and diff.any_difference:
            differing = [r.artifact for r in diff.reports if not r.bitwise_identical]
            anomalies.append(
                f"inconsistency: precise bug not triggered but artifacts differ {differing}"
            )
        for r in diff.reports:
            if r.error:
                anomalies.append(f"stage2 error on {r.artifact}: {r.error}")
        s2 = self.pkg_dir(pkg) / "stage2"
        write_reports(diff.reports, s2)
        _dump(
            {
                "any_difference": diff.any_difference,
                "differing_functions": diff.differing_functions,
                "symbols_available": diff.symbols_available,
                "only_buggy": diff.only_a,
                "only_fixed": diff.only_b,
                "reports": [r.artifact for r in diff.reports],
            },
            s2 / "summary.json",
        )
        return diff

    def _load_stage2(self, pkg: PackageSpec) -> ArtifactSetDiff | None:
        s2 = self.pkg_dir(pkg) / "stage2"
        summary_path = s2 / "summary.json"
        if not summary_path.is_file():
            return None
        summary = json.loads(summary_path.read_text())
        reports = [
            BinaryDiffReport.from_json(json.loads((s2 / (a.replace("/", "__") + ".json")).read_text()))
            for a in summary["reports"]
        ]
        return ArtifactSetDiff(reports, summary["only_buggy"], summary["only_fixed"])

    def _stage3(self, pkg: PackageSpec, buggy: BuildOutcome, fixed: BuildOutcome,
                diff: ArtifactSetDiff) -> DivergenceVerdict:
        s3 = self.pkg_dir(pkg) / "stage3"
        verdict_path = s3 / "verdict.json"
        if verdict_path.is_file():
            verdict = DivergenceVerdict.from_json(json.loads(verdict_path.read_text()))
        else:
            if pkg.test_cmd is None:
                verdict = DivergenceVerdict(Classification.NOT_RUN, reason="package has no test_cmd")
            else:
                counter = {"n": 0}

                def runner(p: PackageSpec, build: BuildOutcome):
                    counter["n"] += 1
                    log = s3 / "tests" / f"{counter['n']:02d}-{build.variant_id}.log"
                    return run_tests(p, build, self._policy(self.config.test_timeout),
                                     log_path=log, timeout=self.config.test_timeout)

                verdict = assess_divergence(pkg, buggy, fixed, self.config.rerun_count, runner=runner)
            _dump(verdict.to_json(), verdict_path)
        self._worksheets(pkg, diff, s3)
        return verdict

    def _worksheets(self, pkg: PackageSpec, diff: ArtifactSetDiff, s3: Path) -> None:
        # Keep ratings a human may already have entered.
        if self.config.sample_size == 0 or (s3 / "worksheet.json").is_file():
            return
        sheets = []
        for r in diff.reports:
            if not (r.symbols_available and r.differing):
                continue
            fa = load_functions(Path(r.path_a), self.config.disassembler_cmd)
            fb = load_functions(Path(r.path_b), self.config.disassembler_cmd)
            sheets.append(
                emit_worksheet(r, self.config.sample_size, self.config.seed, fa, fb,
                               bug_id=self.bug.bug_id, package=pkg.name)
            )
        if sheets:
            write_worksheets(sheets, s3)

    def process_package(self, pkg: PackageSpec) -> PackageResult:
        stages = self.config.stages
        anomalies: list[str] = []
        parts: list[str] = []
        rec: dict[str, Any] = dict(bug_id=self.bug.bug_id, package=pkg.name, builds_ok=False)

        if 1 in stages:
            warn = self._build(pkg, Role.WARNING_LADEN, with_markers=True)
        else:
            cached = self.pkg_dir(pkg) / Role.WARNING_LADEN.value / "outcome.json"
            warn = read_outcome(cached) if cached.is_file() else None
        if warn is None:
            anomalies.append("missing stage-1 record")
            return self._finish(pkg, rec, anomalies, ["stage1 missing"])
        anomalies.extend(warn.anomalies)
        if not warn.ok:
            return self._finish(pkg, rec, anomalies, [f"stage1 {warn.status.value}"])
        rec.update(reached_count=warn.reached_count, triggered_count=warn.triggered_count)
        parts.append(f"reached={warn.reached_count} triggered={warn.triggered_count}")

        if not stages & {2, 3}:
            rec["builds_ok"] = True
            return self._finish(pkg, rec, anomalies, parts)

        buggy = self._build(pkg, Role.BUGGY, with_markers=False)
        fixed = self._build(pkg, Role.FIXED, with_markers=False)
        if not (buggy.ok and fixed.ok):
            bad = ", ".join(f"{o.variant_id} {o.status.value}" for o in (buggy, fixed) if not o.ok)
            return self._finish(pkg, rec, anomalies, parts + [f"build failed: {bad}"])
        rec["builds_ok"] = True

        if 2 in stages:
            diff = self._stage2(pkg, buggy, fixed, warn.triggered_count, anomalies)
        else:
            diff = self._load_stage2(pkg)
            if diff is None:
                anomalies.append("missing stage-2 record")
                return self._finish(pkg, rec, anomalies, parts)
        rec.update(
            binary_diff=diff.any_difference,
            symbols_available=diff.symbols_available,
            differing_functions=diff.differing_functions,
        )
        parts.append(
            f"binary={'differs' if diff.any_difference else 'identical'}"
            + (f" functions={diff.differing_functions}" if diff.any_difference else "")
        )

        if 3 in stages:
            if diff.any_difference:
                verdict = self._stage3(pkg, buggy, fixed, diff)
                rec["divergence"] = verdict.classification.value
                parts.append(f"tests={verdict.classification.value}")
            else:
                rec["divergence"] = Classification.NOT_RUN.value
        return self._finish(pkg, rec, anomalies, parts)

    def _finish(self, pkg: PackageSpec, rec: dict[str, Any], anomalies: list[str],
                parts: list[str]) -> PackageResult:
        record = PackageRecord(**rec, anomalies=tuple(anomalies))
        _dump(record.to_json(), self.pkg_dir(pkg) / "record.json")
        line = f"[{self.bug.bug_id}] {pkg.name}: " + " ".join(parts)
        with self._lock:
            self._progress(line)
            for a in anomalies:
                self._progress(f"[{self.bug.bug_id}] {pkg.name}: ANOMALY {a}")
        return PackageResult(record, line)

    # -- driver ----------------------------------------------------------
    def run(self) -> RunSummary:
        self.prepare()
        bug_dir = self.config.run_dir / self.bug.bug_id
        if self.config.dry_run:
            self._progress(
                f"[{self.bug.bug_id}] dry run: configuration valid, {len(self.manifest)} package(s)"
            )
            return RunSummary(self.bug.bug_id, build_row(self.bug, [], strict=False), {})
        bug_dir.mkdir(parents=True, exist_ok=True)
        _dump(self.bug.to_json(), bug_dir / "bug.json")

        with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
            results = list(pool.map(self.process_package, self.manifest.packages))

        records = [r.record for r in results]
        anomalies = [
            {"package": r.package, "anomaly": a} for r in records for a in r.anomalies
        ]
        _dump(anomalies, bug_dir / "anomalies.json")
        builds = {}
        for role in sorted(self._required_roles(), key=lambda r: r.value):
            n = 0
            for pkg in self.manifest.packages:
                p = self.pkg_dir(pkg) / role.value / "outcome.json"
                if p.is_file() and read_outcome(p).ok:
                    n += 1
            builds[role.value] = n
        row = build_row(self.bug, records, strict=False)
        return RunSummary(self.bug.bug_id, row, builds, anomalies)


# -- loading a finished run ------------------------------------------------

_RATING_ORDER = [r.value for r in ImpactRating]


def _manual_rating(bug_dir: Path) -> str | None:
    best = None
    for sidecar in sorted(bug_dir.glob("*/stage3/worksheet.json")):
        for ws in json.loads(sidecar.read_text()):
            rating = ws.get("impact_rating")
            if rating in _RATING_ORDER and (
                best is None or _RATING_ORDER.index(rating) > _RATING_ORDER.index(best)
            ):
                best = rating
    return best


def load_run(run_dir: Path) -> list[tuple[BugDescriptor, list[PackageRecord]]]:
    out = []
    for bug_json in sorted(Path(run_dir).glob("*/bug.json")):
        bug = bug_from_json(json.loads(bug_json.read_text()), check_paths=False)
        records = [
            PackageRecord.from_json(json.loads(p.read_text()))
            for p in sorted(bug_json.parent.glob("*/record.json"))
        ]
        out.append((bug, records))
    return out


def load_rows(run_dir: Path, *, function_total: int | None = DEFAULT_FUNCTION_TOTAL,
              strict: bool = True) -> list[ImpactRow]:
    rows = []
    for bug, records in load_run(run_dir):
        rating = _manual_rating(Path(run_dir) / bug.bug_id)
        rows.append(build_row(bug, records, manual_rating=rating,
                              function_total=function_total, strict=strict))
    return rows


def recount_function_total(run_dir: Path) -> int | None:
    """Average, over bugs, of the function count in the buggy builds'
    cached disassembly. None when no bug has any cache."""
    per_bug = []
    for bug_dir in sorted(p.parent for p in Path(run_dir).glob("*/bug.json")):
        caches = sorted(bug_dir.glob(f"*/{Role.BUGGY.value}/artifacts/**/*.disasm"))
        if not caches:
            continue
        total = 0
        for c in caches:
            funcs = parse_functions(c.read_text(errors="replace"))
            if has_symbols(funcs):
                total += len(funcs)
        if total:
            per_bug.append(total)
    if not per_bug:
        return None
    return round(sum(per_bug) / len(per_bug))
