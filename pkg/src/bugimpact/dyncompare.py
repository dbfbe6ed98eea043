"""Dynamic comparison: run a package's tests against both builds.

Test commands report results through a small line protocol on stdout::

    TESTPROTO 1
    <test-id> pass|fail|skip
    ...
    END <count>

Output before the header is ignored. Anything malformed after it, a
missing terminator, or a count mismatch marks the run as an infrastructure
failure, which is never confused with a test failure.
"""

from __future__ import annotations

import difflib
import json
import os
import random
import shutil
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping

from .asmdiff import BinaryDiffReport, FunctionBody, normalize
from .builder import BuildOutcome, WorkdirPolicy, run_shell
from .corpus import PackageSpec

DEFAULT_RERUN_COUNT = 3
DEFAULT_TEST_TIMEOUT = 30 * 60.0
PROTOCOL_HEADER = "TESTPROTO 1"


class RunStatus(str, Enum):
    COMPLETED = "completed"
    INFRA_FAILURE = "infra_failure"
    TIMEOUT = "timeout"


class TestResult(str, Enum):
    __test__ = False

    PASS = "pass"
    FAIL = "fail"
    SKIP = "skip"


class Classification(str, Enum):
    IDENTICAL = "identical"
    DIVERGENT = "divergent"
    DIVERGENT_CANDIDATE = "divergent_candidate"
    INFRA_FAILURE = "infra_failure"
    NOT_RUN = "not_run"


class ImpactRating(str, Enum):
    NONE = "none"
    VERY_LOW = "very_low"
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class TestRun:
    __test__ = False

    package: str
    variant_id: str
    status: RunStatus
    results: Mapping[str, TestResult] = field(default_factory=dict)
    raw_log: Path | None = None
    reason: str | None = None

    def __post_init__(self) -> None:
        if self.status is not RunStatus.COMPLETED and self.results:
            raise ValueError("only completed runs carry results")

    @property
    def completed(self) -> bool:
        return self.status is RunStatus.COMPLETED


def parse_test_protocol(stdout: str) -> dict[str, TestResult]:
    lines = stdout.splitlines()
    try:
        start = next(i for i, line in enumerate(lines) if line.strip() == PROTOCOL_HEADER)
    except StopIteration:
        raise ProtocolError("protocol header not found") from None
    results: dict[str, TestResult] = {}
    for offset, line in enumerate(lines[start + 1 :], start=start + 2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "END":
            if len(parts) != 2 or not parts[1].isdigit():
                raise ProtocolError(f"line {offset}: malformed terminator {line!r}")
            if int(parts[1]) != len(results):
                raise ProtocolError(f"terminator count {parts[1]} != {len(results)} test lines")
            trailing = [rest for rest in lines[offset:] if rest.strip()]
            if trailing:
                raise ProtocolError(f"output after terminator: {trailing[0]!r}")
            return results
        if len(parts) != 2:
            raise ProtocolError(f"line {offset}: expected '<test-id> <result>', got {line!r}")
        test_id, outcome = parts
        try:
            result = TestResult(outcome)
        except ValueError:
            raise ProtocolError(f"line {offset}: unknown result {outcome!r}") from None
        if test_id in results:
            raise ProtocolError(f"line {offset}: duplicate test id {test_id!r}")
        results[test_id] = result
    raise ProtocolError("missing END terminator")


def run_tests(
    pkg: PackageSpec,
    build: BuildOutcome,
    workdir_policy: WorkdirPolicy | None = None,
    *,
    log_path: Path | None = None,
    timeout: float = DEFAULT_TEST_TIMEOUT,
) -> TestRun:
    """Run the package's test command against one build's artifacts.

    A fresh copy of the source tree is made and the retained artifacts are
    laid over it at their relative paths; ``IMPACT_ARTIFACT_DIR`` also
    points at them.
    """
    if pkg.test_cmd is None:
        raise ValueError(f"package {pkg.name} has no test_cmd")
    if not build.ok:
        raise ValueError(f"build {build.package}/{build.variant_id} did not succeed")
    policy = workdir_policy or WorkdirPolicy(timeout=timeout)
    workdir, token = policy.make(f"test-{pkg.name}-{build.variant_id}")
    try:
        tree = workdir / "src"
        shutil.copytree(pkg.source_path, tree, symlinks=True)
        for art in build.artifacts:
            dest = tree / art.path
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copy2(build.artifact_file(art.path), dest)
        env = dict(os.environ)
        env["IMPACT_ARTIFACT_DIR"] = str(build.artifact_root)
        env["IMPACT_VARIANT"] = build.variant_id
        stdout_path = workdir / "test.stdout"
        if log_path is None:
            log_path = workdir.with_name(workdir.name + ".test.log")
        log_path.parent.mkdir(parents=True, exist_ok=True)

        # stdout alone carries the protocol; stderr goes to the log only.
        cmd = f"( {pkg.test_cmd} ) 2>> {_shell_quote(str(log_path))}"
        log_path.write_bytes(b"")
        code, _ = run_shell(cmd, tree, env, stdout_path, timeout)
        stdout = stdout_path.read_bytes()
        with open(log_path, "ab") as logf:
            logf.write(b"--- stdout ---\n" + stdout)

        if code is None:
            return TestRun(pkg.name, build.variant_id, RunStatus.TIMEOUT, raw_log=log_path,
                           reason=f"exceeded {timeout:g}s")
        try:
            results = parse_test_protocol(stdout.decode("utf-8", errors="replace"))
        except ProtocolError as exc:
            return TestRun(pkg.name, build.variant_id, RunStatus.INFRA_FAILURE, raw_log=log_path,
                           reason=f"{exc} (exit {code})")
        return TestRun(pkg.name, build.variant_id, RunStatus.COMPLETED, results, log_path)
    finally:
        policy.release(workdir, token)


def _shell_quote(s: str) -> str:
    return "'" + s.replace("'", "'\\''") + "'"


@dataclass(frozen=True)
class PreliminaryVerdict:
    classification: Classification
    divergent_tests: tuple[str, ...] = ()
    # test id -> (buggy result, fixed result); None where a side lacks the test
    outcomes: Mapping[str, tuple[str | None, str | None]] = field(default_factory=dict)


def compare_runs(buggy: TestRun, fixed: TestRun) -> PreliminaryVerdict:
    if not (buggy.completed and fixed.completed):
        return PreliminaryVerdict(Classification.INFRA_FAILURE)
    keys = sorted(
        k for k in buggy.results.keys() | fixed.results.keys()
        if buggy.results.get(k) != fixed.results.get(k)
    )
    if not keys:
        return PreliminaryVerdict(Classification.IDENTICAL)
    outcomes = {
        k: (_value(buggy.results.get(k)), _value(fixed.results.get(k))) for k in keys
    }
    return PreliminaryVerdict(Classification.DIVERGENT_CANDIDATE, tuple(keys), outcomes)


def _value(r: TestResult | None) -> str | None:
    return None if r is None else r.value


@dataclass(frozen=True)
class DivergenceVerdict:
    classification: Classification
    divergent_tests: tuple[str, ...] = ()
    reruns_performed: int = 0
    reproducible: bool = False
    flaky: tuple[str, ...] = ()
    reason: str | None = None

    def __post_init__(self) -> None:
        if self.classification is Classification.DIVERGENT and not (
            self.divergent_tests and self.reproducible
        ):
            raise ValueError("a divergent verdict needs reproducible divergent tests")

    def to_json(self) -> dict[str, Any]:
        return {
            "classification": self.classification.value,
            "divergent_tests": list(self.divergent_tests),
            "reruns_performed": self.reruns_performed,
            "reproducible": self.reproducible,
            "flaky": list(self.flaky),
            "reason": self.reason,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> DivergenceVerdict:
        return cls(
            classification=Classification(obj["classification"]),
            divergent_tests=tuple(obj["divergent_tests"]),
            reruns_performed=obj["reruns_performed"],
            reproducible=obj["reproducible"],
            flaky=tuple(obj.get("flaky", ())),
            reason=obj.get("reason"),
        )


TestRunner = Callable[[PackageSpec, BuildOutcome], TestRun]


def confirm_divergence(
    pkg: PackageSpec,
    buggy_build: BuildOutcome,
    fixed_build: BuildOutcome,
    candidate: PreliminaryVerdict,
    rerun_count: int = DEFAULT_RERUN_COUNT,
    *,
    runner: TestRunner | None = None,
) -> DivergenceVerdict:
    """Rerun both suites ``rerun_count`` times and keep only stable divergence.

    Every rerun must reproduce exactly the candidate's divergent tests with
    the same buggy/fixed outcomes. Reruns alternate which build is tested
    first, so a test whose result depends on shared state or invocation
    order cannot line up with the build split by accident. Anything less
    than full agreement yields ``identical`` with the unstable tests listed
    as flaky. ``reruns_performed`` counts the candidate run as well.
    """
    if rerun_count < 1:
        raise ValueError("rerun_count must be >= 1")
    if candidate.classification is not Classification.DIVERGENT_CANDIDATE:
        raise ValueError("confirm_divergence needs a divergent candidate")
    run = runner or run_tests
    unstable: set[str] = set()
    performed = 1
    for i in range(rerun_count):
        if i % 2 == 0:
            fixed = run(pkg, fixed_build)
            buggy = run(pkg, buggy_build)
        else:
            buggy = run(pkg, buggy_build)
            fixed = run(pkg, fixed_build)
        performed += 1
        again = compare_runs(buggy, fixed)
        if again.classification is Classification.INFRA_FAILURE:
            reason = buggy.reason if not buggy.completed else fixed.reason
            return DivergenceVerdict(Classification.INFRA_FAILURE, reruns_performed=performed,
                                     reason=f"rerun {i + 1}: {reason}")
        changed = set(candidate.divergent_tests) ^ set(again.divergent_tests)
        changed |= {
            t for t in set(candidate.divergent_tests) & set(again.divergent_tests)
            if again.outcomes[t] != candidate.outcomes[t]
        }
        unstable |= changed
    if unstable:
        return DivergenceVerdict(Classification.IDENTICAL, reruns_performed=performed,
                                 flaky=tuple(sorted(unstable)))
    return DivergenceVerdict(Classification.DIVERGENT, candidate.divergent_tests, performed, True)


def assess_divergence(
    pkg: PackageSpec,
    buggy_build: BuildOutcome,
    fixed_build: BuildOutcome,
    rerun_count: int = DEFAULT_RERUN_COUNT,
    *,
    runner: TestRunner | None = None,
) -> DivergenceVerdict:
    """Run each suite once, then confirm any divergence by reruns."""
    run = runner or run_tests
    buggy = run(pkg, buggy_build)
    fixed = run(pkg, fixed_build)
    prelim = compare_runs(buggy, fixed)
    if prelim.classification is Classification.INFRA_FAILURE:
        failed = buggy if not buggy.completed else fixed
        return DivergenceVerdict(Classification.INFRA_FAILURE,
                                 reason=f"{failed.variant_id}: {failed.status.value} ({failed.reason})")
    if prelim.classification is Classification.IDENTICAL:
        return DivergenceVerdict(Classification.IDENTICAL, reruns_performed=1)
    return confirm_divergence(pkg, buggy_build, fixed_build, prelim, rerun_count, runner=runner)


@dataclass
class SampledFunction:
    name: str
    artifact: str
    opcode_diff: list[str]
    excerpt_a: list[str]
    excerpt_b: list[str]

    def to_json(self) -> dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class InspectionWorksheet:
    bug_id: str
    package: str
    sampled_functions: list[SampledFunction]
    seed: int
    sample_size: int
    verdict_field: str = ""
    impact_rating: ImpactRating | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "bug_id": self.bug_id,
            "package": self.package,
            "seed": self.seed,
            "sample_size": self.sample_size,
            "sampled_functions": [f.to_json() for f in self.sampled_functions],
            "verdict_field": self.verdict_field,
            "impact_rating": None if self.impact_rating is None else self.impact_rating.value,
        }


def emit_worksheet(
    report: BinaryDiffReport,
    sample_size: int,
    seed: int,
    functions_a: Mapping[str, FunctionBody],
    functions_b: Mapping[str, FunctionBody],
    *,
    bug_id: str = "",
    package: str = "",
    excerpt_limit: int = 80,
) -> InspectionWorksheet:
    """Sample differing functions for manual inspection.

    The sample depends only on the report's differing set, ``sample_size``
    and ``seed``.
    """
    if not report.differing:
        raise ValueError("report has no differing functions")
    population = sorted(report.differing)
    k = min(sample_size, len(population))
    chosen = sorted(random.Random(seed).sample(population, k))
    sampled = []
    for name in chosen:
        body_a, body_b = functions_a[name], functions_b[name]
        hunk = list(
            difflib.unified_diff(normalize(body_a), normalize(body_b), "buggy", "fixed", lineterm="", n=2)
        )
        sampled.append(
            SampledFunction(
                name=name,
                artifact=report.artifact,
                opcode_diff=hunk,
                excerpt_a=[i.render() for i in body_a.instructions[:excerpt_limit]],
                excerpt_b=[i.render() for i in body_b.instructions[:excerpt_limit]],
            )
        )
    return InspectionWorksheet(bug_id, package, sampled, seed, sample_size)


def render_worksheet(sheets: list[InspectionWorksheet]) -> str:
    out: list[str] = []
    for ws in sheets:
        out.append(f"# Inspection worksheet: bug {ws.bug_id}, package {ws.package}")
        out.append("")
        out.append(f"Sampled {len(ws.sampled_functions)} function(s), seed {ws.seed}.")
        out.append("")
        for f in ws.sampled_functions:
            out.append(f"## `{f.name}` ({f.artifact})")
            out.append("")
            out.append("Opcode diff (buggy -> fixed):")
            out.append("```diff")
            out.extend(f.opcode_diff)
            out.append("```")
            out.append("")
            out.append("Buggy build:")
            out.append("```")
            out.extend(f.excerpt_a)
            out.append("```")
            out.append("Fixed build:")
            out.append("```")
            out.extend(f.excerpt_b)
            out.append("```")
            out.append("")
        out.append("Verdict: ")
        out.append("Impact rating (none|very_low|low|medium|high): ")
        out.append("")
    return "\n".join(out)


def write_worksheets(sheets: list[InspectionWorksheet], directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "worksheet.md").write_text(render_worksheet(sheets))
    sidecar = [ws.to_json() for ws in sheets]
    (directory / "worksheet.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

