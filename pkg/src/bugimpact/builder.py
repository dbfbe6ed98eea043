"""Package builds under a compiler variant, in isolated working directories."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import signal
import subprocess
import tempfile
import time
import uuid
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

from .corpus import PackageSpec, Reproducibility
from .toolchain import BugDescriptor, CompilerVariant, count_marker_lines

log = logging.getLogger(__name__)

DEFAULT_BUILD_TIMEOUT = 30 * 60.0
OWNER_FILE = ".bugimpact-owner"


class BuildIsolationError(RuntimeError):
    """A build's working directory was tampered with by another job."""


class BuildStatus(str, Enum):
    OK = "ok"
    BUILD_FAILED = "build_failed"
    TIMEOUT = "timeout"


@dataclass(frozen=True)
class Artifact:
    path: str
    size: int
    sha256: str

    def to_json(self) -> dict[str, Any]:
        return {"path": self.path, "size": self.size, "sha256": self.sha256}


@dataclass(frozen=True)
class BuildOutcome:
    package: str
    variant_id: str
    status: BuildStatus
    log_path: Path
    reached_count: int = 0
    triggered_count: int = 0
    artifacts: tuple[Artifact, ...] = ()
    wall_seconds: float = 0.0
    artifact_root: Path | None = None
    reason: str | None = None
    anomalies: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.status is not BuildStatus.OK and self.artifacts:
            raise ValueError("a failed build cannot carry artifacts")

    @property
    def ok(self) -> bool:
        return self.status is BuildStatus.OK

    def artifact_file(self, rel: str) -> Path:
        if self.artifact_root is None:
            raise FileNotFoundError(f"{self.package}/{self.variant_id}: artifacts were not retained")
        return self.artifact_root / rel

    def digests(self) -> dict[str, str]:
        return {a.path: a.sha256 for a in self.artifacts}

    def to_json(self) -> dict[str, Any]:
        return {
            "package": self.package,
            "variant_id": self.variant_id,
            "status": self.status.value,
            "reason": self.reason,
            "log_path": str(self.log_path),
            "reached_count": self.reached_count,
            "triggered_count": self.triggered_count,
            "artifacts": [a.to_json() for a in self.artifacts],
            "artifact_root": None if self.artifact_root is None else str(self.artifact_root),
            "wall_seconds": round(self.wall_seconds, 3),
            "anomalies": list(self.anomalies),
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> BuildOutcome:
        return cls(
            package=obj["package"],
            variant_id=obj["variant_id"],
            status=BuildStatus(obj["status"]),
            log_path=Path(obj["log_path"]),
            reached_count=obj["reached_count"],
            triggered_count=obj["triggered_count"],
            artifacts=tuple(Artifact(**a) for a in obj["artifacts"]),
            wall_seconds=obj["wall_seconds"],
            artifact_root=None if obj.get("artifact_root") is None else Path(obj["artifact_root"]),
            reason=obj.get("reason"),
            anomalies=tuple(obj.get("anomalies", ())),
        )


@dataclass(frozen=True)
class WorkdirPolicy:
    """Where fresh build/test directories are created and whether they are kept."""

    root: Path | None = None
    keep: bool = False
    timeout: float = DEFAULT_BUILD_TIMEOUT

    def make(self, label: str) -> tuple[Path, str]:
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
        workdir = Path(tempfile.mkdtemp(prefix=f"{label}-", dir=self.root))
        token = uuid.uuid4().hex
        (workdir / OWNER_FILE).write_text(token)
        return workdir, token

    def release(self, workdir: Path, token: str) -> None:
        owner = workdir / OWNER_FILE
        if not owner.is_file() or owner.read_text() != token:
            raise BuildIsolationError(f"{workdir}: ownership token changed during the job")
        if not self.keep:
            shutil.rmtree(workdir, ignore_errors=True)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _safe_label(text: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in text)


def run_shell(
    cmd: str, cwd: Path, env: dict[str, str], log_path: Path, timeout: float
) -> tuple[int | None, float]:
    """Run ``cmd`` through the shell with combined output appended to ``log_path``.

    Returns (exit code, wall seconds); exit code is None on timeout, in
    which case the whole process group is killed.
    """
    start = time.monotonic()
    with open(log_path, "ab") as logf:
        proc = subprocess.Popen(
            cmd,
            shell=True,
            cwd=cwd,
            env=env,
            stdin=subprocess.DEVNULL,
            stdout=logf,
            stderr=subprocess.STDOUT,
            start_new_session=True,
        )
        try:
            code: int | None = proc.wait(timeout=timeout)
        except subprocess.TimeoutExpired:
            try:
                os.killpg(proc.pid, signal.SIGKILL)
            except ProcessLookupError:
                pass
            proc.wait()
            code = None
    return code, time.monotonic() - start


def collect_artifacts(tree: Path, globs: tuple[str, ...]) -> list[Path]:
    found: set[Path] = set()
    for pattern in globs:
        for p in tree.glob(pattern):
            if p.is_file() and p.name != OWNER_FILE:
                found.add(p.relative_to(tree))
    return sorted(found, key=lambda p: p.as_posix())


def extract_markers(log_path: str | os.PathLike[str], bug: BugDescriptor) -> tuple[int, int]:
    """Return (reached, triggered): the number of log lines holding each marker."""
    data = Path(log_path).read_bytes()
    reached, triggered = count_marker_lines(data, (bug.reached_marker, bug.triggered_marker))
    return reached, triggered


def build_package(
    pkg: PackageSpec,
    variant: CompilerVariant,
    workdir_policy: WorkdirPolicy | None = None,
    *,
    log_path: Path | None = None,
    artifact_dir: Path | None = None,
    bug: BugDescriptor | None = None,
) -> BuildOutcome:
    """Build ``pkg`` with ``variant`` in a fresh copy of its source tree.

    The variant is injected through CC/CXX and its extra environment. The
    combined build output goes to ``log_path``; when ``bug`` is given the
    log is scanned for its markers. Artifacts matching the package globs are
    digested and, if ``artifact_dir`` is set, copied there so later stages
    can use them after the working directory is gone.
    """
    policy = workdir_policy or WorkdirPolicy()
    workdir, token = policy.make(_safe_label(f"{pkg.name}-{variant.variant_id}"))
    try:
        tree = workdir / "src"
        shutil.copytree(pkg.source_path, tree, symlinks=True)
        if log_path is None:
            log_path = workdir.with_name(workdir.name + ".build.log")
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_bytes(b"")

        code, wall = run_shell(pkg.build_cmd, tree, variant.environment(), log_path, policy.timeout)

        reached = triggered = 0
        anomalies: list[str] = []
        if bug is not None:
            reached, triggered = extract_markers(log_path, bug)
            if triggered > reached:
                anomalies.append(f"triggered_count {triggered} exceeds reached_count {reached}")

        base = dict(
            package=pkg.name,
            variant_id=variant.variant_id,
            log_path=log_path,
            reached_count=reached,
            triggered_count=triggered,
            wall_seconds=round(wall, 3),
            anomalies=tuple(anomalies),
        )
        if code is None:
            return BuildOutcome(status=BuildStatus.TIMEOUT, reason=f"exceeded {policy.timeout:g}s", **base)
        if code != 0:
            return BuildOutcome(status=BuildStatus.BUILD_FAILED, reason=f"exit status {code}", **base)

        matched = collect_artifacts(tree, pkg.artifact_globs)
        if not matched:
            return BuildOutcome(status=BuildStatus.BUILD_FAILED, reason="no artifacts matched", **base)

        artifacts = []
        for rel in matched:
            src = tree / rel
            artifacts.append(Artifact(rel.as_posix(), src.stat().st_size, sha256_file(src)))
            if artifact_dir is not None:
                dest = artifact_dir / rel
                dest.parent.mkdir(parents=True, exist_ok=True)
                shutil.copy2(src, dest)
        return BuildOutcome(
            status=BuildStatus.OK,
            artifacts=tuple(artifacts),
            artifact_root=artifact_dir,
            **base,
        )
    finally:
        policy.release(workdir, token)


@dataclass(frozen=True)
class ReproVerdict:
    verdict: Reproducibility
    differing: tuple[str, ...] = ()
    reason: str | None = None
    outcomes: tuple[BuildOutcome, ...] = field(default=(), compare=False, repr=False)

    @property
    def verified(self) -> bool:
        return self.verdict is Reproducibility.VERIFIED


def check_reproducibility(
    pkg: PackageSpec,
    variant: CompilerVariant,
    workdir_policy: WorkdirPolicy | None = None,
    *,
    second_variant: CompilerVariant | None = None,
) -> tuple[ReproVerdict, PackageSpec]:
    """Build ``pkg`` twice in fresh directories and compare artifact digests.

    ``second_variant`` makes the second build use another compiler; building
    with the buggy and fixed compilers on a package the bug cannot touch is
    how leftover compiler revision strings are caught. Returns the verdict
    and the package stamped with it.
    """
    outcomes = []
    with tempfile.TemporaryDirectory(prefix="bugimpact-repro-") as tmp:
        for i, v in enumerate((variant, second_variant or variant)):
            outcomes.append(
                build_package(pkg, v, workdir_policy, log_path=Path(tmp) / f"build{i}.log")
            )
    first, second = outcomes
    if not (first.ok and second.ok):
        bad = first if not first.ok else second
        verdict = ReproVerdict(
            Reproducibility.FAILED,
            reason=f"build-error: {bad.status.value} ({bad.reason})",
            outcomes=tuple(outcomes),
        )
    else:
        a, b = first.digests(), second.digests()
        differing = tuple(sorted(p for p in a.keys() | b.keys() if a.get(p) != b.get(p)))
        if differing:
            verdict = ReproVerdict(Reproducibility.FAILED, differing, "artifacts differ", tuple(outcomes))
        else:
            verdict = ReproVerdict(Reproducibility.VERIFIED, outcomes=tuple(outcomes))
    return verdict, replace(pkg, reproducible=verdict.verdict)


def write_outcome(outcome: BuildOutcome, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(outcome.to_json(), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_outcome(path: Path) -> BuildOutcome:
    return BuildOutcome.from_json(json.loads(path.read_text()))
