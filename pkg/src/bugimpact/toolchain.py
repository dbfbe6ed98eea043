"""Compiler variants for one bug and the reached/triggered marker protocol.

Each studied bug comes with three compilers: the *buggy* one (just before
the fixing patch), the *fixed* one (just after), and a *warning-laden*
build of the fixed compiler that prints a "reached" marker when the patched
code runs and a "triggered" marker when the pre-fix fault condition holds.
"""

from __future__ import annotations

import json
import os
import subprocess
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Mapping

TRIVIAL_UNIT = "int main(void) { return 0; }\n"
CXX_SUFFIXES = frozenset({".cc", ".cpp", ".cxx", ".C"})


class BugDescriptorError(ValueError):
    """Invalid bug descriptor or compiler variant."""


class WitnessCompileError(RuntimeError):
    """The witness program failed to compile with the warning-laden compiler."""

    def __init__(self, message: str, output: bytes = b"") -> None:
        super().__init__(message)
        self.output = output


class Role(str, Enum):
    BUGGY = "buggy"
    FIXED = "fixed"
    WARNING_LADEN = "warning_laden"


class ToolFamily(str, Enum):
    CSMITH = "csmith"
    EMI = "emi"
    ORANGE = "orange"
    YARPGEN = "yarpgen"
    ALIVE = "alive"
    USER = "user"


class Severity(str, Enum):
    ENHANCEMENT = "enhancement"
    NORMAL = "normal"
    RELEASE_BLOCKER = "release_blocker"


class Precision(str, Enum):
    PRECISE = "precise"
    OVER_APPROXIMATING = "over_approximating"


@dataclass(frozen=True)
class CompilerVariant:
    variant_id: str
    role: Role
    c_compiler_path: Path
    cxx_compiler_path: Path
    extra_env: Mapping[str, str] = field(default_factory=dict)
    revision_scrubbed: bool = True

    def environment(self, base: Mapping[str, str] | None = None) -> dict[str, str]:
        """Environment for a build under this variant (CC/CXX plus extra_env)."""
        env = dict(os.environ if base is None else base)
        env["CC"] = str(self.c_compiler_path)
        env["CXX"] = str(self.cxx_compiler_path)
        env.update(self.extra_env)
        return env

    def compiler_for(self, source: Path) -> Path:
        return self.cxx_compiler_path if source.suffix in CXX_SUFFIXES else self.c_compiler_path

    def to_json(self) -> dict[str, Any]:
        return {
            "variant_id": self.variant_id,
            "role": self.role.value,
            "c_compiler_path": str(self.c_compiler_path),
            "cxx_compiler_path": str(self.cxx_compiler_path),
            "extra_env": dict(sorted(self.extra_env.items())),
            "revision_scrubbed": self.revision_scrubbed,
        }


def default_markers(bug_id: str) -> tuple[str, str]:
    return f"IMPACT-REACHED:{bug_id}", f"IMPACT-TRIGGERED:{bug_id}"


@dataclass(frozen=True)
class BugDescriptor:
    bug_id: str
    tool_family: ToolFamily
    severity: Severity
    precision: Precision
    variants: tuple[CompilerVariant, ...]
    reached_marker: str = ""
    triggered_marker: str = ""
    witness_path: Path | None = None

    def __post_init__(self) -> None:
        if not self.bug_id:
            raise BugDescriptorError("bug_id must be nonempty")
        reached, triggered = default_markers(self.bug_id)
        if not self.reached_marker:
            object.__setattr__(self, "reached_marker", reached)
        if not self.triggered_marker:
            object.__setattr__(self, "triggered_marker", triggered)
        r, t = self.reached_marker, self.triggered_marker
        if r == t or r in t or t in r:
            raise BugDescriptorError(
                f"bug {self.bug_id}: markers must differ and neither may contain the other"
            )
        roles = [v.role for v in self.variants]
        for role in Role:
            if roles.count(role) != 1:
                raise BugDescriptorError(
                    f"bug {self.bug_id}: expected exactly one {role.value} variant, got {roles.count(role)}"
                )

    def variant(self, role: Role) -> CompilerVariant:
        return next(v for v in self.variants if v.role is role)

    @property
    def buggy(self) -> CompilerVariant:
        return self.variant(Role.BUGGY)

    @property
    def fixed(self) -> CompilerVariant:
        return self.variant(Role.FIXED)

    @property
    def warning_laden(self) -> CompilerVariant:
        return self.variant(Role.WARNING_LADEN)

    def to_json(self) -> dict[str, Any]:
        return {
            "bug_id": self.bug_id,
            "tool_family": self.tool_family.value,
            "severity": self.severity.value,
            "precision": self.precision.value,
            "reached_marker": self.reached_marker,
            "triggered_marker": self.triggered_marker,
            "witness_path": None if self.witness_path is None else str(self.witness_path),
            "variants": [v.to_json() for v in self.variants],
        }


def _enum(cls: type[Enum], value: Any, what: str) -> Any:
    try:
        return cls(value)
    except ValueError:
        allowed = "|".join(m.value for m in cls)
        raise BugDescriptorError(f"{what}: {value!r} is not one of {allowed}") from None


def _resolve(p: str, base_dir: Path) -> Path:
    path = Path(p)
    return path if path.is_absolute() else (base_dir / path).resolve()


def variant_from_json(obj: Mapping[str, Any], base_dir: Path = Path(".")) -> CompilerVariant:
    try:
        c_path = _resolve(obj["c_compiler_path"], base_dir)
        cxx_path = _resolve(obj.get("cxx_compiler_path", obj["c_compiler_path"]), base_dir)
        return CompilerVariant(
            variant_id=str(obj["variant_id"]),
            role=_enum(Role, obj["role"], "variant role"),
            c_compiler_path=c_path,
            cxx_compiler_path=cxx_path,
            extra_env={str(k): str(v) for k, v in obj.get("extra_env", {}).items()},
            revision_scrubbed=bool(obj.get("revision_scrubbed", True)),
        )
    except KeyError as exc:
        raise BugDescriptorError(f"variant: missing field {exc.args[0]!r}") from None


def bug_from_json(
    obj: Mapping[str, Any], base_dir: Path = Path("."), check_paths: bool = True
) -> BugDescriptor:
    for key in ("bug_id", "tool_family", "severity", "precision", "variants"):
        if key not in obj:
            raise BugDescriptorError(f"bug descriptor: missing field {key!r}")
    variants = tuple(variant_from_json(v, base_dir) for v in obj["variants"])
    if check_paths:
        for v in variants:
            for p in (v.c_compiler_path, v.cxx_compiler_path):
                if not (p.is_file() and os.access(p, os.X_OK)):
                    raise BugDescriptorError(f"variant {v.variant_id}: {p} is not an executable file")
    witness = obj.get("witness_path")
    return BugDescriptor(
        bug_id=str(obj["bug_id"]),
        tool_family=_enum(ToolFamily, obj["tool_family"], "tool_family"),
        severity=_enum(Severity, obj["severity"], "severity"),
        precision=_enum(Precision, obj["precision"], "precision"),
        variants=variants,
        reached_marker=obj.get("reached_marker") or "",
        triggered_marker=obj.get("triggered_marker") or "",
        witness_path=None if witness is None else _resolve(witness, base_dir),
    )


def load_bug(path: str | os.PathLike[str], check_paths: bool = True) -> BugDescriptor:
    """Load a bug descriptor file, registering its compiler variants.

    Registration checks that every compiler path is an executable file
    unless ``check_paths`` is false.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BugDescriptorError(f"{path}: parse error at line {exc.lineno}: {exc.msg}") from exc
    return bug_from_json(doc, base_dir=path.parent, check_paths=check_paths)


def count_marker_lines(data: bytes, markers: Iterable[str]) -> tuple[int, ...]:
    """Count, for each marker, the lines of ``data`` that contain it.

    A marker occurring several times on one line counts once.
    """
    needles = [m.encode() for m in markers]
    counts = [0] * len(needles)
    for line in data.splitlines():
        for i, needle in enumerate(needles):
            if needle in line:
                counts[i] += 1
    return tuple(counts)


@dataclass(frozen=True)
class VariantReport:
    variant_id: str
    runs: bool
    reason: str | None = None
    version: str | None = None
    detail: str = ""


def _first_line(data: bytes) -> str | None:
    for line in data.decode("utf-8", errors="replace").splitlines():
        if line.strip():
            return line.strip()
    return None


def validate_variant(v: CompilerVariant, timeout: float = 120.0) -> VariantReport:
    """Check that a variant's C compiler runs and compiles a trivial unit.

    Never raises for a broken compiler; the reason lands in the report
    (``not-found``, ``not-executable``, ``compile-failed`` or ``timeout``).
    """
    cc = v.c_compiler_path
    if not cc.exists():
        return VariantReport(v.variant_id, False, "not-found", detail=str(cc))
    if not os.access(cc, os.X_OK) or cc.is_dir():
        return VariantReport(v.variant_id, False, "not-executable", detail=str(cc))
    env = v.environment()
    version = None
    try:
        proc = subprocess.run(
            [str(cc), "--version"], capture_output=True, env=env, timeout=timeout, check=False
        )
        if proc.returncode == 0:
            version = _first_line(proc.stdout) or _first_line(proc.stderr)
    except (OSError, subprocess.TimeoutExpired):
        pass
    with tempfile.TemporaryDirectory(prefix="bugimpact-validate-") as tmp:
        src = Path(tmp) / "trivial.c"
        src.write_text(TRIVIAL_UNIT)
        try:
            proc = subprocess.run(
                [str(cc), "-c", str(src), "-o", str(Path(tmp) / "trivial.o")],
                capture_output=True,
                env=env,
                cwd=tmp,
                timeout=timeout,
                check=False,
            )
        except subprocess.TimeoutExpired:
            return VariantReport(v.variant_id, False, "timeout", version)
        except OSError as exc:
            return VariantReport(v.variant_id, False, "not-executable", version, str(exc))
    if proc.returncode != 0:
        detail = (proc.stdout + proc.stderr).decode("utf-8", errors="replace")[-2000:]
        return VariantReport(v.variant_id, False, "compile-failed", version, detail)
    return VariantReport(v.variant_id, True, None, version)


@dataclass(frozen=True)
class WitnessResult:
    reached: int
    triggered: int

    @property
    def passed(self) -> bool:
        return self.reached >= 1 and self.triggered >= 1


def witness_sanity_check(bug: BugDescriptor, timeout: float = 600.0) -> WitnessResult:
    """Compile the bug report's sample with the warning-laden compiler and
    count marker lines in its combined output.

    Raises :class:`WitnessCompileError` when the compiler rejects the
    witness, so that a broken compile is never mistaken for missing markers.
    """
    if bug.witness_path is None:
        raise BugDescriptorError(f"bug {bug.bug_id}: no witness_path set")
    variant = bug.warning_laden
    witness = bug.witness_path
    with tempfile.TemporaryDirectory(prefix="bugimpact-witness-") as tmp:
        cmd = [str(variant.compiler_for(witness)), "-c", str(witness), "-o", str(Path(tmp) / "witness.o")]
        try:
            proc = subprocess.run(
                cmd,
                stdout=subprocess.PIPE,
                stderr=subprocess.STDOUT,
                env=variant.environment(),
                cwd=tmp,
                timeout=timeout,
                check=False,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise WitnessCompileError(f"bug {bug.bug_id}: witness compile did not run: {exc}") from exc
    if proc.returncode != 0:
        raise WitnessCompileError(
            f"bug {bug.bug_id}: witness failed to compile (exit {proc.returncode})", proc.stdout
        )
    reached, triggered = count_marker_lines(proc.stdout, (bug.reached_marker, bug.triggered_marker))
    return WitnessResult(reached, triggered)


def assert_no_revision_marker(
    binary_path: str | os.PathLike[str], forbidden_substrings: Iterable[str]
) -> bool:
    """True iff none of ``forbidden_substrings`` occurs in the file's bytes."""
    data = Path(binary_path).read_bytes()
    return not any(s.encode() in data for s in forbidden_substrings if s)
