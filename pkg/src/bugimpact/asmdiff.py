"""Syntactic binary comparison.

Artifacts are first compared byte for byte. Only pairs that differ are
disassembled; functions are then matched by symbol name and compared on
their opcode sequences, so that addresses, registers and immediates never
count as a difference.
"""

from __future__ import annotations

import json
import os
import re
import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .builder import BuildOutcome

DEFAULT_DISASSEMBLER_CMD = "objdump -h -d {path}"

# Instruction prefixes folded into the following mnemonic ("lock xadd" -> "lock_xadd").
DEFAULT_PREFIXES = frozenset(
    {
        "lock", "rep", "repe", "repz", "repne", "repnz", "bnd", "notrack",
        "xacquire", "xrelease", "data16", "data32", "addr16", "addr32",
        "cs", "ds", "es", "fs", "gs", "ss",
    }
)
_REX_PREFIX = re.compile(r"^rex(\.[WRXB]+)?$")

_SECTION_RE = re.compile(r"^Disassembly of section (\S+):\s*$")
_LABEL_RE = re.compile(r"^([0-9a-fA-F]+)\s+<(.*)>:\s*$")
_INSN_RE = re.compile(r"^\s*([0-9a-fA-F]+):(?:\s(.*))?$")
_BYTE_RE = re.compile(r"^[0-9a-fA-F]{2}$")
_HEADER_RE = re.compile(r"^\s*\d+\s+(\S+)\s+[0-9a-fA-F]+\s+[0-9a-fA-F]+\s")
_FLAGS_RE = re.compile(r"^\s+[A-Z_]+(,\s*[A-Z_]+)*\s*$")


class DisassemblyError(RuntimeError):
    """The disassembler could not process a file."""


class DisassemblyParseError(ValueError):
    def __init__(self, lineno: int, message: str) -> None:
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class Instruction:
    address: str
    opcode: str
    operands_text: str = ""

    def __post_init__(self) -> None:
        if not self.opcode or any(c.isspace() for c in self.opcode):
            raise ValueError(f"invalid opcode {self.opcode!r}")

    def render(self) -> str:
        return f"{self.address}: {self.opcode} {self.operands_text}".rstrip()


@dataclass(frozen=True)
class FunctionBody:
    name: str
    instructions: tuple[Instruction, ...] = ()


def split_opcode(tokens: list[str], prefixes: frozenset[str] = DEFAULT_PREFIXES) -> tuple[str, int]:
    """Return (opcode, number of tokens consumed) for an instruction's tokens."""
    parts = []
    i = 0
    while i < len(tokens) - 1 and (tokens[i] in prefixes or _REX_PREFIX.match(tokens[i])):
        parts.append(tokens[i])
        i += 1
    parts.append(tokens[i])
    return "_".join(parts), i + 1


def _instruction_text(rest: str) -> str | None:
    """Strip the optional raw-byte column; None for byte-only lines."""
    if "\t" in rest:
        cols = rest.split("\t")
        if all(_BYTE_RE.match(tok) for tok in cols[0].split()):
            text = " ".join(c for c in cols[1:] if c.strip())
            return text.strip() or None
        return rest.strip() or None
    tokens = rest.split()
    i = 0
    while i < len(tokens) and _BYTE_RE.match(tokens[i]):
        i += 1
    return " ".join(tokens[i:]) or None


def _executable_sections(lines: list[str]) -> set[str] | None:
    """Section names flagged CODE in an ``objdump -h`` style summary, if present."""
    sections: set[str] | None = None
    pending: str | None = None
    for line in lines:
        if line.startswith("Idx Name"):
            sections = set() if sections is None else sections
            continue
        if sections is None:
            continue
        m = _HEADER_RE.match(line)
        if m:
            pending = m.group(1)
            continue
        if pending is not None and _FLAGS_RE.match(line):
            if "CODE" in line.replace(" ", "").split(","):
                sections.add(pending)
            pending = None
    return sections


def parse_functions(
    disassembly: str,
    *,
    prefixes: frozenset[str] = DEFAULT_PREFIXES,
    all_sections_without_summary: bool = True,
) -> dict[str, FunctionBody]:
    """Split disassembly text into functions keyed by (disambiguated) name.

    A label seen again gets an occurrence suffix: the first ``foo`` becomes
    ``foo#1``, the second ``foo#2``. Labels that appear once keep their name.
    """
    lines = disassembly.splitlines()
    executable = _executable_sections(lines)
    if executable is None and not all_sections_without_summary:
        executable = set()

    raw: list[tuple[str, list[Instruction]]] = []
    current: list[Instruction] | None = None
    keep_section = True
    for lineno, line in enumerate(lines, start=1):
        m = _SECTION_RE.match(line)
        if m:
            keep_section = executable is None or m.group(1) in executable
            current = None
            continue
        if not keep_section:
            continue
        m = _LABEL_RE.match(line)
        if m:
            name = m.group(2)
            if not name:
                raise DisassemblyParseError(lineno, "empty function label")
            current = []
            raw.append((name, current))
            continue
        m = _INSN_RE.match(line)
        if m:
            text = _instruction_text(m.group(2) or "")
            if text is None:
                continue
            if current is None:
                raise DisassemblyParseError(lineno, "instruction outside of any function")
            tokens = text.split()
            opcode, used = split_opcode(tokens, prefixes)
            current.append(Instruction(m.group(1), opcode, " ".join(tokens[used:])))

    totals: dict[str, int] = {}
    for name, _ in raw:
        totals[name] = totals.get(name, 0) + 1
    seen: dict[str, int] = {}
    functions: dict[str, FunctionBody] = {}
    for name, insns in raw:
        if totals[name] > 1:
            seen[name] = seen.get(name, 0) + 1
            key = f"{name}#{seen[name]}"
        else:
            key = name
        functions[key] = FunctionBody(key, tuple(insns))
    return functions


def has_symbols(functions: Mapping[str, FunctionBody]) -> bool:
    """Whether any label names a real symbol rather than a section or PLT stub.

    objdump falls back to ``<.text>``-style section labels for stripped files.
    """
    return any(
        not name.startswith(".") and "@plt" not in name for name in functions
    )


def normalize(body: FunctionBody) -> list[str]:
    return [insn.opcode for insn in body.instructions]


def compare_bitwise(path_a: str | os.PathLike[str], path_b: str | os.PathLike[str]) -> bool:
    a, b = Path(path_a), Path(path_b)
    if a.stat().st_size != b.stat().st_size:
        return False
    with open(a, "rb") as fa, open(b, "rb") as fb:
        while True:
            chunk_a = fa.read(1 << 16)
            if chunk_a != fb.read(1 << 16):
                return False
            if not chunk_a:
                return True


def disassemble(
    binary_path: str | os.PathLike[str],
    command_template: str = DEFAULT_DISASSEMBLER_CMD,
    *,
    cache: bool = True,
    timeout: float = 600.0,
) -> str:
    """Run the configured disassembler on ``binary_path`` and return its text.

    ``{path}`` in the template is replaced by the file path. Output is cached
    in ``<binary>.disasm`` and reused while newer than the binary.
    """
    path = Path(binary_path)
    if not path.is_file():
        raise DisassemblyError(f"{path}: no such file")
    cache_path = path.with_name(path.name + ".disasm")
    if cache and cache_path.is_file() and cache_path.stat().st_mtime_ns >= path.stat().st_mtime_ns:
        return cache_path.read_text(encoding="utf-8", errors="replace")
    argv = [tok.replace("{path}", str(path)) for tok in shlex.split(command_template)]
    try:
        proc = subprocess.run(argv, capture_output=True, timeout=timeout, check=False)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise DisassemblyError(f"{path}: disassembler did not run: {exc}") from exc
    if proc.returncode != 0:
        msg = proc.stderr.decode("utf-8", errors="replace").strip()
        raise DisassemblyError(f"{path}: disassembler exited {proc.returncode}: {msg}")
    text = proc.stdout.decode("utf-8", errors="replace")
    if cache:
        tmp = cache_path.with_name(f"{cache_path.name}.{os.getpid()}.tmp")
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, cache_path)
    return text


@dataclass(frozen=True)
class FunctionDiff:
    functions_total_a: int
    functions_total_b: int
    matched: int
    differing: tuple[str, ...]
    added: tuple[str, ...]
    removed: tuple[str, ...]


def diff_functions(a: Mapping[str, FunctionBody], b: Mapping[str, FunctionBody]) -> FunctionDiff:
    common = a.keys() & b.keys()
    differing = sorted(n for n in common if normalize(a[n]) != normalize(b[n]))
    return FunctionDiff(
        functions_total_a=len(a),
        functions_total_b=len(b),
        matched=len(common),
        differing=tuple(differing),
        added=tuple(sorted(b.keys() - a.keys())),
        removed=tuple(sorted(a.keys() - b.keys())),
    )


@dataclass
class BinaryDiffReport:
    artifact: str
    path_a: str
    path_b: str
    bitwise_identical: bool
    symbols_available: bool = False
    disassembled: bool = False
    functions_total_a: int | None = None
    functions_total_b: int | None = None
    matched: int | None = None
    differing: list[str] = field(default_factory=list)
    added: list[str] = field(default_factory=list)
    removed: list[str] = field(default_factory=list)
    error: str | None = None

    def to_json(self) -> dict[str, Any]:
        return dict(self.__dict__)

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> BinaryDiffReport:
        return cls(**obj)


@dataclass
class ArtifactSetDiff:
    reports: list[BinaryDiffReport]
    only_a: list[str] = field(default_factory=list)
    only_b: list[str] = field(default_factory=list)

    @property
    def structural_anomaly(self) -> bool:
        return bool(self.only_a or self.only_b)

    @property
    def any_difference(self) -> bool:
        return any(not r.bitwise_identical for r in self.reports)

    @property
    def differing_functions(self) -> int:
        return sum(len(r.differing) for r in self.reports if r.symbols_available)

    @property
    def symbols_available(self) -> bool:
        return all(r.symbols_available for r in self.reports if not r.bitwise_identical)


def diff_artifact_pair(
    rel: str,
    path_a: Path,
    path_b: Path,
    *,
    disassembler_cmd: str = DEFAULT_DISASSEMBLER_CMD,
    disassemble_diffs: bool = True,
) -> BinaryDiffReport:
    report = BinaryDiffReport(rel, str(path_a), str(path_b), bitwise_identical=False)
    try:
        if compare_bitwise(path_a, path_b):
            report.bitwise_identical = True
            return report
        if not disassemble_diffs:
            return report
        fa = parse_functions(disassemble(path_a, disassembler_cmd))
        fb = parse_functions(disassemble(path_b, disassembler_cmd))
    except (OSError, DisassemblyError, DisassemblyParseError) as exc:
        report.error = str(exc)
        return report
    report.disassembled = True
    if not (has_symbols(fa) and has_symbols(fb)):
        return report
    d = diff_functions(fa, fb)
    report.symbols_available = True
    report.functions_total_a = d.functions_total_a
    report.functions_total_b = d.functions_total_b
    report.matched = d.matched
    report.differing = list(d.differing)
    report.added = list(d.added)
    report.removed = list(d.removed)
    return report


def diff_artifact_sets(
    out_a: BuildOutcome,
    out_b: BuildOutcome,
    *,
    disassembler_cmd: str = DEFAULT_DISASSEMBLER_CMD,
    disassemble_diffs: bool = True,
) -> ArtifactSetDiff:
    """Pair two builds' artifacts by relative path and diff each pair.

    Identical pairs are never disassembled. With ``disassemble_diffs`` false
    only the bitwise verdicts are produced.
    """
    if not (out_a.ok and out_b.ok):
        raise ValueError("both builds must have succeeded")
    paths_a = {a.path for a in out_a.artifacts}
    paths_b = {a.path for a in out_b.artifacts}
    reports = [
        diff_artifact_pair(
            rel,
            out_a.artifact_file(rel),
            out_b.artifact_file(rel),
            disassembler_cmd=disassembler_cmd,
            disassemble_diffs=disassemble_diffs,
        )
        for rel in sorted(paths_a & paths_b)
    ]
    return ArtifactSetDiff(reports, sorted(paths_a - paths_b), sorted(paths_b - paths_a))


def load_functions(binary_path: Path, disassembler_cmd: str = DEFAULT_DISASSEMBLER_CMD) -> dict[str, FunctionBody]:
    return parse_functions(disassemble(binary_path, disassembler_cmd))


def write_reports(reports: Iterable[BinaryDiffReport], directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for r in reports:
        name = r.artifact.replace("/", "__") + ".json"
        (directory / name).write_text(json.dumps(r.to_json(), indent=2, sort_keys=True) + "\n")
