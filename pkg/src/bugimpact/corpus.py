"""Corpus manifest: the packages eligible for impact analysis."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Any, Iterable

C_FAMILY_SUFFIXES = frozenset({".c", ".h", ".cc", ".cpp", ".cxx", ".hh", ".hpp"})

_PACKAGE_FIELDS = {
    "name",
    "version",
    "source_path",
    "build_cmd",
    "test_cmd",
    "artifact_globs",
    "loc",
    "reproducible",
}
_MANIFEST_FIELDS = {"min_loc", "packages", "created_at"}


class ManifestError(ValueError):
    """Malformed or invalid corpus manifest."""


class Reproducibility(str, Enum):
    UNKNOWN = "unknown"
    VERIFIED = "verified"
    FAILED = "failed"


@dataclass(frozen=True)
class PackageSpec:
    name: str
    version: str
    source_path: Path
    build_cmd: str
    test_cmd: str | None
    artifact_globs: tuple[str, ...]
    loc: int
    reproducible: Reproducibility = Reproducibility.UNKNOWN

    def __post_init__(self) -> None:
        if not self.name:
            raise ManifestError("package name must be nonempty")
        if not self.artifact_globs:
            raise ManifestError(f"package {self.name!r}: artifact_globs must be nonempty")
        if self.loc < 0:
            raise ManifestError(f"package {self.name!r}: loc must be >= 0, got {self.loc}")

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "version": self.version,
            "source_path": str(self.source_path),
            "build_cmd": self.build_cmd,
            "test_cmd": self.test_cmd,
            "artifact_globs": list(self.artifact_globs),
            "loc": self.loc,
            "reproducible": self.reproducible.value,
        }


@dataclass(frozen=True)
class CorpusManifest:
    packages: tuple[PackageSpec, ...]
    min_loc: int = 1000
    created_at: datetime = field(default_factory=lambda: datetime.now(timezone.utc).replace(microsecond=0))

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for pkg in self.packages:
            if pkg.name in seen:
                raise ManifestError(f"duplicate package name {pkg.name!r}")
            seen.add(pkg.name)

    def __len__(self) -> int:
        return len(self.packages)

    def __iter__(self):
        return iter(self.packages)

    def get(self, name: str) -> PackageSpec:
        for pkg in self.packages:
            if pkg.name == name:
                return pkg
        raise KeyError(name)

    def with_package(self, pkg: PackageSpec) -> CorpusManifest:
        """Return a copy with the same-named entry replaced by ``pkg``."""
        packages = tuple(pkg if p.name == pkg.name else p for p in self.packages)
        return replace(self, packages=packages)

    def to_json(self) -> dict[str, Any]:
        return {
            "min_loc": self.min_loc,
            "created_at": self.created_at.isoformat(),
            "packages": [p.to_json() for p in self.packages],
        }


def _package_from_json(obj: Any, index: int, base_dir: Path) -> PackageSpec:
    if not isinstance(obj, dict):
        raise ManifestError(f"packages[{index}]: expected an object")
    label = obj.get("name") or f"packages[{index}]"
    unknown = set(obj) - _PACKAGE_FIELDS
    if unknown:
        raise ManifestError(f"package {label!r}: unknown field(s) {sorted(unknown)}")
    for key in ("name", "version", "source_path", "build_cmd", "artifact_globs"):
        if key not in obj:
            raise ManifestError(f"package {label!r}: missing field {key!r}")
    globs = obj["artifact_globs"]
    if not isinstance(globs, list) or not all(isinstance(g, str) for g in globs):
        raise ManifestError(f"package {label!r}: artifact_globs must be an array of strings")
    if not globs:
        raise ManifestError(f"package {label!r}: artifact_globs must be nonempty")
    test_cmd = obj.get("test_cmd")
    if test_cmd is not None and not isinstance(test_cmd, str):
        raise ManifestError(f"package {label!r}: test_cmd must be a string or null")

    source_path = Path(obj["source_path"])
    if not source_path.is_absolute():
        source_path = (base_dir / source_path).resolve()

    loc = obj.get("loc")
    if loc is None:
        try:
            loc = count_loc(source_path)
        except OSError as exc:
            raise ManifestError(f"package {label!r}: cannot count lines of code: {exc}") from exc
    elif not isinstance(loc, int) or isinstance(loc, bool):
        raise ManifestError(f"package {label!r}: loc must be an integer")

    try:
        reproducible = Reproducibility(obj.get("reproducible", "unknown"))
    except ValueError:
        raise ManifestError(
            f"package {label!r}: reproducible must be one of unknown|verified|failed"
        ) from None

    return PackageSpec(
        name=str(obj["name"]),
        version=str(obj["version"]),
        source_path=source_path,
        build_cmd=str(obj["build_cmd"]),
        test_cmd=test_cmd,
        artifact_globs=tuple(globs),
        loc=loc,
        reproducible=reproducible,
    )


def manifest_from_json(doc: Any, base_dir: Path = Path(".")) -> CorpusManifest:
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    unknown = set(doc) - _MANIFEST_FIELDS
    if unknown:
        raise ManifestError(f"manifest: unknown field(s) {sorted(unknown)}")
    if "packages" not in doc or not isinstance(doc["packages"], list):
        raise ManifestError("manifest: 'packages' must be an array")
    min_loc = doc.get("min_loc", 1000)
    if not isinstance(min_loc, int) or isinstance(min_loc, bool):
        raise ManifestError("manifest: 'min_loc' must be an integer")

    packages = [_package_from_json(obj, i, base_dir) for i, obj in enumerate(doc["packages"])]
    seen: set[str] = set()
    for pkg in packages:
        if pkg.name in seen:
            raise ManifestError(f"duplicate package name {pkg.name!r}")
        seen.add(pkg.name)

    kwargs: dict[str, Any] = {}
    if "created_at" in doc:
        try:
            kwargs["created_at"] = datetime.fromisoformat(doc["created_at"])
        except (TypeError, ValueError):
            raise ManifestError("manifest: 'created_at' must be an ISO-8601 timestamp") from None
    return CorpusManifest(packages=tuple(packages), min_loc=min_loc, **kwargs)


def load_manifest(path: str | os.PathLike[str]) -> CorpusManifest:
    """Load and validate a manifest file.

    Relative ``source_path`` entries are resolved against the manifest's
    directory; a missing ``loc`` is computed with :func:`count_loc`.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: parse error at line {exc.lineno}: {exc.msg}") from exc
    return manifest_from_json(doc, base_dir=path.parent)


def save_manifest(manifest: CorpusManifest, path: str | os.PathLike[str]) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _code_lines(text: str) -> int:
    """Count lines holding something other than whitespace and comments."""
    count = 0
    in_block = False
    for line in text.splitlines():
        has_code = False
        i, n = 0, len(line)
        quote: str | None = None
        while i < n:
            ch = line[i]
            if in_block:
                if line.startswith("*/", i):
                    in_block = False
                    i += 2
                else:
                    i += 1
                continue
            if quote is not None:
                has_code = True
                if ch == "\\":
                    i += 2
                    continue
                if ch == quote:
                    quote = None
                i += 1
                continue
            if line.startswith("//", i):
                break
            if line.startswith("/*", i):
                in_block = True
                i += 2
                continue
            if ch in "\"'":
                quote = ch
                has_code = True
            elif not ch.isspace():
                has_code = True
            i += 1
        if has_code:
            count += 1
    return count


def count_loc(source_path: str | os.PathLike[str]) -> int:
    """Count non-blank, non-comment-only lines of C/C++ code under a tree."""
    root = Path(source_path)
    if not root.exists():
        raise FileNotFoundError(str(root))
    files: Iterable[Path] = [root] if root.is_file() else sorted(root.rglob("*"))
    total = 0
    for f in files:
        if f.suffix.lower() in C_FAMILY_SUFFIXES and f.is_file():
            total += _code_lines(f.read_bytes().decode("utf-8", errors="replace"))
    return total


def filter_corpus(
    manifest: CorpusManifest, min_loc: int, require_reproducible: bool = False
) -> CorpusManifest:
    kept = tuple(
        p
        for p in manifest.packages
        if p.loc >= min_loc
        and (not require_reproducible or p.reproducible is Reproducibility.VERIFIED)
    )
    return replace(manifest, packages=kept, min_loc=min_loc)
