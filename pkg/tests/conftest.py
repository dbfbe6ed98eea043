from __future__ import annotations

import shutil
from dataclasses import replace
from pathlib import Path

import pytest

from bugimpact.corpus import load_manifest
from bugimpact.toolchain import BugDescriptor, CompilerVariant, Role, load_bug

FIXTURES = Path(__file__).parent / "fixtures"
SHIM = FIXTURES / "shim" / "shimcc"
TOY = FIXTURES / "toy"

HAVE_TOOLCHAIN = all(shutil.which(t) for t in ("gcc", "g++", "objdump"))
needs_toolchain = pytest.mark.skipif(not HAVE_TOOLCHAIN, reason="gcc/g++/objdump not installed")


def shim_variant(variant_id: str, role: Role, **env: str) -> CompilerVariant:
    return CompilerVariant(variant_id, role, SHIM, SHIM, extra_env=env)


@pytest.fixture
def toy_bug() -> BugDescriptor:
    return load_bug(TOY / "bug.json")


@pytest.fixture
def toy_manifest():
    return load_manifest(TOY / "manifest.json")


@pytest.fixture
def imprecise_bug(toy_bug: BugDescriptor) -> BugDescriptor:
    from bugimpact.toolchain import Precision

    return replace(toy_bug, precision=Precision.OVER_APPROXIMATING)


# Acceptance criteria outcomes, filled in by test_acceptance and printed at
# the end of the session.
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter) -> None:
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        ok, line = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid} {'PASS' if ok else 'FAIL'} {line}")
