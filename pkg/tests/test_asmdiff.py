from __future__ import annotations

import shutil
import subprocess
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bugimpact.asmdiff import (
    BinaryDiffReport,
    DisassemblyError,
    DisassemblyParseError,
    FunctionBody,
    Instruction,
    compare_bitwise,
    diff_artifact_sets,
    diff_functions,
    disassemble,
    has_symbols,
    normalize,
    parse_functions,
    split_opcode,
)
from bugimpact.builder import Artifact, BuildOutcome, BuildStatus, sha256_file

from conftest import needs_toolchain

OBJDUMP_SAMPLE = """\

prog:     file format elf64-x86-64

Sections:
Idx Name          Size      VMA               LMA               File off  Algn
  0 .init         0000001b  0000000000001000  0000000000001000  00001000  2**2
                  CONTENTS, ALLOC, LOAD, READONLY, CODE
  1 .text         00000100  0000000000001040  0000000000001040  00001040  2**4
                  CONTENTS, ALLOC, LOAD, READONLY, CODE
  2 .rodata       00000010  0000000000002000  0000000000002000  00002000  2**2
                  CONTENTS, ALLOC, LOAD, READONLY, DATA

Disassembly of section .init:

0000000000001000 <_init>:
    1000:\tf3 0f 1e fa          \tendbr64
    1004:\t48 83 ec 08          \tsub    $0x8,%rsp
    1008:\tc3                   \tret

Disassembly of section .text:

0000000000001040 <main>:
    1040:\t48 c7 c0 01 00 00 00 \tmov    $0x1,%rax
    1047:\tf0 0f c1 07          \tlock xadd %eax,(%rdi)
    104b:\tf3 48 ab             \trep stos %rax,%es:(%rdi)
    104e:\tc3                   \tret
    104f:\t90                   \tnop

0000000000001050 <helper>:
    1050:\t48 8d 04 37          \tlea    (%rdi,%rsi,1),%rax
    1054:\t48 b8 00 00 00 00 00 \tmovabs $0x0,%rax
    105b:\t00 00 00
    105e:\tc3                   \tret

Disassembly of section .rodata:

0000000000002000 <table>:
    2000:\t01 00 00 00          \tadd    %eax,(%rax)
"""


def _body(name: str, *lines: str) -> FunctionBody:
    insns = []
    for i, line in enumerate(lines):
        op, _, rest = line.partition(" ")
        insns.append(Instruction(f"{i:x}", op, rest.strip()))
    return FunctionBody(name, tuple(insns))


def test_parse_objdump_sample() -> None:
    funcs = parse_functions(OBJDUMP_SAMPLE)
    assert list(funcs) == ["_init", "main", "helper"]
    assert normalize(funcs["main"]) == ["mov", "lock_xadd", "rep_stos", "ret", "nop"]
    # The byte-only continuation line is skipped.
    assert normalize(funcs["helper"]) == ["lea", "movabs", "ret"]
    assert funcs["main"].instructions[0].address == "1040"
    assert funcs["main"].instructions[0].operands_text == "$0x1,%rax"


def test_parse_without_summary_keeps_all_sections() -> None:
    text = OBJDUMP_SAMPLE.split("Disassembly of section .init:")[1]
    text = "Disassembly of section .init:" + text
    assert "table" in parse_functions(text)
    assert parse_functions(text, all_sections_without_summary=False) == {}


def test_two_labels_three_and_two() -> None:
    text = (
        "0000 <f>:\n  0:\tmov %eax,%ebx\n  2:\tadd $1,%eax\n  5:\tret\n"
        "0010 <g>:\n 10: 55 push %rbp\n 11: c3 ret\n"
    )
    funcs = parse_functions(text)
    assert {n: len(b.instructions) for n, b in funcs.items()} == {"f": 3, "g": 2}
    assert normalize(funcs["g"]) == ["push", "ret"]


def test_duplicate_labels_disambiguated() -> None:
    text = "0 <foo>:\n 0:\tret\n10 <bar>:\n 10:\tnop\n20 <foo>:\n 20:\tnop\n 21:\tret\n"
    funcs = parse_functions(text)
    assert list(funcs) == ["foo#1", "bar", "foo#2"]
    assert normalize(funcs["foo#2"]) == ["nop", "ret"]


def test_empty_text() -> None:
    assert parse_functions("") == {}


def test_instruction_outside_function_names_line() -> None:
    with pytest.raises(DisassemblyParseError) as info:
        parse_functions("\n\n  10:\tret\n")
    assert info.value.lineno == 3


def test_empty_label_rejected() -> None:
    with pytest.raises(DisassemblyParseError):
        parse_functions("0 <>:\n")


def test_instruction_opcode_invariant() -> None:
    with pytest.raises(ValueError):
        Instruction("0", "")
    with pytest.raises(ValueError):
        Instruction("0", "mov rax")


@pytest.mark.parametrize(
    "tokens, expected",
    [
        (["mov", "rax,", "1"], ("mov", 1)),
        (["lock", "cmpxchg", "x"], ("lock_cmpxchg", 2)),
        (["rep", "stos"], ("rep_stos", 2)),
        (["bnd", "jmp", "*%r11"], ("bnd_jmp", 2)),
        (["rep"], ("rep", 1)),
        (["rex.W", "mov"], ("rex.W_mov", 2)),
    ],
)
def test_split_opcode(tokens: list[str], expected: tuple[str, int]) -> None:
    assert split_opcode(tokens) == expected


def test_normalize_examples() -> None:
    assert normalize(_body("f", "mov rax, 1", "ret")) == ["mov", "ret"]
    assert normalize(_body("f", "add rax, 8")) == normalize(_body("f", "add rax, 16"))
    assert normalize(_body("f", "add rax, 8")) != normalize(_body("f", "lea rax, [rax+8]"))


def test_diff_identity_and_operand_change() -> None:
    a = {"f": _body("f", "mov rax, 1", "ret")}
    assert diff_functions(a, a).differing == ()
    b = {"f": _body("f", "mov rbx, 2", "ret")}
    d = diff_functions(a, b)
    assert (d.differing, d.added, d.removed, d.matched) == ((), (), (), 1)


def test_diff_hand_fixture() -> None:
    a = {"f": _body("f", "push rbp", "ret"), "g": _body("g", "nop")}
    b = {"f": _body("f", "push rbp", "nop", "ret"), "g": _body("g", "nop"), "h": _body("h", "ret")}
    d = diff_functions(a, b)
    assert d.differing == ("f",)
    assert d.added == ("h",)
    assert d.removed == ()
    assert (d.functions_total_a, d.functions_total_b, d.matched) == (2, 3, 2)


_mnemonics = st.sampled_from(["mov", "add", "sub", "lea", "ret", "call", "jmp", "push", "pop", "xor"])
_bodies = st.lists(st.tuples(_mnemonics, st.text(alphabet="%$rax0123,()", max_size=8)), max_size=8)
_maps = st.dictionaries(
    st.sampled_from(["f", "g", "h", "main", "util", "k"]),
    _bodies,
    max_size=6,
).map(lambda m: {n: FunctionBody(n, tuple(Instruction("0", op, rest) for op, rest in b)) for n, b in m.items()})


@given(_maps)
def test_diff_reflexive(m: dict[str, FunctionBody]) -> None:
    d = diff_functions(m, m)
    assert d.differing == d.added == d.removed == ()
    assert d.matched == len(m)


@given(_maps, _maps)
def test_diff_symmetric(a: dict[str, FunctionBody], b: dict[str, FunctionBody]) -> None:
    ab, ba = diff_functions(a, b), diff_functions(b, a)
    assert ab.differing == ba.differing
    assert ab.matched == ba.matched
    assert ab.added == ba.removed and ab.removed == ba.added
    assert len(ab.differing) <= ab.matched <= min(len(a), len(b))


@given(_maps)
def test_normalize_idempotent(m: dict[str, FunctionBody]) -> None:
    for body in m.values():
        ops = normalize(body)
        stripped = FunctionBody(body.name, tuple(Instruction(i.address, i.opcode) for i in body.instructions))
        assert normalize(stripped) == ops


def test_compare_bitwise(tmp_path: Path) -> None:
    a, b, e1, e2 = (tmp_path / n for n in ("a", "b", "e1", "e2"))
    a.write_bytes(b"\x00" * 100_000 + b"x")
    b.write_bytes(b"\x00" * 100_000 + b"y")
    e1.write_bytes(b"")
    e2.write_bytes(b"")
    assert compare_bitwise(a, a)
    assert not compare_bitwise(a, b)
    assert compare_bitwise(e1, e2)
    with pytest.raises(OSError):
        compare_bitwise(a, tmp_path / "missing")


def test_has_symbols() -> None:
    assert not has_symbols({".text": _body(".text", "ret"), "__cxa_finalize@plt": _body("p", "jmp x")})
    assert has_symbols({"main": _body("main", "ret")})


def test_disassembler_template_and_cache(tmp_path: Path) -> None:
    binary = tmp_path / "bin"
    binary.write_bytes(b"payload")
    counter = tmp_path / "count"
    fake = tmp_path / "fakedis"
    fake.write_text(f'#!/bin/sh\necho run >> {counter}\necho "0 <f>:"\necho " 0:\tret"\necho "$1"\n')
    fake.chmod(0o755)
    text = disassemble(binary, f"{fake} {{path}}")
    assert str(binary) in text
    assert (tmp_path / "bin.disasm").read_text() == text
    disassemble(binary, f"{fake} {{path}}")
    assert counter.read_text().count("run") == 1
    disassemble(binary, f"{fake} {{path}}", cache=False)
    assert counter.read_text().count("run") == 2


def test_disassembler_failure(tmp_path: Path) -> None:
    binary = tmp_path / "bin"
    binary.write_bytes(b"x")
    with pytest.raises(DisassemblyError, match="exited 1"):
        disassemble(binary, "false {path}")
    with pytest.raises(DisassemblyError):
        disassemble(tmp_path / "absent")


def _compile(tmp_path: Path, name: str, source: str, *flags: str) -> Path:
    src = tmp_path / f"{name}.c"
    src.write_text(source)
    out = tmp_path / name
    subprocess.run(["gcc", "-O2", *flags, str(src), "-o", str(out)], check=True)
    return out


@needs_toolchain
def test_real_object_single_main(tmp_path: Path) -> None:
    obj = _compile(tmp_path, "one.o", "int main(void) { return 0; }\n", "-c")
    funcs = parse_functions(disassemble(obj))
    assert list(funcs) == ["main"]


@needs_toolchain
def test_real_stripped_binary_has_no_symbols(tmp_path: Path) -> None:
    exe = _compile(tmp_path, "prog", "int add(int a,int b){return a+b;}\nint main(void){return add(1,2);}\n")
    stripped = tmp_path / "prog.stripped"
    shutil.copy(exe, stripped)
    subprocess.run(["strip", str(stripped)], check=True)
    nm = subprocess.run(["nm", str(stripped)], capture_output=True, text=True)
    assert "no symbols" in nm.stderr
    assert has_symbols(parse_functions(disassemble(exe)))
    assert not has_symbols(parse_functions(disassemble(stripped)))


@needs_toolchain
def test_real_text_file_rejected(tmp_path: Path) -> None:
    text = tmp_path / "notes.txt"
    text.write_text("hello\n")
    with pytest.raises(DisassemblyError):
        disassemble(text)


def _outcome(root: Path, variant: str, files: dict[str, bytes]) -> BuildOutcome:
    arts = []
    for rel, data in files.items():
        p = root / variant / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
        arts.append(Artifact(rel, len(data), sha256_file(p)))
    return BuildOutcome("p", variant, BuildStatus.OK, root / f"{variant}.log",
                        artifacts=tuple(arts), artifact_root=root / variant)


def test_artifact_sets_identical_and_structural(tmp_path: Path) -> None:
    a = _outcome(tmp_path, "a", {"bin/x": b"1", "lib/y": b"2"})
    b = _outcome(tmp_path, "b", {"bin/x": b"1", "lib/z": b"3"})
    diff = diff_artifact_sets(a, b, disassembler_cmd="false {path}")
    assert [r.bitwise_identical for r in diff.reports] == [True]
    assert not diff.any_difference
    assert diff.structural_anomaly
    assert (diff.only_a, diff.only_b) == (["lib/y"], ["lib/z"])
    assert not (tmp_path / "a" / "bin" / "x.disasm").exists()


def test_artifact_error_captured_per_report(tmp_path: Path) -> None:
    a = _outcome(tmp_path, "a", {"x": b"1", "y": b"same"})
    b = _outcome(tmp_path, "b", {"x": b"2", "y": b"same"})
    diff = diff_artifact_sets(a, b, disassembler_cmd="false {path}")
    x, y = diff.reports
    assert x.error and not x.symbols_available
    assert y.bitwise_identical and y.error is None
    assert not diff.symbols_available


def test_report_round_trip() -> None:
    r = BinaryDiffReport("bin/x", "/a", "/b", False, True, True, 3, 4, 3, ["f"], ["h"], [], None)
    assert BinaryDiffReport.from_json(r.to_json()) == r


@needs_toolchain
def test_shim_changes_exactly_one_function(tmp_path: Path, toy_bug) -> None:
    from bugimpact.builder import build_package
    from bugimpact.corpus import load_manifest

    from conftest import TOY

    pkg = load_manifest(TOY / "manifest.json").get("pkg-d")
    buggy = build_package(pkg, toy_bug.buggy, artifact_dir=tmp_path / "b")
    fixed = build_package(pkg, toy_bug.fixed, artifact_dir=tmp_path / "f")
    diff = diff_artifact_sets(buggy, fixed)
    (report,) = diff.reports
    assert not report.bitwise_identical
    assert report.differing == ["planted_target"]
    assert report.added == report.removed == []
    assert diff.differing_functions == 1
