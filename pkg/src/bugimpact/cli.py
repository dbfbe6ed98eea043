"""``bugimpact`` command line: corpus verification, staged runs, reports.

Every flag can also be set through an environment variable named
``IMPACT_`` plus the flag name in upper case with dashes turned into
underscores (``--rerun-count`` reads ``IMPACT_RERUN_COUNT``). Explicit
flags win over the environment.

Exit codes: 0 when the command completed, 1 on configuration or
validation errors, 2 on internal errors.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
import traceback
from pathlib import Path
from typing import Sequence

from . import __version__
from .asmdiff import DEFAULT_DISASSEMBLER_CMD
from .builder import DEFAULT_BUILD_TIMEOUT, WorkdirPolicy, check_reproducibility
from .corpus import ManifestError, filter_corpus, load_manifest, save_manifest
from .dyncompare import DEFAULT_RERUN_COUNT, DEFAULT_TEST_TIMEOUT
from .pipeline import ConfigError, Pipeline, RunConfig, load_rows, recount_function_total
from .report import DEFAULT_FUNCTION_TOTAL, GROUPINGS, ReportError, aggregate, render
from .toolchain import BugDescriptorError, CompilerVariant, Role, load_bug

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INTERNAL = 2


class UsageError(Exception):
    """Bad command line; mapped to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # type: ignore[override]
        raise UsageError(message)


def _env_default(flag: str, default=None):
    name = "IMPACT_" + flag.lstrip("-").replace("-", "_").upper()
    return os.environ.get(name, default)


def _add(p: argparse.ArgumentParser, flag: str, **kw) -> None:
    env = _env_default(flag)
    if env is not None:
        if kw.get("action") == "store_true":
            kw["default"] = env.strip().lower() in {"1", "true", "yes", "on"}
        else:
            kw["default"] = env
        kw.pop("required", None)
    p.add_argument(flag, **kw)


def _stages(text: str) -> frozenset[int]:
    try:
        stages = frozenset(int(s) for s in str(text).split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad stage list {text!r}") from None
    if not stages or not stages <= {1, 2, 3}:
        raise argparse.ArgumentTypeError(f"stages must be a nonempty subset of 1,2,3, got {text!r}")
    return stages


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bugimpact", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    corpus = sub.add_parser("corpus", help="corpus preparation")
    csub = corpus.add_subparsers(dest="corpus_command", required=True, parser_class=_Parser)

    verify = csub.add_parser("verify", help="build each package twice and stamp reproducibility")
    _add(verify, "--manifest", type=Path, required=True)
    _add(verify, "--output", type=Path, help="where to write the stamped manifest (default: in place)")
    _add(verify, "--cc", type=Path, help="C compiler (default: the bug file's variant, else cc)")
    _add(verify, "--cxx", type=Path, help="C++ compiler")
    _add(verify, "--bug-file", type=Path, help="take compilers from this bug descriptor")
    _add(verify, "--role", choices=[r.value for r in Role], default=Role.FIXED.value,
         help="variant used from --bug-file")
    _add(verify, "--against", choices=[r.value for r in Role],
         help="build the second time with this variant instead of repeating --role")
    _add(verify, "--build-timeout", type=float, default=DEFAULT_BUILD_TIMEOUT)
    _add(verify, "--workdir-root", type=Path)

    filt = csub.add_parser("filter", help="drop packages under a size threshold")
    _add(filt, "--manifest", type=Path, required=True)
    _add(filt, "--output", type=Path, required=True)
    _add(filt, "--min-loc", type=int, default=1000)
    _add(filt, "--require-reproducible", action="store_true")

    run = sub.add_parser("run", help="run the selected stages for one bug over the corpus")
    _add(run, "--run-dir", type=Path, required=True, help="output directory for records")
    _add(run, "--bug-file", type=Path, required=True, help="bug descriptor JSON")
    _add(run, "--manifest", type=Path, required=True)
    _add(run, "--stages", type=_stages, default="1,2,3", help="comma-separated subset of 1,2,3")
    _add(run, "--parallelism", type=_positive, default=1, help="packages processed concurrently")
    _add(run, "--rerun-count", type=_positive, default=DEFAULT_RERUN_COUNT, help="reruns confirming a test divergence")
    _add(run, "--seed", type=int, default=0, help="seed for worksheet function sampling")
    _add(run, "--sample-size", type=int, default=10, help="functions sampled per worksheet (0 disables)")
    _add(run, "--disassembler-cmd", default=DEFAULT_DISASSEMBLER_CMD, help="disassembler command line")
    _add(run, "--build-timeout", type=float, default=DEFAULT_BUILD_TIMEOUT, help="seconds per package build")
    _add(run, "--test-timeout", type=float, default=DEFAULT_TEST_TIMEOUT, help="seconds per test-suite run")
    _add(run, "--workdir-root", type=Path, help="parent for scratch build directories")
    _add(run, "--dry-run", action="store_true", help="validate configuration and exit")

    rep = sub.add_parser("report", help="render tables from a run directory")
    _add(rep, "--run-dir", type=Path, required=True)
    _add(rep, "--group-by", choices=[g for g in GROUPINGS if g != "all"], default="bug")
    _add(rep, "--format", choices=["markdown", "csv"], default="markdown")
    _add(rep, "--total", action="store_true", help="append an ALL row to grouped tables")
    _add(rep, "--function-total", type=int, default=DEFAULT_FUNCTION_TOTAL,
         help="functions per package set used as the fraction denominator")
    _add(rep, "--recount-functions", action="store_true",
         help="derive the denominator from cached disassembly instead")
    _add(rep, "--lenient", action="store_true",
         help="record precise-bug inconsistencies as anomalies instead of failing")
    return parser


def _progress(line: str) -> None:
    print(line, file=sys.stderr, flush=True)


def _verify_variants(args) -> tuple[CompilerVariant, CompilerVariant | None]:
    if args.bug_file is not None:
        bug = load_bug(args.bug_file)
        first = bug.variant(Role(args.role))
        second = bug.variant(Role(args.against)) if args.against else None
        return first, second
    if args.against:
        raise UsageError("--against needs --bug-file")
    cc = Path(args.cc) if args.cc else Path(shutil.which("cc") or "/usr/bin/cc")
    cxx = Path(args.cxx) if args.cxx else Path(shutil.which("c++") or "/usr/bin/c++")
    return CompilerVariant("corpus-verify", Role.FIXED, cc, cxx), None


def cmd_corpus_verify(args) -> int:
    manifest = load_manifest(args.manifest)
    first, second = _verify_variants(args)
    policy = WorkdirPolicy(root=args.workdir_root, timeout=float(args.build_timeout))
    errored = False
    for pkg in manifest.packages:
        try:
            verdict, stamped = check_reproducibility(pkg, first, policy, second_variant=second)
        except Exception as exc:  # noqa: BLE001 - per-package errors never abort
            errored = True
            _progress(f"{pkg.name}: error {type(exc).__name__}: {exc}")
            continue
        if verdict.reason and verdict.reason.startswith("build-error"):
            errored = True
        detail = verdict.reason or ""
        if verdict.differing:
            detail += ": " + ", ".join(verdict.differing)
        _progress(f"{pkg.name}: {verdict.verdict.value}" + (f" ({detail})" if detail else ""))
        manifest = manifest.with_package(stamped)
    save_manifest(manifest, args.output or args.manifest)
    return EXIT_CONFIG if errored else EXIT_OK


def cmd_corpus_filter(args) -> int:
    manifest = load_manifest(args.manifest)
    kept = filter_corpus(manifest, int(args.min_loc), require_reproducible=bool(args.require_reproducible))
    save_manifest(kept, args.output)
    _progress(f"kept {len(kept)} of {len(manifest)} package(s)")
    return EXIT_OK


def cmd_run(args) -> int:
    stages = args.stages if isinstance(args.stages, frozenset) else _stages(args.stages)
    config = RunConfig(
        run_dir=Path(args.run_dir),
        bug_file=Path(args.bug_file),
        manifest_file=Path(args.manifest),
        stages=stages,
        parallelism=int(args.parallelism),
        rerun_count=int(args.rerun_count),
        build_timeout=float(args.build_timeout),
        test_timeout=float(args.test_timeout),
        disassembler_cmd=args.disassembler_cmd,
        seed=int(args.seed),
        sample_size=int(args.sample_size),
        workdir_root=Path(args.workdir_root) if args.workdir_root else None,
        dry_run=bool(args.dry_run),
    )
    summary = Pipeline(config, progress=_progress).run()
    if not config.dry_run:
        print(json.dumps(summary.to_json(), sort_keys=True))
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    total: int | None = int(args.function_total)
    if args.recount_functions:
        total = recount_function_total(run_dir)
    rows = load_rows(run_dir, function_total=total, strict=not args.lenient)
    if not rows:
        raise ReportError(f"no records under {run_dir}")
    if args.group_by == "bug":
        text = render(rows, args.format)
        if args.total:
            text += render(aggregate(rows, "all"), args.format)
    else:
        groups = aggregate(rows, args.group_by)
        if args.total:
            groups += aggregate(rows, "all")
        text = render(groups, args.format)
    sys.stdout.write(text)
    return EXIT_OK


_COMMANDS = {
    ("corpus", "verify"): cmd_corpus_verify,
    ("corpus", "filter"): cmd_corpus_filter,
    ("run", None): cmd_run,
    ("report", None): cmd_report,
}

_CONFIG_ERRORS = (UsageError, ConfigError, ManifestError, BugDescriptorError, ReportError,
                  FileNotFoundError, argparse.ArgumentTypeError)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        handler = _COMMANDS[(args.command, getattr(args, "corpus_command", None))]
        return handler(args)
    except SystemExit as exc:
        # --help and --version
        return int(exc.code or 0)
    except _CONFIG_ERRORS as exc:
        print(f"bugimpact: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_INTERNAL
    except Exception:  # noqa: BLE001
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
