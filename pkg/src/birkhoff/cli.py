"""Command-line front end: ``birkhoff {compress,decompress,verify,inspect,bench}``.

Exit status: 0 on success, 1 on invalid arguments or a failed budget or
verification, 2 on unreadable, missing or corrupt files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

from . import bench, pipeline
from .codec import CodebookKind
from .container import EligibilityPolicy, read_container
from .errors import BirkhoffError, CorruptDataError, ParameterError, RejectedInputError
from .hyperlinear import BlockConfig
from .presets import DEFAULT_PRESET, get_preset, load_presets
from .safetensors_io import ingest_safetensors
from .search import SearchSpace

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2
WORKERS_ENV = "BIRKHOFF_WORKERS"

log = logging.getLogger("birkhoff")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def resolve_workers(value: int | None) -> int:
    if value is None:
        env = os.environ.get(WORKERS_ENV)
        if not env:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise ParameterError(f"{WORKERS_ENV}={env!r} is not an integer") from None
    if value < 1:
        raise ParameterError(f"worker count must be >= 1, got {value}")
    return value


def resolve_space(args) -> SearchSpace:
    """Preset grid with any explicitly given axis replacing the preset's."""
    space = get_preset(args.preset or DEFAULT_PRESET).space
    return SearchSpace(
        tuple(args.l) if args.l else space.l_candidates,
        tuple(args.U) if args.U else space.U_candidates,
        tuple(args.M) if args.M else space.M_candidates,
    )


def _policy(args) -> EligibilityPolicy:
    return EligibilityPolicy(args.min_elems, tuple(args.include), tuple(args.exclude))


def _csv(rows, columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def _emit(args, payload: dict, rows: list[dict], columns, text: str):
    if args.format == "json":
        out = json.dumps(payload, indent=2, sort_keys=True)
    elif args.format == "csv":
        out = _csv(rows, columns)
    else:
        out = text
    print(out.rstrip("\n"))


def _fmt(value, spec=".6g"):
    return "-" if value is None else format(value, spec)


def cmd_compress(args) -> int:
    space = resolve_space(args)
    report = pipeline.compress_file(args.input, args.output, space, _policy(args),
                                    resolve_workers(args.workers), CodebookKind(args.kind))
    over = [t.name for t in report.tensors
            if args.mae_budget is not None and t.mae is not None and t.mae > args.mae_budget]
    payload = report.to_dict()
    payload["budget"] = args.mae_budget
    payload["over_budget"] = over
    lines = [f"{'name':<40} {'kind':<11} {'shape':<14} {'bits/param':>10} {'mae':>12} {'seconds':>8}"]
    for t in report.tensors:
        shape = "x".join(map(str, t.shape))
        lines.append(f"{t.name:<40} {t.kind:<11} {shape:<14} {t.bits_per_param:>10.3f} "
                     f"{_fmt(t.mae):>12} {t.seconds:>8.2f}")
    lines.append(f"total: {report.original_bytes} -> {report.stored_bytes} bytes, "
                 f"ratio {report.ratio:.3f}x in {report.seconds:.2f} s")
    if over:
        lines.append(f"MAE budget {args.mae_budget} exceeded by: {', '.join(over)}")
    columns = ["name", "kind", "shape", "dtype", "numel", "original_bytes", "stored_bytes",
               "bits_per_param", "mae", "l", "U", "M", "seconds", "note"]
    rows = [dict(asdict(t), shape="x".join(map(str, t.shape))) for t in report.tensors]
    _emit(args, payload, rows, columns, "\n".join(lines))
    return EXIT_INVALID if over else EXIT_OK


def cmd_decompress(args) -> int:
    tensors = pipeline.decompress_file(args.input, args.output)
    rows = [{"name": n, "dtype": t.dtype, "shape": "x".join(map(str, t.shape))}
            for n, t in tensors.items()]
    text = "\n".join(f"{r['name']}: {r['dtype']} {r['shape']}" for r in rows)
    _emit(args, {"output": str(args.output), "tensors": rows}, rows, ["name", "dtype", "shape"],
          text + f"\nwrote {len(rows)} tensors to {args.output}")
    return EXIT_OK


def cmd_verify(args) -> int:
    report = pipeline.verify(ingest_safetensors(args.original), read_container(args.container),
                             args.mae_budget)
    payload = report.to_dict()
    rows = payload["rows"]
    lines = [f"{'name':<40} {'kind':<11} {'mae':>12} {'max_abs':>12} {'bits/param':>10}  status"]
    for r in report.rows:
        status = "ok" if r.within_budget and r.matches_report else (
            "over budget" if not r.within_budget else "mae differs from report")
        lines.append(f"{r.name:<40} {r.kind:<11} {r.mae:>12.6g} {r.max_abs_error:>12.6g} "
                     f"{r.bits_per_param:>10.3f}  {status}")
    if report.missing:
        lines.append(f"present on one side only: {', '.join(report.missing)}")
    lines.append(f"ratio {report.ratio:.3f}x; {'PASS' if report.ok else 'FAIL'}")
    columns = ["name", "kind", "mae", "max_abs_error", "reported_mae", "bits_per_param",
               "within_budget", "matches_report"]
    _emit(args, payload, rows, columns, "\n".join(lines))
    return EXIT_OK if report.ok else EXIT_INVALID


def cmd_inspect(args) -> int:
    c = read_container(args.input)
    rows = [{
        "name": e.name,
        "kind": e.kind.value,
        "shape": "x".join(map(str, e.shape)),
        "dtype": e.dtype,
        "bits_per_param": e.bits_per_param,
        "stored_bytes": e.stored_bytes,
        "mae": e.mae,
        "l": e.aux.l if e.aux else None,
        "U": e.aux.U if e.aux else None,
        "M": e.aux.M if e.aux else None,
    } for e in c.entries]
    totals = {"original_bytes": c.original_bytes, "stored_bytes": c.stored_bytes, "ratio": c.ratio}
    lines = [f"{'name':<40} {'kind':<11} {'shape':<14} {'dtype':<5} {'bits/param':>10}"]
    lines += [f"{r['name']:<40} {r['kind']:<11} {r['shape']:<14} {r['dtype']:<5} "
              f"{r['bits_per_param']:>10.3f}" for r in rows]
    lines.append(f"version {c.version}; {len(rows)} entries; {c.original_bytes} -> "
                 f"{c.stored_bytes} bytes; ratio {c.ratio:.3f}x")
    _emit(args, {"version": c.version, "entries": rows, "totals": totals}, rows,
          list(rows[0]) if rows else ["name"], "\n".join(lines))
    return EXIT_OK


def cmd_bench(args) -> int:
    workers = resolve_workers(args.workers)
    cfg = BlockConfig(args.R, args.S, args.T)
    shapes = args.shape or [(256, 256, 256)]
    cases = []
    for m, k, n in shapes:
        cases += bench.gemm_cases(f"{m}x{k}x{n}", (m, k, n), args.repeats, args.seed, workers, cfg)
    report = bench.run_suite(cases)
    if args.model_params:
        tensors = bench.synthetic_model(args.model_params, seed=args.seed)
        with tempfile.TemporaryDirectory() as tmp:
            report.compression.append(bench.compression_run(
                f"synthetic-{args.model_params}", tensors, resolve_space(args),
                Path(tmp) / "model.bhc", workers))
    if args.output:
        Path(args.output).write_text(report.to_csv() if args.format == "csv" else report.to_json())
    lines = [report.machine, f"{'label':<16} {'strategy':<22} {'median ms':>10} {'min ms':>10}"]
    lines += [f"{r.label:<16} {r.strategy:<22} {r.median_ms:>10.3f} {r.min_ms:>10.3f}" for r in report.rows]
    for label, ratio in report.to_dict()["slowdown"].items():
        lines.append(f"{label}: fused/dense = {_fmt(ratio, '.2f')}")
    for c in report.compression:
        lines.append(f"{c.label}: {c.params} params, ratio {c.ratio:.3f}x, mae {c.mae:.3g}, "
                     f"{c.seconds:.2f} s")
    if args.format == "csv":
        print(report.to_csv().rstrip("\n"))
    elif args.format == "json":
        print(report.to_json())
    else:
        print("\n".join(lines))
    return EXIT_OK


def _add_search_flags(p):
    p.add_argument("--preset", help=f"named hyperparameter grid (default {DEFAULT_PRESET})")
    p.add_argument("--l", type=float, action="append", help="box side candidate (repeatable)")
    p.add_argument("--U", type=int, action="append", help="codebook size candidate (repeatable)")
    p.add_argument("--M", type=int, action="append", help="category count candidate (repeatable)")


def _add_common(p):
    p.add_argument("--format", choices=("text", "json", "csv"), default="text")
    p.add_argument("--workers", type=int, help=f"worker count (default ${WORKERS_ENV} or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="birkhoff", description="Data-free pairwise weight compression.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("compress", help="safetensors -> .bhc")
    p.add_argument("input")
    p.add_argument("output")
    _add_search_flags(p)
    p.add_argument("--kind", choices=[k.value for k in CodebookKind], default="grid")
    p.add_argument("--min-elems", type=int, default=4096)
    p.add_argument("--include", action="append", default=[], metavar="GLOB")
    p.add_argument("--exclude", action="append", default=[], metavar="GLOB")
    p.add_argument("--mae-budget", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help=".bhc -> safetensors")
    p.add_argument("input")
    p.add_argument("output")
    _add_common(p)
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("verify", help="compare a container against the original checkpoint")
    p.add_argument("original")
    p.add_argument("container")
    p.add_argument("--mae-budget", type=float)
    _add_common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("inspect", help="list the entries of a container")
    p.add_argument("input")
    _add_common(p)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("bench", help="time dense, decompress-then-GEMM and fused products")
    p.add_argument("--shape", type=int, nargs=3, action="append", metavar=("M", "K", "N"))
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int, default=bench.DEFAULT_SEED)
    p.add_argument("--R", type=int, default=64)
    p.add_argument("--S", type=int, default=64)
    p.add_argument("--T", type=int, default=64)
    p.add_argument("--model-params", type=int, default=0,
                   help="also time compression of a synthetic model this size")
    p.add_argument("--output", help="also write the CSV/JSON report here")
    _add_search_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_bench)

    sub.add_parser("presets", help="list bundled presets").set_defaults(func=cmd_presets)
    return parser


def cmd_presets(args) -> int:
    for name, p in load_presets().items():
        s = p.space
        print(f"{name:<20} l={list(s.l_candidates)} U={list(s.U_candidates)} "
              f"M={list(s.M_candidates)} mae={_fmt(p.reference_mae)}")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ParameterError as exc:
        print(f"birkhoff: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CorruptDataError, RejectedInputError, OSError) as exc:
        print(f"birkhoff: {exc}", file=sys.stderr)
        return EXIT_IO
    except BirkhoffError as exc:
        print(f"birkhoff: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
