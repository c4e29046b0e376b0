"""``dexkit`` command line.

Exit codes: 0 success, 1 validation failure, 2 usage error, 3 io/external
failure. With ``--json`` stdout carries exactly one canonical JSON
document (errors included); diagnostics always go to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable

from dexkit import __version__, canonical
from dexkit.errors import EXIT_IO, EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, DexkitError, UsageError

log = logging.getLogger("dexkit")


class Output:
    def __init__(self, as_json: bool, quiet: bool) -> None:
        self.as_json = as_json
        self.quiet = quiet

    def emit(self, doc: Any, human: str | Callable[[], str]) -> None:
        if self.as_json:
            sys.stdout.write(canonical.dumps(doc) + "\n")
        elif not self.quiet:
            sys.stdout.write((human() if callable(human) else human) + "\n")
        sys.stdout.flush()


def _pair(text: str) -> tuple[float, float]:
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y but got {text!r}") from None
    return x, y


def _overrides(items: list[str] | None) -> dict[str, Any]:
    from dexkit.expconfig import parse_override

    return dict(parse_override(s) for s in items or [])


def cmd_validate(args: argparse.Namespace, out: Output) -> int:
    from dexkit.dexdata import DatasetLayout, inspect_dataset

    results = inspect_dataset(DatasetLayout(args.dataset))
    episodes = []
    for r in results:
        episodes.append({
            "jsonl_path": r.report.jsonl_path,
            "ok": r.meta is not None,
            "num_frames": r.meta.num_frames if r.meta else None,
            "violations": [v.to_json() for v in r.report.violations],
        })
    invalid = sum(1 for e in episodes if not e["ok"])
    doc = {"dataset": str(args.dataset), "episodes": episodes, "num_episodes": len(episodes), "num_invalid": invalid}

    def human() -> str:
        lines = []
        for e, r in zip(episodes, results):
            status = f"{e['num_frames']} frames OK" if e["ok"] else "INVALID"
            lines.append(f"{e['jsonl_path']}: {status}")
            for v in r.report.violations:
                where = f"line {v.line}" if v.line is not None else "file"
                lines.append(f"  {v.severity} {where}: {v.code}: {v.message}")
        lines.append(f"{len(episodes)} episodes, {invalid} invalid")
        return "\n".join(lines)

    out.emit(doc, human)
    if invalid:
        print(f"dexkit: validation failed: {invalid} of {len(episodes)} episodes invalid", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_index(args: argparse.Namespace, out: Output) -> int:
    from dexkit.dexdata import DatasetLayout
    from dexkit.ingest import build_index_cache

    layout = DatasetLayout(args.dst)
    cache = build_index_cache(layout, epoch=args.epoch)
    out.emit(cache.to_json(), f"wrote {layout.index_path} ({len(cache.episodes)} episodes)")
    return EXIT_OK


def cmd_convert(args: argparse.Namespace, out: Output) -> int:
    from dexkit.codec import BoundsPolicy
    from dexkit.dexdata import DatasetLayout
    from dexkit.ingest import EncoderCommand, build_index_cache, convert_dataset

    layout = DatasetLayout(args.dst)
    try:
        policy = BoundsPolicy.parse(args.bounds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    metas = convert_dataset(
        args.src, layout, EncoderCommand(args.encoder), args.fps, workers=args.workers, policy=policy
    )
    cache = build_index_cache(layout, epoch=args.epoch)
    doc = {"episodes": [m.to_json() for m in metas], "index_path": str(layout.index_path)}
    out.emit(doc, f"converted {len(metas)} episodes into {layout.root}; index has {len(cache.episodes)} entries")
    return EXIT_OK


def cmd_stats(args: argparse.Namespace, out: Output) -> int:
    from dexkit.dexdata import DatasetLayout
    from dexkit.ingest import storage_report

    report = storage_report(args.src, DatasetLayout(args.dst))
    out.emit(report.to_json(), report.to_table)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, out: Output) -> int:
    from dexkit.dexdata import DatasetLayout
    from dexkit.ingest import DecoderCommand, RawEpisodeBundle, verify_roundtrip

    decoder = DecoderCommand(args.decoder) if args.decoder else None
    report = verify_roundtrip(RawEpisodeBundle.load(args.src), DatasetLayout(args.dst), decoder)
    out.emit(report, lambda: "\n".join(f"{k}: {v}" for k, v in report.items()))
    return EXIT_OK


def cmd_config_resolve(args: argparse.Namespace, out: Output) -> int:
    from dexkit.expconfig import resolve_file

    resolved = resolve_file(args.exp, _overrides(args.set))

    def human() -> str:
        lines = [f"{resolved.name} (chain: {' -> '.join(resolved.chain)})"]
        width = max((len(k) for k in resolved.provenance), default=0)
        for key, source in sorted(resolved.provenance.items()):
            lines.append(f"  {key.ljust(width)}  = {canonical.dumps(resolved.get(key))}  [{source}]")
        return "\n".join(lines)

    out.emit(resolved.to_json(), human)
    return EXIT_OK


def cmd_run(args: argparse.Namespace, out: Output) -> int:
    from dexkit.expconfig import resolve_file
    from dexkit.tasks import dispatch_task

    resolved = resolve_file(args.exp, _overrides(args.set))
    if args.task == "infer":
        log.info("starting inference service for %s", resolved.name)
    result = dispatch_task(resolved, args.task)
    doc = {"task": args.task, "status": result.status, "report": result.report}
    out.emit(doc, lambda: "\n".join(f"{k}: {v}" for k, v in (result.report or {}).items()))
    return result.status


def cmd_serve(args: argparse.Namespace, out: Output) -> int:
    from dexkit.registry import default_registry
    from dexkit.serve.backends import create_backend
    from dexkit.serve.gateway import serve
    from dexkit.tasks import wait_for_signal

    kwargs: dict[str, Any] = {"dof": args.dof}
    if args.backend == "pcontrol":
        kwargs["k"] = args.k
    if args.replay_file:
        kwargs["path"] = args.replay_file
    try:
        backend = create_backend(default_registry(), args.backend, **kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"cannot create backend {args.backend!r}: {exc}") from None
    server = serve(backend, args.host, args.port)
    out.emit({"url": server.url, "backend": backend.name, "dof": backend.dof}, f"serving {backend.name} on {server.url}")
    try:
        wait_for_signal()
    finally:
        server.shutdown()
    return EXIT_OK


def cmd_rollout(args: argparse.Namespace, out: Output) -> int:
    from dexkit.serve.client import run_rollout
    from dexkit.serve.env import ToyEnv

    env_kwargs = {"max_step": args.max_step, "success_radius": args.radius}
    if args.start is not None:
        env = ToyEnv(goal=args.goal, start=args.start, **env_kwargs)
    elif args.seed is not None:
        env = ToyEnv.seeded(args.goal, args.seed, **env_kwargs)
    else:
        env = ToyEnv(goal=args.goal, **env_kwargs)
    result = run_rollout(args.url, env, args.max_steps, args.chunk, prompt=args.prompt, record=args.record)
    doc = {k: v for k, v in result.to_json().items() if k != "trajectory"}
    out.emit(doc, f"success={result.success} steps={result.steps_taken} final={result.final_position}")
    return EXIT_OK if result.success else EXIT_VALIDATION


def cmd_probe(args: argparse.Namespace, out: Output) -> int:
    from dexkit.mp4index import index_video, locate_frame

    table = index_video(args.path)
    doc: dict[str, Any] = {
        "frame_count": len(table),
        "duration_seconds": table.duration_ticks / table.timescale,
        "timescale": table.timescale,
    }
    if args.frame is not None:
        offset, length, pts = locate_frame(table, args.frame)
        doc["frame"] = {"index": args.frame, "offset": offset, "length": length, "pts_seconds": pts}
    out.emit(doc, lambda: "\n".join(f"{k}: {v}" for k, v in doc.items()))
    return EXIT_OK


def _common() -> argparse.ArgumentParser:
    # Default SUPPRESS lets the flags sit before or after the subcommand.
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--json", action="store_true", default=argparse.SUPPRESS, help="canonical JSON on stdout")
    p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS, help="no human output")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="debug logging")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="dexkit", parents=[common], description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dexkit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name: str, func: Callable, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=func)
        return p

    p = add("validate", cmd_validate, "validate every episode of a Dexdata dataset")
    p.add_argument("--dataset", "--dst", dest="dataset", type=Path, required=True)

    p = add("index", cmd_index, "build jsonl/index_cache.json")
    p.add_argument("--dst", "--dataset", dest="dst", type=Path, required=True)
    p.add_argument("--epoch", type=int, help="fixed created_unix value (for reproducible caches)")

    p = add("convert", cmd_convert, "convert raw episode bundles into Dexdata")
    p.add_argument("--src", type=Path, required=True)
    p.add_argument("--dst", type=Path, required=True)
    p.add_argument("--fps", type=int, default=30)
    p.add_argument("--encoder", required=True, help="command template using {input_list} {fps} {output}")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--epoch", type=int)
    p.add_argument("--bounds", default="quantile:0.01", help="action bounds policy: minmax or quantile:Q")

    p = add("stats", cmd_stats, "storage accounting: raw source vs Dexdata")
    p.add_argument("--src", type=Path, required=True)
    p.add_argument("--dst", type=Path, required=True)

    p = add("verify", cmd_verify, "check a converted episode against its source bundle")
    p.add_argument("--src", type=Path, required=True, help="one episode bundle directory")
    p.add_argument("--dst", type=Path, required=True)
    p.add_argument("--decoder", help="command template using {input} {output_dir}")

    p = add("config-resolve", cmd_config_resolve, "show a resolved experiment config with provenance")
    p.add_argument("--exp", type=Path, required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    p = add("run", cmd_run, "resolve an experiment and dispatch a task")
    p.add_argument("--exp", type=Path, required=True)
    p.add_argument("--task", required=True, help="train or infer")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")

    p = add("serve", cmd_serve, "run the action gateway")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--backend", required=True)
    p.add_argument("--dof", type=int)
    p.add_argument("--k", type=float, default=1.0, help="pcontrol gain")
    p.add_argument("--replay-file", type=Path)

    p = add("rollout", cmd_rollout, "drive the toy environment through a gateway")
    p.add_argument("--url", required=True)
    p.add_argument("--goal", type=_pair, required=True, metavar="X,Y")
    p.add_argument("--start", type=_pair, metavar="X,Y")
    p.add_argument("--chunk", type=int, default=8)
    p.add_argument("--max-steps", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--record", type=Path)
    p.add_argument("--prompt")
    p.add_argument("--max-step", type=float, default=0.1)
    p.add_argument("--radius", type=float, default=0.05)

    p = add("probe-mp4", cmd_probe, "index an mp4 and optionally locate one frame")
    p.add_argument("path", type=Path)
    p.add_argument("--frame", type=int)
    return parser


def _usage_error_json(status: int) -> None:
    error = {"code": "Usage", "message": "invalid command line (see stderr)", "exit_code": status}
    sys.stdout.write(canonical.dumps({"error": error}) + "\n")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        status = int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
        if status != EXIT_OK and "--json" in (sys.argv[1:] if argv is None else argv):
            _usage_error_json(status)
        return status
    as_json = getattr(args, "json", False)
    out = Output(as_json, getattr(args, "quiet", False))
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        if as_json:
            _usage_error_json(EXIT_USAGE)
        return EXIT_USAGE

    try:
        return args.func(args, out)
    except DexkitError as exc:
        code, status = getattr(exc, "code", "ERROR"), exc.exit_code
        message = str(exc)
        details = [r.to_json() for r in getattr(exc, "reports", [])]
    except OSError as exc:
        code, status, message, details = "Io", EXIT_IO, str(exc), []
    print(f"dexkit: error: {code}: {message}", file=sys.stderr)
    for d in details:
        for v in d["violations"]:
            print(f"  {d['jsonl_path']} line {v['line']}: {v['code']}: {v['message']}", file=sys.stderr)
    if as_json:
        error: dict[str, Any] = {"code": code, "message": message, "exit_code": status}
        if details:
            error["reports"] = details
        sys.stdout.write(canonical.dumps({"error": error}) + "\n")
    return status


if __name__ == "__main__":
    sys.exit(main())
