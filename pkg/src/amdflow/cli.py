"""``amdflow`` command line: run, resume, status, report.

Exit codes are 0 on success, 1 on a runtime failure and 2 on usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import signal
import sys
from pathlib import Path

from .config import SNAPSHOT_NAME, ConfigError, RunConfig, load_config, load_snapshot
from .engine import EngineError, RunSummary, atomic_write, status
from .pipeline import NoResultsError, Pipeline, analyze
from .structure import StructureError

logger = logging.getLogger("amdflow")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2
LOCK_NAME = ".lock"
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}


class LockError(RuntimeError):
    pass


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextlib.contextmanager
def work_lock(work_dir: Path):
    """Exclusive per-work-dir lock; a lock left by a dead process is taken over."""
    path = work_dir / LOCK_NAME
    for _ in range(2):
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY, 0o644)
        except FileExistsError:
            try:
                pid = int(path.read_text().strip() or "0")
            except (OSError, ValueError):
                pid = 0
            if pid > 0 and _pid_alive(pid):
                raise LockError(f"{work_dir} is in use by process {pid}") from None
            logger.warning("removing stale lock left by process %s", pid or "?")
            with contextlib.suppress(FileNotFoundError):
                path.unlink()
            continue
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        break
    else:
        raise LockError(f"could not acquire {path}")
    try:
        yield
    finally:
        with contextlib.suppress(FileNotFoundError):
            path.unlink()


def write_pools_conf(cfg: RunConfig) -> None:
    text = "# pool sizes; edit while a run is in progress to grow or shrink pools\n"
    text += "".join(f"{p.name}={p.size}\n" for p in cfg.pools)
    atomic_write(Path(cfg.work_dir) / "pools.conf", text)


def execute(cfg: RunConfig, *, fresh: bool, pipeline_cls=None, retry_failed: bool = False) -> int:
    """Run (or continue) the workflow for ``cfg``; returns an exit code."""
    pipeline = (pipeline_cls or Pipeline)(cfg)
    engine = pipeline.engine(retry_failed=retry_failed)
    if fresh:
        pipeline.seed(engine)
    elif not (engine.summary().pending or engine.summary().running) and _post_done(engine):
        print("nothing to do")
        engine.close()
        return EXIT_OK

    def on_signal(signum, frame):
        logger.warning("received %s; finishing running tasks, then stopping",
                       signal.Signals(signum).name)
        engine.request_stop()

    previous = {s: signal.signal(s, on_signal) for s in (signal.SIGINT, signal.SIGTERM)}
    try:
        summary = engine.run_to_completion(pipeline.pools())
    finally:
        for s, h in previous.items():
            signal.signal(s, h)
        engine.close()
    return _report_summary(engine, summary)


def _post_done(engine) -> bool:
    return any(r.stage == "postprocess" and r.state == "done" for r in engine.records.values())


def _report_summary(engine, summary: RunSummary) -> int:
    counts = summary.as_dict()
    print("tasks: " + ", ".join(f"{k}={v}" for k, v in counts.items()) + f"; executed {summary.executed}")
    for key, cause in sorted(summary.failures.items()):
        print(f"failed {engine.records[key].stage} {key[:12]}: {cause}", file=sys.stderr)
    if summary.pending or summary.running:
        print("stopped before completion; continue with `amdflow resume`", file=sys.stderr)
        return EXIT_RUNTIME
    if not _post_done(engine):
        print("post-processing did not complete", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    work = Path(cfg.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    with work_lock(work):
        atomic_write(work / SNAPSHOT_NAME, cfg.snapshot_json())
        write_pools_conf(cfg)
        return execute(cfg, fresh=True)


def _existing_work(work_dir: str) -> Path:
    work = Path(work_dir)
    if not work.is_dir():
        raise ConfigError([f"work_dir: not a directory: {work}"])
    return work


def cmd_resume(args) -> int:
    work = _existing_work(args.work_dir)
    if not (work / "ledger.jsonl").exists():
        raise ConfigError([f"ledger: not found in {work}"])
    cfg = load_snapshot(work)
    with work_lock(work):
        if not (work / "pools.conf").exists():
            write_pools_conf(cfg)
        return execute(cfg, fresh=False, retry_failed=args.retry_failed)


def cmd_status(args) -> int:
    work = _existing_work(args.work_dir)
    ledger = work / "ledger.jsonl"
    if not ledger.exists():
        raise ConfigError([f"ledger: not found in {work}"])
    print(status(ledger).format())
    for sid, cause in failed_calculations(work):
        print(f"calculation {sid} did not converge: {cause}")
    return EXIT_OK


def failed_calculations(work: Path) -> list[tuple[str, str]]:
    """Stored calculation results flagged as failed (the tasks themselves succeed)."""
    out = []
    for path in sorted(work.glob("calc/*/result.json")):
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, ValueError):
            continue
        if not d.get("converged", False):
            out.append((path.parent.name, d.get("cause", "")))
    return out


def cmd_report(args) -> int:
    work = _existing_work(args.work_dir)
    cfg = load_snapshot(work)
    with work_lock(work):
        try:
            report = analyze(cfg)
        except NoResultsError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_USAGE
    print(f"{report['entries']} entries, {len(report['hull_vertices'])} on the hull, "
          f"{len(report['promoted'])} promoted")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amdflow", description="High-throughput crystal structure search.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="start a workflow from a TOML config")
    p.add_argument("-c", "--config", required=True, help="path to config.toml")
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("resume", help="continue an interrupted run")
    p.add_argument("work_dir")
    p.add_argument("--retry-failed", action="store_true", help="also rerun tasks that failed for good")
    p.set_defaults(func=cmd_resume)
    p = sub.add_parser("status", help="show task counts from the ledger")
    p.add_argument("work_dir")
    p.set_defaults(func=cmd_status)
    p = sub.add_parser("report", help="recompute the hull and outputs from stored results")
    p.add_argument("work_dir")
    p.set_defaults(func=cmd_report)
    return parser


def setup_logging() -> None:
    name = os.environ.get("AMDFLOW_LOG", "info").strip().lower()
    logging.basicConfig(level=LOG_LEVELS.get(name, logging.INFO), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except LockError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (EngineError, StructureError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
