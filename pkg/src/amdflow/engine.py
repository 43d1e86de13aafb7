"""Content-addressed task DAG scheduler with elastic worker pools and a resumable ledger.

Tasks are identified by the SHA-256 of (stage, payload bytes, sorted
dependency keys), so resubmitting the same work is a no-op and a later
run over the same inputs finds its completed tasks in the ledger.

Every state transition is appended to ``ledger.jsonl`` as one JSON line.
Replaying the file rebuilds the latest state per task; a torn final line
(crash mid-write) is dropped. A task counts as done only if its declared
outputs path exists, and handlers are expected to create that path
atomically as their last step. On reopening a ledger:

* ``running`` tasks whose outputs exist are marked done without rerunning,
  the others go back to pending;
* ``done`` tasks whose outputs vanished go back to pending;
* finally failed tasks stay failed (``retry_failed=True`` resets them).

Workers are threads. Handlers for heavy work are expected to block in
subprocesses or I/O, so threads are enough to keep many tasks in flight.
"""

from __future__ import annotations

import base64
import collections
import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

logger = logging.getLogger(__name__)

STAGES = ("generate", "screen", "filter", "calc", "postprocess")
RESOURCE_CLASSES = ("cpu", "accelerator")
STATES = ("pending", "running", "done", "failed")
DEFAULT_MAX_ATTEMPTS = 2
POOLS_POLL_INTERVAL = 2.0


class EngineError(RuntimeError):
    pass


class UnknownDependencyError(EngineError):
    pass


class CycleError(EngineError):
    pass


class LedgerError(EngineError):
    def __init__(self, message: str, index: int | None = None):
        self.index = index
        super().__init__(message if index is None else f"ledger record {index}: {message}")


def canonical_payload(obj) -> bytes:
    """Deterministic JSON encoding used for task payloads."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


def task_key(stage: str, payload: bytes, inputs: Iterable[str]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps([stage, hashlib.sha256(payload).hexdigest(), sorted(inputs)]).encode())
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


@dataclass(frozen=True)
class TaskSpec:
    stage: str
    payload: bytes
    inputs: tuple[str, ...] = ()
    resource_class: str = "cpu"
    outputs_path: str = ""
    key: str = field(default="", compare=False)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.resource_class not in RESOURCE_CLASSES:
            raise ValueError(f"unknown resource class {self.resource_class!r}")
        inputs = tuple(sorted(set(self.inputs)))
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "key", task_key(self.stage, self.payload, inputs))

    @property
    def data(self):
        """Payload decoded as JSON."""
        return json.loads(self.payload)

    def to_record(self) -> dict:
        return {"inputs": list(self.inputs), "resource_class": self.resource_class,
                "payload": base64.b64encode(self.payload).decode()}

    @classmethod
    def from_record(cls, stage: str, outputs_path: str, rec: dict) -> TaskSpec:
        return cls(stage, base64.b64decode(rec["payload"]), tuple(rec["inputs"]),
                   rec["resource_class"], outputs_path)


@dataclass
class TaskRecord:
    key: str
    stage: str
    state: str = "pending"
    attempts: int = 0
    outputs_path: str = ""
    started: str | None = None
    ended: str | None = None
    cause: str = ""
    final: bool = False

    def to_json(self, **extra) -> str:
        d = {"key": self.key, "stage": self.stage, "state": self.state, "attempts": self.attempts,
             "outputs_path": self.outputs_path, "started": self.started, "ended": self.ended}
        if self.state == "failed":
            d["cause"] = self.cause
            d["final"] = self.final
        d.update(extra)
        return json.dumps(d, sort_keys=True)


# ---------------------------------------------------------------------------
# Ledger


def read_ledger(path) -> tuple[dict[str, TaskRecord], dict[str, TaskSpec], list[dict]]:
    """Replay a ledger file without modifying it.

    Returns latest records, task specs, and the raw record list. A torn
    trailing line is ignored; any other undecodable line is fatal.
    """
    path = Path(path)
    raw = path.read_bytes()
    lines = raw.split(b"\n")
    records: dict[str, TaskRecord] = {}
    specs: dict[str, TaskSpec] = {}
    history: list[dict] = []
    for idx, line in enumerate(lines):
        if not line.strip():
            continue
        is_last = idx == len(lines) - 1  # no newline after it: possibly torn
        try:
            d = json.loads(line)
            key, stage, state = d["key"], d["stage"], d["state"]
            if state not in STATES:
                raise ValueError(f"bad state {state!r}")
        except (ValueError, KeyError, TypeError) as exc:
            if is_last:
                logger.warning("dropping torn trailing ledger record %d", idx)
                break
            raise LedgerError(f"corrupted record ({exc})", idx) from None
        history.append(d)
        if "spec" in d:
            specs[key] = TaskSpec.from_record(stage, d.get("outputs_path", ""), d["spec"])
        rec = records.get(key) or TaskRecord(key, stage)
        rec.state = state
        rec.attempts = int(d.get("attempts", 0))
        rec.outputs_path = d.get("outputs_path", "")
        rec.started = d.get("started")
        rec.ended = d.get("ended")
        rec.cause = d.get("cause", "")
        rec.final = bool(d.get("final", False))
        records[key] = rec
    return records, specs, history


class Ledger:
    """Append-only JSON-lines writer; callers serialize access."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if self.path.exists():
            self._truncate_torn_tail()
        self._fh = open(self.path, "a", encoding="utf-8", newline="\n")

    def _truncate_torn_tail(self) -> None:
        data = self.path.read_bytes()
        if data and not data.endswith(b"\n"):
            cut = data.rfind(b"\n") + 1
            with open(self.path, "r+b") as fh:
                fh.truncate(cut)

    def append(self, line: str) -> None:
        self._fh.write(line + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


# ---------------------------------------------------------------------------
# Pools


class WorkerPool:
    """Named set of worker threads bound to one resource class.

    ``size`` is the target worker count and may change while a run is in
    progress; surplus workers exit after finishing their current task.
    """

    def __init__(self, name: str, resource_class: str = "cpu", size: int = 1):
        if resource_class not in RESOURCE_CLASSES:
            raise ValueError(f"unknown resource class {resource_class!r}")
        if size < 0:
            raise ValueError("pool size must be >= 0")
        self.name = name
        self.resource_class = resource_class
        self.size = size
        self.live = 0
        self.busy = 0
        self._threads: list[threading.Thread] = []

    def __repr__(self) -> str:
        return f"WorkerPool({self.name!r}, {self.resource_class!r}, size={self.size})"


@dataclass
class RunSummary:
    done: int = 0
    failed: int = 0
    skipped: int = 0
    pending: int = 0
    running: int = 0
    executed: int = 0
    failures: dict[str, str] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.done + self.failed + self.skipped + self.pending + self.running

    def as_dict(self) -> dict:
        return {"done": self.done, "failed": self.failed, "skipped": self.skipped,
                "pending": self.pending, "running": self.running}


@dataclass
class TaskContext:
    engine: Engine
    spec: TaskSpec
    outputs_path: Path | None

    def submit(self, spec: TaskSpec) -> str:
        return self.engine.submit(spec)

    def outputs_of(self, key: str) -> Path | None:
        return self.engine.resolve(self.engine.specs[key].outputs_path)


Handler = Callable[[TaskSpec, TaskContext], None]


class Engine:
    """Scheduler over a ledger file. Constructing it on an existing ledger replays it."""

    def __init__(self, ledger_path, handlers: Mapping[str, Handler], *,
                 max_attempts: int = DEFAULT_MAX_ATTEMPTS, pools_conf=None,
                 poll_interval: float = POOLS_POLL_INTERVAL, retry_failed: bool = False):
        self.ledger_path = Path(ledger_path)
        self.base_dir = self.ledger_path.parent
        self.handlers = dict(handlers)
        self.max_attempts = max_attempts
        self.pools_conf = Path(pools_conf) if pools_conf else None
        self.poll_interval = poll_interval

        self._cond = threading.Condition()
        self.specs: dict[str, TaskSpec] = {}
        self.records: dict[str, TaskRecord] = {}
        self._dependents: dict[str, list[str]] = collections.defaultdict(list)
        self._ready: dict[str, collections.deque] = {c: collections.deque() for c in RESOURCE_CLASSES}
        self._skipped: set[str] = set()
        self._pools: dict[str, WorkerPool] = {}
        self._running = False
        self._stop = False
        self._shutdown = False
        self._executed = 0
        self._fatal: BaseException | None = None

        if self.ledger_path.exists():
            records, specs, _ = read_ledger(self.ledger_path)
        else:
            records, specs = {}, {}
        self._ledger = Ledger(self.ledger_path)
        self._recover(records, specs, retry_failed)

    # -- paths -------------------------------------------------------------

    def resolve(self, outputs_path: str) -> Path | None:
        if not outputs_path:
            return None
        p = Path(outputs_path)
        return p if p.is_absolute() else self.base_dir / p

    def _outputs_exist(self, spec: TaskSpec) -> bool:
        p = self.resolve(spec.outputs_path)
        return p is None or p.exists()

    # -- recovery ----------------------------------------------------------

    def _recover(self, records: dict[str, TaskRecord], specs: dict[str, TaskSpec], retry_failed: bool):
        for key, spec in specs.items():
            rec = records[key]
            self.specs[key] = spec
            self.records[key] = rec
            for dep in spec.inputs:
                self._dependents[dep].append(key)
            if rec.state == "running":
                if spec.outputs_path and self._outputs_exist(spec):
                    self._transition(rec, "done", ended=_now(), recovered=True)
                else:
                    self._transition(rec, "pending")
            elif rec.state == "done" and not self._outputs_exist(spec):
                logger.info("outputs of %s task %s are missing; rerunning", rec.stage, key[:12])
                self._transition(rec, "pending")
            elif rec.state == "failed" and (retry_failed or not rec.final):
                rec.attempts = 0 if retry_failed else rec.attempts
                self._transition(rec, "pending")
        for key, rec in self.records.items():
            if rec.state == "failed":
                self._propagate_skip(key)
        for key in self.specs:
            self._maybe_ready(key)

    def _transition(self, rec: TaskRecord, state: str, **extra) -> None:
        rec.state = state
        for name in ("started", "ended"):
            if name in extra:
                setattr(rec, name, extra.pop(name))
        if state == "pending":
            rec.started = rec.ended = None
        self._ledger.append(rec.to_json(time=_now(), **extra))

    # -- submission --------------------------------------------------------

    def submit(self, spec: TaskSpec) -> str:
        """Register a task; idempotent for identical specs. Safe to call from handlers."""
        with self._cond:
            if spec.key in self.specs:
                return spec.key
            missing = [d for d in spec.inputs if d not in self.specs]
            if missing:
                raise UnknownDependencyError(f"{spec.stage} task depends on unknown keys {missing}")
            if spec.key in spec.inputs:
                raise CycleError(f"task {spec.key} depends on itself")
            if spec.stage not in self.handlers:
                raise EngineError(f"no handler registered for stage {spec.stage!r}")
            rec = TaskRecord(spec.key, spec.stage, outputs_path=spec.outputs_path)
            self.specs[spec.key] = spec
            self.records[spec.key] = rec
            for dep in spec.inputs:
                self._dependents[dep].append(spec.key)
            self._ledger.append(rec.to_json(time=_now(), spec=spec.to_record()))
            if any(self.records[d].state == "failed" or d in self._skipped for d in spec.inputs):
                self._skipped.add(spec.key)
            else:
                self._maybe_ready(spec.key)
            self._cond.notify_all()
            return spec.key

    def _maybe_ready(self, key: str) -> None:
        rec = self.records[key]
        if rec.state != "pending" or key in self._skipped:
            return
        spec = self.specs[key]
        if all(self.records[d].state == "done" for d in spec.inputs):
            if key not in self._ready[spec.resource_class]:
                self._ready[spec.resource_class].append(key)

    def _propagate_skip(self, key: str) -> None:
        stack = list(self._dependents.get(key, ()))
        while stack:
            k = stack.pop()
            if k in self._skipped or self.records[k].state == "done":
                continue
            self._skipped.add(k)
            q = self._ready[self.specs[k].resource_class]
            if k in q:
                q.remove(k)
            stack.extend(self._dependents.get(k, ()))

    # -- pools -------------------------------------------------------------

    def resize_pool(self, name: str, new_size: int) -> int:
        """Change a pool's target size; growth is immediate, shrinking drains gracefully."""
        if new_size < 0:
            raise ValueError("pool size must be >= 0")
        with self._cond:
            pool = self._pools.get(name)
            if pool is None:
                raise KeyError(f"unknown pool {name!r}")
            if new_size != pool.size:
                logger.info("resizing pool %s: %d -> %d", name, pool.size, new_size)
            pool.size = new_size
            if self._running:
                while pool.live < pool.size:
                    self._spawn(pool)
            self._cond.notify_all()
            return pool.size

    def _spawn(self, pool: WorkerPool) -> None:
        pool.live += 1
        t = threading.Thread(target=self._worker, args=(pool,), daemon=True,
                             name=f"{pool.name}-{len(pool._threads)}")
        pool._threads.append(t)
        t.start()

    def _poll_pools_conf(self) -> None:
        if self.pools_conf is None or not self.pools_conf.exists():
            return
        try:
            text = self.pools_conf.read_text(encoding="utf-8")
        except OSError:
            return
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            name, sep, value = line.partition("=")
            try:
                size = int(value)
            except ValueError:
                size = -1
            if not sep or size < 0:
                logger.warning("ignoring malformed pools.conf line %r", line)
                continue
            if name.strip() not in self._pools:
                logger.warning("pools.conf names unknown pool %r", name.strip())
                continue
            if self._pools[name.strip()].size != size:
                self.resize_pool(name.strip(), size)

    # -- execution ---------------------------------------------------------

    def _worker(self, pool: WorkerPool) -> None:
        queue = self._ready[pool.resource_class]
        while True:
            with self._cond:
                while True:
                    if self._shutdown or pool.live > pool.size:
                        pool.live -= 1
                        self._cond.notify_all()
                        return
                    if queue and not self._stop:
                        key = queue.popleft()
                        break
                    self._cond.wait()
                rec = self.records[key]
                rec.attempts += 1
                pool.busy += 1
                self._transition(rec, "running", started=_now(), ended=None, pool=pool.name)
            spec = self.specs[key]
            cause = ""
            try:
                handler = self.handlers[spec.stage]
                handler(spec, TaskContext(self, spec, self.resolve(spec.outputs_path)))
                if not self._outputs_exist(spec):
                    cause = f"handler did not produce {spec.outputs_path}"
            except Exception as exc:  # a failing task must not take down the worker
                logger.debug("task %s raised", key[:12], exc_info=True)
                cause = f"{type(exc).__name__}: {exc}"
            with self._cond:
                pool.busy -= 1
                if not cause:
                    self._executed += 1
                    self._transition(rec, "done", ended=_now())
                    for dep in self._dependents.get(key, ()):
                        self._maybe_ready(dep)
                else:
                    final = rec.attempts >= self.max_attempts
                    rec.cause, rec.final = cause, final
                    self._transition(rec, "failed", ended=_now())
                    if final:
                        logger.warning("%s task %s failed: %s", spec.stage, key[:12], cause)
                        self._propagate_skip(key)
                    else:
                        logger.info("%s task %s failed (attempt %d), retrying: %s",
                                    spec.stage, key[:12], rec.attempts, cause)
                        queue.append(key)
                self._cond.notify_all()

    def _unfinished(self) -> int:
        return sum(1 for k, r in self.records.items()
                   if k not in self._skipped
                   and (r.state in ("pending", "running") or (r.state == "failed" and not r.final)))

    def request_stop(self) -> None:
        """Let running tasks finish, start no new ones, and return from the run."""
        with self._cond:
            self._stop = True
            self._cond.notify_all()

    def run_to_completion(self, pools: Sequence[WorkerPool]) -> RunSummary:
        with self._cond:
            self._pools = {p.name: p for p in pools}
            needed = {self.specs[k].resource_class for k, r in self.records.items()
                      if r.state == "pending" and k not in self._skipped}
            have = {p.resource_class for p in pools}
            if needed - have:
                raise EngineError(f"no worker pool for resource class(es) {sorted(needed - have)}")
            self._running, self._stop, self._shutdown = True, False, False
            self._executed = 0
            for pool in pools:
                pool.live, pool.busy, pool._threads = 0, 0, []
                for _ in range(pool.size):
                    self._spawn(pool)
        next_poll = 0.0
        try:
            while True:
                now = time.monotonic()
                if now >= next_poll:
                    self._poll_pools_conf()
                    next_poll = now + self.poll_interval
                with self._cond:
                    busy = sum(p.busy for p in pools)
                    if self._stop and busy == 0:
                        break
                    if self._unfinished() == 0:
                        break
                    orphaned = [c for c, q in self._ready.items()
                                if q and not any(p.resource_class == c for p in pools)]
                    if orphaned:
                        raise EngineError(f"tasks need resource class(es) {orphaned} but no pool serves them")
                    self._cond.wait(timeout=min(0.5, self.poll_interval))
        finally:
            with self._cond:
                self._shutdown = True
                self._cond.notify_all()
            for pool in pools:
                for t in pool._threads:
                    t.join()
            with self._cond:
                self._running = False
        return self.summary()

    def summary(self) -> RunSummary:
        with self._cond:
            s = RunSummary(executed=self._executed)
            for key, rec in self.records.items():
                if key in self._skipped and rec.state != "done":
                    s.skipped += 1
                elif rec.state == "failed":
                    s.failed += 1
                    s.failures[key] = rec.cause
                else:
                    setattr(s, rec.state, getattr(s, rec.state) + 1)
            return s

    def close(self) -> None:
        self._ledger.close()


def resume(ledger_path, handlers: Mapping[str, Handler], pools: Sequence[WorkerPool], **kwargs) -> RunSummary:
    """Replay ``ledger_path`` and run every unfinished task it describes."""
    if not Path(ledger_path).exists():
        raise EngineError(f"ledger not found: {ledger_path}")
    engine = Engine(ledger_path, handlers, **kwargs)
    try:
        return engine.run_to_completion(pools)
    finally:
        engine.close()


@dataclass
class StatusReport:
    counts: dict[str, int]
    by_stage: dict[str, dict[str, int]]
    failures: list[tuple[str, str, str]]  # (stage, key, cause)

    def format(self) -> str:
        states = ["pending", "running", "done", "failed", "skipped"]
        lines = ["stage        " + "".join(f"{s:>9}" for s in states)]
        for stage in STAGES:
            row = self.by_stage.get(stage)
            if row:
                lines.append(f"{stage:<13}" + "".join(f"{row.get(s, 0):>9}" for s in states))
        lines.append(f"{'total':<13}" + "".join(f"{self.counts.get(s, 0):>9}" for s in states))
        for stage, key, cause in self.failures:
            lines.append(f"failed {stage} {key[:12]}: {cause}")
        return "\n".join(lines)


def status(ledger_path) -> StatusReport:
    """Read-only state counts per stage; tasks downstream of a failure count as skipped."""
    path = Path(ledger_path)
    if not path.exists():
        raise EngineError(f"ledger not found: {ledger_path}")
    records, specs, _ = read_ledger(path)
    failed = {k for k, r in records.items() if r.state == "failed" and r.final}
    skipped: set[str] = set()
    changed = True
    while changed:
        changed = False
        for k, spec in specs.items():
            if k in skipped or records[k].state == "done":
                continue
            if any(d in failed or d in skipped for d in spec.inputs):
                skipped.add(k)
                changed = True
    counts = {s: 0 for s in (*STATES, "skipped")}
    by_stage: dict[str, dict[str, int]] = {}
    failures = []
    for k, rec in records.items():
        state = "skipped" if k in skipped else rec.state
        counts[state] += 1
        row = by_stage.setdefault(rec.stage, {})
        row[state] = row.get(state, 0) + 1
        if rec.state == "failed":
            failures.append((rec.stage, k, rec.cause))
    return StatusReport(counts, by_stage, sorted(failures))


def atomic_write(path, data: str | bytes) -> None:
    """Write via a temporary sibling and rename, so readers never see partial files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}.{threading.get_ident()}")
    mode = "wb" if isinstance(data, bytes) else "w"
    kwargs = {} if isinstance(data, bytes) else {"encoding": "utf-8", "newline": "\n"}
    with open(tmp, mode, **kwargs) as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
