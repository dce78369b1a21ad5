"""Asynchronous system-call interface with user-level scheduling.

Application threads are generators that ``yield`` a :class:`SyscallRequest`
and receive a :class:`SyscallResponse`. In async mode a single enclave
thread runs them under a FIFO user-level scheduler: a request goes onto a
shared bounded queue and the submitting thread is parked while the next
runnable one continues. Outside worker threads execute requests and post
responses to a second queue. An enclave transition is charged only when no
application thread is runnable and the spin budget has run out.

The synchronous baseline executes each request inline and pays an exit and
a re-entry transition per request. Transitions are simulated by busy-waiting
``transition_cost`` seconds.
"""

from __future__ import annotations

import enum
import itertools
import os
import queue
import threading
import time
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Generator, Iterable, Sequence

from .errors import QueueFull

DEFAULT_QUEUE_SIZE = 1024
DEFAULT_TRANSITION_COST = 10e-6
DEFAULT_SPIN_BUDGET = 50e-6


class SyscallKind(enum.Enum):
    SLEEP = "sleep"
    READ_FILE = "read_file"
    WRITE_FILE = "write_file"
    NOP = "nop"


@dataclass(frozen=True)
class SyscallRequest:
    kind: SyscallKind
    duration: float = 0.0
    path: str = ""
    data: bytes = b""
    id: int = 0
    submitted_at: float = 0.0


def Sleep(duration: float) -> SyscallRequest:
    return SyscallRequest(SyscallKind.SLEEP, duration=duration)


def ReadFile(path: str) -> SyscallRequest:
    return SyscallRequest(SyscallKind.READ_FILE, path=path)


def WriteFile(path: str, data: bytes) -> SyscallRequest:
    return SyscallRequest(SyscallKind.WRITE_FILE, path=path, data=data)


def Nop() -> SyscallRequest:
    return SyscallRequest(SyscallKind.NOP)


@dataclass(frozen=True)
class SyscallResponse:
    id: int
    result: bytes | None
    error: str | None = None
    completed_at: float = 0.0

    @property
    def outcome(self) -> tuple[bytes | None, str | None]:
        return self.result, self.error


@dataclass
class SchedulerStats:
    transitions: int = 0
    context_switches: int = 0
    completed: int = 0
    wall_time: float = 0.0

    def to_json(self) -> dict:
        return asdict(self)


def execute(req: SyscallRequest) -> SyscallResponse:
    """Run one request on the untrusted side."""
    try:
        if req.kind is SyscallKind.SLEEP:
            if req.duration > 0:
                time.sleep(req.duration)
            result = b""
        elif req.kind is SyscallKind.READ_FILE:
            with open(req.path, "rb") as f:
                result = f.read()
        elif req.kind is SyscallKind.WRITE_FILE:
            with open(req.path, "wb") as f:
                f.write(req.data)
            result = len(req.data).to_bytes(8, "big")
        else:
            result = b""
    except OSError as exc:
        return SyscallResponse(req.id, None, type(exc).__name__, time.monotonic())
    return SyscallResponse(req.id, result, None, time.monotonic())


def burn(seconds: float) -> None:
    """Busy-wait; stands in for the cost of an enclave exit or entry."""
    if seconds <= 0:
        return
    end = time.perf_counter() + seconds
    while time.perf_counter() < end:
        pass


class Completion:
    def __init__(self, request: SyscallRequest):
        self.request = request
        self._done = threading.Event()
        self.response: SyscallResponse | None = None

    def _set(self, response: SyscallResponse) -> None:
        self.response = response
        self._done.set()

    def done(self) -> bool:
        return self._done.is_set()

    def wait(self, timeout: float | None = None) -> SyscallResponse:
        if not self._done.wait(timeout):
            raise TimeoutError(f"request {self.request.id} still pending")
        return self.response


class SyscallBridge:
    """Shared request/response queues serviced by ``workers`` outside threads."""

    def __init__(self, workers: int = 2, queue_size: int = DEFAULT_QUEUE_SIZE):
        self.workers = workers
        self._requests: queue.Queue = queue.Queue(maxsize=queue_size)
        self._responses: queue.Queue = queue.Queue()
        self._ids = itertools.count(1)
        self._pending: dict[int, Completion] = {}
        self._lock = threading.Lock()
        self._threads: list[threading.Thread] = []

    def start(self) -> "SyscallBridge":
        for _ in range(self.workers):
            t = threading.Thread(target=self._serve, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        for _ in self._threads:
            self._requests.put(None)
        for t in self._threads:
            t.join()
        self._threads.clear()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()

    def _serve(self) -> None:
        while True:
            req = self._requests.get()
            if req is None:
                return
            resp = execute(req)
            with self._lock:
                handle = self._pending.pop(req.id)
            handle._set(resp)
            self._responses.put(resp)

    def submit(self, req: SyscallRequest) -> Completion:
        req = replace(req, id=next(self._ids), submitted_at=time.monotonic())
        handle = Completion(req)
        with self._lock:
            self._pending[req.id] = handle
        try:
            self._requests.put_nowait(req)
        except queue.Full:
            with self._lock:
                del self._pending[req.id]
            raise QueueFull(f"request queue holds {self._requests.maxsize} entries") from None
        return handle

    def poll(self, block: bool = False) -> list[SyscallResponse]:
        out = []
        if block:
            out.append(self._responses.get())
        while True:
            try:
                out.append(self._responses.get_nowait())
            except queue.Empty:
                return out


class UserScheduler:
    """FIFO user-level scheduler.

    ``poll(block)`` returns ids of threads that became runnable; with
    ``block=True`` it waits outside the enclave for at least one.
    """

    def __init__(self, poll: Callable[[bool], Iterable[int]],
                 spin_budget: float = DEFAULT_SPIN_BUDGET,
                 transition_cost: float = DEFAULT_TRANSITION_COST,
                 stats: SchedulerStats | None = None):
        self._poll = poll
        self.spin_budget = spin_budget
        self.transition_cost = transition_cost
        self.stats = stats or SchedulerStats()
        self._ready: deque[int] = deque()
        self.blocked: set[int] = set()
        self.run_log: list[int] = []

    def spawn(self, tid: int) -> None:
        self._ready.append(tid)

    def block(self, tid: int) -> None:
        self.blocked.add(tid)

    def unblock(self, tid: int) -> None:
        self.blocked.discard(tid)
        self._ready.append(tid)

    @property
    def runnable(self) -> int:
        return len(self._ready)

    def _drain(self, block: bool) -> None:
        for tid in self._poll(block):
            self.unblock(tid)

    def schedule(self) -> int | None:
        if not self._ready:
            deadline = time.perf_counter() + self.spin_budget
            while True:
                self._drain(False)
                if self._ready or time.perf_counter() >= deadline:
                    break
                time.sleep(0)  # lets outside workers run on a shared core
        if not self._ready and self.blocked:
            self.stats.transitions += 1
            burn(self.transition_cost)
            self._drain(True)
        if not self._ready:
            return None
        tid = self._ready.popleft()
        self.stats.context_switches += 1
        self.run_log.append(tid)
        return tid


AppThread = Generator[SyscallRequest, SyscallResponse, None]
Workload = Sequence[Sequence[SyscallRequest]]


def _script(reqs: Sequence[SyscallRequest]) -> AppThread:
    for r in reqs:
        yield r


def run_async(workload: Workload, transition_cost: float = DEFAULT_TRANSITION_COST,
              spin_budget: float = DEFAULT_SPIN_BUDGET, workers: int = 2,
              queue_size: int = DEFAULT_QUEUE_SIZE):
    """Run per-thread request scripts through the async bridge.

    Returns ``(stats, results)`` where ``results[t]`` lists the
    ``(result, error)`` outcome of each request of thread ``t``.
    """
    stats = SchedulerStats()
    results: list[list] = [[] for _ in workload]
    threads = {t: _script(s) for t, s in enumerate(workload)}
    inbox: dict[int, SyscallResponse | None] = {t: None for t in threads}
    owner: dict[int, int] = {}
    start = time.perf_counter()
    with SyscallBridge(workers, queue_size) as bridge:
        def poll(block: bool) -> list[int]:
            woke = []
            for resp in bridge.poll(block):
                tid = owner.pop(resp.id)
                inbox[tid] = resp
                results[tid].append(resp.outcome)
                stats.completed += 1
                woke.append(tid)
            return woke

        sched = UserScheduler(poll, spin_budget, transition_cost, stats)
        for t in threads:
            sched.spawn(t)
        live = len(threads)
        while live:
            tid = sched.schedule()
            if tid is None:
                continue
            try:
                gen = threads[tid]
                value = inbox.pop(tid, None)
                req = gen.send(value) if value is not None else next(gen)
            except StopIteration:
                live -= 1
                continue
            handle = bridge.submit(req)
            owner[handle.request.id] = tid
            sched.block(tid)
    stats.wall_time = time.perf_counter() - start
    return stats, results


def run_baseline_sync(workload: Workload, transition_cost: float = DEFAULT_TRANSITION_COST):
    """Execute every request inline, paying exit and re-entry each time."""
    stats = SchedulerStats()
    results: list[list] = [[] for _ in workload]
    ids = itertools.count(1)
    cursors = [iter(s) for s in workload]
    live = list(range(len(workload)))
    start = time.perf_counter()
    while live:
        for tid in list(live):
            req = next(cursors[tid], None)
            if req is None:
                live.remove(tid)
                continue
            stats.context_switches += 1
            stats.transitions += 1
            burn(transition_cost)
            resp = execute(replace(req, id=next(ids), submitted_at=time.monotonic()))
            stats.transitions += 1
            burn(transition_cost)
            results[tid].append(resp.outcome)
            stats.completed += 1
    stats.wall_time = time.perf_counter() - start
    return stats, results


def sleep_workload(threads: int, requests: int) -> list[list[SyscallRequest]]:
    return [[Sleep(0)] * requests for _ in range(threads)]


def random_workload(rng, threads: int, requests: int, workdir: str | os.PathLike):
    """Mixed Nop/Sleep/Write/Read scripts; each thread touches only its own files."""
    out = []
    for t in range(threads):
        script = []
        for i in range(requests):
            path = os.path.join(os.fspath(workdir), f"t{t}-f{rng.integers(0, 4)}")
            pick = rng.integers(0, 4)
            if pick == 0:
                script.append(Nop())
            elif pick == 1:
                script.append(Sleep(float(rng.integers(0, 3)) * 1e-5))
            elif pick == 2:
                script.append(WriteFile(path, rng.bytes(int(rng.integers(0, 64)))))
            else:
                script.append(ReadFile(path))
        out.append(script)
    return out
