"""Priority task queue with a dependency DAG.

Eligible tasks are served by (priority, estimated tokens, creation time).
A task becomes eligible only once every dependency is Done; a Failed
dependency fails its dependents transitively.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import time
from dataclasses import dataclass, field

DEFAULT_EST_TOKENS = 4096


class Priority(enum.IntEnum):
    CRITICAL = 0
    HIGH = 1
    NORMAL = 2
    LOW = 3


class State(str, enum.Enum):
    PENDING = "pending"
    ELIGIBLE = "eligible"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"


class TaskError(ValueError):
    pass


class CycleError(TaskError):
    def __init__(self, cycle: list[str]):
        self.cycle = cycle
        super().__init__("dependency cycle: " + " -> ".join(cycle + cycle[:1]))


@dataclass
class Task:
    task_id: str
    priority: Priority = Priority.NORMAL
    est_tokens: int = DEFAULT_EST_TOKENS
    created_at: float = field(default_factory=time.monotonic)
    deps: set[str] = field(default_factory=set)
    state: State = State.PENDING
    failure_reason: str | None = None

    def key(self):
        return (int(self.priority), self.est_tokens, self.created_at)


def find_cycle(graph: dict[str, set[str]]) -> list[str] | None:
    """Iterative three-colour DFS; returns one cycle as a node list."""
    WHITE, GREY, BLACK = 0, 1, 2
    colour = {n: WHITE for n in graph}
    for root in graph:
        if colour[root] != WHITE:
            continue
        path = [root]
        stack = [iter(sorted(graph[root]))]
        colour[root] = GREY
        while stack:
            nxt = next(stack[-1], None)
            if nxt is None:
                colour[path.pop()] = BLACK
                stack.pop()
                continue
            c = colour.get(nxt, BLACK)
            if c == GREY:
                return path[path.index(nxt):]
            if c == WHITE:
                colour[nxt] = GREY
                path.append(nxt)
                stack.append(iter(sorted(graph[nxt])))
    return None


class TaskQueue:
    def __init__(self):
        self.tasks: dict[str, Task] = {}
        self.dependents: dict[str, set[str]] = {}
        self._heap: list = []
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self.tasks)

    def _graph(self, extra: dict[str, set[str]] | None = None) -> dict[str, set[str]]:
        g = {tid: set(t.deps) for tid, t in self.tasks.items()}
        for tid, deps in (extra or {}).items():
            g.setdefault(tid, set()).update(deps)
        return g

    def submit(self, task: Task) -> Task:
        self.submit_many([task])
        return task

    def submit_many(self, tasks: list[Task]) -> None:
        """Insert a batch atomically; tasks may depend on each other."""
        ids = [t.task_id for t in tasks]
        if len(set(ids)) != len(ids):
            raise TaskError("duplicate task_id within batch")
        for t in tasks:
            if t.task_id in self.tasks:
                raise TaskError(f"duplicate task_id {t.task_id!r}")
        known = set(self.tasks) | set(ids)
        for t in tasks:
            missing = set(t.deps) - known
            if missing:
                raise TaskError(f"unknown dependency {sorted(missing)} for {t.task_id!r}")
        cycle = find_cycle(self._graph({t.task_id: set(t.deps) for t in tasks}))
        if cycle:
            raise CycleError(cycle)
        for t in tasks:
            if t.est_tokens is None or t.est_tokens <= 0:
                t.est_tokens = DEFAULT_EST_TOKENS
            t.state = State.PENDING
            self.tasks[t.task_id] = t
            self.dependents.setdefault(t.task_id, set())
        for t in tasks:
            for d in t.deps:
                self.dependents.setdefault(d, set()).add(t.task_id)
        for t in tasks:
            self._evaluate(t)

    def add_dependency(self, task_id: str, dep_id: str) -> None:
        if task_id not in self.tasks or dep_id not in self.tasks:
            raise TaskError("unknown task")
        t = self.tasks[task_id]
        if t.state is not State.PENDING and t.state is not State.ELIGIBLE:
            raise TaskError(f"cannot add dependency to {t.state.value} task")
        cycle = find_cycle(self._graph({task_id: {dep_id}}))
        if cycle:
            raise CycleError(cycle)
        t.deps.add(dep_id)
        self.dependents[dep_id].add(task_id)
        if t.state is State.ELIGIBLE:
            t.state = State.PENDING
        self._evaluate(t)

    def _evaluate(self, t: Task) -> bool:
        if t.state is not State.PENDING:
            return False
        states = [self.tasks[d].state for d in t.deps]
        if any(s is State.FAILED for s in states):
            self._fail(t, "dependency_failed")
            return False
        if all(s is State.DONE for s in states):
            t.state = State.ELIGIBLE
            heapq.heappush(self._heap, (t.key(), next(self._seq), t.task_id))
            return True
        return False

    def _fail(self, t: Task, reason: str) -> None:
        stack = [t]
        t.state, t.failure_reason = State.FAILED, reason
        while stack:
            cur = stack.pop()
            for child_id in self.dependents.get(cur.task_id, ()):
                child = self.tasks[child_id]
                if child.state in (State.PENDING, State.ELIGIBLE):
                    child.state, child.failure_reason = State.FAILED, "dependency_failed"
                    stack.append(child)

    def eligible(self) -> list[Task]:
        return [t for t in self.tasks.values() if t.state is State.ELIGIBLE]

    def next_task(self) -> Task | None:
        while self._heap:
            _, _, tid = heapq.heappop(self._heap)
            t = self.tasks[tid]
            if t.state is State.ELIGIBLE:
                t.state = State.RUNNING
                return t
        return None

    def complete(self, task_id: str, outcome: State) -> list[str]:
        """Finish a running task; returns ids that just became eligible."""
        if task_id not in self.tasks:
            raise TaskError(f"unknown task {task_id!r}")
        if outcome not in (State.DONE, State.FAILED):
            raise TaskError("outcome must be DONE or FAILED")
        t = self.tasks[task_id]
        if t.state is not State.RUNNING:
            raise TaskError(f"task {task_id!r} is {t.state.value}, not running")
        if outcome is State.FAILED:
            self._fail(t, "failed")
            return []
        t.state = State.DONE
        return [c for c in sorted(self.dependents.get(task_id, ()))
                if self._evaluate(self.tasks[c])]
