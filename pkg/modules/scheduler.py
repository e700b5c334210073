"""
Run-time core: task-instance state machine, ready set, pool admission and the
event log.

The scheduler is single-threaded and owns all run state. Executors run
instances and hand completions back through collect(); the loop never blocks
on anything else. Every transition is written to the event log, which is the
contract consumed by the reports and the invariant checks.
"""
import heapq
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from modules.comm_store import CommKey, CommStore, CommStoreError, CommValue
from modules.dag_core import InstanceKey, WorkflowGraphError, expand, expanded_edges, instance_upstreams, task_graph
from modules.executors import Completion, Job, write_instance_log
from modules.log_config import get_logger

logger = get_logger('scheduler', 'scheduler.log')


class SchedulerError(RuntimeError):
    pass


class EventLogError(ValueError):
    """Malformed event-log line; carries the line number."""

    def __init__(self, line_no, reason):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


# ----------------------------
# Domain Types
# ----------------------------
class State(str, Enum):
    PENDING = 'PENDING'
    READY = 'READY'
    RUNNING = 'RUNNING'
    SUCCESS = 'SUCCESS'
    FAILED = 'FAILED'
    UPSTREAM_FAILED = 'UPSTREAM_FAILED'


LEGAL_TRANSITIONS = {
    (State.PENDING, State.READY),
    (State.READY, State.RUNNING),
    (State.RUNNING, State.SUCCESS),
    (State.RUNNING, State.FAILED),
    (State.PENDING, State.UPSTREAM_FAILED),
    (State.READY, State.UPSTREAM_FAILED),
}
TERMINAL = {State.SUCCESS, State.FAILED, State.UPSTREAM_FAILED}
BROKEN = {State.FAILED, State.UPSTREAM_FAILED}


@dataclass
class TaskInstance:
    key: InstanceKey
    pool: str
    state: State = State.PENDING
    slot: Optional[int] = None
    ready_ms: Optional[int] = None

    @property
    def task_id(self):
        return self.key.task_id

    @property
    def map_index(self):
        return self.key.map_index

    def transition(self, new_state, slot=None):
        if (self.state, new_state) not in LEGAL_TRANSITIONS:
            raise SchedulerError(f"illegal transition {self.state.value} -> {new_state.value} for {self.key.label()}")
        self.state = new_state
        self.slot = slot if new_state == State.RUNNING else None


@dataclass
class PoolState:
    spec: object
    occupied: dict = field(default_factory=dict)   # slot -> InstanceKey

    def free_slots(self):
        return [slot for slot in range(self.spec.slots) if slot not in self.occupied]

    def take(self, slot, key):
        if slot in self.occupied or not 0 <= slot < self.spec.slots:
            raise SchedulerError(f"slot {slot} of pool {self.spec.name} is not free")
        self.occupied[slot] = key

    def release(self, slot):
        del self.occupied[slot]


class EventKind(str, Enum):
    READY = 'READY'
    START = 'START'
    END_OK = 'END_OK'
    END_FAIL = 'END_FAIL'
    UPSTREAM_FAILED = 'UPSTREAM_FAILED'


@dataclass(frozen=True)
class Event:
    t: int
    kind: EventKind
    task_id: str
    map_index: Optional[int]
    pool: str
    slot: Optional[int] = None

    @property
    def instance(self):
        return InstanceKey(self.task_id, self.map_index)

    def to_line(self):
        index = '-' if self.map_index is None else str(self.map_index)
        slot = '-' if self.slot is None else str(self.slot)
        return f"{self.t} {self.kind.value} {self.task_id} {index} {self.pool} {slot}"


def parse_event_line(line, line_no=0):
    parts = line.split()
    if len(parts) != 6:
        raise EventLogError(line_no, f"expected 6 fields, got {len(parts)}")
    t, kind, task_id, index, pool, slot = parts
    try:
        return Event(
            t=int(t),
            kind=EventKind(kind),
            task_id=task_id,
            map_index=None if index == '-' else int(index),
            pool=pool,
            slot=None if slot == '-' else int(slot),
        )
    except ValueError as e:
        raise EventLogError(line_no, str(e))


class EventLog:
    """Ordered events; when a path is given every event is flushed as it happens."""

    def __init__(self, path=None):
        self.events = []
        self.path = path
        self._file = open(path, 'w', encoding='utf-8') if path else None

    def append(self, event):
        if self.events and event.t < self.events[-1].t:
            raise SchedulerError(f"event time went backwards: {event.to_line()}")
        self.events.append(event)
        if self._file is not None:
            self._file.write(event.to_line() + '\n')
            self._file.flush()

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None

    def __iter__(self):
        return iter(self.events)

    def __len__(self):
        return len(self.events)


def read_event_log(path):
    with open(path, 'r', encoding='utf-8') as file:
        return parse_event_log(file.read())


def parse_event_log(text):
    events = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            events.append(parse_event_line(line, line_no))
    return events


# ----------------------------
# Clocks
# ----------------------------
class SimClock:
    """Discrete-event clock: time moves only when the executor advances it."""

    def __init__(self):
        self._now = 0

    def now(self):
        return self._now

    def advance_to(self, t_ms):
        if t_ms < self._now:
            raise SchedulerError(f"simulated clock cannot go back from {self._now} to {t_ms}")
        self._now = t_ms


class WallClock:
    """Milliseconds since the clock was created, from the monotonic timer."""

    def __init__(self):
        self._start = time.monotonic()

    def now(self):
        return int((time.monotonic() - self._start) * 1000)

    def advance_to(self, t_ms):
        pass


# ----------------------------
# Run State
# ----------------------------
@dataclass
class RunResult:
    ok: bool
    counts: dict
    makespan_ms: int
    fanout: dict
    failed: list = field(default_factory=list)
    phases: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)   # InstanceKey -> why it FAILED

    @property
    def status(self):
        return 'SUCCESS' if self.ok else 'FAILED'


@dataclass
class RunState:
    """
    Instances plus the bookkeeping that keeps each loop turn proportional to
    what changed: unfinished-upstream counts, downstream adjacency, and the
    instances that became ready or doomed since the last turn.
    """
    spec: object
    graph: object
    instances: dict = field(default_factory=dict)        # InstanceKey -> TaskInstance
    deps: dict = field(default_factory=dict)             # InstanceKey -> set of InstanceKey
    barriers: dict = field(default_factory=dict)         # InstanceKey -> set of (group_id, task_id)
    fanout: dict = field(default_factory=dict)           # group_id -> list of values
    children: dict = field(default_factory=dict)         # InstanceKey -> set of InstanceKey
    unfinished: dict = field(default_factory=dict)       # InstanceKey -> upstreams not yet SUCCESS
    barrier_waiters: dict = field(default_factory=dict)  # group_id -> set of InstanceKey
    newly_ready: set = field(default_factory=set)
    doomed: set = field(default_factory=set)

    @classmethod
    def initial(cls, spec):
        state = cls(spec, task_graph(spec))
        for task in spec.tasks:
            if spec.mapped_group_of(task.id) is None:
                state.add_instance(InstanceKey(task.id))
        return state

    def add_instance(self, key):
        self.instances[key] = TaskInstance(key, self.spec.task(key.task_id).pool)
        self._link(key)

    def _link(self, key):
        deps, barriers = instance_upstreams(self.spec, key, self.fanout, self.graph)
        self.deps[key], self.barriers[key] = deps, barriers
        for dep in deps:
            self.children.setdefault(dep, set()).add(key)
        for group_id, _ in barriers:
            self.barrier_waiters.setdefault(group_id, set()).add(key)
        self.unfinished[key] = sum(1 for dep in deps if self.instances[dep].state != State.SUCCESS)
        if any(self.instances[dep].state in BROKEN for dep in deps) or any(
                self.instances[self.group_producer(group_id)].state in BROKEN for group_id, _ in barriers):
            self.doomed.add(key)
        elif self.unfinished[key] == 0 and not barriers:
            self.newly_ready.add(key)

    def _unlink(self, key):
        for dep in self.deps[key]:
            self.children[dep].discard(key)
        for group_id, _ in self.barriers[key]:
            self.barrier_waiters[group_id].discard(key)

    def group_producer(self, group_id):
        return InstanceKey(self.spec.group(group_id).mapped_key()[0])

    def expand_group(self, group, values):
        sets = expand(self.spec, group, values)
        self.fanout[group.id] = list(values)
        for instance_set in sets:
            for key in instance_set.instances:
                self.add_instance(key)
        for key in sorted(self.barrier_waiters.get(group.id, ()), key=InstanceKey.sort_key):
            self._unlink(key)
            self._link(key)
        return sets

    def succeeded(self, key):
        for child in self.children.get(key, ()):
            self.unfinished[child] -= 1
            if self.unfinished[child] == 0 and not self.barriers[child]:
                self.newly_ready.add(child)

    def downstream_of(self, key):
        """Instances that wait on key: its children and the waiters of groups it produces."""
        found = set(self.children.get(key, ()))
        for group in self.spec.groups:
            if group.mapped_over and InstanceKey(group.mapped_key()[0]) == key:
                found.update(self.barrier_waiters.get(group.id, ()))
        return found

    def failed(self, key):
        self.doomed.update(self.downstream_of(key))

    def map_value(self, key):
        group = self.spec.mapped_group_of(key.task_id)
        if group is None or key.map_index is None:
            return None
        return self.fanout[group.id][key.map_index]


def ready_set(run_state):
    """PENDING instances whose every upstream instance is SUCCESS."""
    ready = set()
    for key, instance in run_state.instances.items():
        if instance.state != State.PENDING or run_state.barriers[key]:
            continue
        if all(run_state.instances[dep].state == State.SUCCESS for dep in run_state.deps[key]):
            ready.add(key)
    return ready


def default_tie_break(instance):
    return (instance.ready_ms, instance.key.task_id,
            -1 if instance.key.map_index is None else instance.key.map_index)


def admit(pool_state, ready_instances, tie_break=default_tie_break):
    """Assign lowest free slots to READY instances in FIFO / (task_id, map_index) order."""
    ordered = sorted(ready_instances, key=tie_break)
    return list(zip(ordered, pool_state.free_slots()))


# ----------------------------
# Scheduler
# ----------------------------
class Scheduler:

    def __init__(self, spec, executor, clock, store=None, event_log=None):
        self.spec = spec
        self.executor = executor
        self.clock = clock
        self.store = store if store is not None else CommStore()
        self.log = event_log if event_log is not None else EventLog()
        self.state = RunState.initial(spec)
        self.pools = {pool.name: PoolState(pool) for pool in spec.pools}
        self.queues = {pool.name: [] for pool in spec.pools}   # heap of (tie-break, InstanceKey)
        self.phases = {}
        self.diagnostics = {}
        self._aborted = []

    def _emit(self, t, kind, instance, slot=None):
        self.log.append(Event(t, kind, instance.task_id, instance.map_index, instance.pool, slot))

    # ---- transitions ----
    def _promote_ready(self, t):
        promoted, self.state.newly_ready = self.state.newly_ready, set()
        for key in sorted(promoted, key=InstanceKey.sort_key):
            instance = self.state.instances[key]
            if instance.state != State.PENDING:
                continue
            instance.transition(State.READY)
            instance.ready_ms = t
            self._emit(t, EventKind.READY, instance)
            heapq.heappush(self.queues[instance.pool], (default_tie_break(instance), key))

    def _waiting(self, pool_name, limit):
        """Up to limit READY instances of the pool in admission order; doomed entries are dropped."""
        queue, waiting = self.queues[pool_name], []
        while queue and len(waiting) < limit:
            _, key = heapq.heappop(queue)
            instance = self.state.instances[key]
            if instance.state == State.READY:
                waiting.append(instance)
        return waiting

    def _start_admitted(self, t):
        for pool in self.spec.pools:
            pool_state = self.pools[pool.name]
            free = pool.slots - len(pool_state.occupied)
            if free <= 0 or not self.queues[pool.name]:
                continue
            for instance, slot in admit(pool_state, self._waiting(pool.name, free)):
                pool_state.take(slot, instance.key)
                instance.transition(State.RUNNING, slot)
                self._emit(t, EventKind.START, instance, slot)
                try:
                    job = self._build_job(instance)
                except (CommStoreError, ValueError) as e:
                    diagnostic = f"aborted before execution: {e}"
                    write_instance_log(getattr(self.executor, 'run_dir', '.'), instance.key, diagnostic + '\n')
                    logger.error(f"{instance.key.label()} {diagnostic}")
                    self._aborted.append(Completion(instance.key, ok=False, diagnostic=diagnostic, end_ms=t))
                    continue
                self.executor.submit(job, t)

    def _build_job(self, instance):
        task = self.spec.task(instance.task_id)
        scope = instance.map_index
        map_value = self.state.map_value(instance.key)
        kwargs = {'map_value': map_value} if map_value is not None else {}
        params = {name: self.store.resolve(template, scope, **kwargs) for name, template in task.params}
        command = None
        if task.action.kind == 'shell':
            command = self.store.resolve(task.action.command_template, scope, **kwargs)
        returns = None
        if task.returns is not None:
            type_name, _, body = task.returns.partition(':')
            resolved = self.store.resolve(body, scope, **kwargs)
            returns = CommValue.from_typed(f"{type_name}:{resolved}").structured()
        return Job(instance=instance.key, action=task.action, command=command, params=params,
                   map_value=map_value, returns=returns, produces=bool(task.produces))

    def _complete(self, completion):
        key = InstanceKey(*completion.instance)
        instance = self.state.instances[key]
        task = self.spec.task(key.task_id)
        t = completion.end_ms if completion.end_ms is not None else self.clock.now()
        ok, diagnostic = completion.ok, completion.diagnostic

        if ok and task.produces:
            try:
                self._publish(instance, task, completion.value, t)
            except (CommStoreError, WorkflowGraphError, TypeError) as e:
                ok, diagnostic = False, str(e)
                logger.error(f"{key.label()} failed after execution: {e}")

        if completion.phases is not None:
            self.phases[key] = completion.phases
        slot = instance.slot
        self.pools[instance.pool].release(slot)
        instance.transition(State.SUCCESS if ok else State.FAILED)
        self._emit(t, EventKind.END_OK if ok else EventKind.END_FAIL, instance, slot)
        if ok:
            self.state.succeeded(key)
        else:
            self.state.failed(key)
            self.diagnostics[key] = diagnostic
            logger.warning(f"{key.label()} FAILED: {diagnostic}")

    def _publish(self, instance, task, value, t):
        if value is None:
            raise CommStoreError(f"{task.id} declares produces={task.produces} but returned nothing")
        comm_key = CommKey(task.id, task.produces, instance.map_index)
        self.store.publish(comm_key, value, producer_state=instance.state.value, t_ms=t)
        for group in self.spec.groups:
            if group.mapped_over and group.mapped_key() == (task.id, task.produces):
                values = self.store.get(comm_key).structured()
                sets = self.state.expand_group(group, values)
                logger.info(f"Group {group.id} expanded into {len(sets)} instance sets")

    def _propagate_failures(self, t):
        """Mark every PENDING/READY descendant of a failure UPSTREAM_FAILED, in instance order."""
        frontier, self.state.doomed = list(self.state.doomed), set()
        closure = set()
        while frontier:
            key = frontier.pop()
            if key in closure or self.state.instances[key].state not in (State.PENDING, State.READY):
                continue
            closure.add(key)
            frontier.extend(self.state.downstream_of(key))
        for key in sorted(closure, key=InstanceKey.sort_key):
            instance = self.state.instances[key]
            instance.transition(State.UPSTREAM_FAILED)
            self._emit(t, EventKind.UPSTREAM_FAILED, instance)

    # ---- main loop ----
    def run(self):
        logger.info(f"Run of workflow {self.spec.name} started")
        try:
            while True:
                t = self.clock.now()
                self._promote_ready(t)
                self._start_admitted(t)
                if self._aborted:
                    aborted, self._aborted = self._aborted, []
                    for completion in aborted:
                        self._complete(completion)
                    self._propagate_failures(t)
                    continue
                if self.executor.pending() == 0:
                    break
                for completion in self.executor.collect(self.clock):
                    self._complete(completion)
                self._propagate_failures(self.clock.now())
        finally:
            self.log.close()

        stuck = [key.label() for key, inst in self.state.instances.items() if inst.state not in TERMINAL]
        if stuck:
            raise SchedulerError(f"run stalled with non-terminal instances: {', '.join(sorted(stuck))}")

        counts = {}
        for instance in self.state.instances.values():
            counts[instance.state.value] = counts.get(instance.state.value, 0) + 1
        failed = sorted((k for k, i in self.state.instances.items() if i.state == State.FAILED), key=InstanceKey.sort_key)
        ok = all(i.state == State.SUCCESS for i in self.state.instances.values())
        ok = ok and all(g.id in self.state.fanout for g in self.spec.groups if g.mapped_over)
        result = RunResult(ok=ok, counts=counts, makespan_ms=self.clock.now(), fanout=dict(self.state.fanout),
                           failed=failed, phases=dict(self.phases), diagnostics=dict(self.diagnostics))
        logger.info(f"Run of workflow {self.spec.name} finished: {result.status} {counts}")
        return result, self.log


def run(spec, executor, clock, store=None, event_log=None):
    """Run a validated workflow to completion; returns (RunResult, EventLog)."""
    return Scheduler(spec, executor, clock, store, event_log).run()


# ----------------------------
# Event-Log Replay Checks
# ----------------------------
def run_edges(spec, fanout):
    """
    Instance-level edges of a finished run. Groups that never expanded are
    represented by an edge from their producer to every waiting instance.
    """
    edges = set(expanded_edges(spec, fanout))
    graph = task_graph(spec)
    for task in spec.tasks:
        group = spec.mapped_group_of(task.id)
        if group is not None and group.id not in fanout:
            continue
        keys = ([InstanceKey(task.id)] if group is None
                else [InstanceKey(task.id, i) for i in range(len(fanout[group.id]))])
        for key in keys:
            _, barriers = instance_upstreams(spec, key, fanout, graph)
            for group_id, _ in barriers:
                edges.add((InstanceKey(spec.group(group_id).mapped_key()[0]), key))
    return edges


def check_event_log(events, pools, edges, conservation=True):
    """
    Replay a log and return the violated scheduler invariants (empty = sound).

    pools maps pool name -> slots; edges is the instance-level edge set.
    Work conservation only holds on the discrete-event clock; pass
    conservation=False for wall-clock logs.
    """
    problems = []
    running = {name: 0 for name in pools}
    open_slots = {}
    starts, ends_ok, ended = {}, {}, set()
    ready_waiting = {name: {} for name in pools}   # pool -> READY instances in arrival order
    failed, upstream_failed = set(), set()

    def check_conservation(t):
        for name, slots in pools.items():
            waiting = ready_waiting[name]
            if waiting and running[name] < slots:
                first = next(iter(waiting))
                problems.append(f"work conservation: pool {name} idle at t={t} with {first.label()} ready")

    previous_t = None
    for event in events:
        if conservation and previous_t is not None and event.t != previous_t:
            check_conservation(previous_t)
        if previous_t is not None and event.t < previous_t:
            problems.append(f"time order: {event.to_line()}")
        previous_t = event.t
        key = event.instance
        if event.kind == EventKind.READY:
            ready_waiting.setdefault(event.pool, {})[key] = True
        elif event.kind == EventKind.START:
            ready_waiting.get(event.pool, {}).pop(key, None)
            starts[key] = event.t
            running[event.pool] = running.get(event.pool, 0) + 1
            if running[event.pool] > pools.get(event.pool, 0):
                problems.append(f"pool cap: {event.pool} over capacity at t={event.t}")
            if event.slot is None or not 0 <= event.slot < pools.get(event.pool, 0):
                problems.append(f"slot range: {key.label()} on {event.pool}/{event.slot}")
            if (event.pool, event.slot) in open_slots:
                problems.append(f"slot exclusivity: {event.pool}/{event.slot} shared at t={event.t}")
            open_slots[(event.pool, event.slot)] = key
        elif event.kind in (EventKind.END_OK, EventKind.END_FAIL):
            running[event.pool] = running.get(event.pool, 0) - 1
            open_slots.pop((event.pool, event.slot), None)
            ended.add(key)
            if event.kind == EventKind.END_OK:
                ends_ok[key] = event.t
            else:
                failed.add(key)
        elif event.kind == EventKind.UPSTREAM_FAILED:
            ready_waiting.get(event.pool, {}).pop(key, None)
            upstream_failed.add(key)
    if conservation and previous_t is not None:
        check_conservation(previous_t)

    for upstream, downstream in edges:
        if downstream in starts:
            if upstream not in ends_ok:
                problems.append(f"dependency order: {downstream.label()} started without {upstream.label()} succeeding")
            elif ends_ok[upstream] > starts[downstream]:
                problems.append(f"dependency order: {downstream.label()} started before {upstream.label()} ended")

    children = {}
    for upstream, downstream in edges:
        children.setdefault(upstream, set()).add(downstream)
    closure, frontier = set(), list(failed)
    while frontier:
        for child in children.get(frontier.pop(), ()):
            if child not in closure:
                closure.add(child)
                frontier.append(child)
    expected = {key for key in closure if key not in ended}
    if expected != upstream_failed:
        missing = sorted(k.label() for k in expected - upstream_failed)
        extra = sorted(k.label() for k in upstream_failed - expected)
        problems.append(f"failure closure: missing {missing} unexpected {extra}")
    return problems
