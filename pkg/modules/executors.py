"""
Task execution backends.

ProcessExecutor runs shell commands (and built-in pipeline steps) in worker
threads under the wall clock. SimulatedExecutor samples durations from seeded
per-instance streams and completes instances on a discrete-event clock.
Both deliver Completions through collect(), which the scheduler drains.
"""
import heapq
import os
import queue
import re
import signal
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from modules.log_config import get_logger

logger = get_logger('executors', 'executors.log')

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
PHASES_LINE = re.compile(r'^PHASES\s+(\d+)\s+(\d+)\s+(\d+)\s+(\d+)\s*$')
BUILTIN_STEP = re.compile(r'^[A-Za-z_][A-Za-z0-9_]*$')


# ----------------------------
# Seeded Streams
# ----------------------------
def fnv1a64(data):
    """64-bit FNV-1a hash of a str (UTF-8) or bytes."""
    if isinstance(data, str):
        data = data.encode('utf-8')
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


class SplitMix64:
    """SplitMix64 generator; the whole state is one 64-bit word."""

    def __init__(self, state):
        self.state = state & MASK64

    def next_u64(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform_int(self, lo, hi):
        """Integer in [lo, hi]: lo + next_u64() mod (hi - lo + 1)."""
        return lo + self.next_u64() % (hi - lo + 1)


def derive_substream(run_seed, task_id, map_index=None):
    """
    Per-instance stream: seed XOR FNV-1a-64(task_id + '#' + (map_index or '-')),
    used as the initial SplitMix64 state.
    """
    suffix = '-' if map_index is None else str(map_index)
    return SplitMix64((run_seed & MASK64) ^ fnv1a64(f"{task_id}#{suffix}"))


# ----------------------------
# Action Types
# ----------------------------
@dataclass(frozen=True)
class DurationSpec:
    kind: str                      # 'fixed' | 'uniform'
    lo_ms: int
    hi_ms: int
    weights: tuple = (1.0,)
    fail: bool = False
    fail_indices: frozenset = frozenset()

    def __post_init__(self):
        if self.kind not in ('fixed', 'uniform'):
            raise ValueError(f"unknown duration kind '{self.kind}'")
        if self.lo_ms < 0 or self.hi_ms < 0:
            raise ValueError("durations must be >= 0")
        if self.lo_ms > self.hi_ms:
            raise ValueError(f"uniform bounds out of order: {self.lo_ms} > {self.hi_ms}")
        if not self.weights or any(w < 0 for w in self.weights):
            raise ValueError("weights must be non-negative")

    def weight_for(self, map_index):
        index = 0 if map_index is None else map_index % len(self.weights)
        return self.weights[index]

    def fails(self, map_index):
        if not self.fail:
            return False
        return not self.fail_indices or map_index in self.fail_indices

    def __str__(self):
        text = f"fixed:{self.lo_ms}" if self.kind == 'fixed' else f"uniform:{self.lo_ms}:{self.hi_ms}"
        if self.weights != (1.0,):
            text += '*' + ','.join(f"{w:g}" for w in self.weights)
        if self.fail:
            text += ':fail'
            if self.fail_indices:
                text += '@' + ','.join(str(i) for i in sorted(self.fail_indices))
        return text


@dataclass(frozen=True)
class ActionSpec:
    kind: str                      # 'shell' | 'sim' | 'builtin'
    command_template: Optional[str] = None
    duration: Optional[DurationSpec] = None
    step: Optional[str] = None

    def __post_init__(self):
        payloads = {'shell': self.command_template, 'sim': self.duration, 'builtin': self.step}
        if self.kind not in payloads:
            raise ValueError(f"unknown action kind '{self.kind}'")
        present = [kind for kind, payload in payloads.items() if payload is not None]
        if present != [self.kind]:
            raise ValueError(f"action '{self.kind}' must carry exactly its own payload")

    def __str__(self):
        if self.kind == 'shell':
            return f"shell:{self.command_template}"
        if self.kind == 'sim':
            return f"sim:{self.duration}"
        return f"builtin:{self.step}"


def parse_duration(text):
    """Parse 'fixed:<ms>' / 'uniform:<lo>:<hi>' with optional '*w[,w..]' and ':fail[@i,..]'."""
    fail, fail_indices = False, frozenset()
    marker = text.find(':fail')
    if marker >= 0:
        fail = True
        tail = text[marker + len(':fail'):]
        text = text[:marker]
        if tail.startswith('@'):
            try:
                fail_indices = frozenset(int(i) for i in tail[1:].split(','))
            except ValueError:
                raise ValueError(f"bad failure indices '{tail[1:]}'")
        elif tail:
            raise ValueError(f"unexpected text after ':fail': '{tail}'")

    weights = (1.0,)
    if '*' in text:
        text, _, weight_text = text.partition('*')
        try:
            weights = tuple(float(w) for w in weight_text.split(','))
        except ValueError:
            raise ValueError(f"bad weight '{weight_text}'")

    parts = text.split(':')
    try:
        if parts[0] == 'fixed' and len(parts) == 2:
            ms = int(parts[1])
            return DurationSpec('fixed', ms, ms, weights, fail, fail_indices)
        if parts[0] == 'uniform' and len(parts) == 3:
            return DurationSpec('uniform', int(parts[1]), int(parts[2]), weights, fail, fail_indices)
    except ValueError as e:
        raise ValueError(f"bad duration '{text}': {e}")
    raise ValueError(f"bad duration '{text}', expected fixed:<ms> or uniform:<lo>:<hi>")


def parse_action(text):
    kind, sep, payload = text.partition(':')
    if not sep:
        raise ValueError(f"bad action '{text}', expected shell:|sim:|builtin:")
    if kind == 'shell':
        if not payload.strip():
            raise ValueError("empty shell command")
        return ActionSpec('shell', command_template=payload)
    if kind == 'sim':
        return ActionSpec('sim', duration=parse_duration(payload))
    if kind == 'builtin':
        if not BUILTIN_STEP.match(payload):
            raise ValueError(f"bad builtin step '{payload}'")
        return ActionSpec('builtin', step=payload)
    raise ValueError(f"unknown action kind '{kind}'")


# ----------------------------
# Results
# ----------------------------
@dataclass(frozen=True)
class PhaseTiming:
    setup_cuda: int
    setup_rest: int
    docking: int
    shutdown: int

    @property
    def total(self):
        return self.setup_cuda + self.setup_rest + self.docking + self.shutdown

    def to_line(self):
        return f"PHASES {self.setup_cuda} {self.setup_rest} {self.docking} {self.shutdown}"


PHASE_NAMES = ('setup_cuda', 'setup_rest', 'docking', 'shutdown')


def parse_phases(text):
    """Return the PhaseTiming of the last PHASES line in text, or None."""
    found = None
    for line in text.splitlines():
        match = PHASES_LINE.match(line.strip())
        if match:
            found = PhaseTiming(*(int(g) for g in match.groups()))
    return found


def simulated_phases(duration_ms):
    """Split a simulated duration into phases: 8% / 5% / remainder / 2%."""
    setup_cuda = duration_ms * 8 // 100
    setup_rest = duration_ms * 5 // 100
    shutdown = duration_ms * 2 // 100
    return PhaseTiming(setup_cuda, setup_rest, duration_ms - setup_cuda - setup_rest - shutdown, shutdown)


@dataclass
class Completion:
    instance: tuple
    ok: bool
    exit_code: Optional[int] = None
    output: str = ''
    phases: Optional[PhaseTiming] = None
    value: object = None
    diagnostic: str = ''
    end_ms: Optional[int] = None


@dataclass
class Job:
    """A fully resolved instance handed to an executor."""
    instance: tuple                # (task_id, map_index)
    action: ActionSpec
    command: Optional[str] = None  # resolved shell command
    params: dict = field(default_factory=dict)
    map_value: object = None
    returns: object = None         # value a simulated task publishes
    produces: bool = False


@dataclass
class StepContext:
    run_dir: str
    data_dir: str
    instance: tuple
    map_value: object = None


def instance_log_path(run_dir, instance):
    task_id, map_index = instance
    name = task_id if map_index is None else f"{task_id}.{map_index}"
    return os.path.join(run_dir, 'logs', f"{name}.log")


def write_instance_log(run_dir, instance, text):
    path = instance_log_path(run_dir, instance)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as file:
        file.write(text)
    return path


def shell_return_value(stdout):
    """Last non-empty, non-PHASES stdout line; int when it parses as one."""
    for line in reversed(stdout.splitlines()):
        line = line.strip()
        if line and not PHASES_LINE.match(line):
            try:
                return int(line)
            except ValueError:
                return line
    return None


# ----------------------------
# Core Functions
# ----------------------------
def exec_shell(instance, resolved_command, data_dir, run_dir, timeout_ms=None):
    """Run one resolved shell command with cwd=data_dir; output goes to the instance log."""
    task_id, map_index = instance
    env = dict(os.environ)
    env['SF_RUN_DIR'] = os.path.abspath(run_dir)
    env['SF_TASK_ID'] = task_id
    env['SF_MAP_INDEX'] = '' if map_index is None else str(map_index)

    logger.info(f"Running {task_id}[{map_index}]: {resolved_command}")
    try:
        proc = subprocess.Popen(
            resolved_command,
            shell=True,
            cwd=data_dir,
            env=env,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            start_new_session=True,
        )
    except OSError as e:
        diagnostic = f"spawn failed: {e}"
        write_instance_log(run_dir, instance, diagnostic + '\n')
        logger.error(f"{task_id}[{map_index}] {diagnostic}")
        return Completion(instance, ok=False, diagnostic=diagnostic)

    timeout = timeout_ms / 1000.0 if timeout_ms else None
    try:
        stdout, stderr = proc.communicate(timeout=timeout)
    except subprocess.TimeoutExpired:
        os.killpg(proc.pid, signal.SIGKILL)
        stdout, stderr = proc.communicate()
        diagnostic = f"timed out after {timeout_ms} ms"
        write_instance_log(run_dir, instance, stdout + stderr + diagnostic + '\n')
        logger.error(f"{task_id}[{map_index}] {diagnostic}")
        return Completion(instance, ok=False, output=stdout, diagnostic=diagnostic)

    write_instance_log(run_dir, instance, stdout + stderr)
    phases = parse_phases(stdout)
    if proc.returncode != 0:
        diagnostic = f"exit code {proc.returncode}"
        logger.error(f"{task_id}[{map_index}] failed with {diagnostic}")
        return Completion(instance, ok=False, exit_code=proc.returncode, output=stdout,
                          phases=phases, diagnostic=diagnostic)
    return Completion(instance, ok=True, exit_code=0, output=stdout, phases=phases,
                      value=shell_return_value(stdout))


def sample_duration(spec, stream, map_index=None):
    base = spec.lo_ms if spec.kind == 'fixed' else stream.uniform_int(spec.lo_ms, spec.hi_ms)
    return int(base * spec.weight_for(map_index) + 0.5)


def exec_sim(instance, spec, rng_stream):
    """Sample a duration; returns (duration_ms, Completion) for the discrete-event loop."""
    duration = sample_duration(spec, rng_stream, instance[1])
    phases = simulated_phases(duration)
    if spec.fails(instance[1]):
        return duration, Completion(instance, ok=False, phases=phases, diagnostic='forced failure')
    return duration, Completion(instance, ok=True, phases=phases)


def run_builtin(job, builtin_runner, run_dir, data_dir):
    """Run a built-in pipeline step in-process; exceptions become FAILED completions."""
    task_id, map_index = job.instance
    context = StepContext(run_dir, data_dir, job.instance, job.map_value)
    try:
        value, output = builtin_runner(job.action.step, job.params, context)
    except Exception as e:
        diagnostic = f"{job.action.step} failed: {e}"
        write_instance_log(run_dir, job.instance, diagnostic + '\n')
        logger.error(f"{task_id}[{map_index}] {diagnostic}")
        return Completion(job.instance, ok=False, diagnostic=diagnostic)
    write_instance_log(run_dir, job.instance, output)
    return Completion(job.instance, ok=True, exit_code=0, output=output,
                      phases=parse_phases(output), value=value)


def _sim_log(job, duration, completion):
    lines = [f"simulated {job.instance[0]} duration={duration}ms", completion.phases.to_line()]
    if not completion.ok:
        lines.append(completion.diagnostic)
    return '\n'.join(lines) + '\n'


# ----------------------------
# Executors
# ----------------------------
class SimulatedExecutor:
    """Discrete-event executor: completions are pushed onto a future-event heap."""

    def __init__(self, run_dir, data_dir, seed=0, builtin_runner=None):
        self.run_dir = run_dir
        self.data_dir = data_dir
        self.seed = seed
        self.builtin_runner = builtin_runner
        self._heap = []

    def submit(self, job, now_ms):
        if job.action.kind == 'sim':
            stream = derive_substream(self.seed, *job.instance)
            duration, completion = exec_sim(job.instance, job.action.duration, stream)
            if completion.ok and job.produces:
                completion.value = job.returns
            write_instance_log(self.run_dir, job.instance, _sim_log(job, duration, completion))
        elif job.action.kind == 'builtin' and self.builtin_runner is not None:
            duration, completion = 0, run_builtin(job, self.builtin_runner, self.run_dir, self.data_dir)
        else:
            duration = 0
            completion = Completion(job.instance, ok=False,
                                    diagnostic=f"{job.action.kind} actions need the process executor")
            write_instance_log(self.run_dir, job.instance, completion.diagnostic + '\n')
        completion.end_ms = now_ms + duration
        key = (job.instance[0], -1 if job.instance[1] is None else job.instance[1])
        heapq.heappush(self._heap, (completion.end_ms, key, completion))

    def pending(self):
        return len(self._heap)

    def collect(self, clock):
        """Pop every completion due at the earliest pending time and advance the clock."""
        if not self._heap:
            raise RuntimeError("collect() called with nothing running")
        t = self._heap[0][0]
        clock.advance_to(t)
        done = []
        while self._heap and self._heap[0][0] == t:
            done.append(heapq.heappop(self._heap)[2])
        return done

    def shutdown(self):
        self._heap.clear()


class ProcessExecutor:
    """Wall-clock executor: instances run in worker threads, completions arrive on a queue."""

    def __init__(self, run_dir, data_dir, seed=0, builtin_runner=None, timeout_ms=None, max_workers=8):
        self.run_dir = run_dir
        self.data_dir = data_dir
        self.seed = seed
        self.builtin_runner = builtin_runner
        self.timeout_ms = timeout_ms
        self._pool = ThreadPoolExecutor(max_workers=max(1, max_workers), thread_name_prefix='screenflow')
        self._done = queue.Queue()
        self._running = 0

    def submit(self, job, now_ms):
        self._running += 1
        self._pool.submit(self._execute, job)

    def _execute(self, job):
        try:
            completion = self._run(job)
        except Exception as e:
            completion = Completion(job.instance, ok=False, diagnostic=f"executor error: {e}")
            logger.exception(f"Executor error for {job.instance}")
        self._done.put(completion)

    def _run(self, job):
        kind = job.action.kind
        if kind == 'shell':
            return exec_shell(job.instance, job.command, self.data_dir, self.run_dir, self.timeout_ms)
        if kind == 'builtin':
            if self.builtin_runner is None:
                return Completion(job.instance, ok=False, diagnostic='no builtin steps registered')
            return run_builtin(job, self.builtin_runner, self.run_dir, self.data_dir)
        # sim actions under the wall clock sleep for the sampled duration
        stream = derive_substream(self.seed, *job.instance)
        duration, completion = exec_sim(job.instance, job.action.duration, stream)
        time.sleep(duration / 1000.0)
        if completion.ok and job.produces:
            completion.value = job.returns
        write_instance_log(self.run_dir, job.instance, _sim_log(job, duration, completion))
        return completion

    def pending(self):
        return self._running

    def collect(self, clock):
        """Block for the next completion, then drain whatever else has finished."""
        if self._running == 0:
            raise RuntimeError("collect() called with nothing running")
        done = [self._done.get()]
        while True:
            try:
                done.append(self._done.get_nowait())
            except queue.Empty:
                break
        self._running -= len(done)
        now = clock.now()
        for completion in done:
            completion.end_ms = now
        done.sort(key=lambda c: (c.instance[0], -1 if c.instance[1] is None else c.instance[1]))
        return done

    def shutdown(self):
        self._pool.shutdown(wait=True)
