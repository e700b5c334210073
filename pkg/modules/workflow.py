import os
import shutil
import sys
from dotenv import load_dotenv

from modules.comm_store import CommStore
from modules.dag_core import WorkflowParseError, dump_workflow, load_workflow, validate
from modules.executors import PHASE_NAMES, ProcessExecutor, SimulatedExecutor
from modules.gantt_report import (GanttIntegrityError, collect_phase_samples, format_stats, intervals_from_log,
                                  render_resource_gantt, render_task_gantt, whiskers)
from modules.log_config import get_logger
from modules.scheduler import (EventLog, EventLogError, SchedulerError, SimClock, WallClock, check_event_log, run,
                               run_edges)
from modules.screening_dag import ScreeningError, StepRunner, build_screening_workflow, load_screening_config

# Load environment variables
load_dotenv()
RUN_DIR = os.getenv('SCREENFLOW_RUN_DIR', './run')
TASK_TIMEOUT_MS = int(os.getenv('SCREENFLOW_TASK_TIMEOUT_MS', '0'))
SEED = int(os.getenv('SCREENFLOW_SEED', '0'))
SCREENING_CONFIG = os.getenv('SCREENFLOW_CONFIG', './screening.yaml')

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
RUN_ARTIFACTS = ('events.log', 'run.comm', 'workflow.sf', 'logs')

logger = get_logger('workflow', 'workflow.log')


class UsageError(Exception):
    """Bad invocation: missing inputs, unusable run directory. Exit code 2."""


def fail(message, code):
    print(f"❌ {message}", file=sys.stderr)
    logger.error(message)
    return code


# ----------------------------
# Run Directory
# ----------------------------
def prepare_run_dir(run_dir, force=False):
    """One run per directory: a non-empty directory needs --force, which clears the previous run's artifacts."""
    if os.path.isdir(run_dir) and os.listdir(run_dir):
        if not force:
            raise UsageError(f"run directory {run_dir} is not empty; use --force to reuse it")
        for name in RUN_ARTIFACTS:
            path = os.path.join(run_dir, name)
            if os.path.isdir(path):
                shutil.rmtree(path)
            elif os.path.exists(path):
                os.remove(path)
        logger.info(f"Cleared previous run artifacts in {run_dir}")
    os.makedirs(os.path.join(run_dir, 'logs'), exist_ok=True)


def load_spec(workflow_file):
    if not os.path.exists(workflow_file):
        raise UsageError(f"workflow file not found: {workflow_file}")
    return load_workflow(workflow_file)


def report_violations(report):
    for line in report.lines():
        print(line, file=sys.stderr)
    logger.warning(f"Validation failed with {len(report.violations)} violations")


# ----------------------------
# Validate
# ----------------------------
def cmd_validate(workflow_file):
    """Exit 0 if the workflow is valid, 1 with one violation per line on stderr, 2 if unreadable."""
    try:
        spec = load_spec(workflow_file)
    except (UsageError, WorkflowParseError, OSError) as e:
        return fail(str(e), EXIT_USAGE)
    report = validate(spec)
    if not report.ok:
        report_violations(report)
        return EXIT_FAILED
    logger.info(f"Workflow {spec.name} from {workflow_file} is valid")
    return EXIT_OK


# ----------------------------
# Run / Simulate
# ----------------------------
def execute(spec, run_dir, data_dir, simulate, seed, timeout_ms=0, builtin_runner=None, check=False):
    """Run a validated spec into run_dir and print the summary; returns the exit code."""
    data_dir = data_dir or run_dir
    os.makedirs(data_dir, exist_ok=True)
    with open(os.path.join(run_dir, 'workflow.sf'), 'w', encoding='utf-8') as file:
        file.write(dump_workflow(spec))

    store = CommStore(os.path.join(run_dir, 'run.comm'))
    event_log = EventLog(os.path.join(run_dir, 'events.log'))
    if simulate:
        executor, clock = SimulatedExecutor(run_dir, data_dir, seed, builtin_runner), SimClock()
    else:
        workers = sum(pool.slots for pool in spec.pools)
        executor = ProcessExecutor(run_dir, data_dir, seed, builtin_runner, timeout_ms or None, workers)
        clock = WallClock()

    mode = 'Simulating' if simulate else 'Running'
    print(f"{mode} workflow {spec.name} in {run_dir} (seed {seed})")
    logger.info(f"{mode} workflow {spec.name} in {run_dir} (seed {seed})")
    try:
        result, log = run(spec, executor, clock, store, event_log)
    except SchedulerError as e:
        return fail(f"Run of {spec.name} aborted: {e}", EXIT_FAILED)
    finally:
        executor.shutdown()

    counts = ', '.join(f"{state}={count}" for state, count in sorted(result.counts.items()))
    if result.ok:
        print(f"✅ Workflow {spec.name} finished: SUCCESS")
    else:
        print(f"❌ Workflow {spec.name} finished: FAILED", file=sys.stderr)
        for key in result.failed:
            print(f"   failed: {key.label()}: {result.diagnostics.get(key) or 'no diagnostic'}", file=sys.stderr)
    print(f"   instances: {counts}")
    print(f"   makespan: {result.makespan_ms} ms")
    logger.info(f"Workflow {spec.name} finished {result.status}: {counts}, makespan {result.makespan_ms} ms")

    if check:
        pools = {pool.name: pool.slots for pool in spec.pools}
        problems = check_event_log(log.events, pools, run_edges(spec, result.fanout), conservation=simulate)
        for problem in problems:
            print(f"   invariant: {problem}", file=sys.stderr)
        if problems:
            return fail(f"Event log of {spec.name} violates {len(problems)} scheduler invariants", EXIT_FAILED)
        print("✅ Event log passes every scheduler invariant")
    return EXIT_OK if result.ok else EXIT_FAILED


def cmd_run(workflow_file, run_dir=RUN_DIR, data_dir=None, seed=SEED, timeout_ms=TASK_TIMEOUT_MS,
            force=False, simulate=False, check=False):
    try:
        spec = load_spec(workflow_file)
        prepare_run_dir(run_dir, force)
        builtin_runner = StepRunner(load_screening_config(SCREENING_CONFIG))
    except (UsageError, WorkflowParseError, ScreeningError, OSError) as e:
        return fail(str(e), EXIT_USAGE)
    report = validate(spec)
    if not report.ok:
        report_violations(report)
        return EXIT_FAILED
    return execute(spec, run_dir, data_dir, simulate, seed, timeout_ms, builtin_runner, check)


def cmd_simulate(workflow_file, run_dir=RUN_DIR, data_dir=None, seed=SEED, force=False, check=False):
    return cmd_run(workflow_file, run_dir, data_dir, seed, 0, force, simulate=True, check=check)


# ----------------------------
# Screen
# ----------------------------
def parse_pools(text):
    """Parse 'small=K,large=M' into a dict; both pools are required, sizes >= 1."""
    pools = {}
    for part in text.split(','):
        name, sep, size = part.partition('=')
        name = name.strip()
        if not sep or name not in ('small', 'large') or name in pools:
            raise ValueError(f"invalid pool syntax '{text}', expected small=K,large=M")
        try:
            pools[name] = int(size)
        except ValueError:
            raise ValueError(f"invalid pool size '{size}' for {name}")
        if pools[name] < 1:
            raise ValueError(f"pool {name} needs at least 1 slot")
    if set(pools) != {'small', 'large'}:
        raise ValueError(f"invalid pool syntax '{text}', expected small=K,large=M")
    return pools


def screening_config(overrides, config_path=SCREENING_CONFIG, check_inputs=True):
    """screening.yaml settings with command-line overrides (None = keep the file's value)."""
    config = load_screening_config(config_path)
    for name, value in overrides.items():
        if value is not None:
            setattr(config, name, value)
    if overrides.get('docking_cmd'):
        config.mock = False
    if not check_inputs:
        return config
    if not config.mock and not config.docking_cmd:
        raise UsageError("real docking needs --docking-cmd (or docking_cmd in the screening config); use --mock")
    if not config.ligands or not os.path.isfile(config.ligands):
        raise UsageError(f"ligand file not readable: {config.ligands}")
    if config.receptor and not os.path.isfile(config.receptor):
        raise UsageError(f"receptor file not readable: {config.receptor}")
    if not config.mock and not config.receptor:
        raise UsageError("real docking needs --receptor")
    config.ligands = os.path.abspath(config.ligands)
    config.receptor = os.path.abspath(config.receptor) if config.receptor else None
    return config


def cmd_screen(overrides, run_dir=RUN_DIR, force=False, emit_spec=None, config_path=SCREENING_CONFIG):
    """Build the screening DAG, run it with the built-in steps and leave the ranking in run_dir."""
    try:
        config = screening_config(overrides, config_path, check_inputs=not emit_spec)
    except (UsageError, ScreeningError, OSError, TypeError) as e:
        return fail(str(e), EXIT_USAGE)
    spec = build_screening_workflow(config.pools['small'], config.pools['large'])

    if emit_spec:
        text = dump_workflow(spec)
        if emit_spec == '-':
            sys.stdout.write(text)
        else:
            with open(emit_spec, 'w', encoding='utf-8') as file:
                file.write(text)
            print(f"✅ Screening workflow written to {emit_spec}")
        return EXIT_OK

    try:
        prepare_run_dir(run_dir, force)
    except UsageError as e:
        return fail(str(e), EXIT_USAGE)
    mode = 'mock' if config.mock else 'real'
    print(f"Screening {config.ligands} in batches of {config.batch_size} ({mode} docking, "
          f"pools small={config.pools['small']}, large={config.pools['large']})")
    code = execute(spec, run_dir, run_dir, False, SEED, TASK_TIMEOUT_MS, StepRunner(config))
    ranking = os.path.join(run_dir, 'ranking.csv')
    if code == EXIT_OK and os.path.exists(ranking):
        print(f"✅ Ranking written to {ranking}, best {config.top_k} in {os.path.join(run_dir, f'top{config.top_k}.txt')}")
    return code


# ----------------------------
# Reports
# ----------------------------
def pools_for_log(events_path, pools_text=None):
    """Pool capacities from --pools, else from the workflow.sf snapshot beside the log."""
    if pools_text:
        pools = {}
        for part in pools_text.split(','):
            name, sep, size = part.partition('=')
            if not sep:
                raise UsageError(f"invalid pool syntax '{pools_text}', expected name=N[,name=N]")
            pools[name.strip()] = int(size)
        return pools
    snapshot = os.path.join(os.path.dirname(os.path.abspath(events_path)), 'workflow.sf')
    if not os.path.exists(snapshot):
        raise UsageError(f"no workflow.sf beside {events_path}; pass --pools")
    return {pool.name: pool.slots for pool in load_workflow(snapshot).pools}


def cmd_report_gantt(mode, fmt, input_path, output, pools_text=None):
    try:
        if not os.path.exists(input_path):
            raise UsageError(f"event log not found: {input_path}")
        items = intervals_from_log(input_path)
        if mode == 'task':
            render_task_gantt(items, output, fmt)
        else:
            render_resource_gantt(items, pools_for_log(input_path, pools_text), output, fmt)
    except (UsageError, EventLogError, GanttIntegrityError, WorkflowParseError, ValueError, OSError) as e:
        return fail(str(e), EXIT_USAGE)
    print(f"✅ {mode.capitalize()} Gantt chart ({len(items)} intervals) written to {output}")
    return EXIT_OK


def cmd_report_stats(input_dir, phase=None):
    """Print `phase min q25 median q75 max` per phase from the PHASES lines of the instance logs."""
    try:
        samples = collect_phase_samples(input_dir)
    except (OSError, ValueError) as e:
        return fail(str(e), EXIT_USAGE)
    phases = [phase] if phase else list(PHASE_NAMES)
    if any(name not in samples for name in phases):
        return fail(f"unknown phase '{phase}', expected one of {', '.join(PHASE_NAMES)}", EXIT_USAGE)
    if not samples[phases[0]]:
        return fail(f"no PHASES lines found under {input_dir}", EXIT_FAILED)
    for name in phases:
        print(format_stats(name, whiskers(samples[name])))
    logger.info(f"Phase statistics over {len(samples[phases[0]])} logs in {input_dir}")
    return EXIT_OK
