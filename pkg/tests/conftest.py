import os
import sys
import tempfile
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT))
os.environ.setdefault('SCREENFLOW_LOG_DIR', tempfile.mkdtemp(prefix='screenflow-logs-'))

from modules.comm_store import CommStore  # noqa: E402
from modules.executors import SimulatedExecutor  # noqa: E402
from modules.scheduler import EventLog, Scheduler, SimClock, check_event_log, run_edges  # noqa: E402

DUMMY_WORKFLOW = ROOT / 'workflows' / 'dummy_screening.sf'


def make_sdf(n, prefix='LIG', start=0):
    """n two-atom records named <prefix>_<i>, V2000 counts line, one data field each."""
    records = []
    for i in range(start, start + n):
        records.append(
            f"{prefix}_{i}\n"
            "  screenflow\n"
            "\n"
            "  2  1  0  0  0  0  0  0  0  0999 V2000\n"
            "    0.0000    0.0000    0.0000 C   0  0  0  0  0  0  0  0  0  0  0  0\n"
            "    1.5400    0.0000    0.0000 O   0  0  0  0  0  0  0  0  0  0  0  0\n"
            "  1  2  1  0\n"
            "M  END\n"
            f">  <ID>\n{i}\n\n"
            "$$$$\n"
        )
    return ''.join(records)


@pytest.fixture
def sdf_file(tmp_path):
    """Factory writing make_sdf(n) to a file and returning its path."""
    def write(n, name='ligands.sdf', prefix='LIG'):
        path = tmp_path / name
        path.write_text(make_sdf(n, prefix), encoding='utf-8', newline='')
        return path
    return write


@pytest.fixture
def run_dir(tmp_path):
    path = tmp_path / 'run'
    (path / 'logs').mkdir(parents=True)
    return path


@pytest.fixture
def simulate(run_dir):
    """Run a spec on the discrete-event clock; returns the Scheduler after the run and the RunResult."""
    def go(spec, seed=0, builtin_runner=None, data_dir=None):
        executor = SimulatedExecutor(str(run_dir), str(data_dir or run_dir), seed, builtin_runner)
        scheduler = Scheduler(spec, executor, SimClock(), CommStore(), EventLog())
        result, _ = scheduler.run()
        return scheduler, result
    return go


def replay_problems(spec, scheduler, result):
    pools = {pool.name: pool.slots for pool in spec.pools}
    return check_event_log(scheduler.log.events, pools, run_edges(spec, result.fanout))


def busy_at(intervals, t):
    return sum(1 for i in intervals if i.start <= t < i.end)


def max_concurrency(intervals):
    """Peak number of half-open intervals [start, end) alive at once."""
    return max((busy_at(intervals, i.start) for i in intervals), default=0)
