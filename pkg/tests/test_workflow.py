"""Command-line surface: exit codes, run directories, screening and reports."""
import pytest

from conftest import DUMMY_WORKFLOW
from main import main
from modules import workflow
from modules.dag_core import dump_workflow
from modules.scheduler import read_event_log
from modules.screening_dag import build_screening_workflow

CYCLIC = """\
workflow loop
pool p 1
task a pool=p action=sim:fixed:1
task b pool=p action=sim:fixed:1
dep a -> b
dep b -> a
"""

ECHO_CHAIN = """\
workflow echoes
pool p 2
task a pool=p action='shell:echo 7' produces=return_value
task b pool=p action='shell:echo got {a.return_value}'
dep a -> b
"""

BROKEN_CHAIN = """\
workflow broken
pool p 2
task a pool=p action=shell:false
task b pool=p action='shell:echo never'
task side pool=p action='shell:echo fine'
dep a -> b
"""


@pytest.fixture
def workflow_file(tmp_path):
    def write(text, name='w.sf'):
        path = tmp_path / name
        path.write_text(text)
        return str(path)
    return write


def simulate_dummy(run, *extra):
    return main(['simulate', str(DUMMY_WORKFLOW), '--run-dir', str(run), *extra])


# =============================================================================
# validate
# =============================================================================


def test_validate_valid_file_is_silent(capsys):
    assert main(['validate', str(DUMMY_WORKFLOW)]) == 0
    assert capsys.readouterr().err == ''


def test_validate_reports_cycles(workflow_file, capsys):
    assert main(['validate', workflow_file(CYCLIC)]) == 1
    assert 'cycle' in capsys.readouterr().err


def test_validate_missing_file(tmp_path):
    assert main(['validate', str(tmp_path / 'missing.sf')]) == 2


def test_validate_unparsable_file(workflow_file, capsys):
    assert main(['validate', workflow_file("workflow w\npool p lots\n")]) == 2
    assert 'w.sf:2:' in capsys.readouterr().err


def test_no_command_prints_help():
    assert main([]) == 2


# =============================================================================
# simulate / run
# =============================================================================


def test_simulation_is_reproducible(tmp_path):
    first, second = tmp_path / 'first', tmp_path / 'second'
    assert simulate_dummy(first, '--seed', '7') == 0
    assert simulate_dummy(second, '--seed', '7') == 0
    assert (first / 'events.log').read_text() == (second / 'events.log').read_text()
    assert (first / 'run.comm').read_text() == (second / 'run.comm').read_text()
    assert (first / 'workflow.sf').read_text() == DUMMY_WORKFLOW.read_text()


def test_different_seeds_change_the_timeline(tmp_path):
    assert simulate_dummy(tmp_path / 'a', '--seed', '1') == 0
    assert simulate_dummy(tmp_path / 'b', '--seed', '2') == 0
    assert (tmp_path / 'a' / 'events.log').read_text() != (tmp_path / 'b' / 'events.log').read_text()


def test_simulate_check_replays_the_log(tmp_path, capsys):
    assert simulate_dummy(tmp_path / 'run', '--seed', '0x2a', '--check') == 0
    out = capsys.readouterr().out
    assert '✅ Workflow dummy_screening finished: SUCCESS' in out
    assert 'passes every scheduler invariant' in out


def test_run_directory_needs_force(tmp_path, capsys):
    run = tmp_path / 'run'
    assert simulate_dummy(run) == 0
    assert simulate_dummy(run) == 2
    assert 'use --force' in capsys.readouterr().err
    (run / 'notes.txt').write_text('kept')
    assert simulate_dummy(run, '--force') == 0
    assert (run / 'notes.txt').read_text() == 'kept'


def test_shell_values_flow_downstream(tmp_path, workflow_file):
    run = tmp_path / 'run'
    assert main(['run', workflow_file(ECHO_CHAIN), '--run-dir', str(run)]) == 0
    assert (run / 'logs' / 'b.log').read_text() == "got 7\n"
    assert "return_value - int 7" in (run / 'run.comm').read_text()


def test_failed_shell_task_fails_the_run(tmp_path, workflow_file, capsys):
    run = tmp_path / 'run'
    assert main(['run', workflow_file(BROKEN_CHAIN), '--run-dir', str(run)]) == 1
    assert 'failed: a: exit code 1' in capsys.readouterr().err
    kinds = {(e.kind.value, e.task_id) for e in read_event_log(str(run / 'events.log'))}
    assert ('END_FAIL', 'a') in kinds
    assert ('UPSTREAM_FAILED', 'b') in kinds
    assert ('END_OK', 'side') in kinds


def test_check_scopes_work_conservation_to_the_simulated_clock(tmp_path, workflow_file, monkeypatch):
    calls = []
    real_check = workflow.check_event_log

    def recording_check(*args, **kwargs):
        calls.append(kwargs)
        return real_check(*args, **kwargs)

    monkeypatch.setattr(workflow, 'check_event_log', recording_check)
    assert main(['run', workflow_file(ECHO_CHAIN), '--run-dir', str(tmp_path / 'real'), '--check']) == 0
    assert simulate_dummy(tmp_path / 'sim', '--check') == 0
    assert calls == [{'conservation': False}, {'conservation': True}]


def test_invalid_workflow_is_not_run(tmp_path, workflow_file):
    run = tmp_path / 'run'
    assert main(['simulate', workflow_file(CYCLIC), '--run-dir', str(run)]) == 1
    assert not (run / 'events.log').exists()


def test_seed_must_fit_in_64_bits(tmp_path):
    with pytest.raises(SystemExit) as excinfo:
        simulate_dummy(tmp_path / 'run', '--seed', str(1 << 64))
    assert excinfo.value.code == 2


# =============================================================================
# screen
# =============================================================================


def screen(tmp_path, *extra):
    return main(['screen', '--config', str(tmp_path / 'no-config.yaml'), '--run-dir', str(tmp_path / 'run'), *extra])


def test_screen_one_ligand_per_batch(tmp_path, sdf_file):
    ligands = sdf_file(3)
    assert screen(tmp_path, '--ligands', str(ligands), '--batch-size', '1', '--mock') == 0
    run = tmp_path / 'run'
    assert sorted(p.name for p in run.glob('db_batch*.sdf')) == ['db_batch0.sdf', 'db_batch1.sdf', 'db_batch2.sdf']
    rows = (run / 'ranking.csv').read_text().splitlines()
    assert rows[0] == 'rank,ligand,batch,energy'
    assert len(rows) == 4
    assert (run / 'top10.txt').read_text().startswith('Top 10 of 3 ligands')


def test_screen_of_an_empty_library_after_a_full_one(tmp_path, sdf_file):
    assert screen(tmp_path, '--ligands', str(sdf_file(10)), '--batch-size', '4', '--mock') == 0
    empty = tmp_path / 'empty.sdf'
    empty.write_text('')
    assert screen(tmp_path, '--ligands', str(empty), '--mock', '--force') == 0
    assert (tmp_path / 'run' / 'ranking.csv').read_text().splitlines() == ['rank,ligand,batch,energy']


def test_screen_emits_its_workflow(tmp_path, capsys):
    assert screen(tmp_path, '--pools', 'small=3,large=5', '--emit-spec', '-') == 0
    assert capsys.readouterr().out == dump_workflow(build_screening_workflow(3, 5))
    assert not (tmp_path / 'run').exists()


def test_screen_needs_ligands(tmp_path):
    assert screen(tmp_path, '--ligands', str(tmp_path / 'none.sdf'), '--mock') == 2


def test_real_docking_needs_a_receptor(tmp_path, sdf_file):
    assert screen(tmp_path, '--ligands', str(sdf_file(2)), '--docking-cmd', 'true {index} {outdir}') == 2


@pytest.mark.parametrize('pools', ['small=0,large=2', 'small=2', 'tiny=1,large=2', 'small=x,large=1'])
def test_screen_rejects_bad_pools(tmp_path, pools):
    with pytest.raises(SystemExit) as excinfo:
        screen(tmp_path, '--pools', pools)
    assert excinfo.value.code == 2


def test_mock_and_docking_cmd_exclude_each_other(tmp_path):
    with pytest.raises(SystemExit):
        screen(tmp_path, '--mock', '--docking-cmd', 'dock {index}')


# =============================================================================
# report
# =============================================================================


def test_report_gantt_resource_text(tmp_path):
    run = tmp_path / 'run'
    assert simulate_dummy(run) == 0
    chart = tmp_path / 'resources.txt'
    assert main(['report', 'gantt', '--mode', 'resource', '--format', 'text',
                 '--input', str(run / 'events.log'), '--output', str(chart)]) == 0
    lines = chart.read_text().splitlines()
    assert sum(1 for line in lines if line.startswith('  slot')) == 6
    assert '[small] 2 slots' in lines and '[large] 4 slots' in lines


def test_report_gantt_task_svg(tmp_path):
    run = tmp_path / 'run'
    assert simulate_dummy(run) == 0
    chart = tmp_path / 'tasks.svg'
    assert main(['report', 'gantt', '--input', str(run / 'events.log'), '--output', str(chart)]) == 0
    assert b'<svg' in chart.read_bytes()


def test_report_gantt_missing_log(tmp_path):
    assert main(['report', 'gantt', '--input', str(tmp_path / 'events.log'), '--output', str(tmp_path / 'x')]) == 2


def test_report_stats_prints_every_phase(tmp_path, capsys):
    run = tmp_path / 'run'
    assert simulate_dummy(run) == 0
    capsys.readouterr()
    assert main(['report', 'stats', '--input', str(run / 'logs')]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in lines] == ['setup_cuda', 'setup_rest', 'docking', 'shutdown']
    assert all(len(line.split()) == 6 for line in lines)


def test_report_stats_single_phase(tmp_path, capsys):
    (tmp_path / 'logs').mkdir()
    (tmp_path / 'logs' / 'perform_docking.0.log').write_text("PHASES 1 1 1 1\n")
    (tmp_path / 'logs' / 'perform_docking.1.log').write_text("PHASES 1 1 2 1\n")
    (tmp_path / 'logs' / 'perform_docking.2.log').write_text("PHASES 1 1 3 1\n")
    (tmp_path / 'logs' / 'perform_docking.3.log').write_text("PHASES 1 1 4 1\n")
    assert main(['report', 'stats', '--phase', 'docking', '--input', str(tmp_path / 'logs')]) == 0
    assert capsys.readouterr().out == "docking 1 1.75 2.5 3.25 4\n"


def test_report_stats_without_timings(tmp_path):
    (tmp_path / 'logs').mkdir()
    assert main(['report', 'stats', '--input', str(tmp_path / 'logs')]) == 1
    assert main(['report', 'stats', '--input', str(tmp_path / 'nowhere')]) == 2
    assert main(['report', 'stats', '--phase', 'warmup', '--input', str(tmp_path / 'logs')]) == 2
