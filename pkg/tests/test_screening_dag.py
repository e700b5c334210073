import os

import pandas as pd
import pytest

from conftest import make_sdf
from modules.comm_store import CommKey
from modules.dag_core import validate
from modules.executors import parse_phases
from modules.screening_dag import (RECEPTOR_FILE, BatchEntry, BatchManifest, ScreeningConfig, ScreeningError,
                                   StepRunner, batch_index, build_dummy_workflow, build_screening_workflow,
                                   get_batch_labels, ligand_filename, load_manifest, load_screening_config,
                                   mock_energy, parse_ligand_filename, parse_sdf_text, perform_docking, postprocess,
                                   prepare_ligands, prepare_receptor, read_ligand_name, read_sdf, split_sdf)
from modules.scheduler import State


# =============================================================================
# SDF records
# =============================================================================


def test_records_split_on_delimiter_lines():
    records, trailer = parse_sdf_text(make_sdf(3))
    assert [r.name for r in records] == ['LIG_0', 'LIG_1', 'LIG_2']
    assert [r.atom_count for r in records] == [2, 2, 2]
    assert all(r.body.endswith('$$$$\n') for r in records)
    assert trailer == ''


def test_trailing_record_without_delimiter_is_kept():
    text = make_sdf(2) + "LAST\n\n\n  1  0  0  0  0  0  0  0  0  0999 V2000\nM  END"
    records, trailer = parse_sdf_text(text)
    assert [r.name for r in records] == ['LIG_0', 'LIG_1', 'LAST']
    assert records[-1].atom_count == 1
    assert ''.join(r.body for r in records) + trailer == text


def test_whitespace_after_last_delimiter_is_a_trailer():
    text = make_sdf(2) + "\n  \n"
    records, trailer = parse_sdf_text(text)
    assert len(records) == 2
    assert trailer == "\n  \n"


def test_delimiter_with_trailing_spaces_and_crlf():
    text = make_sdf(2).replace('\n', '\r\n').replace('$$$$\r\n', '$$$$  \r\n')
    records, trailer = parse_sdf_text(text)
    assert len(records) == 2
    assert ''.join(r.body for r in records) + trailer == text


def test_malformed_counts_line_gives_zero_atoms():
    records, _ = parse_sdf_text("broken\n\n\nnot a counts line\nM  END\n$$$$\n")
    assert records[0].atom_count == 0


def test_read_sdf_preserves_line_endings(tmp_path):
    path = tmp_path / 'crlf.sdf'
    path.write_bytes(make_sdf(2).replace('\n', '\r\n').encode())
    records, _ = read_sdf(path)
    assert records[0].body.endswith('$$$$\r\n')


# =============================================================================
# Splitting and naming
# =============================================================================


def test_split_sdf_writes_batches_index_and_manifest(tmp_path, sdf_file):
    source = sdf_file(25)
    out = tmp_path / 'data'
    assert split_sdf(source, 10, 'db', out) == 3

    parts = b''.join((out / f"db_batch{i}.sdf").read_bytes() for i in range(3))
    assert parts == source.read_bytes()
    manifest = load_manifest(out / 'db.manifest.yaml')
    assert [b.ligand_count for b in manifest.batches] == [10, 10, 5]
    assert manifest.total_ligands == 25
    index = (out / 'db_batch2.index').read_text().splitlines()
    assert index == [RECEPTOR_FILE] + [f"db_batch2_ligand{j}.pdbqt" for j in range(5)]


def test_split_sdf_of_an_empty_file(tmp_path):
    source = tmp_path / 'empty.sdf'
    source.write_text('')
    assert split_sdf(source, 10, 'db', tmp_path / 'data') == 0
    manifest = load_manifest(tmp_path / 'data' / 'db.manifest.yaml')
    assert manifest.batches == [] and manifest.total_ligands == 0
    assert sorted(p.name for p in (tmp_path / 'data').iterdir()) == ['db.manifest.yaml']


def test_empty_library_replaces_an_earlier_manifest(tmp_path, sdf_file):
    data = tmp_path / 'data'
    split_sdf(sdf_file(10), 4, 'db', data)
    empty = tmp_path / 'empty.sdf'
    empty.write_text('')
    runner = StepRunner(ScreeningConfig(ligands=str(empty), batch_size=4))
    assert runner.manifest(str(data)).total_ligands == 10

    assert split_sdf(empty, 4, 'db', data) == 0
    assert runner.manifest(str(data)).batches == []
    ranking = postprocess(runner.manifest(str(data)), data)
    assert ranking.empty
    assert len(pd.read_csv(data / 'ranking.csv')) == 0


def test_split_sdf_rejects_bad_batch_size(sdf_file, tmp_path):
    with pytest.raises(ScreeningError):
        split_sdf(sdf_file(3), 0, 'db', tmp_path)


def test_batch_labels():
    assert get_batch_labels(3) == ['batch0', 'batch1', 'batch2']
    assert get_batch_labels(0) == []
    assert batch_index('batch12') == 12
    with pytest.raises(ScreeningError):
        batch_index('b12')


def test_ligand_names_invert():
    assert ligand_filename('db', 35, 42) == 'db_batch35_ligand42.pdbqt'
    assert parse_ligand_filename('my_db_batch2_batch3_ligand4.pdbqt') == ('my_db_batch2', 3, 4)
    with pytest.raises(ScreeningError):
        parse_ligand_filename('db_batch3.pdbqt')


def test_manifest_round_trip(tmp_path):
    manifest = BatchManifest('lib', 2, [BatchEntry('batch0', 'lib_batch0.sdf', 2, 'lib_batch0.index')])
    manifest.save(tmp_path / 'lib.manifest.yaml')
    assert load_manifest(tmp_path / 'lib.manifest.yaml') == manifest


# =============================================================================
# Preparation and docking
# =============================================================================


@pytest.fixture
def split_library(tmp_path, sdf_file):
    data = tmp_path / 'data'
    split_sdf(sdf_file(7), 3, 'db', data)
    return data, load_manifest(data / 'db.manifest.yaml')


def test_prepare_ligands_mock_stubs(split_library):
    data, manifest = split_library
    assert prepare_ligands('batch1', manifest, data) == 3
    assert read_ligand_name(data / 'db_batch1_ligand0.pdbqt') == 'LIG_3'
    assert 'atoms 2' in (data / 'db_batch1_ligand2.pdbqt').read_text()


def test_prepare_ligands_with_converter(split_library):
    data, manifest = split_library
    assert prepare_ligands('batch2', manifest, data, converter_command='cp {in} {out}') == 1
    assert (data / 'db_batch2_ligand0.pdbqt').read_text().startswith('LIG_6\n')
    assert not (data / 'db_batch2_ligand0.sdf').exists()


def test_failing_converter_raises(split_library):
    data, manifest = split_library
    with pytest.raises(ScreeningError, match='exit code'):
        prepare_ligands('batch0', manifest, data, converter_command='exit 4')


def test_prepare_unknown_batch(split_library):
    data, manifest = split_library
    with pytest.raises(ScreeningError):
        prepare_ligands('batch9', manifest, data)


def test_mock_docking_results(split_library):
    data, manifest = split_library
    prepare_ligands('batch0', manifest, data)
    name, output = perform_docking('batch0', 'db_batch0.index', data, 'db')
    assert name == 'db_batch0.results'
    rows = (data / name).read_text().splitlines()
    assert rows == [f"LIG_{j} {mock_energy(f'LIG_{j}'):.2f}" for j in range(3)]
    assert parse_phases(output) is not None


def test_mock_energy_range():
    energies = [mock_energy(f"LIG_{i}") for i in range(1000)]
    assert all(-11.0 < e <= -1.0 for e in energies)
    assert mock_energy('LIG_1') == mock_energy('LIG_1')


def test_docking_refuses_missing_ligands(split_library):
    data, _ = split_library
    with pytest.raises(ScreeningError, match='missing ligand file'):
        perform_docking('batch0', 'db_batch0.index', data, 'db')


def test_real_docking_command(split_library):
    data, manifest = split_library
    prepare_ligands('batch1', manifest, data)
    command = ("tail -n +2 {index} | while read f; do echo \"$f -5.00\"; done > {outdir}/db_batch1.results; "
               "echo 'PHASES 1 2 3 4'")
    name, output = perform_docking('batch1', 'db_batch1.index', data, 'db', mode='real', docking_command=command)
    assert len((data / name).read_text().splitlines()) == 3
    assert parse_phases(output).docking == 3


def test_receptor_preparation(tmp_path):
    receptor = tmp_path / 'protein.pdbqt'
    receptor.write_text('ATOM      1  N   ALA A   1\n')
    data = tmp_path / 'data'
    data.mkdir()
    assert prepare_receptor(str(receptor), str(data)) == RECEPTOR_FILE
    assert (data / RECEPTOR_FILE).read_text() == receptor.read_text()
    prepare_receptor(None, str(data), mock=True)
    with pytest.raises(ScreeningError):
        prepare_receptor(str(tmp_path / 'missing.pdbqt'), str(data))


# =============================================================================
# Ranking
# =============================================================================


def write_results(data, db, rows_by_batch):
    batches = []
    for i, rows in enumerate(rows_by_batch):
        label = f"batch{i}"
        (data / f"{db}_{label}.results").write_text(''.join(f"{n} {e:.2f}\n" for n, e in rows))
        batches.append(BatchEntry(label, f"{db}_{label}.sdf", len(rows), f"{db}_{label}.index"))
    return BatchManifest(db, 3, batches)


def test_postprocess_ranks_best_first_with_ties(tmp_path):
    manifest = write_results(tmp_path, 'db', [
        [('B', -7.0), ('A', -7.0), ('C', -2.5)],
        [('A', -7.0), ('D', -9.1)],
    ])
    ranking = postprocess(manifest, tmp_path, top_k=2)
    assert ranking.to_dict('records') == [
        {'rank': 1, 'ligand': 'D', 'batch': 'batch1', 'energy': -9.1},
        {'rank': 2, 'ligand': 'A', 'batch': 'batch0', 'energy': -7.0},
        {'rank': 3, 'ligand': 'A', 'batch': 'batch1', 'energy': -7.0},
        {'rank': 4, 'ligand': 'B', 'batch': 'batch0', 'energy': -7.0},
        {'rank': 5, 'ligand': 'C', 'batch': 'batch0', 'energy': -2.5},
    ]
    csv = (tmp_path / 'ranking.csv').read_text().splitlines()
    assert csv[0] == 'rank,ligand,batch,energy'
    assert csv[1] == '1,D,batch1,-9.10'
    top = (tmp_path / 'top2.txt').read_text().splitlines()
    assert len(top) == 3 and 'D' in top[1]


def test_postprocess_orders_batches_numerically(tmp_path):
    rows = [[('X', -1.0)] for _ in range(12)]
    ranking = postprocess(write_results(tmp_path, 'db', rows), tmp_path)
    assert list(ranking['batch'][:3]) == ['batch0', 'batch1', 'batch2']


def test_postprocess_without_batches(tmp_path):
    ranking = postprocess(None, tmp_path)
    assert ranking.empty
    assert pd.read_csv(tmp_path / 'ranking.csv').empty


def test_postprocess_missing_results(tmp_path):
    manifest = write_results(tmp_path, 'db', [[('A', -1.0)]])
    os.remove(tmp_path / 'db_batch0.results')
    with pytest.raises(ScreeningError, match='missing result file'):
        postprocess(manifest, tmp_path)


# =============================================================================
# Configuration and workflows
# =============================================================================


def test_screening_config_from_yaml(tmp_path):
    path = tmp_path / 'screening.yaml'
    path.write_text("screening:\n  db_name: sweetlead\n  batch_size: 500\n  pools: {small: 1, large: 8}\n")
    config = load_screening_config(str(path))
    assert (config.db_name, config.batch_size, config.pools) == ('sweetlead', 500, {'small': 1, 'large': 8})
    assert config.top_k == 10
    assert load_screening_config(str(tmp_path / 'missing.yaml')) == ScreeningConfig()


def test_screening_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / 'screening.yaml'
    path.write_text("screening:\n  batchsize: 5\n")
    with pytest.raises(ScreeningError, match='batchsize'):
        load_screening_config(str(path))


def test_workflow_shapes():
    screening, dummy = build_screening_workflow(), build_dummy_workflow(4)
    for spec in (screening, dummy):
        assert validate(spec).ok
        assert spec.group('docking').members == ('prepare_ligands', 'perform_docking')
        assert spec.task('perform_docking').pool == 'small'
        assert {t.pool for t in spec.tasks if t.id != 'perform_docking'} == {'large'}
    assert dummy.task('get_batch_labels').returns == 'list:batch0,batch1,batch2,batch3'
    assert str(build_dummy_workflow(failures={'prepare_ligands': [3]}).task('prepare_ligands').action) == \
        'sim:uniform:2000:5000:fail@3'


def test_screening_pipeline_on_the_simulated_clock(tmp_path, sdf_file, simulate):
    config = ScreeningConfig(ligands=str(sdf_file(10)), batch_size=3, db_name='db', top_k=5)
    scheduler, result = simulate(build_screening_workflow(), builtin_runner=StepRunner(config))
    assert result.ok
    assert scheduler.store.get(CommKey('split_sdf')).payload == 4
    assert result.fanout == {'docking': ['batch0', 'batch1', 'batch2', 'batch3']}
    assert all(i.state == State.SUCCESS for i in scheduler.state.instances.values())
    ranking = pd.read_csv(tmp_path / 'run' / 'ranking.csv')
    assert len(ranking) == 10
    assert list(ranking['rank']) == list(range(1, 11))
    assert (tmp_path / 'run' / 'top5.txt').exists()
