"""
Batched virtual-screening pipeline.

split_sdf -> get_batch_labels -> [prepare_ligands -> perform_docking] per batch -> postprocessing,
with prepare_receptor alongside split_sdf. All files live in one shared data
directory and follow the naming convention ``<db>_batch<i>_ligand<j>.pdbqt``.
"""
import os
import re
import shlex
import shutil
import subprocess
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import pandas as pd
import yaml
from dotenv import load_dotenv
from tqdm import tqdm

from modules.dag_core import GroupSpec, PoolSpec, TaskSpec, WorkflowSpec
from modules.executors import ActionSpec, PhaseTiming, fnv1a64, parse_duration
from modules.log_config import get_logger

load_dotenv()

logger = get_logger('screening_dag', 'screening_dag.log')

SCREENING_CONFIG = os.getenv('SCREENFLOW_CONFIG', './screening.yaml')
RECEPTOR_FILE = 'receptor.prepared'
LIGAND_FILE = re.compile(r'^(?P<db>.+)_batch(?P<batch>\d+)_ligand(?P<ligand>\d+)\.pdbqt$')
BATCH_LABEL = re.compile(r'^batch(\d+)$')
NAME_REMARK = re.compile(r'^REMARK\s+Name\s*=\s*(.*)$')
# libyaml when installed
YAML_LOADER = getattr(yaml, 'CSafeLoader', yaml.SafeLoader)
YAML_DUMPER = getattr(yaml, 'CSafeDumper', yaml.SafeDumper)


class ScreeningError(RuntimeError):
    pass


# ----------------------------
# Domain Types
# ----------------------------
@dataclass(frozen=True)
class SdfRecord:
    name: str
    body: str
    atom_count: int


@dataclass
class BatchEntry:
    label: str
    sdf_path: str
    ligand_count: int
    index_path: str


@dataclass
class BatchManifest:
    db_name: str
    batch_size: int
    batches: list = field(default_factory=list)
    receptor_file: str = RECEPTOR_FILE

    def batch(self, label):
        match = BATCH_LABEL.match(label)
        position = int(match.group(1)) if match else -1
        if 0 <= position < len(self.batches) and self.batches[position].label == label:
            return self.batches[position]
        for entry in self.batches:
            if entry.label == label:
                return entry
        raise ScreeningError(f"batch '{label}' is not in the manifest of '{self.db_name}'")

    @property
    def total_ligands(self):
        return sum(entry.ligand_count for entry in self.batches)

    def save(self, path):
        with open(path, 'w', encoding='utf-8') as file:
            yaml.dump(asdict(self), file, Dumper=YAML_DUMPER, sort_keys=False)


def load_manifest(path):
    with open(path, 'r', encoding='utf-8') as file:
        raw = yaml.load(file, Loader=YAML_LOADER)
    batches = [BatchEntry(**entry) for entry in raw.get('batches') or []]
    return BatchManifest(raw['db_name'], raw['batch_size'], batches, raw.get('receptor_file', RECEPTOR_FILE))


@dataclass(frozen=True)
class DockingResult:
    ligand_name: str
    batch_label: str
    best_energy: float


@dataclass
class ScreeningConfig:
    """Settings of the screening pipeline; screening.yaml values, overridden by flags."""
    receptor: Optional[str] = None
    ligands: Optional[str] = None
    db_name: str = 'db'
    batch_size: int = 1000
    top_k: int = 10
    pools: dict = field(default_factory=lambda: {'small': 2, 'large': 4})
    mock: bool = True
    docking_cmd: Optional[str] = None
    converter_cmd: Optional[str] = None
    receptor_cmd: Optional[str] = None
    receptor_file: str = RECEPTOR_FILE


def load_screening_config(path=SCREENING_CONFIG):
    """Load the `screening:` mapping from YAML; a missing file gives the defaults."""
    if not path or not os.path.exists(path):
        return ScreeningConfig()
    with open(path, 'r') as file:
        raw = yaml.safe_load(file) or {}
    settings = raw.get('screening', {}) or {}
    known = set(ScreeningConfig.__dataclass_fields__)
    unknown = set(settings) - known
    if unknown:
        raise ScreeningError(f"unknown screening settings in {path}: {', '.join(sorted(unknown))}")
    return ScreeningConfig(**settings)


# ----------------------------
# Naming Convention
# ----------------------------
def batch_label(index):
    return f"batch{index}"


def batch_index(label):
    match = BATCH_LABEL.match(label)
    if not match:
        raise ScreeningError(f"bad batch label '{label}'")
    return int(match.group(1))


def batch_sdf_name(db_name, index):
    return f"{db_name}_batch{index}.sdf"


def batch_index_name(db_name, index):
    return f"{db_name}_batch{index}.index"


def ligand_filename(db_name, batch, ligand):
    return f"{db_name}_batch{batch}_ligand{ligand}.pdbqt"


def parse_ligand_filename(name):
    """Inverse of ligand_filename: returns (db_name, batch, ligand)."""
    match = LIGAND_FILE.match(os.path.basename(name))
    if not match:
        raise ScreeningError(f"'{name}' does not follow <db>_batch<i>_ligand<j>.pdbqt")
    return match.group('db'), int(match.group('batch')), int(match.group('ligand'))


def results_name(db_name, label):
    return f"{db_name}_{label}.results"


def manifest_name(db_name):
    return f"{db_name}.manifest.yaml"


# ----------------------------
# SDF Parsing
# ----------------------------
def _atom_count(lines, name):
    if len(lines) < 4:
        logger.warning(f"Record '{name}' has no counts line; atom_count=0")
        return 0
    counts = lines[3]
    for candidate in (counts[:3], (counts.split() or [''])[0]):
        try:
            value = int(candidate)
            if value >= 0:
                return value
        except ValueError:
            continue
    logger.warning(f"Record '{name}' has a malformed counts line {counts.rstrip()!r}; atom_count=0")
    return 0


def _make_record(lines):
    name = lines[0].rstrip('\r\n') if lines else ''
    return SdfRecord(name=name, body=''.join(lines), atom_count=_atom_count(lines, name))


def parse_sdf_text(text):
    """
    Split SDF text into records on lines whose trimmed content is '$$$$'.

    Returns (records, trailer): a trailing record without delimiter is kept;
    whitespace after the last delimiter is returned as trailer so that
    concatenating record bodies and trailer reproduces text exactly.
    """
    records, current = [], []
    for line in text.splitlines(keepends=True):
        current.append(line)
        if line.strip() == '$$$$':
            records.append(_make_record(current))
            current = []
    trailer = ''.join(current)
    if trailer.strip():
        records.append(_make_record(current))
        trailer = ''
    return records, trailer


def read_sdf(path):
    with open(path, 'r', encoding='utf-8', errors='surrogateescape', newline='') as file:
        return parse_sdf_text(file.read())


def _write_text(path, text):
    with open(path, 'w', encoding='utf-8', errors='surrogateescape', newline='') as file:
        file.write(text)


# ----------------------------
# Pipeline Steps
# ----------------------------
def split_sdf(input_path, batch_size, db_name, out_dir, receptor_file=RECEPTOR_FILE):
    """Write fixed-size batch SDF files, their index files and the manifest; return the batch count."""
    if batch_size < 1:
        raise ScreeningError(f"batch size must be >= 1, got {batch_size}")
    try:
        records, trailer = read_sdf(input_path)
    except OSError as e:
        raise ScreeningError(f"cannot read ligand file {input_path}: {e}")
    os.makedirs(out_dir, exist_ok=True)
    count = -(-len(records) // batch_size)
    manifest = BatchManifest(db_name, batch_size, receptor_file=receptor_file)
    if not records:
        # replaces any manifest an earlier split left in out_dir
        manifest.save(os.path.join(out_dir, manifest_name(db_name)))
        logger.info(f"{input_path} holds no records; wrote an empty manifest")
        return 0
    for i in tqdm(range(count), desc="Splitting batches", disable=None, leave=False):
        chunk = records[i * batch_size:(i + 1) * batch_size]
        text = ''.join(record.body for record in chunk)
        if i == count - 1:
            text += trailer
        sdf_path = batch_sdf_name(db_name, i)
        index_path = batch_index_name(db_name, i)
        _write_text(os.path.join(out_dir, sdf_path), text)
        index_lines = [receptor_file] + [ligand_filename(db_name, i, j) for j in range(len(chunk))]
        _write_text(os.path.join(out_dir, index_path), '\n'.join(index_lines) + '\n')
        manifest.batches.append(BatchEntry(batch_label(i), sdf_path, len(chunk), index_path))
    manifest.save(os.path.join(out_dir, manifest_name(db_name)))
    logger.info(f"Split {len(records)} records of {input_path} into {count} batches of {batch_size}")
    return count


def get_batch_labels(n):
    if n < 0:
        raise ScreeningError(f"batch count must be >= 0, got {n}")
    return [batch_label(i) for i in range(n)]


def prepare_receptor(receptor_path, data_dir, receptor_cmd=None, out_name=RECEPTOR_FILE, mock=False):
    """
    Produce the prepared receptor file in data_dir: run receptor_cmd with {in}/{out},
    or copy the receptor. Mock runs without a receptor get a placeholder file.
    """
    out_path = os.path.join(data_dir, out_name)
    if mock and not receptor_path:
        _write_text(out_path, "REMARK  mock receptor\n")
        return out_name
    if not receptor_path or not os.path.exists(receptor_path):
        raise ScreeningError(f"receptor file not found: {receptor_path}")
    if receptor_cmd:
        _run_converter(receptor_cmd, os.path.abspath(receptor_path), out_path, data_dir)
    else:
        shutil.copyfile(receptor_path, out_path)
    return out_name


def _run_converter(template, in_path, out_path, cwd):
    command = template.replace('{in}', shlex.quote(in_path)).replace('{out}', shlex.quote(out_path))
    proc = subprocess.run(command, shell=True, cwd=cwd, capture_output=True, text=True)
    if proc.returncode != 0:
        raise ScreeningError(f"converter failed with exit code {proc.returncode}: {proc.stderr.strip()}")


def ligand_name_or_default(record, db_name, batch, ligand):
    return record.name.strip() or os.path.splitext(ligand_filename(db_name, batch, ligand))[0]


def prepare_ligands(label, manifest, data_dir, converter_command=None):
    """Write one .pdbqt file per ligand of the batch; returns the number written."""
    entry = manifest.batch(label)
    i = batch_index(label)
    sdf_path = os.path.join(data_dir, entry.sdf_path)
    if not os.path.exists(sdf_path):
        raise ScreeningError(f"batch file not found: {entry.sdf_path}")
    records, _ = read_sdf(sdf_path)

    for j, record in enumerate(tqdm(records, desc=f"Preparing {label}", disable=None, leave=False)):
        out_path = os.path.join(data_dir, ligand_filename(manifest.db_name, i, j))
        if converter_command:
            in_path = os.path.splitext(out_path)[0] + '.sdf'
            _write_text(in_path, record.body)
            try:
                _run_converter(converter_command, in_path, out_path, data_dir)
            finally:
                os.remove(in_path)
        else:
            name = ligand_name_or_default(record, manifest.db_name, i, j)
            _write_text(out_path, f"REMARK  Name = {name}\nREMARK  atoms {record.atom_count}\n")
    logger.info(f"Prepared {len(records)} ligands for {manifest.db_name} {label}")
    return len(records)


def read_ligand_name(path):
    """Molecule name from the 'REMARK  Name = ...' line, or the file stem."""
    with open(path, 'r', encoding='utf-8', errors='replace') as file:
        for line in file:
            match = NAME_REMARK.match(line.rstrip('\r\n'))
            if match and match.group(1).strip():
                return match.group(1).strip()
    return os.path.splitext(os.path.basename(path))[0]


def mock_energy(ligand_name):
    """Deterministic stand-in score in [-10.99, -1.00] kcal/mol."""
    return -(1 + (fnv1a64(ligand_name) % 1000) / 100.0)


def read_index(path):
    with open(path, 'r', encoding='utf-8') as file:
        lines = [line.strip() for line in file if line.strip()]
    if not lines:
        raise ScreeningError(f"index file {path} is empty")
    return lines[0], lines[1:]


def perform_docking(label, index_path, data_dir, db_name, mode='mock', docking_command=None):
    """Dock one batch; returns (results file name, output text with a PHASES line)."""
    full_index = os.path.join(data_dir, index_path)
    if not os.path.exists(full_index):
        raise ScreeningError(f"index file not found: {index_path}")
    receptor, ligands = read_index(full_index)
    missing = [name for name in ligands if not os.path.exists(os.path.join(data_dir, name))]
    if missing:
        raise ScreeningError(f"missing ligand file {missing[0]} ({len(missing)} missing)")
    out_name = results_name(db_name, label)
    out_path = os.path.join(data_dir, out_name)

    if mode == 'real':
        if not docking_command:
            raise ScreeningError("real docking needs a docking command")
        command = (docking_command.replace('{index}', shlex.quote(index_path))
                   .replace('{outdir}', shlex.quote(os.path.abspath(data_dir))))
        proc = subprocess.run(command, shell=True, cwd=data_dir, capture_output=True, text=True)
        if proc.returncode != 0:
            raise ScreeningError(f"docking command failed with exit code {proc.returncode}: {proc.stderr.strip()}")
        if not os.path.exists(out_path):
            raise ScreeningError(f"docking command did not write {out_name}")
        return out_name, proc.stdout + proc.stderr

    started = time.perf_counter()
    names = [read_ligand_name(os.path.join(data_dir, name)) for name in ligands]
    setup_done = time.perf_counter()
    lines = [f"{name} {mock_energy(name):.2f}\n"
             for name in tqdm(names, desc=f"Docking {label}", disable=None, leave=False)]
    docking_done = time.perf_counter()
    _write_text(out_path, ''.join(lines))
    finished = time.perf_counter()

    def ms(a, b):
        return int(round((b - a) * 1000))

    phases = PhaseTiming(0, ms(started, setup_done), ms(setup_done, docking_done), ms(docking_done, finished))
    output = f"mock docking of {len(names)} ligands against {receptor}\n{phases.to_line()}\n"
    return out_name, output


def read_results(path, label):
    results = []
    with open(path, 'r', encoding='utf-8') as file:
        for line in file:
            line = line.rstrip('\r\n')
            if not line.strip():
                continue
            name, _, energy = line.rpartition(' ')
            results.append(DockingResult(name, label, float(energy)))
    return results


def postprocess(manifest, results_dir, top_k=10):
    """Merge every batch result, rank best-first and write ranking.csv and top<k>.txt."""
    rows = []
    batches = manifest.batches if manifest is not None else []
    for entry in tqdm(batches, desc="Gathering results", disable=None, leave=False):
        path = os.path.join(results_dir, results_name(manifest.db_name, entry.label))
        if not os.path.exists(path):
            raise ScreeningError(f"missing result file {os.path.basename(path)}")
        rows.extend(asdict(r) for r in read_results(path, entry.label))

    merged = pd.DataFrame(rows, columns=['ligand_name', 'batch_label', 'best_energy'])
    merged['best_energy'] = merged['best_energy'].astype(float)
    merged['order'] = merged['batch_label'].map(lambda label: batch_index(label))
    ranking = merged.sort_values(['best_energy', 'ligand_name', 'order'], kind='mergesort').reset_index(drop=True)
    ranking.insert(0, 'rank', range(1, len(ranking) + 1))
    ranking = ranking.rename(columns={'ligand_name': 'ligand', 'batch_label': 'batch', 'best_energy': 'energy'})
    ranking = ranking[['rank', 'ligand', 'batch', 'energy']]

    ranking.to_csv(os.path.join(results_dir, 'ranking.csv'), index=False, float_format='%.2f')
    top = ranking.head(top_k)
    with open(os.path.join(results_dir, f"top{top_k}.txt"), 'w', encoding='utf-8') as file:
        file.write(f"Top {top_k} of {len(ranking)} ligands\n")
        for row in top.itertuples(index=False):
            file.write(f"{row.rank:>4}  {row.ligand}  {row.batch}  {row.energy:.2f} kcal/mol\n")
    logger.info(f"Ranked {len(ranking)} docking results; best {top_k} written")
    return ranking


# ----------------------------
# Built-in Step Runner
# ----------------------------
class StepRunner:
    """Dispatches builtin:<step> actions to the pipeline functions above."""

    def __init__(self, config):
        self.config = config
        self._manifests = {}   # path -> ((mtime_ns, size), BatchManifest)
        self._lock = threading.Lock()

    def manifest(self, data_dir):
        """The batch manifest in data_dir, reloaded only when the file changes."""
        path = os.path.join(data_dir, manifest_name(self.config.db_name))
        try:
            stat = os.stat(path)
        except FileNotFoundError:
            return None
        stamp = (stat.st_mtime_ns, stat.st_size)
        with self._lock:
            cached = self._manifests.get(path)
            if cached is None or cached[0] != stamp:
                cached = (stamp, load_manifest(path))
                self._manifests[path] = cached
            return cached[1]

    def __call__(self, step, params, context):
        handler = getattr(self, f"step_{step}", None)
        if handler is None:
            raise ScreeningError(f"unknown builtin step '{step}'")
        return handler(params, context)

    def step_split_sdf(self, params, context):
        if not self.config.ligands:
            raise ScreeningError("no ligand file configured")
        count = split_sdf(self.config.ligands, self.config.batch_size, self.config.db_name,
                          context.data_dir, self.config.receptor_file)
        return count, f"{count} batches of up to {self.config.batch_size} ligands\n{count}\n"

    def step_prepare_receptor(self, params, context):
        name = prepare_receptor(self.config.receptor, context.data_dir, self.config.receptor_cmd,
                                self.config.receptor_file, self.config.mock)
        return name, f"prepared receptor written to {name}\n"

    def step_get_batch_labels(self, params, context):
        labels = get_batch_labels(int(params.get('n', '0')))
        return labels, ','.join(labels) + '\n'

    def step_prepare_ligands(self, params, context):
        label = params.get('batch') or str(context.map_value)
        manifest = self.manifest(context.data_dir)
        if manifest is None:
            raise ScreeningError("no batch manifest in the data directory")
        count = prepare_ligands(label, manifest, context.data_dir, self.config.converter_cmd)
        return count, f"{count} ligands prepared for {label}\n"

    def step_perform_docking(self, params, context):
        label = params.get('batch') or str(context.map_value)
        manifest = self.manifest(context.data_dir)
        if manifest is None:
            raise ScreeningError("no batch manifest in the data directory")
        mode = 'mock' if self.config.mock else 'real'
        return perform_docking(label, manifest.batch(label).index_path, context.data_dir,
                               manifest.db_name, mode, self.config.docking_cmd)

    def step_postprocessing(self, params, context):
        top_k = int(params.get('top_k', self.config.top_k))
        ranking = postprocess(self.manifest(context.data_dir), context.data_dir, top_k)
        return len(ranking), f"{len(ranking)} ligands ranked; top {top_k} in top{top_k}.txt\n"


# ----------------------------
# Workflow Builders
# ----------------------------
def _screening_shape(name, small, large, actions, extras=None):
    extras = extras or {}

    def task(task_id, pool, group=None, produces=None, params=()):
        return TaskSpec(task_id, pool, actions[task_id], group=group, produces=produces,
                        params=tuple(params), returns=extras.get(task_id))

    tasks = (
        task('split_sdf', 'large', produces='return_value'),
        task('prepare_receptor', 'large'),
        task('get_batch_labels', 'large', produces='return_value',
             params=[('n', '{split_sdf.return_value}')]),
        task('prepare_ligands', 'large', group='docking', params=[('batch', '{map_value}')]),
        task('perform_docking', 'small', group='docking', params=[('batch', '{map_value}')]),
        task('postprocessing', 'large'),
    )
    groups = (GroupSpec('docking', ('prepare_ligands', 'perform_docking'), 'get_batch_labels.return_value'),)
    edges = (
        ('split_sdf', 'get_batch_labels'),
        ('get_batch_labels', 'docking'),
        ('prepare_receptor', 'docking'),
        ('prepare_ligands', 'perform_docking'),
        ('docking', 'postprocessing'),
    )
    pools = (PoolSpec('small', small), PoolSpec('large', large))
    return WorkflowSpec(name, pools, tasks, groups, edges)


def build_screening_workflow(small=2, large=4, name='screening'):
    """The batched screening DAG with every task a built-in pipeline step."""
    actions = {task_id: ActionSpec('builtin', step=task_id) for task_id in (
        'split_sdf', 'prepare_receptor', 'get_batch_labels', 'prepare_ligands', 'perform_docking', 'postprocessing')}
    return _screening_shape(name, small, large, actions)


DUMMY_DURATIONS = {
    'split_sdf': 'uniform:2000:4000',
    'prepare_receptor': 'uniform:2000:4000',
    'get_batch_labels': 'uniform:500:1000',
    'prepare_ligands': 'uniform:2000:5000',
    'perform_docking': 'uniform:10000:20000',
    'postprocessing': 'uniform:2000:4000',
}


def build_dummy_workflow(n_batches=10, small=2, large=4, durations=None, failures=None, name='dummy_screening'):
    """
    Same shape as the screening DAG, with simulated durations and controlled
    results. failures maps task id -> map indices forced to fail (empty = all).
    """
    durations = {**DUMMY_DURATIONS, **(durations or {})}
    failures = failures or {}
    actions = {}
    for task_id, text in durations.items():
        if task_id in failures:
            indices = failures[task_id]
            text += ':fail' + ('@' + ','.join(str(i) for i in indices) if indices else '')
        actions[task_id] = ActionSpec('sim', duration=parse_duration(text))
    extras = {
        'split_sdf': f"int:{n_batches}",
        'get_batch_labels': 'list:' + ','.join(get_batch_labels(n_batches)),
    }
    return _screening_shape(name, small, large, actions, extras)
