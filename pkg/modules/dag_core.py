"""
Workflow data model: tasks, task groups, pools, dependencies and dynamic
mapping, plus the line-oriented workflow file format.

A WorkflowSpec is immutable once built. Groups are expanded at run time, once
per element of the list published under their ``mapped_over`` key.
"""
import re
import shlex
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import networkx as nx

from modules.comm_store import DEFAULT_KEY, PLACEHOLDER
from modules.executors import ActionSpec, parse_action
from modules.log_config import get_logger

logger = get_logger('dag_core', 'dag_core.log')

IDENTIFIER = re.compile(r'^[A-Za-z_][A-Za-z0-9_\-]*$')
RETURN_TYPES = ('int', 'str', 'list')


class WorkflowParseError(ValueError):
    """Raised for malformed workflow files; carries the offending line number."""

    def __init__(self, line_no, reason, source='<workflow>'):
        super().__init__(f"{source}:{line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class WorkflowGraphError(ValueError):
    """Raised when a graph operation meets a cycle or a misused group."""


# ----------------------------
# Domain Types
# ----------------------------
class InstanceKey(NamedTuple):
    task_id: str
    map_index: Optional[int] = None

    def label(self):
        return self.task_id if self.map_index is None else f"{self.task_id}[{self.map_index}]"

    def sort_key(self):
        return (self.task_id, -1 if self.map_index is None else self.map_index)


@dataclass(frozen=True)
class PoolSpec:
    name: str
    slots: int


@dataclass(frozen=True)
class TaskSpec:
    id: str
    pool: str
    action: ActionSpec
    group: Optional[str] = None
    produces: Optional[str] = None
    params: tuple = ()          # (name, template) pairs
    returns: Optional[str] = None  # '<type>:<template>', simulated tasks only

    def templates(self):
        """All template strings this task resolves at instance start."""
        found = [template for _, template in self.params]
        if self.action.kind == 'shell':
            found.append(self.action.command_template)
        if self.returns is not None:
            found.append(self.returns.split(':', 1)[1])
        return found


@dataclass(frozen=True)
class GroupSpec:
    id: str
    members: tuple = ()
    mapped_over: Optional[str] = None

    def mapped_key(self):
        """Return (task_id, key) of the fan-out producer, or None."""
        if self.mapped_over is None:
            return None
        task_id, _, key = self.mapped_over.partition('.')
        return task_id, key or DEFAULT_KEY


@dataclass(frozen=True)
class WorkflowSpec:
    name: str
    pools: tuple = ()
    tasks: tuple = ()
    groups: tuple = ()
    edges: tuple = ()
    _task_index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, '_task_index', {task.id: task for task in self.tasks})

    def task(self, task_id):
        return self._task_index[task_id]

    def has_task(self, task_id):
        return task_id in self._task_index

    def group(self, group_id):
        for group in self.groups:
            if group.id == group_id:
                return group
        raise KeyError(group_id)

    def has_group(self, group_id):
        return any(group.id == group_id for group in self.groups)

    def pool(self, name):
        for pool in self.pools:
            if pool.name == name:
                return pool
        raise KeyError(name)

    def group_of(self, task_id):
        """The GroupSpec the task belongs to, or None for top-level tasks."""
        group_id = self._task_index[task_id].group
        return self.group(group_id) if group_id and self.has_group(group_id) else None

    def mapped_group_of(self, task_id):
        group = self.group_of(task_id)
        return group if group is not None and group.mapped_over else None


@dataclass(frozen=True)
class Violation:
    element: str
    rule: str
    detail: str

    def __str__(self):
        return f"{self.rule}: {self.detail}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = ()

    @property
    def ok(self):
        return not self.violations

    def lines(self):
        return [str(violation) for violation in self.violations]


@dataclass(frozen=True)
class InstanceSet:
    """One fan-out copy of a mapped group."""
    group_id: str
    map_index: int
    value: object
    instances: tuple
    edges: tuple


# ----------------------------
# Graph Helpers
# ----------------------------
def internal_edges(spec, group):
    members = set(group.members)
    return [(u, v) for u, v in spec.edges if u in members and v in members]


def group_sources(spec, group):
    targets = {v for _, v in internal_edges(spec, group)}
    return [m for m in group.members if m not in targets]


def group_sinks(spec, group):
    origins = {u for u, _ in internal_edges(spec, group)}
    return [m for m in group.members if m not in origins]


def task_graph(spec):
    """Task-level dependency graph, with group endpoints rewritten to sources/sinks."""
    graph = nx.DiGraph()
    graph.add_nodes_from(task.id for task in spec.tasks)
    for upstream, downstream in spec.edges:
        if spec.has_group(upstream):
            tails = group_sinks(spec, spec.group(upstream))
        elif spec.has_task(upstream):
            tails = [upstream]
        else:
            continue
        if spec.has_group(downstream):
            heads = group_sources(spec, spec.group(downstream))
        elif spec.has_task(downstream):
            heads = [downstream]
        else:
            continue
        graph.add_edges_from((t, h) for t in tails for h in heads)
    return graph


def collapsed_graph(spec):
    """Dependency graph where every group is a single node."""
    def node_of(endpoint):
        if spec.has_task(endpoint):
            group = spec.group_of(endpoint)
            return group.id if group is not None else endpoint
        return endpoint

    graph = nx.DiGraph()
    for task in spec.tasks:
        graph.add_node(node_of(task.id))
    for group in spec.groups:
        graph.add_node(group.id)
    for upstream, downstream in spec.edges:
        u, v = node_of(upstream), node_of(downstream)
        if u != v:
            graph.add_edge(u, v)
    return graph


def _cycle_detail(graph):
    try:
        cycle = nx.find_cycle(graph)
    except nx.NetworkXNoCycle:
        return None
    return ','.join(sorted({u for u, _ in cycle}))


# ----------------------------
# Validation
# ----------------------------
def validate(spec):
    """Check every WorkflowSpec invariant; violations are returned, not raised."""
    violations = []

    def flag(element, rule, detail):
        violations.append(Violation(element, rule, detail))

    seen = set()
    for ident in [t.id for t in spec.tasks] + [g.id for g in spec.groups]:
        if ident in seen:
            flag(ident, 'duplicate id', ident)
        seen.add(ident)
        if not IDENTIFIER.match(ident):
            flag(ident, 'bad identifier', ident)

    pool_names = set()
    for pool in spec.pools:
        if pool.name in pool_names:
            flag(pool.name, 'duplicate pool', pool.name)
        pool_names.add(pool.name)
        if pool.slots < 1:
            flag(pool.name, 'bad pool size', f"pool '{pool.name}' has {pool.slots} slots")

    for task in spec.tasks:
        if task.pool not in pool_names:
            flag(task.id, 'unknown pool', f"task '{task.id}' references pool '{task.pool}'")
        if task.group is not None and not spec.has_group(task.group):
            flag(task.id, 'unknown group', f"task '{task.id}' references group '{task.group}'")
        if task.returns is not None and task.returns.split(':', 1)[0] not in RETURN_TYPES:
            flag(task.id, 'bad returns', f"task '{task.id}' returns must be typed int|str|list")

    for upstream, downstream in spec.edges:
        for endpoint in (upstream, downstream):
            if not (spec.has_task(endpoint) or spec.has_group(endpoint)):
                flag(endpoint, 'unknown endpoint', f"edge {upstream} -> {downstream} references '{endpoint}'")
        if upstream == downstream:
            flag(upstream, 'cycle', upstream)

    for upstream, downstream in spec.edges:
        if not (spec.has_task(upstream) and spec.has_task(downstream)):
            # group <-> own member edges
            for group_end, task_end in ((upstream, downstream), (downstream, upstream)):
                if spec.has_group(group_end) and spec.has_task(task_end) and spec.task(task_end).group == group_end:
                    flag(group_end, 'group boundary', f"edge {upstream} -> {downstream} joins a group to its own member")
            continue
        gu, gd = spec.task(upstream).group, spec.task(downstream).group
        if gu and gd and gu != gd:
            flag(upstream, 'group boundary', f"edge {upstream} -> {downstream} joins members of groups '{gu}' and '{gd}'")

    for group in spec.groups:
        if not group.members:
            flag(group.id, 'empty group', f"group '{group.id}' has no members")
            continue
        members = nx.Graph()
        members.add_nodes_from(group.members)
        members.add_edges_from(internal_edges(spec, group))
        if not nx.is_connected(members):
            flag(group.id, 'group not connected', f"group '{group.id}' members are not connected")

    if violations:
        return ValidationReport(tuple(violations))

    tasks = task_graph(spec)
    detail = _cycle_detail(tasks) or _cycle_detail(collapsed_graph(spec))
    if detail:
        flag(spec.name, 'cycle', detail)
        return ValidationReport(tuple(violations))

    for group in spec.groups:
        if not group.mapped_over:
            continue
        producer, key = group.mapped_key()
        if not spec.has_task(producer):
            flag(group.id, 'unknown producer', f"group '{group.id}' is mapped over '{group.mapped_over}'")
            continue
        if spec.task(producer).produces != key:
            flag(group.id, 'unknown producer', f"task '{producer}' does not produce '{key}'")
        if spec.mapped_group_of(producer) is not None:
            flag(group.id, 'nested mapping', f"group '{group.id}' is mapped over a mapped task '{producer}'")
        for source in group_sources(spec, group):
            if producer not in nx.ancestors(tasks, source):
                flag(group.id, 'producer not upstream', f"'{producer}' is not upstream of group '{group.id}'")
                break

    for task in spec.tasks:
        ancestors = nx.ancestors(tasks, task.id)
        for template in task.templates():
            for match in PLACEHOLDER.finditer(template):
                if match.group(0) == '{map_value}':
                    if spec.mapped_group_of(task.id) is None:
                        flag(task.id, 'bad placeholder', f"task '{task.id}' uses {{map_value}} outside a mapped group")
                    continue
                producer, key = match.group(1), match.group(2)
                if producer not in ancestors or spec.task(producer).produces != key:
                    flag(task.id, 'bad placeholder',
                         f"task '{task.id}' references {match.group(0)} which no upstream task produces")

    return ValidationReport(tuple(violations))


# ----------------------------
# Layering
# ----------------------------
def topo_layers(spec, collapse_groups=True):
    """Kahn layering. With collapse_groups each group is one node."""
    graph = collapsed_graph(spec) if collapse_groups else task_graph(spec)
    try:
        return [frozenset(layer) for layer in nx.topological_generations(graph)]
    except nx.NetworkXUnfeasible as e:
        raise WorkflowGraphError(f"cycle: {_cycle_detail(graph)}") from e


# ----------------------------
# Dynamic Mapping
# ----------------------------
def expand(spec, group, values):
    """Instantiate the group once per element of values (map_index = position)."""
    if not isinstance(values, list):
        raise WorkflowGraphError(f"group '{group.id}' must be mapped over a list, got {type(values).__name__}")
    edges = internal_edges(spec, group)
    sets = []
    for index, value in enumerate(values):
        sets.append(InstanceSet(
            group_id=group.id,
            map_index=index,
            value=value,
            instances=tuple(InstanceKey(member, index) for member in group.members),
            edges=tuple((InstanceKey(u, index), InstanceKey(v, index)) for u, v in edges),
        ))
    logger.debug(f"Expanded group {group.id} into {len(sets)} instance sets")
    return sets


def instance_upstreams(spec, key, fanout, graph=None):
    """
    Upstream instances of key given the groups expanded so far.

    Returns (instances, barriers): barriers are (group_id, task_id) pairs for
    upstream tasks whose mapped group has not been expanded yet.
    """
    graph = graph if graph is not None else task_graph(spec)
    own_group = spec.mapped_group_of(key.task_id)
    upstreams, barriers = set(), set()
    for predecessor in graph.predecessors(key.task_id):
        group = spec.mapped_group_of(predecessor)
        if group is None:
            upstreams.add(InstanceKey(predecessor))
        elif own_group is not None and group.id == own_group.id:
            upstreams.add(InstanceKey(predecessor, key.map_index))
        elif group.id in fanout:
            upstreams.update(InstanceKey(predecessor, i) for i in range(len(fanout[group.id])))
        else:
            barriers.add((group.id, predecessor))
    return upstreams, barriers


def instance_keys(spec, fanout):
    keys = []
    for task in spec.tasks:
        group = spec.mapped_group_of(task.id)
        if group is None:
            keys.append(InstanceKey(task.id))
        elif group.id in fanout:
            keys.extend(InstanceKey(task.id, i) for i in range(len(fanout[group.id])))
    return keys


def expanded_edges(spec, fanout):
    """Materialise the full instance-level edge set for fully known fan-out values."""
    graph = task_graph(spec)
    edges = set()
    for key in instance_keys(spec, fanout):
        upstreams, _ = instance_upstreams(spec, key, fanout, graph)
        edges.update((u, key) for u in upstreams)
    return edges


# ----------------------------
# Workflow File Format
# ----------------------------
def parse_workflow(text, source='<workflow>'):
    """Parse the line-oriented workflow format into a WorkflowSpec."""
    name = None
    pools, tasks, groups, edges = [], [], [], []
    group_order = []
    line_no = 0

    for line_no, raw in enumerate(text.splitlines(), start=1):
        try:
            tokens = shlex.split(raw, comments=True)
        except ValueError as e:
            raise WorkflowParseError(line_no, f"cannot tokenize: {e}", source)
        if not tokens:
            continue
        keyword, args = tokens[0], tokens[1:]

        if keyword == 'workflow':
            if len(args) != 1:
                raise WorkflowParseError(line_no, "expected 'workflow <name>'", source)
            if name is not None:
                raise WorkflowParseError(line_no, "duplicate workflow declaration", source)
            name = args[0]
        elif keyword == 'pool':
            if len(args) != 2:
                raise WorkflowParseError(line_no, "expected 'pool <name> <slots>'", source)
            try:
                slots = int(args[1])
            except ValueError:
                raise WorkflowParseError(line_no, f"pool slots must be an integer, got '{args[1]}'", source)
            pools.append(PoolSpec(args[0], slots))
        elif keyword == 'task':
            tasks.append(_parse_task_line(args, line_no, source))
        elif keyword == 'group':
            if not args:
                raise WorkflowParseError(line_no, "expected 'group <gid> [mapped_over=<key>]'", source)
            mapped_over = None
            for option in args[1:]:
                option_key, _, value = option.partition('=')
                if option_key != 'mapped_over' or not value:
                    raise WorkflowParseError(line_no, f"unknown group option '{option}'", source)
                mapped_over = value
            group_order.append((args[0], mapped_over))
        elif keyword == 'dep':
            if len(args) != 3 or args[1] != '->':
                raise WorkflowParseError(line_no, "expected 'dep <id> -> <id>'", source)
            edges.append((args[0], args[2]))
        else:
            raise WorkflowParseError(line_no, f"unknown statement '{keyword}'", source)

    if name is None:
        raise WorkflowParseError(max(line_no, 1), "missing 'workflow <name>' declaration", source)

    for group_id, mapped_over in group_order:
        members = tuple(task.id for task in tasks if task.group == group_id)
        groups.append(GroupSpec(group_id, members, mapped_over))

    return WorkflowSpec(name, tuple(pools), tuple(tasks), tuple(groups), tuple(edges))


def _parse_task_line(args, line_no, source):
    if not args:
        raise WorkflowParseError(line_no, "expected 'task <id> pool=<pool> action=<action>'", source)
    task_id, options = args[0], {}
    params = []
    for option in args[1:]:
        option_key, sep, value = option.partition('=')
        if not sep:
            raise WorkflowParseError(line_no, f"expected key=value, got '{option}'", source)
        if option_key == 'param':
            param_name, sep, template = value.partition('=')
            if not sep or not param_name:
                raise WorkflowParseError(line_no, f"expected param=<name>=<template>, got '{option}'", source)
            params.append((param_name, template))
        elif option_key in ('pool', 'group', 'action', 'produces', 'returns'):
            if option_key in options:
                raise WorkflowParseError(line_no, f"duplicate option '{option_key}'", source)
            options[option_key] = value
        else:
            raise WorkflowParseError(line_no, f"unknown task option '{option_key}'", source)

    for required in ('pool', 'action'):
        if required not in options:
            raise WorkflowParseError(line_no, f"task '{task_id}' is missing {required}=", source)
    try:
        action = parse_action(options['action'])
    except ValueError as e:
        raise WorkflowParseError(line_no, str(e), source)

    return TaskSpec(
        id=task_id,
        pool=options['pool'],
        action=action,
        group=options.get('group'),
        produces=options.get('produces'),
        params=tuple(params),
        returns=options.get('returns'),
    )


def load_workflow(path):
    with open(path, 'r', encoding='utf-8') as file:
        return parse_workflow(file.read(), source=str(path))


def dump_workflow(spec):
    """Emit spec in the workflow file format; parse_workflow reads it back unchanged."""
    lines = [f"workflow {spec.name}"]
    lines += [f"pool {pool.name} {pool.slots}" for pool in spec.pools]
    for group in spec.groups:
        line = f"group {group.id}"
        if group.mapped_over:
            line += f" mapped_over={group.mapped_over}"
        lines.append(line)
    for task in spec.tasks:
        parts = ['task', task.id, f"pool={task.pool}"]
        if task.group:
            parts.append(f"group={task.group}")
        parts.append(f"action={task.action}")
        if task.produces:
            parts.append(f"produces={task.produces}")
        parts += [f"param={name}={template}" for name, template in task.params]
        if task.returns is not None:
            parts.append(f"returns={task.returns}")
        lines.append(' '.join(shlex.quote(part) for part in parts))
    lines += [f"dep {u} -> {v}" for u, v in spec.edges]
    return '\n'.join(lines) + '\n'
