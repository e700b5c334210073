"""
Reports over a finished run: task-oriented and resource-oriented Gantt charts
(SVG or plain text) and whiskers statistics of the PHASES timings found in
the per-instance logs.
"""
import glob
import math
import os
from dataclasses import dataclass
from typing import Optional

import pandas as pd
from lxml import etree

from modules.dag_core import InstanceKey
from modules.executors import PHASE_NAMES, parse_phases
from modules.log_config import get_logger
from modules.scheduler import EventKind, read_event_log

logger = get_logger('gantt_report', 'gantt_report.log')

SVG_NS = 'http://www.w3.org/2000/svg'
PX_PER_MS = 0.1
ROW_HEIGHT = 18
LABEL_WIDTH = 160
MARGIN = 10
MAX_TEXT_COLUMNS = 120
TASK_FILL = '#1f4e9c'
FILL_OPACITY = '0.5'


class GanttIntegrityError(ValueError):
    pass


# ----------------------------
# Domain Types
# ----------------------------
@dataclass(frozen=True)
class Interval:
    task_id: str
    map_index: Optional[int]
    start: int
    end: int
    pool: str
    slot: Optional[int]

    @property
    def instance(self):
        return InstanceKey(self.task_id, self.map_index)

    @property
    def label(self):
        return self.instance.label()


@dataclass(frozen=True)
class WhiskerStats:
    min: float
    q25: float
    median: float
    q75: float
    max: float

    def as_tuple(self):
        return (self.min, self.q25, self.median, self.q75, self.max)


# ----------------------------
# Event Log -> Intervals
# ----------------------------
def intervals(events):
    """One Interval per START/END pair, ordered by start then instance."""
    open_starts, found = {}, []
    for event in events:
        key = event.instance
        if event.kind == EventKind.START:
            if key in open_starts:
                raise GanttIntegrityError(f"{key.label()} started twice")
            open_starts[key] = event
        elif event.kind in (EventKind.END_OK, EventKind.END_FAIL):
            start = open_starts.pop(key, None)
            if start is None:
                raise GanttIntegrityError(f"{key.label()} ended without starting")
            found.append(Interval(key.task_id, key.map_index, start.t, event.t, start.pool, start.slot))
    if open_starts:
        first = min(open_starts, key=InstanceKey.sort_key)
        raise GanttIntegrityError(f"unterminated {first.label()}")
    return sorted(found, key=lambda i: (i.start, i.instance.sort_key()))


def intervals_from_log(path):
    return intervals(read_event_log(path))


def _span(items):
    if not items:
        raise GanttIntegrityError("no intervals to render")
    origin = min(i.start for i in items)
    return origin, max(i.end for i in items)


def _task_rows(items):
    rows = {}
    for interval in items:
        rows.setdefault(interval.task_id, []).append(interval)
    return rows


def _slot_rows(items, pools):
    """Rows per (pool, slot) in pool order; every slot has a row, used or not."""
    rows = {(name, slot): [] for name, slots in pools.items() for slot in range(slots)}
    for interval in items:
        if interval.pool not in pools:
            raise GanttIntegrityError(f"{interval.label} ran on unknown pool '{interval.pool}'")
        if interval.slot is None or not 0 <= interval.slot < pools[interval.pool]:
            raise GanttIntegrityError(
                f"{interval.label} on slot {interval.slot} of pool '{interval.pool}' "
                f"with {pools[interval.pool]} slots")
        rows[(interval.pool, interval.slot)].append(interval)
    for (pool, slot), row in rows.items():
        row.sort(key=lambda i: (i.start, i.end))
        for before, after in zip(row, row[1:]):
            if after.start < before.end:
                raise GanttIntegrityError(
                    f"{before.label} and {after.label} overlap on slot {slot} of pool '{pool}'")
    return rows


# ----------------------------
# Text Charts
# ----------------------------
def text_scale(span_ms):
    return max(1, math.ceil(span_ms / MAX_TEXT_COLUMNS))


def _columns(origin, end):
    scale = text_scale(end - origin)
    return scale, max(1, math.ceil((end - origin) / scale))


def _covers(interval, lo, hi):
    if interval.start == interval.end:
        return lo <= interval.start < hi
    return interval.start < hi and interval.end > lo


def _text_header(origin, end, scale):
    return f"# 1 column = {scale} ms, span {origin}..{end} ms"


def task_gantt_text(items):
    """One row per task; '#' marks one running instance, '=' two or more."""
    origin, end = _span(items)
    scale, ncols = _columns(origin, end)
    rows = _task_rows(items)
    width = max(len(task_id) for task_id in rows)
    lines = [_text_header(origin, end, scale)]
    for task_id, row in rows.items():
        cells = []
        for c in range(ncols):
            lo = origin + c * scale
            running = sum(1 for i in row if _covers(i, lo, lo + scale))
            cells.append(' ' if running == 0 else '#' if running == 1 else '=')
        lines.append(f"{task_id:<{width}} |{''.join(cells)}|")
    return '\n'.join(lines) + '\n'


def _task_codes(items):
    codes = {}
    for interval in items:
        if interval.task_id not in codes:
            codes[interval.task_id] = chr(ord('A') + len(codes) % 26)
    return codes


def resource_gantt_text(items, pools):
    """One row per pool slot; cells carry the code letter of the task occupying the slot."""
    origin, end = _span(items)
    rows = _slot_rows(items, pools)
    scale, ncols = _columns(origin, end)
    codes = _task_codes(items)
    lines = [_text_header(origin, end, scale)]
    lines += [f"# {code} = {task_id}" for task_id, code in codes.items()]
    for pool, slots in pools.items():
        lines.append(f"[{pool}] {slots} slots")
        for slot in range(slots):
            cells = []
            for c in range(ncols):
                lo = origin + c * scale
                occupant = next((i for i in rows[(pool, slot)] if _covers(i, lo, lo + scale)), None)
                cells.append(' ' if occupant is None else codes[occupant.task_id])
            lines.append(f"  slot {slot:<3}|{''.join(cells)}|")
    return '\n'.join(lines) + '\n'


# ----------------------------
# SVG Charts
# ----------------------------
def _svg_root(width, height):
    root = etree.Element(f"{{{SVG_NS}}}svg", nsmap={None: SVG_NS})
    root.set('width', str(int(math.ceil(width))))
    root.set('height', str(int(math.ceil(height))))
    root.set('font-family', 'monospace')
    root.set('font-size', '11')
    return root


def _sub(parent, tag, text=None, **attrs):
    element = etree.SubElement(parent, f"{{{SVG_NS}}}{tag}")
    for name, value in attrs.items():
        element.set(name.replace('_', '-'), str(value))
    if text is not None:
        element.text = text
    return element


def _x(t, origin):
    return f"{LABEL_WIDTH + (t - origin) * PX_PER_MS:.1f}"


def _width(interval):
    return f"{max((interval.end - interval.start) * PX_PER_MS, 0.5):.1f}"


def _time_axis(root, origin, end, y):
    _sub(root, 'line', x1=LABEL_WIDTH, y1=y, x2=_x(end, origin), y2=y, stroke='#444444')
    _sub(root, 'text', f"{origin} ms", x=LABEL_WIDTH, y=y + 12)
    _sub(root, 'text', f"{end} ms", x=_x(end, origin), y=y + 12, text_anchor='end')


def _to_bytes(root):
    return etree.tostring(root, pretty_print=True, xml_declaration=True, encoding='UTF-8')


def task_gantt_svg(items):
    """Translucent rectangles on one row per task; overlapping instances draw darker."""
    origin, end = _span(items)
    rows = _task_rows(items)
    width = LABEL_WIDTH + (end - origin) * PX_PER_MS + MARGIN
    height = (len(rows) + 1) * ROW_HEIGHT + 2 * MARGIN
    root = _svg_root(width, height)
    for r, (task_id, row) in enumerate(rows.items()):
        y = MARGIN + r * ROW_HEIGHT
        _sub(root, 'text', task_id, x=4, y=y + ROW_HEIGHT - 5)
        for interval in row:
            rect = _sub(root, 'rect', x=_x(interval.start, origin), y=y + 2, width=_width(interval),
                        height=ROW_HEIGHT - 4, fill=TASK_FILL, fill_opacity=FILL_OPACITY)
            rect.set('class', 'interval')
            _sub(rect, 'title', f"{interval.label} {interval.start}-{interval.end} ms")
    _time_axis(root, origin, end, MARGIN + len(rows) * ROW_HEIGHT + 2)
    return _to_bytes(root)


def resource_gantt_svg(items, pools):
    """Rows per pool slot grouped under pool headers; white labels carry task name and batch number."""
    origin, end = _span(items)
    rows = _slot_rows(items, pools)
    codes = _task_codes(items)
    palette = ['#1f4e9c', '#c0392b', '#27ae60', '#8e44ad', '#d35400', '#16a085', '#7f8c8d']
    n_rows = len(pools) + len(rows)
    width = LABEL_WIDTH + (end - origin) * PX_PER_MS + MARGIN
    height = (n_rows + 1) * ROW_HEIGHT + 2 * MARGIN
    root = _svg_root(width, height)
    y = MARGIN
    for pool, slots in pools.items():
        header = _sub(root, 'text', f"{pool} ({slots} slots)", x=4, y=y + ROW_HEIGHT - 5, font_weight='bold')
        header.set('class', 'pool-header')
        y += ROW_HEIGHT
        for slot in range(slots):
            background = _sub(root, 'rect', x=LABEL_WIDTH, y=y + 1, width=f"{(end - origin) * PX_PER_MS:.1f}",
                              height=ROW_HEIGHT - 2, fill='#f2f2f2')
            background.set('class', 'slot-row')
            _sub(root, 'text', f"slot {slot}", x=16, y=y + ROW_HEIGHT - 5)
            for interval in rows[(pool, slot)]:
                colour = palette[(ord(codes[interval.task_id]) - ord('A')) % len(palette)]
                rect = _sub(root, 'rect', x=_x(interval.start, origin), y=y + 2, width=_width(interval),
                            height=ROW_HEIGHT - 4, fill=colour)
                rect.set('class', 'interval')
                _sub(rect, 'title', f"{interval.label} {interval.start}-{interval.end} ms")
                label = interval.task_id if interval.map_index is None else f"{interval.task_id} {interval.map_index}"
                _sub(root, 'text', label, x=_x(interval.start, origin), dx=2, y=y + ROW_HEIGHT - 5, fill='#ffffff')
            y += ROW_HEIGHT
    _time_axis(root, origin, end, y + 2)
    return _to_bytes(root)


def _write(out, content):
    directory = os.path.dirname(out)
    if directory:
        os.makedirs(directory, exist_ok=True)
    mode = 'wb' if isinstance(content, bytes) else 'w'
    with open(out, mode) as file:
        file.write(content)


def render_task_gantt(items, out, fmt='svg'):
    content = task_gantt_svg(items) if fmt == 'svg' else task_gantt_text(items)
    _write(out, content)
    logger.info(f"Task Gantt chart ({fmt}, {len(items)} intervals) written to {out}")


def render_resource_gantt(items, pools, out, fmt='svg'):
    content = resource_gantt_svg(items, pools) if fmt == 'svg' else resource_gantt_text(items, pools)
    _write(out, content)
    logger.info(f"Resource Gantt chart ({fmt}, {len(items)} intervals) written to {out}")


# ----------------------------
# Whiskers Statistics
# ----------------------------
def whiskers(samples):
    """min / q25 / median / q75 / max with linear interpolation at q*(n-1)."""
    if len(samples) == 0:
        raise ValueError("whiskers of an empty sample")
    quantiles = pd.Series(samples, dtype='float64').quantile([0.0, 0.25, 0.5, 0.75, 1.0], interpolation='linear')
    return WhiskerStats(*(float(q) for q in quantiles))


def collect_phase_samples(logs_dir):
    """PHASES timings of every instance log in logs_dir, keyed by phase name."""
    if not os.path.isdir(logs_dir):
        raise FileNotFoundError(f"log directory not found: {logs_dir}")
    samples = {name: [] for name in PHASE_NAMES}
    for path in sorted(glob.glob(os.path.join(logs_dir, '*.log'))):
        with open(path, 'r', encoding='utf-8', errors='replace') as file:
            phases = parse_phases(file.read())
        if phases is None:
            continue
        for name in PHASE_NAMES:
            samples[name].append(getattr(phases, name))
    return samples


def format_number(value):
    return str(int(value)) if float(value).is_integer() else f"{value:.3f}".rstrip('0').rstrip('.')


def format_stats(phase, stats):
    return ' '.join([phase] + [format_number(v) for v in stats.as_tuple()])
