"""
Cross-task communication: tasks publish values under (task_id, key, map_index)
and downstream templates read them back at instance start.

Every publish is appended to the run journal (``run.comm``) so a crashed run
can still be inspected.
"""
import re
import threading
from dataclasses import dataclass
from typing import Optional

from modules.log_config import get_logger

logger = get_logger('comm_store', 'comm_store.log')

DEFAULT_KEY = 'return_value'
PLACEHOLDER = re.compile(r'\{([A-Za-z_][A-Za-z0-9_\-]*)\.([A-Za-z_][A-Za-z0-9_]*)\}|\{map_value\}')
_MISSING = object()


class CommStoreError(RuntimeError):
    pass


class DuplicateKeyError(CommStoreError):
    pass


class ContractViolation(CommStoreError):
    pass


class UnresolvedPlaceholderError(CommStoreError):
    pass


# ----------------------------
# Domain Types
# ----------------------------
@dataclass(frozen=True)
class CommKey:
    task_id: str
    key: str = DEFAULT_KEY
    map_index: Optional[int] = None


@dataclass(frozen=True)
class CommValue:
    payload: object   # int | str | tuple of str

    def __post_init__(self):
        payload = self.payload
        if isinstance(payload, list):
            object.__setattr__(self, 'payload', tuple(payload))
            payload = self.payload
        if isinstance(payload, bool) or not isinstance(payload, (int, str, tuple)):
            raise TypeError(f"unsupported comm payload {type(payload).__name__}")
        if isinstance(payload, tuple) and not all(isinstance(item, str) for item in payload):
            raise TypeError("list payloads must contain text only")

    @property
    def type_name(self):
        if isinstance(self.payload, int):
            return 'int'
        if isinstance(self.payload, str):
            return 'str'
        return 'list'

    def text(self):
        """Template rendering: list payloads are comma-joined."""
        if isinstance(self.payload, tuple):
            return ','.join(self.payload)
        return str(self.payload)

    def structured(self):
        return list(self.payload) if isinstance(self.payload, tuple) else self.payload

    @classmethod
    def wrap(cls, value):
        if isinstance(value, list):
            return cls(tuple(str(item) for item in value))
        return cls(value)

    @classmethod
    def from_typed(cls, text):
        """Build a value from '<int|str|list>:<body>' (list items comma separated)."""
        type_name, sep, body = text.partition(':')
        if not sep:
            raise ValueError(f"typed value needs a type prefix: '{text}'")
        if type_name == 'int':
            return cls(int(body))
        if type_name == 'str':
            return cls(body)
        if type_name == 'list':
            return cls(tuple(body.split(',')) if body else ())
        raise ValueError(f"unknown value type '{type_name}'")


# ----------------------------
# Journal Encoding
# ----------------------------
def _escape(text, extra=''):
    out = []
    for ch in text:
        if ch == '\\':
            out.append('\\\\')
        elif ch == '\n':
            out.append('\\n')
        elif ch == '\r':
            out.append('\\r')
        elif ch in extra:
            out.append('\\' + ch)
        else:
            out.append(ch)
    return ''.join(out)


_UNESCAPE = {'n': '\n', 'r': '\r', '0': ''}


def _split_escaped(text, separator=None):
    """Undo _escape; with a separator, split on its unescaped occurrences."""
    parts, current, i = [], [], 0
    while i < len(text):
        ch = text[i]
        if ch == '\\' and i + 1 < len(text):
            nxt = text[i + 1]
            current.append(_UNESCAPE.get(nxt, nxt))
            i += 2
            continue
        if separator is not None and ch == separator:
            parts.append(''.join(current))
            current = []
        else:
            current.append(ch)
        i += 1
    parts.append(''.join(current))
    return parts


def _escape_item(item):
    # \0 marks an empty item so [''] and [] encode differently
    return _escape(item, extra=',') if item else '\\0'


def encode_record(t_ms, key, value):
    index = '-' if key.map_index is None else str(key.map_index)
    if value.type_name == 'list':
        body = ','.join(_escape_item(item) for item in value.payload)
    else:
        body = _escape(str(value.payload))
    return f"{t_ms} {key.task_id} {key.key} {index} {value.type_name} {body}"


def decode_record(line):
    parts = line.rstrip('\n').split(' ', 5)
    if len(parts) != 6:
        raise ValueError(f"malformed journal record: {line!r}")
    t_ms, task_id, key, index, type_name, body = parts
    comm_key = CommKey(task_id, key, None if index == '-' else int(index))
    if type_name == 'int':
        value = CommValue(int(body))
    elif type_name == 'str':
        value = CommValue(_split_escaped(body)[0])
    elif type_name == 'list':
        value = CommValue(tuple(_split_escaped(body, ',')) if body else ())
    else:
        raise ValueError(f"unknown value type '{type_name}'")
    return int(t_ms), comm_key, value


# ----------------------------
# Resolution
# ----------------------------
def _lookup(values, task_id, key, scope):
    if scope is not None and CommKey(task_id, key, scope) in values:
        return values[CommKey(task_id, key, scope)].text()
    if CommKey(task_id, key) in values:
        return values[CommKey(task_id, key)].text()
    # fan-in over a mapped producer reads every index in order
    mapped = sorted((k.map_index, v) for k, v in values.items()
                    if k.task_id == task_id and k.key == key and k.map_index is not None)
    if mapped:
        return ','.join(v.text() for _, v in mapped)
    return None


def resolve(template, values, scope=None, map_value=_MISSING):
    """Replace {task_id.key} and {map_value} placeholders against a store snapshot."""
    def substitute(match):
        if match.group(0) == '{map_value}':
            if map_value is _MISSING:
                raise UnresolvedPlaceholderError(f"{{map_value}} used outside a mapped instance in {template!r}")
            return str(map_value)
        found = _lookup(values, match.group(1), match.group(2), scope)
        if found is None:
            raise UnresolvedPlaceholderError(f"unresolved placeholder {match.group(0)} in {template!r}")
        return found

    return PLACEHOLDER.sub(substitute, template)


# ----------------------------
# Store
# ----------------------------
class CommStore:
    """Write-once keyed store; writes are serialised and journaled."""

    def __init__(self, journal_path=None):
        self._values = {}
        self._lock = threading.Lock()
        self.journal_path = journal_path
        if journal_path is not None:
            open(journal_path, 'a', encoding='utf-8', newline='\n').close()

    def publish(self, key, value, producer_state='RUNNING', t_ms=0):
        if producer_state != 'RUNNING':
            raise ContractViolation(f"{key.task_id} published while {producer_state}")
        if not isinstance(value, CommValue):
            value = CommValue.wrap(value)
        with self._lock:
            if key in self._values:
                raise DuplicateKeyError(f"duplicate publish to {key.task_id}.{key.key} index {key.map_index}")
            self._values[key] = value
            if self.journal_path is not None:
                with open(self.journal_path, 'a', encoding='utf-8', newline='\n') as journal:
                    journal.write(encode_record(t_ms, key, value) + '\n')
        logger.debug(f"Published {key.task_id}.{key.key}[{key.map_index}] = {value.text()[:80]}")

    def get(self, key):
        with self._lock:
            return self._values.get(key)

    def snapshot(self):
        with self._lock:
            return dict(self._values)

    def resolve(self, template, scope=None, map_value=_MISSING):
        with self._lock:
            return resolve(template, self._values, scope, map_value)

    def __len__(self):
        with self._lock:
            return len(self._values)


def load_journal(path):
    """Rebuild a store snapshot (without journaling) from a run.comm file."""
    store = CommStore()
    with open(path, 'r', encoding='utf-8', newline='\n') as journal:
        for line in journal:
            if line.strip():
                _, key, value = decode_record(line)
                store.publish(key, value)
    return store
