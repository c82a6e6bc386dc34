"""Trace ingestion and preprocessing of syscall boot sequences.

strace logs are parsed into :class:`SyscallEvent` streams, mapped through an
:class:`Alphabet` to integer symbols, and reduced by collapsing runs of the
same call and truncating to a maximum boot length.
"""

from __future__ import annotations

import hashlib
import io
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

UNKNOWN = "<unknown>"
UNKNOWN_INDEX = 0
DEFAULT_MAX_LEN = 2500
LABELS = ("legitimate", "malicious", "unknown")


class StraceParseError(ValueError):
    def __init__(self, line_no: int, line: str, reason: str):
        super().__init__(f"line {line_no}: {reason}: {line!r}")
        self.line_no = line_no
        self.line = line
        self.reason = reason


class AlphabetError(ValueError):
    pass


@dataclass(frozen=True)
class SyscallEvent:
    name: str
    ordinal: int
    pid: int | None = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("syscall name must be non-empty")


@dataclass
class ParseDiagnostics:
    """Line accounting for one parse.

    ``events + skipped + blank_lines`` always equals ``lines``.
    """

    lines: int = 0
    events: int = 0
    blank_lines: int = 0
    signal_lines: int = 0
    exit_lines: int = 0
    resumed_lines: int = 0
    orphan_resumed: int = 0
    notice_lines: int = 0
    malformed_lines: int = 0
    unfinished: int = 0

    @property
    def skipped(self) -> int:
        return (self.signal_lines + self.exit_lines + self.resumed_lines
                + self.notice_lines + self.malformed_lines)


# [pid  1234] / 1234 prefix, then optional -t/-tt/-ttt/-r timestamp
_PREFIX_RE = re.compile(
    r"^(?:\[pid\s+(?P<pid1>\d+)\]|(?P<pid2>\d+))?\s*"
    r"(?:(?:\d{2}:\d{2}:\d{2}(?:\.\d+)?|\d+\.\d+)\s+)?"
)
_SIGNAL_RE = re.compile(r"^---\s+SIG\w+.*---\s*$")
_EXIT_RE = re.compile(r"^\+\+\+\s+(?:exited with|killed by)\b.*\+\+\+\s*$")
_RESUMED_RE = re.compile(r"^<\.\.\.\s+(?P<name>[A-Za-z_][\w]*|\?\?\?)\s+resumed>")
_CALL_RE = re.compile(r"^(?P<name>[A-Za-z_][\w]*)\(")
_UNFINISHED_RE = re.compile(r"<unfinished\s*\.\.\.[^>]*>\s*$")
_COMPLETE_RE = re.compile(r"\)\s*=\s*(?:-?\d+|0x[0-9a-fA-F]+|\?)")
_NOTICE_RE = re.compile(r"^strace:\s")


def parse_strace(stream: TextIO | Iterable[str] | str, strict: bool = False,
                 diagnostics: ParseDiagnostics | None = None) -> list[SyscallEvent]:
    """Parse strace output into syscall events in capture order.

    Interrupted calls (``<unfinished ...>``) become one event at the position
    where they started; the matching ``<... name resumed>`` line is skipped.
    Signal banners, exit banners and ``strace:`` notices are skipped. Lines
    matching nothing are malformed: counted and skipped, or raised as
    :class:`StraceParseError` when ``strict`` is set.
    """
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    diag = diagnostics if diagnostics is not None else ParseDiagnostics()
    events: list[SyscallEvent] = []
    pending: dict[tuple[int | None, str], int] = {}

    for line_no, raw in enumerate(stream, start=1):
        diag.lines += 1
        line = raw.rstrip("\r\n")
        if not line.strip():
            diag.blank_lines += 1
            continue
        if _NOTICE_RE.match(line):
            diag.notice_lines += 1
            continue
        m = _PREFIX_RE.match(line)
        pid_s = m.group("pid1") or m.group("pid2")
        pid = int(pid_s) if pid_s else None
        body = line[m.end():]

        if _SIGNAL_RE.match(body):
            diag.signal_lines += 1
            continue
        if _EXIT_RE.match(body):
            diag.exit_lines += 1
            continue
        rm = _RESUMED_RE.match(body)
        if rm:
            diag.resumed_lines += 1
            key = (pid, rm.group("name"))
            if pending.get(key):
                pending[key] -= 1
            else:
                diag.orphan_resumed += 1
            continue
        cm = _CALL_RE.match(body)
        if cm and _UNFINISHED_RE.search(body):
            key = (pid, cm.group("name"))
            pending[key] = pending.get(key, 0) + 1
            diag.unfinished += 1
        elif not (cm and _COMPLETE_RE.search(body)):
            if strict:
                raise StraceParseError(line_no, line, "unrecognised strace line")
            diag.malformed_lines += 1
            continue
        events.append(SyscallEvent(cm.group("name"), len(events), pid))
        diag.events += 1
    return events


@dataclass(frozen=True)
class Alphabet:
    """Ordered syscall names; symbol indices are positions, UNKNOWN is 0."""

    names: tuple[str, ...] = ()

    def __post_init__(self):
        seen = set()
        for name in self.names:
            if name == UNKNOWN:
                raise AlphabetError(f"{UNKNOWN!r} is reserved")
            if name in seen:
                raise AlphabetError(f"duplicate syscall name {name!r}")
            seen.add(name)

    @cached_property
    def index(self) -> dict[str, int]:
        return {UNKNOWN: UNKNOWN_INDEX, **{n: i for i, n in enumerate(self.names, start=1)}}

    @property
    def size(self) -> int:
        return len(self.names) + 1

    def __len__(self) -> int:
        return self.size

    def symbol(self, name: str) -> int:
        return self.index.get(name, UNKNOWN_INDEX)

    def name(self, symbol: int) -> str:
        if symbol == UNKNOWN_INDEX:
            return UNKNOWN
        return self.names[symbol - 1]

    @cached_property
    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.names).encode()).hexdigest()[:16]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(n + "\n" for n in self.names), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Alphabet":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return build_alphabet([ln.strip() for ln in lines if ln.strip()])


def build_alphabet(names: Sequence[str]) -> Alphabet:
    return Alphabet(tuple(names))


@dataclass(frozen=True)
class BootSequence:
    symbols: tuple[int, ...]
    app_id: str = ""
    device_id: str = ""
    label: str = "unknown"
    preprocessed: bool = False
    alphabet: Alphabet | None = field(default=None, compare=False, repr=False)
    sample_id: str = field(default="", compare=False)

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label must be one of {LABELS}, got {self.label!r}")
        if self.alphabet is not None and self.symbols:
            top = max(self.symbols)
            if top >= self.alphabet.size or min(self.symbols) < 0:
                raise AlphabetError(f"symbol {top} outside alphabet of size {self.alphabet.size}")

    def __len__(self) -> int:
        return len(self.symbols)

    @cached_property
    def array(self) -> np.ndarray:
        return np.asarray(self.symbols, dtype=np.int64)

    @cached_property
    def fingerprint(self) -> str:
        return hashlib.sha1(self.array.tobytes()).hexdigest()

    def names(self) -> list[str]:
        if self.alphabet is None:
            raise AlphabetError("sequence has no alphabet attached")
        return decode(self.symbols, self.alphabet)

    def with_symbols(self, symbols: Iterable[int], **changes) -> "BootSequence":
        return replace(self, symbols=tuple(symbols), **changes)


@dataclass
class EncodeDiagnostics:
    unknown_names: int = 0
    unknown: dict[str, int] = field(default_factory=dict)


def encode(events: Iterable[SyscallEvent | str], alphabet: Alphabet,
           diagnostics: EncodeDiagnostics | None = None, **meta) -> BootSequence:
    """Map events (or bare names) to symbols; unseen names become UNKNOWN."""
    diag = diagnostics if diagnostics is not None else EncodeDiagnostics()
    index = alphabet.index
    symbols = []
    for ev in events:
        name = ev if isinstance(ev, str) else ev.name
        sym = index.get(name)
        if sym is None or name == UNKNOWN:
            diag.unknown_names += 1
            diag.unknown[name] = diag.unknown.get(name, 0) + 1
            sym = UNKNOWN_INDEX
        symbols.append(sym)
    return BootSequence(tuple(symbols), alphabet=alphabet, preprocessed=False, **meta)


def decode(symbols: Iterable[int], alphabet: Alphabet) -> list[str]:
    return [alphabet.name(s) for s in symbols]


def collapse_repeats(seq):
    """Replace every maximal run of equal symbols by a single symbol.

    Accepts a plain sequence (returns a list) or a :class:`BootSequence`.
    """
    if isinstance(seq, BootSequence):
        return seq.with_symbols(collapse_repeats(seq.symbols))
    out = []
    for s in seq:
        if not out or out[-1] != s:
            out.append(s)
    return out


def truncate(seq, max_len: int):
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if isinstance(seq, BootSequence):
        return seq.with_symbols(seq.symbols[:max_len])
    return list(seq[:max_len])


def preprocess(seq, max_len: int | None = DEFAULT_MAX_LEN):
    """Collapse runs, then keep the first ``max_len`` symbols."""
    out = collapse_repeats(seq)
    if max_len is not None:
        out = truncate(out, max_len)
    if isinstance(out, BootSequence):
        out = replace(out, preprocessed=True)
    return out


# -- sequence files -----------------------------------------------------------

_HEADER_RE = re.compile(r"^#app=(?P<app>\S*) device=(?P<device>\S*) label=(?P<label>\S+)\s*$")


def format_sequence(seq: BootSequence) -> str:
    header = f"#app={seq.app_id} device={seq.device_id} label={seq.label}\n"
    return header + "".join(n + "\n" for n in seq.names())


def write_sequence(seq: BootSequence, path: str | Path) -> None:
    Path(path).write_text(format_sequence(seq), encoding="utf-8")


def parse_sequence(text: str, alphabet: Alphabet, sample_id: str = "",
                   diagnostics: EncodeDiagnostics | None = None) -> BootSequence:
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty sequence file")
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise ValueError(f"bad sequence header: {lines[0]!r}")
    names = [ln.strip() for ln in lines[1:] if ln.strip()]
    return encode(names, alphabet, diagnostics, app_id=m.group("app"),
                  device_id=m.group("device"), label=m.group("label"),
                  sample_id=sample_id)


def read_sequence(path: str | Path, alphabet: Alphabet,
                  diagnostics: EncodeDiagnostics | None = None) -> BootSequence:
    path = Path(path)
    return parse_sequence(path.read_text(encoding="utf-8"), alphabet,
                          sample_id=path.stem, diagnostics=diagnostics)

