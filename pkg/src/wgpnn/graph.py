"""Quadruple ingestion, graph slices, Markov-window histories and filter indexes.

Timestamps stay integers in raw dataset units; log-scaling of time offsets
happens in the model. Everything here is immutable once built.
"""

from __future__ import annotations

import bisect
import io
import math
from collections import defaultdict
from dataclasses import dataclass, field
from functools import reduce
from typing import Iterable, NamedTuple, TextIO

from wgpnn.errors import DataFormatError, UnknownTokenError

SLICE_MAGIC = "#WGPNN-SLICES"
SLICE_VERSION = 1


class Quadruple(NamedTuple):
    subject: int
    predicate: int
    object: int
    timestamp: int


@dataclass(frozen=True)
class GraphSlice:
    timestamp: int
    events: tuple[tuple[int, int, int], ...]

    def __len__(self):
        return len(self.events)


@dataclass(frozen=True)
class HistoryWindow:
    """Up to ``window_size`` past (timestamp, neighbor objects) entries, oldest first."""

    pair: tuple[int, int]
    entries: tuple[tuple[int, tuple[int, ...]], ...]
    window_size: int

    def __len__(self):
        return len(self.entries)

    @property
    def last_time(self):
        return self.entries[-1][0] if self.entries else None


def _open_text(source):
    if isinstance(source, str):
        return io.StringIO(source)
    return source


def parse_quadruples(
    source: str | TextIO,
    entities: dict[str, int] | None = None,
    predicates: dict[str, int] | None = None,
    frozen: bool = False,
) -> tuple[list[Quadruple], dict[str, int], dict[str, int]]:
    """Parse tab-separated ``subject predicate object timestamp`` lines.

    New tokens get dense ids in first-seen order. Supplied dictionaries are
    copied and extended, unless ``frozen`` is set, in which case an unseen
    token raises :class:`UnknownTokenError`. A fifth column is ignored, as
    are blank lines and lines starting with ``#``. The result is stably
    sorted by timestamp.
    """
    entities = dict(entities or {})
    predicates = dict(predicates or {})
    quads = []

    def lookup(table, token, kind):
        idx = table.get(token)
        if idx is None:
            if frozen:
                raise UnknownTokenError(token, table, kind)
            idx = table[token] = len(table)
        return idx

    for lineno, line in enumerate(_open_text(source), start=1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) not in (4, 5):
            raise DataFormatError(f"expected 4 or 5 tab-separated fields, got {len(fields)}", lineno)
        s, p, o, t = (f.strip() for f in fields[:4])
        try:
            timestamp = int(t)
        except ValueError:
            raise DataFormatError(f"timestamp {t!r} is not an integer", lineno) from None
        if timestamp < 0:
            raise DataFormatError(f"negative timestamp {timestamp}", lineno)
        try:
            quads.append(
                Quadruple(
                    lookup(entities, s, "entity"),
                    lookup(predicates, p, "predicate"),
                    lookup(entities, o, "entity"),
                    timestamp,
                )
            )
        except UnknownTokenError as err:
            raise DataFormatError(str(err), lineno) from err
    quads.sort(key=lambda q: q.timestamp)
    return quads, entities, predicates


def add_reciprocals(quads: Iterable[Quadruple], num_predicates: int) -> list[Quadruple]:
    """Append inverse events ``(o, p + num_predicates, s, t)`` and re-sort by time."""
    quads = list(quads)
    inverse = [Quadruple(q.object, q.predicate + num_predicates, q.subject, q.timestamp) for q in quads]
    out = quads + inverse
    out.sort(key=lambda q: q.timestamp)
    return out


def build_slices(quadruples: Iterable[Quadruple]) -> list[GraphSlice]:
    """Group time-sorted quadruples into one slice per distinct timestamp."""
    grouped: dict[int, list] = {}
    for s, p, o, t in quadruples:
        grouped.setdefault(t, []).append((s, p, o))
    return [GraphSlice(t, tuple(grouped[t])) for t in sorted(grouped)]


def history_window(
    slices: list[GraphSlice], pair: tuple[int, int], query_time: int, M: int
) -> HistoryWindow:
    """Scan ``slices`` for the ``M`` most recent ones before ``query_time`` where ``pair`` was active."""
    if M < 1:
        raise ValueError("window size must be positive")
    s, p = pair
    entries = []
    for sl in reversed(slices):
        if sl.timestamp >= query_time:
            continue
        objs = sorted({o for (es, ep, o) in sl.events if es == s and ep == p})
        if objs:
            entries.append((sl.timestamp, tuple(objs)))
            if len(entries) == M:
                break
    return HistoryWindow((s, p), tuple(reversed(entries)), M)


class FilterIndex:
    """Objects seen with each ``(subject, predicate, timestamp)`` key; absent keys map to the empty set."""

    def __init__(self, table=None):
        self._table: dict[tuple[int, int, int], frozenset[int]] = dict(table or {})

    def __getitem__(self, key):
        return self._table.get(tuple(key), frozenset())

    def __contains__(self, key):
        return tuple(key) in self._table

    def __len__(self):
        return len(self._table)

    def __eq__(self, other):
        return isinstance(other, FilterIndex) and self._table == other._table

    def items(self):
        return self._table.items()


def build_filter_index(*splits: Iterable[Quadruple]) -> FilterIndex:
    table = defaultdict(set)
    for split in splits:
        for s, p, o, t in split:
            table[(s, p, t)].add(o)
    return FilterIndex({k: frozenset(v) for k, v in table.items()})


def time_unit(timestamps: Iterable[int]) -> int:
    """Base time unit: gcd of the gaps between distinct timestamps (1 if there are none)."""
    ts = sorted(set(timestamps))
    gaps = [b - a for a, b in zip(ts, ts[1:])]
    return reduce(math.gcd, gaps, 0) or 1


@dataclass
class GraphStore:
    """Indexed view over a set of quadruples answering window queries in O(log n)."""

    quadruples: list[Quadruple]
    slices: list[GraphSlice] = field(init=False)

    def __post_init__(self):
        self.quadruples = sorted(self.quadruples, key=lambda q: q.timestamp)
        self.slices = build_slices(self.quadruples)
        by_pair: dict[tuple[int, int], dict[int, set]] = defaultdict(lambda: defaultdict(set))
        for s, p, o, t in self.quadruples:
            by_pair[(s, p)][t].add(o)
        self._times = {}
        self._objects = {}
        for pair, per_time in by_pair.items():
            ts = sorted(per_time)
            self._times[pair] = ts
            self._objects[pair] = [tuple(sorted(per_time[t])) for t in ts]

    def window(self, pair: tuple[int, int], query_time: int, M: int) -> HistoryWindow:
        pair = (int(pair[0]), int(pair[1]))
        ts = self._times.get(pair)
        if not ts:
            return HistoryWindow(pair, (), M)
        hi = bisect.bisect_left(ts, query_time)
        lo = max(0, hi - M)
        objs = self._objects[pair]
        return HistoryWindow(pair, tuple((ts[i], objs[i]) for i in range(lo, hi)), M)

    @property
    def timestamps(self):
        return [sl.timestamp for sl in self.slices]


def write_dictionary(path, table: dict[str, int]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for token, idx in sorted(table.items(), key=lambda kv: kv[1]):
            fh.write(f"{token}\t{idx}\n")


def read_dictionary(path) -> dict[str, int]:
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                token, idx = line.rsplit("\t", 1)
                table[token] = int(idx)
            except ValueError:
                raise DataFormatError("expected 'token<TAB>id'", lineno) from None
    return table


def write_slices(path, slices: list[GraphSlice]):
    """Write slices as ``timestamp subject predicate object`` rows under a versioned magic header."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{SLICE_MAGIC}\tv{SLICE_VERSION}\n")
        for sl in slices:
            for s, p, o in sl.events:
                fh.write(f"{sl.timestamp}\t{s}\t{p}\t{o}\n")


def read_slices(path) -> list[GraphSlice]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[0] != SLICE_MAGIC:
            raise DataFormatError("not a slice store (bad magic header)", 1)
        if header[1:] != [f"v{SLICE_VERSION}"]:
            raise DataFormatError(f"unsupported slice store version {header[1:]}", 1)
        quads = []
        for lineno, line in enumerate(fh, start=2):
            try:
                t, s, p, o = map(int, line.split("\t"))
            except ValueError:
                raise DataFormatError("expected 4 integer fields", lineno) from None
            quads.append(Quadruple(s, p, o, t))
    return build_slices(quads)


def write_quadruples(path, quads: Iterable[Quadruple]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for q in quads:
            fh.write(f"{q.subject}\t{q.predicate}\t{q.object}\t{q.timestamp}\n")


def read_quadruples(path) -> list[Quadruple]:
    quads = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                quads.append(Quadruple(*map(int, line.split("\t"))))
            except (TypeError, ValueError):
                raise DataFormatError("expected 4 integer fields", lineno) from None
    return quads
