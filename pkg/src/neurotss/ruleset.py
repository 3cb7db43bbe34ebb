"""Rules, packets and rulesets: parsing, matching, oracle lookup, traffic, features."""

from __future__ import annotations

import ipaddress
import re
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence, TextIO

import numpy as np

Kind = Literal["prefix", "range", "masked"]
Packet = tuple[int, ...]

CHUNK_BITS = 16


class ParseError(ValueError):
    """Malformed ruleset or trace input; carries the 1-based line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class FieldKind:
    kind: Kind
    width: int
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("prefix", "range", "masked"):
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.width < 1 or self.width > 64:
            raise ValueError(f"bad field width {self.width}")

    @property
    def max_value(self) -> int:
        return (1 << self.width) - 1


FIVE_TUPLE: tuple[FieldKind, ...] = (
    FieldKind("prefix", 32, "sip"),
    FieldKind("prefix", 32, "dip"),
    FieldKind("range", 16, "sport"),
    FieldKind("range", 16, "dport"),
    FieldKind("masked", 8, "proto"),
)


# Conditions ###################################################################

@dataclass(frozen=True)
class Prefix:
    value: int
    length: int

    def contains(self, v: int, width: int) -> bool:
        shift = width - self.length
        return (v >> shift) == (self.value >> shift)

    def bounds(self, width: int) -> tuple[int, int]:
        return self.value, self.value | ((1 << (width - self.length)) - 1)


@dataclass(frozen=True)
class Range:
    lo: int
    hi: int

    def contains(self, v: int, width: int) -> bool:
        return self.lo <= v <= self.hi

    def bounds(self, width: int) -> tuple[int, int]:
        return self.lo, self.hi


@dataclass(frozen=True)
class Masked:
    value: int
    mask: int

    def contains(self, v: int, width: int) -> bool:
        return (v & self.mask) == self.value

    def bounds(self, width: int) -> tuple[int, int]:
        return self.value, self.value | (((1 << width) - 1) & ~self.mask)


Condition = Prefix | Range | Masked


def _check_condition(fk: FieldKind, cond: Condition) -> None:
    top = fk.max_value
    if fk.kind == "prefix":
        if not isinstance(cond, Prefix):
            raise ValueError(f"field {fk.name or fk.kind} expects a prefix")
        if not 0 <= cond.length <= fk.width:
            raise ValueError(f"prefix length {cond.length} outside [0, {fk.width}]")
        if not 0 <= cond.value <= top:
            raise ValueError(f"prefix value {cond.value} outside field")
        if cond.value & ((1 << (fk.width - cond.length)) - 1):
            raise ValueError("prefix value has bits set below the prefix length")
    elif fk.kind == "range":
        if not isinstance(cond, Range):
            raise ValueError(f"field {fk.name or fk.kind} expects a range")
        if not 0 <= cond.lo <= cond.hi <= top:
            raise ValueError(f"bad range {cond.lo}:{cond.hi}")
    else:
        if not isinstance(cond, Masked):
            raise ValueError(f"field {fk.name or fk.kind} expects a value/mask")
        if not (0 <= cond.mask <= top and 0 <= cond.value <= top):
            raise ValueError("masked value outside field")
        if cond.value & ~cond.mask:
            raise ValueError("masked value has bits outside the mask")


@dataclass(frozen=True)
class Rule:
    id: int
    priority: int
    conditions: tuple[Condition, ...]
    action: int = 0

    def prefix_lengths(self, schema: Sequence[FieldKind]) -> tuple[int, ...]:
        """Prefix length per prefix-kind field (the rule's own tuple signature)."""
        return tuple(c.length for fk, c in zip(schema, self.conditions) if fk.kind == "prefix")


@dataclass
class Ruleset:
    schema: tuple[FieldKind, ...]
    rules: list[Rule] = field(default_factory=list)

    def __post_init__(self):
        self.schema = tuple(self.schema)
        self._by_id: dict[int, Rule] = {}
        seen_prio: set[int] = set()
        for r in self.rules:
            validate_rule(self.schema, r)
            if r.id in self._by_id:
                raise ValueError(f"duplicate rule id {r.id}")
            if r.priority in seen_prio:
                raise ValueError(f"duplicate priority {r.priority}")
            self._by_id[r.id] = r
            seen_prio.add(r.priority)

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)

    def get(self, rule_id: int) -> Rule:
        return self._by_id[rule_id]


def validate_rule(schema: Sequence[FieldKind], rule: Rule) -> None:
    if len(rule.conditions) != len(schema):
        raise ValueError(f"rule {rule.id}: {len(rule.conditions)} conditions for {len(schema)} fields")
    for fk, c in zip(schema, rule.conditions):
        _check_condition(fk, c)


# Parsing ######################################################################

_BITS_RE = re.compile(r"^[01]*\**$")


def _parse_prefix(tok: str, width: int) -> Prefix:
    if _BITS_RE.match(tok) and len(tok) == width and width != 32:
        # ternary notation used by narrow fixtures, e.g. "00*"
        bits = tok.rstrip("*")
        length = len(bits)
        value = int(bits, 2) << (width - length) if bits else 0
        return Prefix(value, length)
    if "/" not in tok:
        raise ValueError(f"bad prefix token {tok!r}")
    addr, _, plen = tok.partition("/")
    length = int(plen)
    if not 0 <= length <= width:
        raise ValueError(f"prefix length {length} outside [0, {width}]")
    if width == 32 and "." in addr:
        value = int(ipaddress.IPv4Address(addr))
    else:
        value = int(addr, 0)
    if not 0 <= value < (1 << width):
        raise ValueError(f"prefix value {addr!r} outside field")
    value &= ~((1 << (width - length)) - 1)
    return Prefix(value, length)


def _parse_masked(tok: str) -> Masked:
    val, sep, mask = tok.partition("/")
    if not sep:
        raise ValueError(f"bad value/mask token {tok!r}")
    v, m = int(val, 0), int(mask, 0)
    return Masked(v & m, m)


def parse_rule_tokens(tokens: list[str], schema: Sequence[FieldKind]) -> tuple[Condition, ...]:
    """Decode one rule's field tokens; trailing unknown tokens are ignored."""
    conds: list[Condition] = []
    pos = 0
    for fk in schema:
        if fk.kind == "range":
            if pos + 2 < len(tokens) and tokens[pos + 1] == ":":
                lo, hi = int(tokens[pos], 0), int(tokens[pos + 2], 0)
                pos += 3
            elif pos < len(tokens) and ":" in tokens[pos]:
                a, _, b = tokens[pos].partition(":")
                lo, hi = int(a, 0), int(b, 0)
                pos += 1
            else:
                raise ValueError(f"expected range for field {fk.name or pos}")
            cond: Condition = Range(lo, hi)
        else:
            if pos >= len(tokens):
                raise ValueError(f"missing field {fk.name or pos}")
            tok = tokens[pos]
            pos += 1
            cond = _parse_prefix(tok, fk.width) if fk.kind == "prefix" else _parse_masked(tok)
        _check_condition(fk, cond)
        conds.append(cond)
    return tuple(conds)


def parse_ruleset(text: str | bytes | Iterable[str], schema: Sequence[FieldKind] = FIVE_TUPLE) -> Ruleset:
    """Parse ClassBench-format rule lines; priority and id follow line order."""
    if isinstance(text, bytes):
        text = text.decode()
    lines = text.splitlines() if isinstance(text, str) else list(text)
    rules: list[Rule] = []
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        if not line.startswith("@"):
            raise ParseError(lineno, "rule line must start with '@'")
        try:
            conds = parse_rule_tokens(line[1:].split(), schema)
        except ValueError as e:
            raise ParseError(lineno, str(e)) from None
        idx = len(rules)
        rules.append(Rule(id=idx, priority=idx, conditions=conds, action=idx))
    return Ruleset(tuple(schema), rules)


def format_condition(fk: FieldKind, cond: Condition) -> str:
    if isinstance(cond, Prefix):
        if fk.width == 32:
            return f"{ipaddress.IPv4Address(cond.value)}/{cond.length}"
        bits = format(cond.value >> (fk.width - cond.length), f"0{cond.length}b") if cond.length else ""
        return bits + "*" * (fk.width - cond.length)
    if isinstance(cond, Range):
        return f"{cond.lo} : {cond.hi}"
    hexw = (fk.width + 3) // 4
    return f"0x{cond.value:0{hexw}X}/0x{cond.mask:0{hexw}X}"


def format_rule(schema: Sequence[FieldKind], rule: Rule) -> str:
    return "@" + "\t".join(format_condition(fk, c) for fk, c in zip(schema, rule.conditions))


def serialize_ruleset(ruleset: Ruleset) -> str:
    """Inverse of parse_ruleset for rulesets whose ids/priorities follow line order."""
    ordered = sorted(ruleset.rules, key=lambda r: r.priority)
    return "".join(format_rule(ruleset.schema, r) + "\n" for r in ordered)


# Matching #####################################################################

def matches(rule: Rule, packet: Sequence[int], schema: Sequence[FieldKind]) -> bool:
    for fk, c, v in zip(schema, rule.conditions, packet):
        if not c.contains(v, fk.width):
            return False
    return True


def linear_scan(ruleset: Ruleset, packet: Sequence[int]) -> tuple[int, int] | None:
    """Reference lookup: (rule id, priority) of the best matching rule, or None."""
    best: Rule | None = None
    for r in ruleset.rules:
        if (best is None or r.priority < best.priority) and matches(r, packet, ruleset.schema):
            best = r
    return None if best is None else (best.id, best.priority)


class RuleMatrix:
    """Rules flattened to per-field [lo, hi] plus value/mask arrays for batched scans.

    Rows are sorted by ascending priority so the first matching row wins.
    """

    def __init__(self, schema: Sequence[FieldKind], rules: Iterable[Rule]):
        ordered = sorted(rules, key=lambda r: r.priority)
        n, f = len(ordered), len(schema)
        self.ids = np.array([r.id for r in ordered], dtype=np.int64)
        self.priorities = np.array([r.priority for r in ordered], dtype=np.int64)
        self.lo = np.zeros((n, f), dtype=np.int64)
        self.hi = np.zeros((n, f), dtype=np.int64)
        self.mask = np.zeros((n, f), dtype=np.int64)
        self.mval = np.zeros((n, f), dtype=np.int64)
        for i, r in enumerate(ordered):
            for j, (fk, c) in enumerate(zip(schema, r.conditions)):
                if isinstance(c, Masked):
                    self.lo[i, j], self.hi[i, j] = 0, fk.max_value
                    self.mask[i, j], self.mval[i, j] = c.mask, c.value
                else:
                    self.lo[i, j], self.hi[i, j] = c.bounds(fk.width)

    def scan(self, packets: np.ndarray, chunk: int = 512) -> np.ndarray:
        """Winning rule id per packet row, -1 where nothing matches."""
        packets = np.asarray(packets, dtype=np.int64).reshape(len(packets), -1)
        out = np.full(len(packets), -1, dtype=np.int64)
        if len(self.ids) == 0:
            return out
        for s in range(0, len(packets), chunk):
            p = packets[s:s + chunk, None, :]
            hit = ((p >= self.lo) & (p <= self.hi) & ((p & self.mask) == self.mval)).all(axis=2)
            first = hit.argmax(axis=1)
            found = hit[np.arange(len(first)), first]
            out[s:s + chunk] = np.where(found, self.ids[first], -1)
        return out


def linear_scan_batch(ruleset: Ruleset, packets: Sequence[Sequence[int]]) -> np.ndarray:
    return RuleMatrix(ruleset.schema, ruleset.rules).scan(np.asarray(packets, dtype=np.int64))


# Traffic ######################################################################

def sample_inside(rule: Rule, schema: Sequence[FieldKind], rng: np.random.Generator) -> Packet:
    vals = []
    for fk, c in zip(schema, rule.conditions):
        if isinstance(c, Masked):
            free = fk.max_value & ~c.mask
            vals.append(c.value | (int(rng.integers(0, fk.max_value + 1)) & free))
        else:
            lo, hi = c.bounds(fk.width)
            vals.append(int(rng.integers(lo, hi + 1)))
    return tuple(vals)


@dataclass
class Trace:
    packets: list[Packet]
    truth: list[int | None]

    def __len__(self) -> int:
        return len(self.packets)


def generate_traffic(ruleset: Ruleset, n: int, seed: int = 0) -> Trace:
    """Pick a rule uniformly, sample a point in its box; truth is the linear-scan winner."""
    if n and not ruleset.rules:
        raise ValueError("cannot generate traffic for an empty ruleset")
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(ruleset.rules), size=n)
    packets = [sample_inside(ruleset.rules[i], ruleset.schema, rng) for i in picks]
    if not packets:
        return Trace([], [])
    won = linear_scan_batch(ruleset, packets)
    return Trace(packets, [int(w) if w >= 0 else None for w in won])


def read_trace(src: TextIO | str, schema: Sequence[FieldKind]) -> Trace:
    lines = src.splitlines() if isinstance(src, str) else src.read().splitlines()
    f = len(schema)
    packets: list[Packet] = []
    truth: list[int | None] = []
    for lineno, line in enumerate(lines, 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) not in (f, f + 1):
            raise ParseError(lineno, f"expected {f} or {f + 1} columns, got {len(parts)}")
        try:
            vals = [int(x) for x in parts]
        except ValueError:
            raise ParseError(lineno, "non-integer trace value") from None
        for fk, v in zip(schema, vals):
            if not 0 <= v <= fk.max_value:
                raise ParseError(lineno, f"value {v} outside field {fk.name or fk.kind}")
        packets.append(tuple(vals[:f]))
        truth.append(vals[f] if len(vals) > f else None)
    return Trace(packets, truth)


def write_trace(trace: Trace, dst: TextIO) -> None:
    for p, t in zip(trace.packets, trace.truth):
        cols = [str(v) for v in p]
        if t is not None:
            cols.append(str(t))
        dst.write(" ".join(cols) + "\n")


# Features #####################################################################

def chunk_widths(schema: Sequence[FieldKind]) -> list[int]:
    """Bit width of every 16-bit-or-narrower chunk, in feature order."""
    widths = []
    for fk in schema:
        rem = fk.width
        while rem > 0:
            # high chunk first; a leftover that is not a multiple of 16 leads
            w = rem % CHUNK_BITS or CHUNK_BITS
            widths.append(w)
            rem -= w
    return widths


def segment_raw(packets: np.ndarray | Sequence[Sequence[int]], schema: Sequence[FieldKind]) -> np.ndarray:
    """Integer chunks, shape (n, k), before normalization."""
    p = np.asarray(packets, dtype=np.int64).reshape(-1, len(schema))
    cols = []
    for j, fk in enumerate(schema):
        rem = fk.width
        while rem > 0:
            w = rem % CHUNK_BITS or CHUNK_BITS
            rem -= w
            cols.append((p[:, j] >> rem) & ((1 << w) - 1))
    return np.stack(cols, axis=1) if cols else np.zeros((len(p), 0), dtype=np.int64)


def segment_batch(packets: np.ndarray | Sequence[Sequence[int]], schema: Sequence[FieldKind]) -> np.ndarray:
    scale = np.array([float(1 << w) for w in chunk_widths(schema)])
    return (segment_raw(packets, schema) / scale).astype(np.float32)


def segment_header(packet: Sequence[int], schema: Sequence[FieldKind]) -> np.ndarray:
    """Feature vector of one packet: chunk values scaled to [0, 1) as float32."""
    return segment_batch([packet], schema)[0]


# Fixtures and synthetic rulesets ##############################################

TABLE1_SCHEMA: tuple[FieldKind, ...] = (FieldKind("prefix", 3, "x"), FieldKind("prefix", 3, "y"))

TABLE1_TEXT = """\
@000 011
@000 101
@00* 11*
@110 ***
@111 ***
@*** 011
@*** 010
@0** 0**
"""


def table1_ruleset() -> Ruleset:
    """The eight-rule, two 3-bit field example; ids/priorities 0..7 stand for R1..R8."""
    return parse_ruleset(TABLE1_TEXT, TABLE1_SCHEMA)


def table1_universe() -> list[Packet]:
    return [(x, y) for x in range(8) for y in range(8)]


DEFAULT_SIGNATURES: tuple[tuple[int, int], ...] = (
    (32, 32), (24, 32), (32, 24), (24, 24), (16, 32), (32, 16), (16, 24),
    (24, 16), (16, 16), (8, 32), (32, 8), (8, 16), (0, 32), (32, 0), (0, 24), (0, 0),
)

_PORTS = [(0, 65535), (0, 65535), (0, 65535), (53, 53), (80, 80), (443, 443), (1024, 65535), (0, 1023)]
_PROTOS = [(0x06, 0xFF), (0x06, 0xFF), (0x11, 0xFF), (0x00, 0x00)]


def generate_ruleset(n: int, seed: int = 0,
                     signatures: Sequence[tuple[int, int]] = DEFAULT_SIGNATURES,
                     cover_all: bool = True) -> Ruleset:
    """Small ClassBench-flavoured 5-tuple ruleset with SIP/DIP lengths drawn from `signatures`.

    With cover_all, the first len(signatures) rules walk the signature list so
    every signature yields a tuple (when n allows).
    """
    rng = np.random.default_rng(seed)
    # shared address pools make rules overlap the way real ACLs do
    pool = rng.integers(0, 1 << 32, size=max(4, n // 8 + 1), dtype=np.int64)
    rules = []
    for i in range(n):
        if cover_all and i < len(signatures):
            sl, dl = signatures[i]
        else:
            sl, dl = signatures[int(rng.integers(len(signatures)))]

        def addr(length: int) -> Prefix:
            base = int(pool[rng.integers(len(pool))]) ^ int(rng.integers(0, 1 << 8))
            if rng.random() < 0.5:
                base = int(rng.integers(0, 1 << 32))
            return Prefix(base & ~((1 << (32 - length)) - 1) & 0xFFFFFFFF, length)

        def ports() -> Range:
            if rng.random() < 0.15:
                lo = int(rng.integers(0, 65536))
                return Range(lo, int(rng.integers(lo, 65536)))
            return Range(*_PORTS[int(rng.integers(len(_PORTS)))])

        proto = _PROTOS[int(rng.integers(len(_PROTOS)))]
        conds = (addr(sl), addr(dl), ports(), ports(), Masked(*proto))
        rules.append(Rule(id=i, priority=i, conditions=conds, action=i))
    return Ruleset(FIVE_TUPLE, rules)
