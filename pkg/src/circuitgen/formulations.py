"""The five circuit serialization grammars and their parsers.

Styles:
  NF   - wordy instruction text, connections as parenthesized net lists
  CF   - terse canonical text, <sep>-separated fields
  CFDC - CF with the duty cycle rendered as a 5-token one-hot
  PM   - adjacency-matrix stream with numbers as 6-decimal digit pieces
  FM   - PM with numbers entering as <num> tokens carrying float payloads

`serialize` produces one full stream per style; `build_training_pair`
derives encoder/decoder views (plain seq2seq for the text styles, span
masking for PM/FM); `parse` inverts `serialize` on its image and recovers
circuits from arbitrary streams when they are grammar- and structure-valid.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

from .circuit import (
    DUTY_OPTIONS,
    Circuit,
    CircuitError,
    Net,
    Spec,
    Terminal,
    Vertex,
    canonical_form,
    validate_structure,
)
from . import vocab as V


class Style(str, Enum):
    NF = "NF"
    CF = "CF"
    CFDC = "CFDC"
    PM = "PM"
    FM = "FM"

    @property
    def is_matrix(self) -> bool:
        return self in (Style.PM, Style.FM)


class Task(str, Enum):
    EDGE = "edge_gen"
    TOPOLOGY = "topology_gen"


class SerializationError(ValueError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


class ParseError(ValueError):
    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


@dataclass(frozen=True)
class TokenStream:
    """Tokens with an optional float payload on <num> positions (FM only)."""

    items: tuple[tuple[str, Optional[float]], ...]

    def __post_init__(self):
        for tok, payload in self.items:
            if (payload is not None) != (tok == V.NUM):
                raise ValueError(f"payload presence must match <num>: {tok}")
            if payload is not None and not _finite(payload):
                raise ValueError("non-finite payload")

    @staticmethod
    def of(*tokens: str) -> "TokenStream":
        return TokenStream(tuple((t, None) for t in tokens))

    @staticmethod
    def from_tokens(tokens: Sequence[str], payloads: Optional[Sequence[Optional[float]]] = None):
        if payloads is None:
            payloads = [None] * len(tokens)
        return TokenStream(tuple(zip(tokens, payloads)))

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(t for t, _ in self.items)

    @property
    def payloads(self) -> tuple[Optional[float], ...]:
        return tuple(p for _, p in self.items)

    def __len__(self) -> int:
        return len(self.items)

    def __add__(self, other: "TokenStream") -> "TokenStream":
        return TokenStream(self.items + other.items)

    def to_text(self) -> str:
        out = []
        for tok, payload in self.items:
            out.append(f"<num={payload!r}>" if payload is not None else tok)
        return " ".join(out)

    @staticmethod
    def from_text(text: str) -> "TokenStream":
        items = []
        for piece in text.split():
            if piece.startswith("<num="):
                items.append((V.NUM, float(piece[5:-1])))
            else:
                items.append((piece, None))
        return TokenStream(tuple(items))


@dataclass(frozen=True)
class TrainingPair:
    encoder_input: TokenStream
    decoder_target: TokenStream
    style: Style
    task: Task


def _finite(x: float) -> bool:
    return x == x and abs(x) != float("inf")


def vocabulary() -> tuple[str, ...]:
    return V.vocabulary()


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def serialize(circuit: Circuit, spec: Spec, style: Style) -> TokenStream:
    """Render the full stream for a canonical (possibly device-permuted) circuit."""
    if circuit.duty is None:
        raise SerializationError("MISSING_DUTY")
    _require_presentable(circuit)
    parts = _parts(circuit, spec, style)
    if style.is_matrix:
        body = (
            parts["prefix"]
            + TokenStream.of(V.SEP)
            + parts["onehot"]
            + TokenStream.of(V.SEP)
            + parts["vertices"]
            + TokenStream.of(V.SEP)
            + parts["adjacency"]
        )
    else:
        body = parts["instruction"] + TokenStream.of(V.SEP) + parts["target"]
    return body + TokenStream.of(V.EOS)


def build_training_pair(circuit: Circuit, spec: Spec, style: Style, task: Task) -> TrainingPair:
    """Split or mask the serialized stream into an encoder/decoder pair."""
    if circuit.duty is None:
        raise SerializationError("MISSING_DUTY")
    _require_presentable(circuit)
    parts = _parts(circuit, spec, style)
    m0, m1, m2 = (TokenStream.of(t) for t in V.MASK_TOKENS)
    sep = TokenStream.of(V.SEP)
    eos = TokenStream.of(V.EOS)

    if style.is_matrix:
        if task == Task.EDGE:
            enc = parts["prefix"] + sep + m0 + sep + parts["vertices"] + sep + m1 + eos
            tgt = m0 + parts["onehot"] + m1 + parts["adjacency"] + eos
        else:
            enc = parts["prefix"] + sep + m0 + sep + m1 + sep + m2 + eos
            tgt = m0 + parts["onehot"] + m1 + parts["vertices"] + m2 + parts["adjacency"] + eos
    else:
        if task == Task.EDGE:
            enc = parts["instruction"] + eos
            tgt = parts["target"] + eos
        else:
            enc = parts["instruction_no_vertices"] + eos
            tgt = parts["vertices_intro"] + parts["target"] + eos
    return TrainingPair(enc, tgt, style, task)


def _parts(circuit: Circuit, spec: Spec, style: Style) -> dict[str, TokenStream]:
    num = lambda x: _render_number(x, style)
    sep = TokenStream.of(V.SEP)
    onehot = _render_onehot(circuit.duty)
    vertices = TokenStream.of(*(v.name for v in circuit.vertices))

    if style.is_matrix:
        prefix = TokenStream.of(V.DUTY_OPTIONS_TOKEN)
        for d in DUTY_OPTIONS:
            prefix = prefix + num(d)
        prefix = prefix + sep + TokenStream.of(V.VOLTAGE) + num(spec.ratio)
        prefix = prefix + sep + TokenStream.of(V.EFFICIENCY) + num(spec.efficiency)
        return {
            "prefix": prefix,
            "onehot": onehot,
            "vertices": vertices,
            "adjacency": _render_adjacency(circuit),
        }

    groups = _render_groups(circuit)
    names = [v.name for v in circuit.vertices]
    if style == Style.NF:
        instruction = TokenStream.of(
            "generate", "a", "circuit", "with", "vertices", *names,
            "that", "has", "voltage", "conversion", "ratio",
        ) + num(spec.ratio) + TokenStream.of("and", "efficiency") + num(spec.efficiency)
        instruction_no_vertices = TokenStream.of(
            "generate", "a", "circuit", "that", "has", "voltage", "conversion", "ratio",
        ) + num(spec.ratio) + TokenStream.of("and", "efficiency") + num(spec.efficiency)
        duty_part = TokenStream.of("duty", "cycle") + num(circuit.duty)
        target = duty_part + TokenStream.of("connections") + groups
        vertices_intro = TokenStream.of("vertices", *names)
    else:
        instruction = (
            TokenStream.of("vertices", *names)
            + sep + TokenStream.of("voltage") + num(spec.ratio)
            + sep + TokenStream.of("efficiency") + num(spec.efficiency)
        )
        instruction_no_vertices = (
            TokenStream.of("voltage") + num(spec.ratio)
            + sep + TokenStream.of("efficiency") + num(spec.efficiency)
        )
        duty_part = (
            TokenStream.of("duty") + onehot
            if style == Style.CFDC
            else TokenStream.of("duty") + num(circuit.duty)
        )
        target = duty_part + sep + groups
        vertices_intro = TokenStream.of("vertices", *names) + sep
    return {
        "instruction": instruction,
        "instruction_no_vertices": instruction_no_vertices,
        "target": target,
        "vertices_intro": vertices_intro,
    }


def _render_number(x: float, style: Style) -> TokenStream:
    if style == Style.FM:
        return TokenStream(((V.NUM, float(x)),))
    text = f"{x:.6f}"
    return TokenStream.of(*text)


def _render_onehot(duty: float) -> TokenStream:
    toks = [V.SELECT if abs(duty - d) < 1e-9 else V.UNSELECT for d in DUTY_OPTIONS]
    return TokenStream.of(*toks)


def _render_adjacency(circuit: Circuit) -> TokenStream:
    rows = []
    for v in circuit.vertices:
        cells = []
        for net in circuit.nets:
            pins = {t.pin for t in net.terminals if t.vertex == v}
            if not pins:
                cells.append(V.NO_EDGE)
            elif pins == {0}:
                cells.append(V.EDGE_1)
            elif pins == {1}:
                cells.append(V.EDGE_2)
            else:
                cells.append(V.BOTH_EDGES)
        rows.append(cells)
    tokens: list[str] = []
    for i, row in enumerate(rows):
        if i:
            tokens.append(V.SEP)
        tokens.extend(row)
    return TokenStream.of(*tokens)


def _render_groups(circuit: Circuit) -> TokenStream:
    pos = {v: i for i, v in enumerate(circuit.vertices)}
    tokens: list[str] = []
    for net in circuit.nets:
        tokens.append("(")
        for t in sorted(net.terminals, key=lambda t: (pos[t.vertex], t.pin)):
            tokens.append(t.vertex.name)
        tokens.append(")")
    return TokenStream.of(*tokens)


def _require_presentable(circuit: Circuit):
    """Serialize accepts canonical circuits and their device-order permutations."""
    try:
        canon = canonical_form(circuit)
    except CircuitError as exc:
        raise SerializationError("NOT_CANONICAL", f"invalid circuit: {exc}") from exc
    resorted = sorted(circuit.devices, key=lambda v: v.sort_key())
    names = [v.name for v in circuit.ports] + [v.name for v in resorted]
    if names != [v.name for v in canon.vertices] or [v.name for v in circuit.vertices[:3]] != [
        "VIN",
        "VOUT",
        "GND",
    ]:
        raise SerializationError("NOT_CANONICAL", "device naming differs from canonical form")
    if [n.membership() for n in circuit.nets] != [n.membership() for n in canon.nets]:
        raise SerializationError("NOT_CANONICAL", "net order or pin labels differ from canonical form")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


class _Cursor:
    def __init__(self, stream: TokenStream):
        self.items = stream.items
        self.i = 0

    def done(self) -> bool:
        return self.i >= len(self.items)

    def peek(self) -> Optional[str]:
        return self.items[self.i][0] if not self.done() else None

    def next(self) -> tuple[str, Optional[float]]:
        if self.done():
            raise ParseError("SYNTAX", "unexpected end of stream")
        item = self.items[self.i]
        self.i += 1
        return item

    def expect(self, *tokens: str):
        for tok in tokens:
            got, _ = self.next()
            if got != tok:
                raise ParseError("SYNTAX", f"expected {tok!r}, got {got!r} at {self.i - 1}")

    def read_number(self, style: Style) -> float:
        """Fixed-point numbers: [-] digits '.' and exactly six decimals.

        The fixed fraction width is what keeps back-to-back numbers (as in
        the PM duty-option prefix) unambiguous.
        """
        if style == Style.FM:
            tok, payload = self.next()
            if tok != V.NUM or payload is None:
                raise ParseError("SYNTAX", f"expected <num>, got {tok!r}")
            return payload
        digits = []
        if self.peek() == "-":
            digits.append(self.next()[0])
        while self.peek() is not None and self.peek() in "0123456789":
            digits.append(self.next()[0])
            if self.peek() == ".":
                break
        if not digits or digits[-1] == "-":
            raise ParseError("SYNTAX", f"expected a number, got {self.peek()!r}")
        tok, _ = self.next()
        if tok != ".":
            raise ParseError("SYNTAX", f"expected '.', got {tok!r}")
        digits.append(".")
        for _ in range(6):
            tok, _ = self.next()
            if tok not in "0123456789":
                raise ParseError("SYNTAX", f"expected a decimal digit, got {tok!r}")
            digits.append(tok)
        return float("".join(digits))

    def read_vertex_names(self, stop: set[str]) -> list[str]:
        names = []
        while not self.done() and self.peek() not in stop:
            tok, _ = self.next()
            if tok not in V.VERTEX_TOKENS:
                raise ParseError("SYNTAX", f"expected a vertex token, got {tok!r}")
            names.append(tok)
        if not names:
            raise ParseError("SYNTAX", "empty vertex list")
        if len(set(names)) != len(names):
            raise ParseError("SYNTAX", "duplicate vertex in listing")
        return names

    def read_onehot(self) -> float:
        toks = []
        for _ in range(5):
            tok, _ = self.next()
            if tok not in (V.SELECT, V.UNSELECT):
                raise ParseError("SYNTAX", f"expected <select>/<unselect>, got {tok!r}")
            toks.append(tok)
        if toks.count(V.SELECT) != 1:
            raise ParseError("BAD_ONEHOT", f"{toks.count(V.SELECT)} selected duty options")
        return DUTY_OPTIONS[toks.index(V.SELECT)]


def parse(stream: TokenStream, style: Style) -> tuple[Circuit, Spec]:
    """Inverse of `serialize`: recover (canonical circuit, spec) or fail."""
    cur = _Cursor(stream)
    if style.is_matrix:
        circuit, spec = _parse_matrix(cur, style)
    else:
        circuit, spec = _parse_text(cur, style)
    if not cur.done():
        raise ParseError("SYNTAX", f"trailing tokens after <eos> at {cur.i}")
    report = validate_structure(circuit)
    if not report.is_valid:
        raise ParseError("STRUCTURE", ",".join(report.reasons))
    return canonical_form(circuit), spec


def _parse_matrix(cur: _Cursor, style: Style) -> tuple[Circuit, Spec]:
    cur.expect(V.DUTY_OPTIONS_TOKEN)
    for d in DUTY_OPTIONS:
        got = cur.read_number(style)
        if abs(got - d) > 1e-9:
            raise ParseError("SYNTAX", f"duty option {got} out of place (expected {d})")
    cur.expect(V.SEP, V.VOLTAGE)
    ratio = cur.read_number(style)
    cur.expect(V.SEP, V.EFFICIENCY)
    eff = cur.read_number(style)
    cur.expect(V.SEP)
    duty = cur.read_onehot()
    cur.expect(V.SEP)
    names = cur.read_vertex_names(stop={V.SEP})
    cur.expect(V.SEP)

    rows: list[list[str]] = [[]]
    while True:
        tok, _ = cur.next()
        if tok == V.EOS:
            break
        if tok == V.SEP:
            rows.append([])
        elif tok in V.EDGE_TOKENS:
            rows[-1].append(tok)
        else:
            raise ParseError("SYNTAX", f"unexpected token {tok!r} in adjacency block")

    if len(rows) != len(names):
        raise ParseError("ROW_LENGTH_MISMATCH", f"{len(rows)} rows for {len(names)} vertices")
    width = len(rows[0])
    if width == 0 or any(len(r) != width for r in rows):
        raise ParseError("ROW_LENGTH_MISMATCH", "ragged adjacency rows")

    vertices = tuple(Vertex.parse(n) for n in names)
    for name, row in zip(names, rows):
        v = Vertex.parse(name)
        cols0 = [j for j, c in enumerate(row) if c in (V.EDGE_1, V.BOTH_EDGES)]
        cols1 = [j for j, c in enumerate(row) if c in (V.EDGE_2, V.BOTH_EDGES)]
        if len(cols0) > 1 or len(cols1) > 1:
            raise ParseError("SYNTAX", f"pin attached to several nets in row {name}")
        if v.kind.is_port and cols1:
            raise ParseError("SYNTAX", f"port row {name} carries <edge_2>/<both_edges>")
        if cols1 and (not cols0 or cols1[0] < cols0[0]):
            raise ParseError("PIN_ORDER", f"<edge_2> precedes <edge_1> in row {name}")

    nets = []
    for j in range(width):
        terms = []
        for name, row in zip(names, rows):
            v = Vertex.parse(name)
            if row[j] in (V.EDGE_1, V.BOTH_EDGES):
                terms.append(Terminal(v, 0))
            if row[j] in (V.EDGE_2, V.BOTH_EDGES):
                terms.append(Terminal(v, 1))
        nets.append(Net(tuple(terms)))

    circuit = _build_circuit(vertices, tuple(nets), duty)
    return circuit, Spec(ratio, eff)


def _parse_text(cur: _Cursor, style: Style) -> tuple[Circuit, Spec]:
    if style == Style.NF:
        cur.expect("generate", "a", "circuit", "with", "vertices")
        names = cur.read_vertex_names(stop={"that"})
        cur.expect("that", "has", "voltage", "conversion", "ratio")
        ratio = cur.read_number(style)
        cur.expect("and", "efficiency")
        eff = cur.read_number(style)
        cur.expect(V.SEP, "duty", "cycle")
        duty = _snap_duty(cur.read_number(style))
        cur.expect("connections")
    else:
        cur.expect("vertices")
        names = cur.read_vertex_names(stop={V.SEP})
        cur.expect(V.SEP, "voltage")
        ratio = cur.read_number(style)
        cur.expect(V.SEP, "efficiency")
        eff = cur.read_number(style)
        cur.expect(V.SEP, "duty")
        duty = cur.read_onehot() if style == Style.CFDC else _snap_duty(cur.read_number(style))
        cur.expect(V.SEP)

    groups = _read_groups(cur)
    vertices = tuple(Vertex.parse(n) for n in names)
    nets = _nets_from_groups(vertices, groups)
    circuit = _build_circuit(vertices, nets, duty)
    return circuit, Spec(ratio, eff)


def _read_groups(cur: _Cursor) -> list[list[str]]:
    groups = []
    while True:
        tok, _ = cur.next()
        if tok == V.EOS:
            break
        if tok != "(":
            raise ParseError("SYNTAX", f"expected '(' or <eos>, got {tok!r}")
        members = []
        while cur.peek() != ")":
            tok, _ = cur.next()
            if tok not in V.VERTEX_TOKENS:
                raise ParseError("SYNTAX", f"expected a vertex token in net, got {tok!r}")
            members.append(tok)
        cur.expect(")")
        groups.append(members)
    if not groups:
        raise ParseError("SYNTAX", "no connections listed")
    return groups


def _nets_from_groups(vertices: tuple[Vertex, ...], groups: list[list[str]]) -> tuple[Net, ...]:
    """Assign pins by order of appearance: a device's first net gets pin 0."""
    known = {v.name: v for v in vertices}
    used_pins: dict[str, int] = {}
    nets = []
    for members in groups:
        terms = []
        for name in members:
            v = known.get(name)
            if v is None:
                raise ParseError("STRUCTURE", f"connection references undeclared vertex {name}")
            pin = used_pins.get(name, 0)
            if pin >= v.kind.n_pins:
                raise ParseError("STRUCTURE", f"{name} appears in too many nets")
            used_pins[name] = pin + 1
            terms.append(Terminal(v, pin))
        nets.append(Net(tuple(terms)))
    return tuple(nets)


def _build_circuit(vertices: tuple[Vertex, ...], nets: tuple[Net, ...], duty: float) -> Circuit:
    try:
        return Circuit(vertices, nets, duty)
    except CircuitError as exc:
        raise ParseError("STRUCTURE", str(exc)) from exc


def _snap_duty(x: float) -> float:
    for d in DUTY_OPTIONS:
        if abs(x - d) < 1e-9:
            return d
    raise ParseError("SYNTAX", f"duty {x} is not one of {DUTY_OPTIONS}")


# ---------------------------------------------------------------------------
# Reassembling generations for evaluation
# ---------------------------------------------------------------------------


def parse_generation(
    encoder_input: TokenStream, generated: TokenStream, style: Style, task: Task
) -> tuple[Circuit, Spec]:
    """Recover a circuit from a model generation plus its encoder query."""
    full = reassemble(encoder_input, generated, style, task)
    return parse(full, style)


def reassemble(
    encoder_input: TokenStream, generated: TokenStream, style: Style, task: Task
) -> TokenStream:
    """Reconstruct the full serialized stream from an encoder/decoder pair."""
    gen_items = list(generated.items)
    if gen_items and gen_items[-1][0] == V.EOS:
        gen_items = gen_items[:-1]

    if style.is_matrix:
        spans: dict[str, list] = {}
        current: Optional[str] = None
        for item in gen_items:
            if item[0] in V.MASK_TOKENS:
                current = item[0]
                if current in spans:
                    raise ParseError("SYNTAX", f"sentinel {current} repeated")
                spans[current] = []
            elif current is None:
                raise ParseError("SYNTAX", "generation does not start with a sentinel")
            else:
                spans[current].append(item)
        out = []
        for item in encoder_input.items:
            if item[0] in V.MASK_TOKENS:
                if item[0] not in spans:
                    raise ParseError("SYNTAX", f"generation missing span for {item[0]}")
                out.extend(spans.pop(item[0]))
            else:
                out.append(item)
        if spans:
            raise ParseError("SYNTAX", f"generation has extra sentinels: {sorted(spans)}")
        return TokenStream(tuple(out))

    enc_items = list(encoder_input.items)
    if enc_items and enc_items[-1][0] == V.EOS:
        enc_items = enc_items[:-1]

    if task == Task.EDGE:
        items = enc_items + [(V.SEP, None)] + gen_items + [(V.EOS, None)]
        return TokenStream(tuple(items))

    # Topology task: the generation opens with the vertex listing, which has
    # to be spliced back into the instruction.
    gen = TokenStream(tuple(gen_items) + ((V.EOS, None),))
    cur = _Cursor(gen)
    cur.expect("vertices")
    stop = {"duty"} if style == Style.NF else {V.SEP}
    names = cur.read_vertex_names(stop=stop)
    if style != Style.NF:
        cur.expect(V.SEP)
    rest = list(gen.items[cur.i:-1])  # drop the temporary <eos>

    if style == Style.NF:
        head = ["generate", "a", "circuit", "with", "vertices", *names]
        enc_cur = _Cursor(TokenStream(tuple(enc_items) + ((V.EOS, None),)))
        enc_cur.expect("generate", "a", "circuit")
        spec_part = enc_items[enc_cur.i:]
        items = [(t, None) for t in head] + spec_part + [(V.SEP, None)] + rest + [(V.EOS, None)]
    else:
        head = ["vertices", *names, V.SEP]
        items = [(t, None) for t in head] + enc_items + [(V.SEP, None)] + rest + [(V.EOS, None)]
    return TokenStream(tuple(items))
