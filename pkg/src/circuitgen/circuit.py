"""Hypergraph circuit model: validation, canonical form, and isomorphism keys.

A circuit is a hypergraph whose vertices are three single-terminal ports
(VIN, VOUT, GND) plus two-terminal devices (Sa/Sb switches, capacitors,
inductors), and whose hyperedges ("nets") partition the terminals into
electrical nodes.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

DUTY_OPTIONS = (0.1, 0.3, 0.5, 0.7, 0.9)

# Vocabulary (and hence the whole pipeline) supports at most 6 devices per kind.
MAX_DEVICES_PER_KIND = 6

_VERTEX_NAME_RE = re.compile(r"^(VIN|VOUT|GND)$|^(Sa|Sb|C|L)([0-9])$")


class CircuitError(ValueError):
    """Raised for contract violations; `code` is a stable machine-readable tag."""

    def __init__(self, code: str, message: str = ""):
        super().__init__(message or code)
        self.code = code


class VertexKind(str, Enum):
    VIN = "VIN"
    VOUT = "VOUT"
    GND = "GND"
    SA = "Sa"
    SB = "Sb"
    C = "C"
    L = "L"

    @property
    def is_port(self) -> bool:
        return self in _PORT_KINDS

    @property
    def n_pins(self) -> int:
        return 1 if self.is_port else 2


_PORT_KINDS = (VertexKind.VIN, VertexKind.VOUT, VertexKind.GND)
# Canonical device-kind order: Sa < Sb < C < L.
_DEVICE_KINDS = (VertexKind.SA, VertexKind.SB, VertexKind.C, VertexKind.L)
_KIND_RANK = {k: i for i, k in enumerate(_PORT_KINDS + _DEVICE_KINDS)}


@dataclass(frozen=True)
class Vertex:
    kind: VertexKind
    index: int = 0

    def __post_init__(self):
        if self.kind.is_port and self.index != 0:
            raise CircuitError("INVALID_CIRCUIT", f"port {self.kind.value} must have index 0")
        if not 0 <= self.index < MAX_DEVICES_PER_KIND:
            raise CircuitError("INVALID_CIRCUIT", f"device index {self.index} out of range")

    @property
    def name(self) -> str:
        return self.kind.value if self.kind.is_port else f"{self.kind.value}{self.index}"

    @staticmethod
    def parse(name: str) -> "Vertex":
        m = _VERTEX_NAME_RE.match(name)
        if not m:
            raise CircuitError("INVALID_CIRCUIT", f"not a vertex name: {name!r}")
        if m.group(1):
            return Vertex(VertexKind(m.group(1)))
        return Vertex(VertexKind(m.group(2)), int(m.group(3)))

    def sort_key(self) -> tuple:
        return (_KIND_RANK[self.kind], self.index)


@dataclass(frozen=True)
class Terminal:
    vertex: Vertex
    pin: int

    def __post_init__(self):
        if not 0 <= self.pin < self.vertex.kind.n_pins:
            raise CircuitError(
                "INVALID_CIRCUIT", f"pin {self.pin} out of range for {self.vertex.name}"
            )


@dataclass(frozen=True)
class Net:
    """One hyperedge: the set of terminals tied to a single electrical node.

    Terminal order is normalized at construction so equality and hashing see
    the set, not the listing order.
    """

    terminals: tuple[Terminal, ...]

    def __post_init__(self):
        ordered = tuple(sorted(self.terminals, key=lambda t: (*t.vertex.sort_key(), t.pin)))
        object.__setattr__(self, "terminals", ordered)

    def vertices(self) -> set[Vertex]:
        return {t.vertex for t in self.terminals}

    def membership(self) -> frozenset[tuple[str, int]]:
        return frozenset((t.vertex.name, t.pin) for t in self.terminals)


@dataclass(frozen=True)
class Circuit:
    vertices: tuple[Vertex, ...]
    nets: tuple[Net, ...]
    duty: Optional[float] = None

    def __post_init__(self):
        names = [v.name for v in self.vertices]
        if len(set(names)) != len(names):
            raise CircuitError("INVALID_CIRCUIT", "duplicate vertices")
        for kind in _PORT_KINDS:
            if sum(1 for v in self.vertices if v.kind == kind) != 1:
                raise CircuitError("INVALID_CIRCUIT", f"need exactly one {kind.value}")
        known = set(self.vertices)
        for net in self.nets:
            for t in net.terminals:
                if t.vertex not in known:
                    raise CircuitError("INVALID_CIRCUIT", f"net references unknown {t.vertex.name}")
        if self.duty is not None and not any(abs(self.duty - d) < 1e-12 for d in DUTY_OPTIONS):
            raise CircuitError("INVALID_CIRCUIT", f"duty {self.duty} not in {DUTY_OPTIONS}")

    @property
    def ports(self) -> tuple[Vertex, ...]:
        return tuple(v for v in self.vertices if v.kind.is_port)

    @property
    def devices(self) -> tuple[Vertex, ...]:
        return tuple(v for v in self.vertices if not v.kind.is_port)

    def terminals(self) -> list[Terminal]:
        return [Terminal(v, p) for v in self.vertices for p in range(v.kind.n_pins)]

    def with_duty(self, duty: Optional[float]) -> "Circuit":
        return Circuit(self.vertices, self.nets, duty)

    def to_json_dict(self) -> dict:
        return {
            "vertices": [v.name for v in self.vertices],
            "nets": [
                [[t.vertex.name, t.pin] for t in _sorted_terminals(self, net)]
                for net in self.nets
            ],
            "duty": self.duty,
        }

    @staticmethod
    def from_json_dict(obj: dict) -> "Circuit":
        vertices = tuple(Vertex.parse(n) for n in obj["vertices"])
        nets = tuple(
            Net(tuple(Terminal(Vertex.parse(n), int(p)) for n, p in raw))
            for raw in obj["nets"]
        )
        return Circuit(vertices, nets, obj.get("duty"))


def _sorted_terminals(circuit: Circuit, net: Net) -> list[Terminal]:
    pos = {v: i for i, v in enumerate(circuit.vertices)}
    return sorted(net.terminals, key=lambda t: (pos[t.vertex], t.pin))


@dataclass(frozen=True)
class Spec:
    """A performance target: voltage conversion ratio and power efficiency."""

    ratio: float
    efficiency: float


@dataclass(frozen=True)
class ValidationReport:
    status: str  # "valid" | "invalid"
    reasons: tuple[str, ...] = ()

    @property
    def is_valid(self) -> bool:
        return self.status == "valid"


def validate_structure(circuit: Circuit) -> ValidationReport:
    """Check structural soundness, returning every applicable reason code.

    Codes: FLOATING_TERMINAL, SINGLETON_NET, SELF_LOOP_DEVICE,
    PORT_UNCONNECTED, VIN_GND_SHORT, DISCONNECTED.
    """
    reasons = []

    seen: dict[Terminal, int] = {}
    for net in circuit.nets:
        for t in net.terminals:
            seen[t] = seen.get(t, 0) + 1
    expected = circuit.terminals()
    if any(seen.get(t, 0) == 0 for t in expected):
        reasons.append("FLOATING_TERMINAL")
    if any(count > 1 for count in seen.values()):
        # A terminal on two nets is not a partition; treated as floating wiring.
        if "FLOATING_TERMINAL" not in reasons:
            reasons.append("FLOATING_TERMINAL")

    if any(len(net.terminals) < 2 for net in circuit.nets):
        reasons.append("SINGLETON_NET")

    for dev in circuit.devices:
        for net in circuit.nets:
            pins = {t.pin for t in net.terminals if t.vertex == dev}
            if len(pins) == 2:
                reasons.append("SELF_LOOP_DEVICE")
                break

    net_of = {t: net for net in circuit.nets for t in net.terminals}
    for port in circuit.ports:
        term = Terminal(port, 0)
        net = net_of.get(term)
        if net is None or not any(not t.vertex.kind.is_port for t in net.terminals):
            reasons.append("PORT_UNCONNECTED")

    vin_net = net_of.get(Terminal(Vertex(VertexKind.VIN), 0))
    gnd_net = net_of.get(Terminal(Vertex(VertexKind.GND), 0))
    if vin_net is not None and vin_net is gnd_net:
        reasons.append("VIN_GND_SHORT")

    if not _incidence_connected(circuit):
        reasons.append("DISCONNECTED")

    reasons = tuple(dict.fromkeys(reasons))
    return ValidationReport("valid" if not reasons else "invalid", reasons)


def _incidence_connected(circuit: Circuit) -> bool:
    """Connectivity of the bipartite vertex/net incidence graph."""
    if not circuit.vertices:
        return True
    nodes: list = list(circuit.vertices) + list(range(len(circuit.nets)))
    adj: dict = {n: [] for n in nodes}
    for j, net in enumerate(circuit.nets):
        for t in net.terminals:
            adj[t.vertex].append(j)
            adj[j].append(t.vertex)
    stack = [nodes[0]]
    visited = {nodes[0]}
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in visited:
                visited.add(nxt)
                stack.append(nxt)
    return len(visited) == len(nodes)


# ---------------------------------------------------------------------------
# Canonicalization
#
# The canonical representative of an isomorphism class is found by exact
# minimization: enumerate every within-kind ordering of the devices, derive
# net order and pin labels from each ordering, and keep the ordering whose
# serialized signature is lexicographically smallest.  Same-kind devices are
# interchangeable, so two circuits get equal keys exactly when they are
# isomorphic under device relabeling, pin swaps, and net reordering.
# ---------------------------------------------------------------------------


def canonical_form(circuit: Circuit) -> Circuit:
    """Rewrite a valid circuit into its unique canonical presentation.

    Ports come first (VIN, VOUT, GND), devices follow grouped Sa, Sb, C, L
    with indices reassigned; nets are sorted by their canonical key and each
    device's pin 0 attaches to the earliest of its two nets. Idempotent.
    """
    _, canon = _canonicalize(circuit)
    return canon


def canonical_key(circuit: Circuit) -> str:
    """Isomorphism-invariant key: equal iff circuits are isomorphic."""
    key, _ = _canonicalize(circuit)
    return key


def permute_vertices(circuit: Circuit, perm: Sequence[int]) -> Circuit:
    """Relist devices in a new order (ports stay pinned at positions 0-2).

    `perm` maps new device positions to old ones. The hypergraph itself is
    untouched, so validation status and canonical key are preserved.
    """
    devices = circuit.devices
    if sorted(perm) != list(range(len(devices))):
        raise CircuitError("BAD_PERMUTATION", f"not a permutation of {len(devices)} devices")
    ordered_ports = tuple(
        next(v for v in circuit.vertices if v.kind == k) for k in _PORT_KINDS
    )
    new_vertices = ordered_ports + tuple(devices[p] for p in perm)
    return Circuit(new_vertices, circuit.nets, circuit.duty)


def _canonicalize(circuit: Circuit) -> tuple[str, Circuit]:
    report = validate_structure(circuit)
    if not report.is_valid:
        raise CircuitError("INVALID_CIRCUIT", f"cannot canonicalize: {','.join(report.reasons)}")

    by_kind: dict[VertexKind, list[Vertex]] = {k: [] for k in _DEVICE_KINDS}
    for dev in circuit.devices:
        by_kind[dev.kind].append(dev)

    best_sig = None
    best_ordering = None
    for ordering in _kind_orderings(by_kind):
        sig = _signature(circuit, ordering)
        if best_sig is None or sig < best_sig:
            best_sig = sig
            best_ordering = ordering

    key = _render_key(best_sig)
    canon = _build_canonical(circuit, best_ordering)
    return key, canon


def _kind_orderings(by_kind: dict[VertexKind, list[Vertex]]) -> Iterable[tuple[Vertex, ...]]:
    pools = [itertools.permutations(by_kind[k]) for k in _DEVICE_KINDS]
    for combo in itertools.product(*pools):
        yield tuple(itertools.chain.from_iterable(combo))


def _ordered_nets(circuit: Circuit, ordering: tuple[Vertex, ...]):
    """Net order and pin labels induced by a device ordering.

    Returns a list of nets, each a sorted tuple of (vertex position, pin).
    Nets are first sorted by the positions they touch; pins are then assigned
    (pin 0 to the earlier net) and the sort is repeated on the full terminal
    key until it stops moving.  Position ties can only be automorphic pairs,
    so the fixed point is reached within a couple of passes.
    """
    pos = {v.name: i for i, v in enumerate(_canonical_port_order(circuit) + ordering)}
    net_vsets = [tuple(sorted(pos[v.name] for v in net.vertices())) for net in circuit.nets]
    order = sorted(range(len(circuit.nets)), key=lambda j: net_vsets[j])

    keyed = None
    for _ in range(len(circuit.nets) + 2):
        rank = {j: r for r, j in enumerate(order)}
        pins = _assign_pins(circuit, pos, rank)
        keyed = {j: tuple(sorted(pins[j])) for j in range(len(circuit.nets))}
        new_order = sorted(order, key=lambda j: keyed[j])
        if new_order == order:
            break
        order = new_order
    return [keyed[j] for j in order]


def _assign_pins(circuit: Circuit, pos: dict[str, int], rank: dict[int, int]):
    """Map each net index to its (vertex position, pin) terminals."""
    touching: dict[str, list[int]] = {}
    for j, net in enumerate(circuit.nets):
        for v in net.vertices():
            touching.setdefault(v.name, []).append(j)
    pins: dict[int, list[tuple[int, int]]] = {j: [] for j in range(len(circuit.nets))}
    for v in circuit.vertices:
        nets_here = sorted(touching[v.name], key=lambda j: rank[j])
        for pin, j in enumerate(nets_here):
            pins[j].append((pos[v.name], pin))
    return pins


def _canonical_port_order(circuit: Circuit) -> tuple[Vertex, ...]:
    return tuple(next(v for v in circuit.vertices if v.kind == k) for k in _PORT_KINDS)


def _signature(circuit: Circuit, ordering: tuple[Vertex, ...]) -> tuple:
    kinds = tuple(_KIND_RANK[v.kind] for v in ordering)
    nets = tuple(_ordered_nets(circuit, ordering))
    return (kinds, nets)


def _render_key(sig: tuple) -> str:
    kinds, nets = sig
    kind_names = ",".join((_PORT_KINDS + _DEVICE_KINDS)[k].value for k in kinds)
    net_part = "|".join("-".join(f"{v}.{p}" for v, p in net) for net in nets)
    return f"{kind_names}|{net_part}"


def _build_canonical(circuit: Circuit, ordering: tuple[Vertex, ...]) -> Circuit:
    counters = {k: 0 for k in _DEVICE_KINDS}
    renamed = []
    for dev in ordering:
        renamed.append(Vertex(dev.kind, counters[dev.kind]))
        counters[dev.kind] += 1
    vertices = _canonical_port_order(circuit) + tuple(renamed)

    net_terms = _ordered_nets(circuit, ordering)
    nets = tuple(
        Net(tuple(Terminal(vertices[v], p) for v, p in terms)) for terms in net_terms
    )
    return Circuit(vertices, nets, circuit.duty)
