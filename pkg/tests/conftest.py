import pytest

from circuitgen.circuit import Circuit, Net, Terminal, Vertex, VertexKind


def _v(name: str) -> Vertex:
    return Vertex.parse(name)


def _net(*terms: tuple[str, int]) -> Net:
    return Net(tuple(Terminal(_v(n), p) for n, p in terms))


@pytest.fixture
def buck() -> Circuit:
    """The reference buck converter: VIN-Sa0-(Sb0 to GND, L0 to VOUT)."""
    return Circuit(
        vertices=tuple(_v(n) for n in ("VIN", "VOUT", "GND", "Sa0", "Sb0", "L0")),
        nets=(
            _net(("VIN", 0), ("Sa0", 0)),
            _net(("Sa0", 1), ("Sb0", 0), ("L0", 0)),
            _net(("Sb0", 1), ("GND", 0)),
            _net(("L0", 1), ("VOUT", 0)),
        ),
        duty=0.5,
    )


@pytest.fixture
def boost() -> Circuit:
    """Boost converter: VIN-L0-mid, Sa0 mid-GND, Sb0 mid-VOUT."""
    return Circuit(
        vertices=tuple(_v(n) for n in ("VIN", "VOUT", "GND", "Sa0", "Sb0", "L0")),
        nets=(
            _net(("VIN", 0), ("L0", 0)),
            _net(("L0", 1), ("Sa0", 0), ("Sb0", 0)),
            _net(("Sa0", 1), ("GND", 0)),
            _net(("Sb0", 1), ("VOUT", 0)),
        ),
        duty=0.5,
    )


def make_net(*terms: tuple[str, int]) -> Net:
    return _net(*terms)


def make_vertex(name: str) -> Vertex:
    return _v(name)
