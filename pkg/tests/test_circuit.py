import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from circuitgen.circuit import (
    Circuit,
    CircuitError,
    Net,
    Terminal,
    Vertex,
    VertexKind,
    canonical_form,
    canonical_key,
    permute_vertices,
    validate_structure,
)
from circuitgen.dataset import sample_topology

from conftest import make_net, make_vertex
from oracles import circuits_isomorphic


class TestVertex:
    def test_parse_roundtrip(self):
        for name in ("VIN", "VOUT", "GND", "Sa0", "Sb3", "C5", "L1"):
            assert Vertex.parse(name).name == name

    def test_ports_are_single_pin(self):
        assert Vertex.parse("VIN").kind.n_pins == 1
        assert Vertex.parse("C0").kind.n_pins == 2

    def test_bad_names_rejected(self):
        for bad in ("Sa6", "X0", "Sa", "vin", "C-1"):
            with pytest.raises(CircuitError):
                Vertex.parse(bad)


class TestValidation:
    def test_buck_is_valid(self, buck):
        report = validate_structure(buck)
        assert report.is_valid
        assert report.reasons == ()

    def test_singleton_gnd_net(self):
        c = Circuit(
            vertices=tuple(make_vertex(n) for n in ("VIN", "VOUT", "GND", "Sa0", "Sb0")),
            nets=(
                make_net(("VIN", 0), ("Sa0", 0)),
                make_net(("Sa0", 1), ("Sb0", 0)),
                make_net(("Sb0", 1), ("VOUT", 0)),
                make_net(("GND", 0)),
            ),
        )
        report = validate_structure(c)
        assert "SINGLETON_NET" in report.reasons
        assert "PORT_UNCONNECTED" in report.reasons

    def test_self_loop_device(self):
        c = Circuit(
            vertices=tuple(make_vertex(n) for n in ("VIN", "VOUT", "GND", "Sa0", "Sb0", "C0")),
            nets=(
                make_net(("VIN", 0), ("Sa0", 0)),
                make_net(("Sa0", 1), ("Sb0", 0), ("VOUT", 0)),
                make_net(("Sb0", 1), ("GND", 0)),
                make_net(("C0", 0), ("C0", 1)),
            ),
        )
        report = validate_structure(c)
        assert "SELF_LOOP_DEVICE" in report.reasons
        # the C0 self-net hangs off the rest of the graph
        assert "DISCONNECTED" in report.reasons

    def test_floating_terminal(self):
        c = Circuit(
            vertices=tuple(make_vertex(n) for n in ("VIN", "VOUT", "GND", "Sa0", "Sb0")),
            nets=(
                make_net(("VIN", 0), ("Sa0", 0)),
                make_net(("Sa0", 1), ("Sb0", 0), ("VOUT", 0)),
                make_net(("GND", 0), ("Sb0", 1)),
            ),
        )
        # all pins used exactly once -> valid
        assert validate_structure(c).is_valid
        c2 = Circuit(c.vertices, c.nets[:-1])
        report = validate_structure(c2)
        assert "FLOATING_TERMINAL" in report.reasons

    def test_vin_gnd_short(self):
        c = Circuit(
            vertices=tuple(make_vertex(n) for n in ("VIN", "VOUT", "GND", "Sa0", "Sb0")),
            nets=(
                make_net(("VIN", 0), ("GND", 0), ("Sa0", 0)),
                make_net(("Sa0", 1), ("Sb0", 0)),
                make_net(("Sb0", 1), ("VOUT", 0)),
            ),
        )
        assert "VIN_GND_SHORT" in validate_structure(c).reasons

    def test_disconnected(self):
        c = Circuit(
            vertices=tuple(make_vertex(n) for n in ("VIN", "VOUT", "GND", "Sa0", "Sb0", "C0", "L0")),
            nets=(
                make_net(("VIN", 0), ("Sa0", 0)),
                make_net(("Sa0", 1), ("Sb0", 0), ("VOUT", 0)),
                make_net(("Sb0", 1), ("GND", 0)),
                make_net(("C0", 0), ("L0", 0)),
                make_net(("C0", 1), ("L0", 1)),
            ),
        )
        assert "DISCONNECTED" in validate_structure(c).reasons


class TestCanonicalForm:
    def test_matches_hand_derived_order(self, buck):
        canon = canonical_form(buck)
        assert [v.name for v in canon.vertices] == ["VIN", "VOUT", "GND", "Sa0", "Sb0", "L0"]
        memberships = [n.membership() for n in canon.nets]
        assert memberships == [
            frozenset({("VIN", 0), ("Sa0", 0)}),
            frozenset({("VOUT", 0), ("L0", 0)}),
            frozenset({("GND", 0), ("Sb0", 0)}),
            frozenset({("Sa0", 1), ("Sb0", 1), ("L0", 1)}),
        ]

    def test_scrambled_listing_same_output(self, buck):
        scrambled = Circuit(
            vertices=(buck.vertices[0], buck.vertices[1], buck.vertices[2],
                      buck.vertices[5], buck.vertices[3], buck.vertices[4]),
            nets=buck.nets,
            duty=buck.duty,
        )
        assert canonical_form(scrambled) == canonical_form(buck)

    def test_pin_swap_same_output(self, buck):
        swapped_nets = []
        for net in buck.nets:
            terms = []
            for t in net.terminals:
                pin = t.pin
                if t.vertex.name == "L0":
                    pin = 1 - pin
                terms.append(Terminal(t.vertex, pin))
            swapped_nets.append(Net(tuple(terms)))
        swapped = Circuit(buck.vertices, tuple(swapped_nets), buck.duty)
        assert canonical_form(swapped) == canonical_form(buck)

    def test_idempotent(self, buck):
        canon = canonical_form(buck)
        assert canonical_form(canon) == canon

    def test_invalid_circuit_rejected(self):
        c = Circuit(
            vertices=tuple(make_vertex(n) for n in ("VIN", "VOUT", "GND", "Sa0", "Sb0")),
            nets=(make_net(("VIN", 0), ("Sa0", 0)),),
        )
        with pytest.raises(CircuitError) as err:
            canonical_form(c)
        assert err.value.code == "INVALID_CIRCUIT"

    def test_idempotence_on_samples(self):
        rng = np.random.default_rng(123)
        for _ in range(100):
            c = sample_topology(int(rng.integers(3, 7)), rng)
            assert canonical_form(c) == c  # sampler output is canonical already


class TestCanonicalKey:
    def test_permutation_invariance(self, buck):
        for perm in itertools.permutations(range(3)):
            assert canonical_key(permute_vertices(buck, list(perm))) == canonical_key(buck)

    def test_role_swap_changes_key(self, buck):
        # same wiring, but Sa and Sb exchanged: a different (non-isomorphic) circuit
        swapped = Circuit(
            vertices=tuple(make_vertex(n) for n in ("VIN", "VOUT", "GND", "Sa0", "Sb0", "L0")),
            nets=(
                make_net(("VIN", 0), ("Sb0", 0)),
                make_net(("Sb0", 1), ("Sa0", 0), ("L0", 0)),
                make_net(("Sa0", 1), ("GND", 0)),
                make_net(("L0", 1), ("VOUT", 0)),
            ),
            duty=buck.duty,
        )
        assert not circuits_isomorphic(buck, swapped)
        assert canonical_key(swapped) != canonical_key(buck)

    def test_agrees_with_bruteforce_oracle(self):
        rng = np.random.default_rng(7)
        circuits = [sample_topology(int(rng.integers(3, 5)), rng) for _ in range(25)]
        for a, b in itertools.combinations(circuits, 2):
            assert circuits_isomorphic(a, b) == (canonical_key(a) == canonical_key(b))

    def test_duty_does_not_affect_key(self, buck):
        assert canonical_key(buck.with_duty(0.1)) == canonical_key(buck.with_duty(0.9))


class TestPermuteVertices:
    def test_identity(self, buck):
        assert permute_vertices(buck, [0, 1, 2]) == buck

    def test_listing_order_changes(self, buck):
        permuted = permute_vertices(buck, [1, 0, 2])
        assert [v.name for v in permuted.vertices] == ["VIN", "VOUT", "GND", "Sb0", "Sa0", "L0"]
        assert permuted.nets == buck.nets

    def test_bad_permutation(self, buck):
        with pytest.raises(CircuitError) as err:
            permute_vertices(buck, [0, 1])
        assert err.value.code == "BAD_PERMUTATION"
        with pytest.raises(CircuitError):
            permute_vertices(buck, [0, 0, 2])

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_key_and_validity_invariant(self, seed):
        rng = np.random.default_rng(seed)
        c = sample_topology(5, rng)
        key = canonical_key(c)
        for _ in range(4):
            perm = list(rng.permutation(len(c.devices)))
            p = permute_vertices(c, perm)
            assert validate_structure(p).is_valid
            assert canonical_key(p) == key

    def test_terminal_partition_preserved(self, buck):
        for perm in itertools.permutations(range(3)):
            p = permute_vertices(buck, list(perm))
            seen = [t for net in p.nets for t in net.terminals]
            assert sorted(seen, key=lambda t: (t.vertex.name, t.pin)) == sorted(
                p.terminals(), key=lambda t: (t.vertex.name, t.pin)
            )


class TestJsonRoundtrip:
    def test_buck_roundtrip(self, buck):
        obj = buck.to_json_dict()
        assert list(obj.keys()) == ["vertices", "nets", "duty"]
        assert Circuit.from_json_dict(obj) == buck

    def test_random_roundtrip(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            c = sample_topology(int(rng.integers(3, 7)), rng).with_duty(0.3)
            assert Circuit.from_json_dict(c.to_json_dict()) == c
