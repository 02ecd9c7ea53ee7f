"""Periodic steady-state simulation of two-phase switched converter circuits.

Each net is a node (GND's net is the reference). One switching period is
discretized with backward-Euler companion models; capacitor voltages and
inductor currents are the state. Within a phase the per-step update is a
fixed affine map, so the whole period composes to x(T) = Phi x(0) + Gamma
and the periodic point solves (I - Phi) x0 = Gamma, after which one replay
of the period yields the output-voltage and power averages.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .circuit import (
    DUTY_OPTIONS,
    Circuit,
    CircuitError,
    Terminal,
    Vertex,
    VertexKind,
    validate_structure,
)

_PHASES = ("I", "II")


@dataclass(frozen=True)
class SimConfig:
    v_source: float = 1.0
    r_source: float = 0.1
    r_load: float = 10.0
    c_val: float = 10e-6
    l_val: float = 100e-6
    r_on: float = 0.05
    r_off: float = 1e7
    r_c_esr: float = 0.01
    r_l_esr: float = 0.05
    f_switch: float = 2e5
    steps_per_period: int = 256
    ss_tol: float = 1e-9

    def __post_init__(self):
        if any(v <= 0 for v in self.__dict__.values()):
            raise ValueError("all simulation parameters must be positive")
        if self.steps_per_period < 16:
            raise ValueError("steps_per_period must be at least 16")

    def replace(self, **kw) -> "SimConfig":
        return SimConfig(**{**self.__dict__, **kw})


@dataclass(frozen=True)
class SimResult:
    ratio: float
    efficiency: float
    status: str  # "valid" | "invalid"
    reason: Optional[str] = None
    residual: float = math.nan
    mean_abs_vout: float = math.nan

    @property
    def is_valid(self) -> bool:
        return self.status == "valid"

    def to_json_dict(self) -> dict:
        return {
            "ratio": self.ratio,
            "efficiency": self.efficiency,
            "status": self.status,
            "reason": self.reason,
            "residual": self.residual,
        }


@dataclass
class PhaseNetwork:
    """MNA stamps of one switching phase, with the state-coupling pieces.

    Node equations are G v = S_x x + s_u and the state advances by
    x' = F_x x + F_v v, where x stacks capacitor voltages then inductor
    currents. The reference (GND) node is eliminated; index -1 marks it.
    """

    n_nodes: int
    G: np.ndarray
    S_x: np.ndarray
    s_u: np.ndarray
    F_x: np.ndarray
    F_v: np.ndarray
    vin_node: int
    vout_node: int
    state_names: list[str]


def build_phase_network(circuit: Circuit, phase: str, cfg: SimConfig) -> PhaseNetwork:
    """Stamp the linear network for phase I (Sa on) or phase II (Sb on)."""
    if phase not in _PHASES:
        raise ValueError(f"phase must be one of {_PHASES}")
    report = validate_structure(circuit)
    if not report.is_valid:
        raise CircuitError("INVALID_CIRCUIT", f"cannot simulate: {','.join(report.reasons)}")

    net_of = {t: j for j, net in enumerate(circuit.nets) for t in net.terminals}
    gnd_net = net_of[Terminal(Vertex(VertexKind.GND), 0)]
    # Reduced node index per net; the ground net maps to -1.
    node = [-1 if j == gnd_net else (j if j < gnd_net else j - 1) for j in range(len(circuit.nets))]
    n = len(circuit.nets) - 1

    h = 1.0 / (cfg.f_switch * cfg.steps_per_period)
    caps = [v for v in circuit.devices if v.kind == VertexKind.C]
    inds = [v for v in circuit.devices if v.kind == VertexKind.L]
    state_names = [v.name for v in caps] + [v.name for v in inds]
    s = len(state_names)

    G = np.zeros((n, n))
    S_x = np.zeros((n, s))
    s_u = np.zeros(n)
    F_x = np.zeros((s, s))
    F_v = np.zeros((s, n))

    def stamp_conductance(a: int, b: int, g: float):
        if a >= 0:
            G[a, a] += g
        if b >= 0:
            G[b, b] += g
        if a >= 0 and b >= 0:
            G[a, b] -= g
            G[b, a] -= g

    def endpoints(dev: Vertex) -> tuple[int, int]:
        return node[net_of[Terminal(dev, 0)]], node[net_of[Terminal(dev, 1)]]

    for dev in circuit.devices:
        if dev.kind in (VertexKind.SA, VertexKind.SB):
            on_phase = "I" if dev.kind == VertexKind.SA else "II"
            r = cfg.r_on if phase == on_phase else cfg.r_off
            a, b = endpoints(dev)
            stamp_conductance(a, b, 1.0 / r)

    for k, dev in enumerate(caps):
        a, b = endpoints(dev)
        g = 1.0 / (cfg.r_c_esr + h / cfg.c_val)
        stamp_conductance(a, b, g)
        # Branch current a->b is g*(v_a - v_b - v_c); the v_c term lands on the RHS.
        if a >= 0:
            S_x[a, k] += g
        if b >= 0:
            S_x[b, k] -= g
        # v_c' = v_c + (h/C) * i_branch
        scale = (h / cfg.c_val) * g
        F_x[k, k] = 1.0 - scale
        if a >= 0:
            F_v[k, a] += scale
        if b >= 0:
            F_v[k, b] -= scale

    for k, dev in enumerate(inds):
        row = len(caps) + k
        a, b = endpoints(dev)
        alpha = 1.0 / (1.0 + h * cfg.r_l_esr / cfg.l_val)
        beta = (h / cfg.l_val) * alpha
        stamp_conductance(a, b, beta)
        # Branch current a->b is beta*(v_a - v_b) + alpha*i_prev.
        if a >= 0:
            S_x[a, row] -= alpha
        if b >= 0:
            S_x[b, row] += alpha
        F_x[row, row] = alpha
        if a >= 0:
            F_v[row, a] += beta
        if b >= 0:
            F_v[row, b] -= beta

    vin_node = node[net_of[Terminal(Vertex(VertexKind.VIN), 0)]]
    vout_node = node[net_of[Terminal(Vertex(VertexKind.VOUT), 0)]]
    if vin_node >= 0:
        G[vin_node, vin_node] += 1.0 / cfg.r_source
        s_u[vin_node] += cfg.v_source / cfg.r_source
    if vout_node >= 0:
        G[vout_node, vout_node] += 1.0 / cfg.r_load

    return PhaseNetwork(n, G, S_x, s_u, F_x, F_v, vin_node, vout_node, state_names)


def steady_state(circuit: Circuit, duty: float, cfg: SimConfig = SimConfig()) -> SimResult:
    """Solve the periodic point and average one period of the waveforms."""
    if not any(abs(duty - d) < 1e-12 for d in DUTY_OPTIONS):
        raise ValueError(f"duty {duty} not in {DUTY_OPTIONS}")
    nets_i = build_phase_network(circuit, "I", cfg)
    nets_ii = build_phase_network(circuit, "II", cfg)
    k1, k2 = _phase_steps(duty, cfg)
    s = len(nets_i.state_names)

    try:
        maps = [_affine_map(net) for net in (nets_i, nets_ii)]
    except np.linalg.LinAlgError:
        return classify_validity(circuit, SimResult(math.nan, math.nan, "invalid", "SINGULAR"), cfg)

    # Compose x(T) = Phi x(0) + gamma over the whole period.
    phi = np.eye(s)
    gamma = np.zeros(s)
    for (m, d), steps in zip(maps, (k1, k2)):
        for _ in range(steps):
            phi = m @ phi
            gamma = m @ gamma + d

    try:
        x0 = np.linalg.solve(np.eye(s) - phi, gamma) if s else np.zeros(0)
    except np.linalg.LinAlgError:
        return classify_validity(circuit, SimResult(math.nan, math.nan, "invalid", "SINGULAR"), cfg)
    if not np.all(np.isfinite(x0)):
        return classify_validity(circuit, SimResult(math.nan, math.nan, "invalid", "SINGULAR"), cfg)

    # Replay one period from the periodic point.
    x = x0.copy()
    vout_sum = 0.0
    vout_abs_sum = 0.0
    p_in_sum = 0.0
    p_out_sum = 0.0
    for net, (m, d), steps in zip((nets_i, nets_ii), maps, (k1, k2)):
        ginv = np.linalg.inv(net.G) if net.n_nodes else None
        for _ in range(steps):
            v = ginv @ (net.S_x @ x + net.s_u) if net.n_nodes else np.zeros(0)
            x = m @ x + d
            v_out = v[net.vout_node] if net.vout_node >= 0 else 0.0
            v_in = v[net.vin_node] if net.vin_node >= 0 else 0.0
            i_src = (cfg.v_source - v_in) / cfg.r_source
            vout_sum += v_out
            vout_abs_sum += abs(v_out)
            p_in_sum += cfg.v_source * i_src
            p_out_sum += v_out * v_out / cfg.r_load

    n_steps = cfg.steps_per_period
    residual = float(np.linalg.norm(x - x0) / (1.0 + np.linalg.norm(x0)))
    ratio = (vout_sum / n_steps) / cfg.v_source
    p_in = p_in_sum / n_steps
    p_out = p_out_sum / n_steps
    efficiency = p_out / p_in if p_in > 0 else 0.0

    status, reason = ("valid", None)
    if residual > cfg.ss_tol:
        status, reason = ("invalid", "NONCONVERGED")
    raw = SimResult(ratio, efficiency, status, reason, residual, vout_abs_sum / n_steps)
    return classify_validity(circuit, raw, cfg)


def classify_validity(circuit: Circuit, result: SimResult, cfg: SimConfig) -> SimResult:
    """Finalize validity: structural check plus the numeric pruning rules."""
    def invalid(reason: str) -> SimResult:
        return SimResult(result.ratio, result.efficiency, "invalid", reason,
                         result.residual, result.mean_abs_vout)

    if not validate_structure(circuit).is_valid:
        return invalid("STRUCTURE")
    if result.reason in ("SINGULAR", "NONCONVERGED"):
        return result
    if not math.isfinite(result.ratio) or abs(result.ratio) > 25.0:
        return invalid("RATIO_BOUND")
    if not (1e-4 <= result.efficiency <= 1.0 + 1e-6):
        return invalid("EFF_BOUND")
    mean_abs = result.mean_abs_vout
    if math.isnan(mean_abs):
        mean_abs = abs(result.ratio) * cfg.v_source
    if mean_abs < 1e-6 * cfg.v_source:
        return invalid("DEAD_OUTPUT")
    return SimResult(result.ratio, result.efficiency, "valid", None,
                     result.residual, result.mean_abs_vout)


def _phase_steps(duty: float, cfg: SimConfig) -> tuple[int, int]:
    k1 = int(round(duty * cfg.steps_per_period))
    k1 = min(max(k1, 1), cfg.steps_per_period - 1)
    return k1, cfg.steps_per_period - k1


def _affine_map(net: PhaseNetwork) -> tuple[np.ndarray, np.ndarray]:
    """Per-step state map x' = M x + d for one phase."""
    if net.n_nodes:
        ginv = np.linalg.inv(net.G)
        if not np.all(np.isfinite(ginv)):
            raise np.linalg.LinAlgError("non-finite inverse")
        m = net.F_x + net.F_v @ ginv @ net.S_x
        d = net.F_v @ (ginv @ net.s_u)
    else:
        m = net.F_x.copy()
        d = np.zeros(len(net.state_names))
    return m, d
