"""Column current under wire IR-drop, apparent weight and OTA deviation.

The fast model lumps ``segment_size`` unit cells into one node with three
rail conductances (to V+, V- and V0), then folds the column top-down into a
single Thevenin source seen from the ADC.  Internally all voltages are
deviations from V0 and all resistances are carried as conductances, so a
zero-resistance wire or an all-zero column need no special casing.

``nodal_oracle_current`` solves the full ladder network directly and is the
ground truth the fast model is checked against.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .config import OtaTable, TileConfig
from .errors import ConfigError, ConvergenceError, DimensionError
from .tile import ConductanceColumn, PwmSchedule, Rail

FIXED_POINT_TOL = 1e-12  # amps
FIXED_POINT_MAX_ITER = 50
FIXED_POINT_DAMPING = 0.5


class WireModel(str, enum.Enum):
    PER_CELL = "PerCell"
    PER_SEGMENT_LUMPED = "PerSegmentLumped"


@dataclass(frozen=True)
class SegmentTriple:
    g_to_vplus: float
    g_to_vminus: float
    g_to_v0: float


@dataclass(frozen=True)
class TheveninState:
    v_th: float
    r_th: float  # inf for an open circuit

    @property
    def is_open(self):
        return not np.isfinite(self.r_th)


@dataclass(frozen=True, eq=False)
class CurrentWaveform:
    """Per-step column currents, one array per PWM phase."""

    phase_currents: tuple
    tick_weights: tuple
    dt: float
    term_charges: np.ndarray | None = None  # tick-weighted charge per row

    @property
    def currents(self):
        return np.concatenate(self.phase_currents)

    @property
    def charge(self):
        """Raw integrated charge, sum of I*dt over every step."""
        return float(sum(np.sum(c) for c in self.phase_currents) * self.dt)

    @property
    def weighted_charge(self):
        """Charge with each phase scaled by its counter tick weight."""
        return float(sum(w * np.sum(c) for c, w in zip(self.phase_currents, self.tick_weights))
                     * self.dt)


def apparent_conductance(g, beta, g_max=None):
    """Effective conductance ``g - beta * g**2`` seen through the select FET."""
    g = np.asarray(g, dtype=float)
    top = float(np.max(g, initial=0.0)) if g_max is None else float(g_max)
    if beta < 0 or 2.0 * beta * top >= 1.0:
        raise ConfigError(f"beta={beta} leaves the monotone range for g up to {top}")
    out = g - beta * g * g
    return float(out) if out.ndim == 0 else out


def tail_resistance(config: TileConfig):
    """Wire between the bottom segment node and the ADC.

    The lumped node stands for the centroid of its segment, so half a
    segment of wire remains below it.
    """
    return 0.5 * config.r_segment


def _row_conductances(column: ConductanceColumn, config: TileConfig):
    beta = config.beta
    gp = apparent_conductance(column.g_pos, beta) if beta else np.asarray(column.g_pos)
    gn = apparent_conductance(column.g_neg, beta) if beta else np.asarray(column.g_neg)
    return np.asarray(gp, dtype=float), np.asarray(gn, dtype=float)


def _rail_loads(gp, gn, rails):
    """Per-row conductance to each rail; ``rails`` has shape (..., n_rows)."""
    pos = rails == Rail.DRIVE_POS
    neg = rails == Rail.DRIVE_NEG
    off = rails == Rail.OFF
    g_plus = np.where(pos, gp, 0.0) + np.where(neg, gn, 0.0)
    g_minus = np.where(pos, gn, 0.0) + np.where(neg, gp, 0.0)
    g_zero = np.where(off, gp + gn, 0.0)
    return g_plus, g_minus, g_zero


def _lump(g_plus, g_minus, g_zero, segment_size):
    shape = g_plus.shape[:-1] + (-1, segment_size)
    return (g_plus.reshape(shape).sum(-1), g_minus.reshape(shape).sum(-1),
            g_zero.reshape(shape).sum(-1))


def lump_segments(column: ConductanceColumn, rail_assignment, config: TileConfig):
    """Three lumped rail conductances per segment for one rail assignment."""
    rails = np.asarray(rail_assignment)
    if rails.shape != (config.n_rows,) or len(column) != config.n_rows:
        raise DimensionError("rail assignment and column must have n_rows entries")
    gp, gn = _row_conductances(column, config)
    lumps = _lump(*_rail_loads(gp, gn, rails), config.segment_size)
    return [SegmentTriple(float(a), float(b), float(c)) for a, b, c in zip(*lumps)]


def _series(g, r):
    """Conductance of ``1/g`` in series with ``r``; open stays open."""
    return g / (1.0 + g * r)


def _reduce(seg_plus, seg_minus, seg_zero, v_read, r_segment, r_tail=0.0, keep_stages=False):
    """Vectorised Thevenin fold over axis -1 (segments, top first).

    Returns deviation voltage ``u_th`` (relative to V0) and conductance
    ``g_th`` seen from the ADC, plus the per-stage states if requested.
    """
    n_seg = seg_plus.shape[-1]
    u = np.zeros(seg_plus.shape[:-1])
    g = np.zeros(seg_plus.shape[:-1])
    stages = []
    for k in range(n_seg):
        g_link = _series(g, r_segment) if k else g
        g_seg = seg_plus[..., k] + seg_minus[..., k] + seg_zero[..., k]
        src = (seg_plus[..., k] - seg_minus[..., k]) * v_read
        g_new = g_link + g_seg
        with np.errstate(invalid="ignore", divide="ignore"):
            u = np.where(g_new > 0, (g_link * u + src) / g_new, 0.0)
        g = g_new
        if keep_stages:
            stages.append((u, g))
    g_out = _series(g, r_tail)
    return u, g_out, stages


def thevenin_reduce(segments, r_segment, *, v_plus=0.6, v0=0.4, v_minus=0.2, r_tail=0.0):
    """Fold a column of lumped segments into one Thevenin source.

    Parameters
    ----------
    segments : sequence of SegmentTriple, top of the column first
    r_segment : float
        Wire resistance between adjacent segment nodes.
    r_tail : float
        Wire between the last segment node and the ADC (0 by default).
    """
    if len(segments) < 1:
        raise DimensionError("need at least one segment")
    if abs((v_plus - v0) - (v0 - v_minus)) > 1e-12:
        raise ConfigError("read voltage must be symmetric about v0")
    arr = np.array([[s.g_to_vplus, s.g_to_vminus, s.g_to_v0] for s in segments], dtype=float)
    u, g, _ = _reduce(arr[:, 0], arr[:, 1], arr[:, 2], v_plus - v0, r_segment, r_tail)
    if g <= 0:
        return TheveninState(v0, float("inf"))
    return TheveninState(float(v0 + u), float(1.0 / g))


def _ota_slope(ota: OtaTable, current):
    cur = np.array([p[0] for p in ota.points])
    dv = np.array([p[1] for p in ota.points])
    slopes = np.diff(dv) / np.diff(cur)
    idx = np.clip(np.searchsorted(cur, current) - 1, 0, slopes.size - 1)
    return slopes[idx]


def _solve_current(u_th, g_th, ota: OtaTable):
    """Solve ``I = g_th * (u_th - delta(I))`` elementwise.

    Damped fixed-point iteration.  The damping factor is 0.5 unless the
    local OTA slope is steep relative to the source resistance, where it is
    reduced to ``1 / (1 + slope * g_th)`` to keep the map contractive.
    """
    u_th = np.asarray(u_th, dtype=float)
    g_th = np.asarray(g_th, dtype=float)
    current = g_th * u_th
    if ota.is_flat:
        return current
    for _ in range(FIXED_POINT_MAX_ITER + 1):
        target = g_th * (u_th - ota.delta(current))
        residual = np.abs(target - current)
        if np.all(residual < FIXED_POINT_TOL):
            return current
        lam = np.minimum(FIXED_POINT_DAMPING, 1.0 / (1.0 + np.abs(_ota_slope(ota, current)) * g_th))
        current = current + lam * (target - current)
    raise ConvergenceError(
        f"OTA fixed point did not converge in {FIXED_POINT_MAX_ITER} iterations "
        f"(max residual {float(np.max(residual)):.3e} A)",
        last_iterate=current, residual=residual)


def step_current(state: TheveninState, ota: OtaTable, config: TileConfig):
    """Current flowing from the array into the ADC for one Thevenin snapshot."""
    if state.is_open:
        return 0.0
    return float(_solve_current(state.v_th - config.v0, 1.0 / state.r_th, ota))


def _node_voltages(stages, current, delta, r_segment, r_tail):
    """Back-substitute segment node deviations from the ADC upwards."""
    n_seg = len(stages)
    nodes = [None] * n_seg
    nodes[-1] = delta + current * r_tail
    for k in range(n_seg - 2, -1, -1):
        u_k, g_k = stages[k]
        link = _series(g_k, r_segment) * (u_k - nodes[k + 1])
        nodes[k] = nodes[k + 1] + link * r_segment
    return np.stack(nodes, axis=-1)


def integrate_column(column: ConductanceColumn, schedule: PwmSchedule, config: TileConfig,
                     capture_terms=False):
    """Step through every PWM phase and return the column current waveform.

    At each step the rail landscape is lumped and reduced afresh; the
    Thevenin source then drives the OTA-regulated ADC node.  With
    ``capture_terms`` the per-row contributions to the (tick-weighted)
    charge are also recorded.
    """
    if len(column) != config.n_rows:
        raise DimensionError("column length must equal n_rows")
    gp, gn = _row_conductances(column, config)
    v_read = config.v_read
    r_seg, r_tail = config.r_segment, tail_resistance(config)
    phase_currents = []
    terms = np.zeros(config.n_rows) if capture_terms else None
    for phase in schedule.phases:
        rails = phase.rails
        loads = _rail_loads(gp, gn, rails)
        lumps = _lump(*loads, config.segment_size)
        u, g, stages = _reduce(*lumps, v_read, r_seg, r_tail, keep_stages=capture_terms)
        current = _solve_current(u, g, config.ota_table)
        phase_currents.append(current)
        if capture_terms and rails.shape[0]:
            delta = config.ota_table.delta(current)
            nodes = _node_voltages(stages, current, delta, r_seg, r_tail)
            node_per_row = np.repeat(nodes, config.segment_size, axis=-1)
            row_src = (loads[0] - loads[1]) * v_read
            row_g = loads[0] + loads[1] + loads[2]
            terms += phase.tick_weight * config.dt * np.sum(row_src - row_g * node_per_row, axis=0)
    tick_weights = tuple(p.tick_weight for p in schedule.phases)
    return CurrentWaveform(tuple(phase_currents), tick_weights, config.dt, terms)


# ---------------------------------------------------------------------------
# Nodal oracle
# ---------------------------------------------------------------------------

def _ladder_solve(node_g, node_src, link_r, tail_r):
    """Exact nodal solve of a resistive ladder terminated by the ADC node.

    ``node_g``/``node_src`` have shape (n_nodes, batch): total conductance
    and rail source current at each node.  Node k connects to node k+1
    through ``link_r[k]``; the last node reaches the ADC through ``tail_r``.
    Returns the open-circuit deviation ``u_th``, the ADC-side conductance
    ``g_th`` and two node-voltage responses used to recover node potentials:
    sources only with the ADC at V0, and ``y``, the drop below a unit ADC
    voltage with sources removed (node voltage ``1 - y``).
    """
    n, batch = node_g.shape
    link_r = np.broadcast_to(np.asarray(link_r, dtype=float), (max(n - 1, 0),))
    if n > 1 and np.any(link_r == 0) or tail_r == 0:
        raise ValueError("zero wire resistance must be collapsed before the ladder solve")
    c = np.append(1.0 / link_r, 1.0 / tail_r)  # c[k] joins node k to k+1 (k+1 = n is ADC)
    diag = node_g + (c + np.append(0.0, c[:-1]))[:, None]
    ab = np.zeros((3, n, batch))
    ab[0, 1:, :] = -c[:-1, None]
    ab[1] = diag
    ab[2, :-1, :] = -c[:-1, None]
    # Solving A y = node_g gives 1 - (unit-ADC response) without the
    # cancellation that ruins g_th when the wire is very short.
    # The matrix depends on the rail pattern only through node_g, which is
    # the same for every column of the batch when rows merely change rail.
    same = np.all(node_g == node_g[:, :1])
    if same:
        sol = solve_banded((1, 1), ab[:, :, 0], np.hstack([node_src, node_g[:, :1]]))
        u_src, y = sol[:, :-1], np.repeat(sol[:, -1:], batch, axis=1)
    else:
        u_src = np.empty((n, batch))
        y = np.empty((n, batch))
        for b in range(batch):
            sol = solve_banded((1, 1), ab[:, :, b], np.column_stack([node_src[:, b], node_g[:, b]]))
            u_src[:, b], y[:, b] = sol[:, 0], sol[:, 1]
    i_short = c[-1] * u_src[-1]
    g_th = c[-1] * y[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        u_th = np.where(g_th > 0, i_short / g_th, 0.0)
    return u_th, g_th, u_src, y


def _oracle_phase(gp, gn, rails, config, wire_model, capture_terms):
    rails = np.atleast_2d(rails)
    loads = _rail_loads(gp, gn, rails)  # each (steps, rows)
    v_read = config.v_read
    if wire_model is WireModel.PER_SEGMENT_LUMPED:
        loads_nodes = _lump(*loads, config.segment_size)
        link_r, tail_r = config.r_segment, tail_resistance(config)
        rows_per_node = config.segment_size
    else:
        loads_nodes = loads
        link_r, tail_r = config.r_wire, config.r_wire
        rows_per_node = 1
    node_g = (loads_nodes[0] + loads_nodes[1] + loads_nodes[2]).T
    node_src = ((loads_nodes[0] - loads_nodes[1]) * v_read).T
    if config.r_wire * config.n_rows * float(node_g.sum(axis=0).max(initial=0.0)) < 1e-15:
        # wire too short to matter in double precision: all nodes merge
        # into the ADC node
        g_th = node_g.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            u_th = np.where(g_th > 0, node_src.sum(axis=0) / g_th, 0.0)
        current = _solve_current(u_th, g_th, config.ota_table)
        nodes = np.broadcast_to(config.ota_table.delta(current), node_g.shape)
    else:
        u_th, g_th, u_src, y = _ladder_solve(node_g, node_src, link_r, tail_r)
        current = _solve_current(u_th, g_th, config.ota_table)
        nodes = u_src + (1.0 - y) * config.ota_table.delta(current)[None, :]
    terms = None
    if capture_terms:
        node_per_row = np.repeat(nodes, rows_per_node, axis=0).T  # (steps, rows)
        row_src = (loads[0] - loads[1]) * v_read
        row_g = loads[0] + loads[1] + loads[2]
        terms = row_src - row_g * node_per_row
    return current, terms


def nodal_oracle_current(column: ConductanceColumn, rail_assignment, config: TileConfig,
                         wire_model=WireModel.PER_CELL):
    """Exact ladder-network current into the ADC for one rail assignment.

    ``PerCell`` places wire resistance ``r_cell * r_scale`` between every
    pair of adjacent cells and between the bottom cell and the ADC.
    ``PerSegmentLumped`` concentrates it at segment boundaries with the same
    half-segment tail as the fast model.
    """
    wire_model = WireModel(wire_model)
    rails = np.asarray(rail_assignment)
    if rails.shape != (config.n_rows,) or len(column) != config.n_rows:
        raise DimensionError("rail assignment and column must have n_rows entries")
    gp, gn = _row_conductances(column, config)
    current, _ = _oracle_phase(gp, gn, rails[None, :], config, wire_model, False)
    return float(current[0])


def oracle_waveform(column: ConductanceColumn, schedule: PwmSchedule, config: TileConfig,
                    wire_model=WireModel.PER_CELL, capture_terms=False):
    """Oracle counterpart of :func:`integrate_column` over a whole schedule."""
    wire_model = WireModel(wire_model)
    gp, gn = _row_conductances(column, config)
    phase_currents = []
    terms = np.zeros(config.n_rows) if capture_terms else None
    for phase in schedule.phases:
        if phase.rails.shape[0] == 0:
            phase_currents.append(np.zeros(0))
            continue
        current, row_terms = _oracle_phase(gp, gn, phase.rails, config, wire_model, capture_terms)
        phase_currents.append(current)
        if capture_terms:
            terms += phase.tick_weight * config.dt * row_terms.sum(axis=0)
    tick_weights = tuple(p.tick_weight for p in schedule.phases)
    return CurrentWaveform(tuple(phase_currents), tick_weights, config.dt, terms)
