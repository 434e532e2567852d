"""Weight-to-conductance mapping, PWM encoding and the software MAC reference."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .config import PwmMode, TileConfig
from .errors import DimensionError, RangeError

ACT_MAX = 127  # 7-bit magnitude of an 8-bit signed activation
WEIGHT_LEVELS = 127

# (steps, tick weight) per phase
PHASE_LAYOUT = {
    PwmMode.CONVENTIONAL: ((127, 1),),
    PwmMode.SPLIT: ((15, 8), (7, 1)),
}


class Rail(enum.IntEnum):
    OFF = 0
    DRIVE_POS = 1
    DRIVE_NEG = -1


def round_half_away(x):
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_activations(x, full_scale=1.0):
    """Map real activations onto the signed 8-bit grid, saturating at +-127."""
    q = round_half_away(np.asarray(x, dtype=float) / full_scale * ACT_MAX)
    return np.clip(q, -ACT_MAX, ACT_MAX).astype(np.int64)


def quantize_weights(w, w_max=1.0):
    """Snap real weights to the 8-bit weight grid (127 levels per sign)."""
    w = np.clip(np.asarray(w, dtype=float), -w_max, w_max)
    return round_half_away(w / w_max * WEIGHT_LEVELS) / WEIGHT_LEVELS * w_max


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ConductanceColumn:
    """Per-row ``(G+, G-)`` pairs of one logical column."""

    g_pos: np.ndarray
    g_neg: np.ndarray

    def __post_init__(self):
        gp, gn = _frozen(self.g_pos), _frozen(self.g_neg)
        if gp.shape != gn.shape or gp.ndim != 1:
            raise DimensionError("g_pos and g_neg must be 1-D arrays of equal length")
        if np.any(gp < 0) or np.any(gn < 0):
            raise RangeError("conductances must be non-negative")
        object.__setattr__(self, "g_pos", gp)
        object.__setattr__(self, "g_neg", gn)

    def __len__(self):
        return self.g_pos.size

    @property
    def pairs(self):
        return list(zip(self.g_pos.tolist(), self.g_neg.tolist()))

    @property
    def g_signed(self):
        return self.g_pos - self.g_neg


def map_weights(weights, g_max, w_max):
    """One-sided signed mapping: positive weights on G+, negative on G-."""
    if not w_max > 0:
        raise RangeError("w_max must be > 0")
    w = np.asarray(weights, dtype=float)
    if np.any(np.abs(w) > w_max):
        raise RangeError(f"weight magnitude exceeds w_max={w_max}")
    scale = g_max / w_max
    return ConductanceColumn(np.where(w >= 0, w * scale, 0.0),
                             np.where(w < 0, -w * scale, 0.0))


@dataclass(frozen=True)
class PulseEncoding:
    durations: tuple  # steps per phase
    polarity: int  # -1, 0 or +1


def encode_pwm(activation, mode):
    """Drive durations for a single activation value."""
    v = int(activation)
    if abs(v) > ACT_MAX:
        raise RangeError(f"activation {v} outside [-{ACT_MAX}, {ACT_MAX}]")
    m = abs(v)
    if PwmMode(mode) is PwmMode.SPLIT:
        durations = (m // 8, m % 8)
    else:
        durations = (m,)
    return PulseEncoding(durations, (v > 0) - (v < 0))


@dataclass(frozen=True, eq=False)
class Phase:
    duration_steps: int
    tick_weight: int
    rails: np.ndarray  # int8, shape (duration_steps, n_rows), values of Rail


@dataclass(frozen=True, eq=False)
class PwmSchedule:
    phases: tuple
    activations: np.ndarray

    @property
    def n_steps(self):
        return sum(p.duration_steps for p in self.phases)

    def rail_by_row_by_step(self, phase_index=0):
        return self.phases[phase_index].rails

    def drive_durations(self):
        """Driven step count per row for each phase, shape (n_phases, n_rows)."""
        return np.stack([(p.rails != Rail.OFF).sum(axis=0) for p in self.phases])


def _check_activations(activations, n_rows):
    x = np.asarray(activations)
    if x.ndim != 1 or x.size != n_rows:
        raise DimensionError(f"expected {n_rows} activations, got shape {x.shape}")
    if np.any(x != np.round(x)):
        raise RangeError("activations must be integers on the 8-bit grid")
    x = x.astype(np.int64)
    if np.any(np.abs(x) > ACT_MAX):
        raise RangeError(f"activation outside [-{ACT_MAX}, {ACT_MAX}]")
    return x


def build_schedule(activations, config: TileConfig):
    """Left-aligned per-step rail assignment for every row.

    Every driven row switches on at step 0 of each phase and switches off
    after its own duration, so the set of active rows only shrinks within a
    phase.
    """
    x = _check_activations(activations, config.n_rows)
    m = np.abs(x)
    sign = np.sign(x).astype(np.int8)
    layout = PHASE_LAYOUT[config.pwm_mode]
    if config.pwm_mode is PwmMode.SPLIT:
        durations = (m // 8, m % 8)
    else:
        durations = (m,)
    phases = []
    for (n_steps, tick), d in zip(layout, durations):
        on = np.arange(n_steps)[:, None] < d[None, :]
        rails = np.where(on, sign[None, :], 0).astype(np.int8)
        rails.setflags(write=False)
        phases.append(Phase(n_steps, tick, rails))
    return PwmSchedule(tuple(phases), _frozen(x, np.int64))


def ideal_mac(weights, activations):
    """Exactly rounded software MAC, sum of x_i * w_i."""
    w = np.asarray(weights, dtype=float)
    x = np.asarray(activations, dtype=float)
    if w.shape != x.shape:
        raise DimensionError("weights and activations must have equal length")
    return math.fsum((x * w).tolist())
