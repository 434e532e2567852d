"""Configuration records for one column simulation, with strict JSON I/O.

Every record is a frozen dataclass.  ``to_dict``/``from_dict`` round-trip
through plain JSON types; unknown keys are rejected so that typos in a
config file fail loudly instead of silently falling back to defaults.
"""
from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError


class PwmMode(str, enum.Enum):
    CONVENTIONAL = "Conventional"
    SPLIT = "Split"


class NoiseTier(str, enum.Enum):
    MONTE_CARLO = "MonteCarlo"
    LUT = "Lut"
    ANALYTICAL = "Analytical"
    BATCH_MEAN = "BatchMean"


def _check_keys(data, allowed, what):
    if not isinstance(data, dict):
        raise ConfigError(f"{what}: expected a JSON object, got {type(data).__name__}")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"{what}: unknown field(s) {sorted(unknown)}")


def _read_two_column_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            if not rec or rec[0].lstrip().startswith("#"):
                continue
            try:
                rows.append((float(rec[0]), float(rec[1])))
            except (ValueError, IndexError):
                # tolerate a single header row
                if rows:
                    raise ConfigError(f"{path}: malformed row {rec!r}") from None
    return tuple(rows)


# ---------------------------------------------------------------------------
# OTA deviation table
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OtaTable:
    """Common-node voltage deviation of the OTA versus column current.

    ``points`` is a sequence of ``(current [A], delta_v [V])`` pairs with
    strictly increasing currents.  Lookups are piecewise linear and are
    extrapolated linearly from the end segments.
    """

    points: tuple = ((-200e-6, 0.0), (0.0, 0.0), (200e-6, 0.0))

    def __post_init__(self):
        pts = tuple((float(i), float(v)) for i, v in self.points)
        object.__setattr__(self, "points", pts)
        cur = np.array([p[0] for p in pts])
        if len(pts) < 2:
            raise ConfigError("OtaTable needs at least two points")
        if np.any(np.diff(cur) <= 0):
            raise ConfigError("OtaTable currents must be strictly increasing")
        if cur[0] > -150e-6 or cur[-1] < 150e-6:
            raise ConfigError("OtaTable must cover at least [-150 uA, +150 uA]")
        if abs(float(self.delta(0.0))) > 1e-15:
            raise ConfigError("OtaTable must satisfy delta_v(0) = 0")

    @classmethod
    def linear(cls, impedance_ohm, span=200e-6):
        """Straight-line table ``delta_v = impedance * I``."""
        return cls(((-span, -impedance_ohm * span), (0.0, 0.0), (span, impedance_ohm * span)))

    @classmethod
    def zero(cls):
        return cls.linear(0.0)

    @classmethod
    def from_csv(cls, path):
        return cls(_read_two_column_csv(path))

    @property
    def is_flat(self):
        return all(v == 0.0 for _, v in self.points)

    def delta(self, current):
        cur = np.array([p[0] for p in self.points])
        dv = np.array([p[1] for p in self.points])
        x = np.asarray(current, dtype=float)
        out = np.interp(x, cur, dv)
        lo_slope = (dv[1] - dv[0]) / (cur[1] - cur[0])
        hi_slope = (dv[-1] - dv[-2]) / (cur[-1] - cur[-2])
        out = np.where(x < cur[0], dv[0] + lo_slope * (x - cur[0]), out)
        out = np.where(x > cur[-1], dv[-1] + hi_slope * (x - cur[-1]), out)
        return out

    def to_dict(self):
        return {"points": [list(p) for p in self.points]}

    @classmethod
    def from_dict(cls, data):
        _check_keys(data, ("points",), "ota_table")
        return cls(tuple(tuple(p) for p in data["points"]))


# ---------------------------------------------------------------------------
# ADC
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LinearTransfer:
    """CCO frequency proportional to current magnitude, ``k`` in Hz/A."""

    k: float = 60e6 / 1e-6

    def __post_init__(self):
        if not self.k > 0:
            raise ConfigError("linear transfer slope k must be > 0")

    def to_dict(self):
        return {"kind": "Linear", "k": self.k}


@dataclass(frozen=True)
class LutTransfer:
    """Piecewise-linear CCO transfer curve, ``points`` = ``(amps, Hz)``."""

    points: tuple

    def __post_init__(self):
        pts = tuple((float(a), float(f)) for a, f in self.points)
        object.__setattr__(self, "points", pts)
        cur = np.array([p[0] for p in pts])
        freq = np.array([p[1] for p in pts])
        if len(pts) < 2 or np.any(np.diff(cur) <= 0):
            raise ConfigError("transfer LUT currents must be strictly increasing")
        if np.any(freq < 0):
            raise ConfigError("transfer LUT frequencies must be >= 0")
        if cur[0] > 0 or abs(np.interp(0.0, cur, freq)) > 0:
            raise ConfigError("transfer LUT must satisfy f(0) = 0")

    @classmethod
    def from_csv(cls, path):
        return cls(_read_two_column_csv(path))

    def to_dict(self):
        return {"kind": "PiecewiseLut", "points": [list(p) for p in self.points]}


@dataclass(frozen=True)
class AdcConfig:
    transfer: LinearTransfer | LutTransfer = field(default_factory=LinearTransfer)
    gain_correction: tuple = (1.0, 1.0)  # (positive CCO, negative CCO)
    offset_correction: tuple = (0.0, 0.0)  # counts, per polarity
    carry_residual_across_phases: bool = False

    def __post_init__(self):
        gains = tuple(float(g) for g in self.gain_correction)
        offsets = tuple(float(o) for o in self.offset_correction)
        if len(gains) != 2 or len(offsets) != 2:
            raise ConfigError("gain/offset correction need one value per polarity")
        object.__setattr__(self, "gain_correction", gains)
        object.__setattr__(self, "offset_correction", offsets)

    def to_dict(self):
        return {
            "transfer": self.transfer.to_dict(),
            "gain_correction": list(self.gain_correction),
            "offset_correction": list(self.offset_correction),
            "carry_residual_across_phases": self.carry_residual_across_phases,
        }

    @classmethod
    def from_dict(cls, data):
        _check_keys(data, ("transfer", "gain_correction", "offset_correction",
                           "carry_residual_across_phases"), "adc")
        kwargs = dict(data)
        if "transfer" in kwargs:
            t = kwargs["transfer"]
            kind = t.get("kind") if isinstance(t, dict) else None
            if kind == "Linear":
                _check_keys(t, ("kind", "k"), "adc.transfer")
                kwargs["transfer"] = LinearTransfer(float(t["k"]))
            elif kind == "PiecewiseLut":
                _check_keys(t, ("kind", "points"), "adc.transfer")
                kwargs["transfer"] = LutTransfer(tuple(tuple(p) for p in t["points"]))
            else:
                raise ConfigError(f"adc.transfer: unknown kind {kind!r}")
        for key in ("gain_correction", "offset_correction"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# PCM read noise
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseConfig:
    """1/f read-noise model: conductance PSD ``S_G(f) = alpha * G**gamma / f``.

    ``alpha`` carries units of S^(2-gamma) (the PSD is in S^2/Hz).  The
    default was chosen so that read noise alone costs about the same MAC
    error as IR-drop alone on the standard sweep.
    """

    alpha: float = 7.7e-9
    gamma: float = 1.0
    f_min: float = 1.0 / 256e-9
    f_max: float = 1e9
    tier: NoiseTier = NoiseTier.LUT
    seed: int = 1

    def __post_init__(self):
        object.__setattr__(self, "tier", NoiseTier(self.tier))
        if self.alpha < 0:
            raise ConfigError("noise alpha must be >= 0")
        if not 0 < self.f_min < self.f_max:
            raise ConfigError("noise band needs 0 < f_min < f_max")

    def to_dict(self):
        return {"alpha": self.alpha, "gamma": self.gamma, "f_min": self.f_min,
                "f_max": self.f_max, "tier": self.tier.value, "seed": self.seed}

    @classmethod
    def from_dict(cls, data):
        _check_keys(data, [f.name for f in fields(cls)], "noise")
        return cls(**data)


# ---------------------------------------------------------------------------
# Tile
# ---------------------------------------------------------------------------

# r_cell default comes from `aimc-tile calibrate` on the standard sweep
# (IR-drop-only epsilon targeted at 2.31 %); see README.
DEFAULT_R_CELL = 0.0836181640625


@dataclass(frozen=True)
class TileConfig:
    n_rows: int = 512
    segment_size: int = 64
    v0: float = 0.400
    v_plus: float = 0.600
    v_minus: float = 0.200
    g_max: float = 25e-6
    beta: float = 1200.0
    r_cell: float = DEFAULT_R_CELL
    r_scale: float = 1.0
    dt: float = 1e-9
    pwm_mode: PwmMode = PwmMode.CONVENTIONAL
    ota_table: OtaTable = field(default_factory=lambda: OtaTable.linear(30.0))
    adc: AdcConfig = field(default_factory=AdcConfig)
    noise: NoiseConfig | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pwm_mode", PwmMode(self.pwm_mode))
        if not self.v_minus < self.v0 < self.v_plus:
            raise ConfigError("need v_minus < v0 < v_plus")
        if abs((self.v_plus - self.v0) - (self.v0 - self.v_minus)) > 1e-12:
            raise ConfigError("read voltage must be symmetric about v0")
        if self.n_rows < 1 or self.segment_size < 1 or self.n_rows % self.segment_size:
            raise ConfigError("n_rows must be a positive multiple of segment_size")
        if not self.g_max > 0:
            raise ConfigError("g_max must be > 0")
        if self.r_cell < 0 or self.r_scale < 0:
            raise ConfigError("r_cell and r_scale must be >= 0")
        if not self.dt > 0:
            raise ConfigError("dt must be > 0")
        if self.beta < 0 or 2.0 * self.beta * self.g_max >= 1.0:
            raise ConfigError("beta must satisfy 0 <= 2*beta*g_max < 1 (monotone apparent weight)")

    @property
    def v_read(self):
        return self.v_plus - self.v0

    @property
    def n_segments(self):
        return self.n_rows // self.segment_size

    @property
    def r_wire(self):
        """Column wire resistance per unit cell after scaling."""
        return self.r_cell * self.r_scale

    @property
    def r_segment(self):
        return self.segment_size * self.r_wire

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return {
            "n_rows": self.n_rows,
            "segment_size": self.segment_size,
            "v0": self.v0,
            "v_plus": self.v_plus,
            "v_minus": self.v_minus,
            "g_max": self.g_max,
            "beta": self.beta,
            "r_cell": self.r_cell,
            "r_scale": self.r_scale,
            "dt": self.dt,
            "pwm_mode": self.pwm_mode.value,
            "ota_table": self.ota_table.to_dict(),
            "adc": self.adc.to_dict(),
            "noise": None if self.noise is None else self.noise.to_dict(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data):
        _check_keys(data, [f.name for f in fields(cls)], "TileConfig")
        kwargs = dict(data)
        if "ota_table" in kwargs:
            kwargs["ota_table"] = OtaTable.from_dict(kwargs["ota_table"])
        if "adc" in kwargs:
            kwargs["adc"] = AdcConfig.from_dict(kwargs["adc"])
        if kwargs.get("noise") is not None:
            kwargs["noise"] = NoiseConfig.from_dict(kwargs["noise"])
        return cls(**kwargs)

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path):
        return cls.from_json(Path(path).read_text())
