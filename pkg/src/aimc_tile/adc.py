"""Dual-CCO ADC behavioural model and the end-to-end MAC pipeline."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .config import AdcConfig, LinearTransfer, NoiseTier, TileConfig
from .irdrop import CurrentWaveform, integrate_column, oracle_waveform
from .noise import batch_mean_time, sample_noise_batch
from .tile import (ACT_MAX, PwmSchedule, build_schedule, ideal_mac, map_weights,
                   quantize_weights, round_half_away)

log = logging.getLogger(__name__)

_lut_clamps = 0


def lut_clamp_count():
    """Number of currents clamped to the transfer LUT domain so far."""
    return _lut_clamps


def cco_frequency(current, cfg: AdcConfig):
    """Oscillation frequency for the magnitude of ``current``.

    The caller routes the result to the positive or negative CCO by sign.
    """
    global _lut_clamps
    mag = np.abs(np.asarray(current, dtype=float))
    transfer = cfg.transfer
    if isinstance(transfer, LinearTransfer):
        out = transfer.k * mag
    else:
        cur = np.array([p[0] for p in transfer.points])
        freq = np.array([p[1] for p in transfer.points])
        over = mag > cur[-1]
        if np.any(over):
            _lut_clamps += int(np.count_nonzero(over))
            log.warning("%d current(s) beyond the CCO transfer LUT were clamped",
                        int(np.count_nonzero(over)))
        out = np.interp(mag, cur, freq)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AdcResult:
    counts_pos: int  # weighted counter ticks
    counts_neg: int
    residual_pos: float  # leftover oscillator phase, in [0, 1)
    residual_neg: float
    digital_mac: int | None = None


def _count_phase(freq_dt, start):
    """Counter crossings of one CCO over a phase, accumulated in step order."""
    if freq_dt.size == 0:
        return 0, start
    total = np.cumsum(np.concatenate(([start], freq_dt)))
    crossings = int(np.floor(total[-1])) - int(np.floor(start))
    return crossings, float(total[-1] - np.floor(total[-1]))


def accumulate_counts(waveform: CurrentWaveform, schedule: PwmSchedule, cfg: AdcConfig):
    """Integrate CCO phase step by step and count weighted ticks.

    Only the CCO matching the sign of the instantaneous current advances.
    Residual phase carries from step to step; across a phase boundary it is
    kept only when ``carry_residual_across_phases`` is set.
    """
    if len(waveform.phase_currents) != len(schedule.phases):
        raise ValueError("waveform and schedule phase structure differ")
    dt = waveform.dt
    counts = [0, 0]
    residual = [0.0, 0.0]
    for current, phase in zip(waveform.phase_currents, schedule.phases):
        if current.size != phase.duration_steps:
            raise ValueError("waveform length does not match the schedule phase")
        if not cfg.carry_residual_across_phases:
            residual = [0.0, 0.0]
        f_dt = np.asarray(cco_frequency(current, cfg), dtype=float) * dt
        for side, mask in enumerate((current > 0, current < 0)):
            ticks, residual[side] = _count_phase(np.where(mask, f_dt, 0.0), residual[side])
            counts[side] += phase.tick_weight * ticks
    return AdcResult(counts[0], counts[1], residual[0], residual[1])


def digitize(result: AdcResult, cfg: AdcConfig):
    """Per-polarity gain/offset correction, then positive minus negative."""
    g_pos, g_neg = cfg.gain_correction
    o_pos, o_neg = cfg.offset_correction
    pos = round_half_away(g_pos * result.counts_pos + o_pos)
    neg = round_half_away(g_neg * result.counts_neg + o_neg)
    return int(pos - neg)


def charge_per_mac_unit(config: TileConfig, w_max=1.0):
    """Ideal tick-weighted charge [C] per unit of ``sum(x_int * w)``."""
    return config.v_read * config.dt * config.g_max / w_max


def counts_per_mac_unit(config: TileConfig, w_max=1.0):
    """Nominal digital counts per unit of ideal MAC (linear transfer only)."""
    transfer = config.adc.transfer
    if not isinstance(transfer, LinearTransfer):
        raise ValueError("nominal count scale needs a linear transfer")
    return charge_per_mac_unit(config, w_max) * transfer.k


@dataclass(frozen=True, eq=False)
class MacResult:
    waveform: CurrentWaveform
    adc: AdcResult
    ideal_mac: float
    weights: np.ndarray  # quantized
    activations: np.ndarray  # integer grid

    @property
    def charge(self):
        return self.waveform.charge

    @property
    def analog(self):
        """Tick-weighted integrated charge, the analog checkpoint."""
        return self.waveform.weighted_charge

    @property
    def digital_mac(self):
        return self.adc.digital_mac

    @property
    def counts_pos(self):
        return self.adc.counts_pos

    @property
    def counts_neg(self):
        return self.adc.counts_neg


def integration_times(schedule: PwmSchedule, dt):
    """Total driven time per row across all phases."""
    return schedule.drive_durations().sum(axis=0) * dt


def mac_pipeline(weights, activations, config: TileConfig, *, w_max=1.0, noise_source=None,
                 noise_seed=None, batch_mean_t=None, capture_terms=False, oracle=None):
    """Run one column MAC end to end.

    ``weights`` are reals in ``[-w_max, w_max]`` and are snapped to the
    weight grid; ``activations`` are in PWM steps and are rounded half away
    from zero and saturated at +-127.

    Steps: map, optional read noise, schedule, integrate (fast model, or the
    nodal oracle when ``oracle`` names a wire model), count, digitize.
    """
    w = quantize_weights(weights, w_max)
    x = np.clip(round_half_away(activations), -ACT_MAX, ACT_MAX).astype(np.int64)
    column = map_weights(w, config.g_max, w_max)
    schedule = build_schedule(x, config)
    noise = config.noise
    if noise is not None:
        if noise_seed is None:
            noise_seed = (noise.seed,)
        tier = noise.tier
        if tier is NoiseTier.MONTE_CARLO:
            source = noise
            t_int = np.maximum(integration_times(schedule, config.dt), config.dt)
        else:
            if noise_source is None:
                raise ValueError(f"noise tier {tier.value} needs a NoiseLut/NoiseFit source")
            source = noise_source
            t_int = integration_times(schedule, config.dt)
            if tier is NoiseTier.BATCH_MEAN:
                if batch_mean_t is None:
                    batch_mean_t = batch_mean_time(t_int) if np.any(t_int > 0) else config.dt
                t_int = batch_mean_t
            else:
                t_int = np.maximum(t_int, config.dt)
        column = sample_noise_batch(column, t_int, tier, source, noise_seed,
                                    schedule=schedule, dt=config.dt)
    if oracle is None:
        waveform = integrate_column(column, schedule, config, capture_terms=capture_terms)
    else:
        waveform = oracle_waveform(column, schedule, config, oracle, capture_terms=capture_terms)
    counts = accumulate_counts(waveform, schedule, config.adc)
    result = AdcResult(counts.counts_pos, counts.counts_neg, counts.residual_pos,
                       counts.residual_neg, digitize(counts, config.adc))
    return MacResult(waveform, result, ideal_mac(w, x), w, x)
