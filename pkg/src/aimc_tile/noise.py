"""PCM 1/f read noise: trace synthesis, sigma(dG) tables and cheaper tiers.

Four tiers trade fidelity for speed:

* ``MonteCarlo`` synthesises a conductance trace per device and averages it
  over the device's own drive window.
* ``Lut`` draws Gaussian dG with sigma looked up per device from a table
  over (conductance, integration time).
* ``Analytical`` replaces the table with a per-time power-law fit.
* ``BatchMean`` uses the table at the batch-mean integration time for all
  devices.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, signal

from .config import NoiseConfig, NoiseTier
from .errors import FitQualityError, RangeError, StatisticalQualityError
from .tile import ConductanceColumn, PwmSchedule, Rail

LUT_T_RANGE = (1e-9, 200e-9)
FIT_MAX_RESIDUAL = 0.05


def _is_pow2(n):
    return n >= 1 and n & (n - 1) == 0


def trace_length(cfg: NoiseConfig, dt_sample, min_samples=1):
    """Shortest power-of-two trace whose lowest bin reaches ``f_min``."""
    need = max(min_samples, 1.0 / (cfg.f_min * dt_sample))
    return 1 << max(1, math.ceil(math.log2(need) - 1e-9))


def band_bins(cfg: NoiseConfig, n_samples, dt_sample):
    """FFT bin indices inside [f_min, f_max], excluding DC and Nyquist."""
    k = np.arange(1, n_samples // 2)
    f = k / (n_samples * dt_sample)
    keep = (f >= cfg.f_min * (1 - 1e-9)) & (f <= cfg.f_max * (1 + 1e-9))
    return k[keep]


def _bin_amplitudes(g0, cfg, n_samples, dt_sample, bins):
    # one-sided PSD S(f) = alpha * g^gamma / f; a cosine of amplitude A
    # carries power A^2/2 in a bin of width 1/(N dt)
    g0 = np.asarray(g0, dtype=float)
    f = bins / (n_samples * dt_sample)
    psd = cfg.alpha * np.power(g0[..., None], cfg.gamma) / f
    return np.sqrt(2.0 * psd / (n_samples * dt_sample))


def seed_key(*parts):
    """Flatten nested seed parts into one SeedSequence entropy list."""
    out = []
    for p in parts:
        if isinstance(p, (tuple, list, np.ndarray)):
            out.extend(seed_key(*p))
        else:
            out.append(int(p))
    return out


def _phases(key, n_bins):
    rng = np.random.default_rng(seed_key(key))
    return rng.uniform(0.0, 2.0 * np.pi, n_bins)


def _synthesize(g0, n_samples, dt_sample, cfg, seed_keys):
    """Noise-only traces (deviation from g0), one per seed key."""
    bins = band_bins(cfg, n_samples, dt_sample)
    amp = _bin_amplitudes(g0, cfg, n_samples, dt_sample, bins)
    phases = np.stack([_phases(key, bins.size) for key in seed_keys]) if bins.size else \
        np.zeros((len(seed_keys), 0))
    spectrum = np.zeros((len(seed_keys), n_samples // 2 + 1), dtype=complex)
    spectrum[:, bins] = 0.5 * n_samples * amp * np.exp(1j * phases)
    return np.fft.irfft(spectrum, n=n_samples, axis=-1)


def synthesize_trace(g0, n_samples, dt_sample, cfg: NoiseConfig, trace_seed):
    """One conductance trace ``g0 + dG(t)`` with a 1/f spectrum.

    Spectral synthesis: every bin in the configured band gets the amplitude
    of the target PSD and a uniformly random phase from ``trace_seed``.
    """
    if not _is_pow2(int(n_samples)):
        raise RangeError(f"n_samples must be a power of two, got {n_samples}")
    if g0 < 0:
        raise RangeError("g0 must be >= 0")
    dev = _synthesize(g0, int(n_samples), dt_sample, cfg, [trace_seed])[0]
    return g0 + dev


def psd_estimate(trace, dt_sample):
    """One-sided periodogram of a mean-removed trace, DC bin dropped."""
    x = np.asarray(trace, dtype=float)
    if x.size < 64:
        raise RangeError("psd_estimate needs at least 64 samples")
    f, p = signal.periodogram(x, fs=1.0 / dt_sample, detrend="constant", scaling="density")
    return f[1:], p[1:]


def psd_slope(freqs, power, f_lo, f_hi):
    """Least-squares log-log slope of a spectrum inside [f_lo, f_hi]."""
    sel = (freqs >= f_lo) & (freqs <= f_hi) & (power > 0)
    return float(np.polyfit(np.log10(freqs[sel]), np.log10(power[sel]), 1)[0])


def _window_means(traces, windows):
    csum = np.cumsum(traces, axis=-1)
    return np.stack([csum[..., m - 1] / m for m in windows], axis=-1)


def _steps(t_int, dt):
    m = t_int / dt
    if m < 1 - 1e-9 or abs(m - round(m)) > 1e-6:
        raise RangeError(f"integration time {t_int} is not a positive multiple of dt={dt}")
    return int(round(m))


def _sigma_ensemble(g0, windows, n_traces, cfg, dt, seed):
    """sigma(dG) for several window lengths from one shared ensemble."""
    n = trace_length(cfg, dt, max(windows))
    keys = [(seed, i) for i in range(n_traces)]
    traces = _synthesize(g0, n, dt, cfg, keys)
    dg = _window_means(traces, windows)
    return np.std(dg, axis=0, ddof=1)


def delta_g_sigma_mc(g0, t_int, n_traces, cfg: NoiseConfig, dt=1e-9, seed=None):
    """Monte-Carlo sigma of the time-averaged conductance error.

    Each trace is averaged over ``[0, t_int)``; the sample standard deviation
    of ``mean - g0`` over ``n_traces`` traces is returned.
    """
    if n_traces < 1000:
        raise RangeError("delta_g_sigma_mc needs at least 1000 traces")
    m = _steps(t_int, dt)
    seed = cfg.seed if seed is None else seed
    return float(_sigma_ensemble(g0, [m], n_traces, cfg, dt, seed)[0])


# ---------------------------------------------------------------------------
# Lookup table and analytical fit
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseLut:
    g_axis: np.ndarray
    t_axis: np.ndarray
    sigma: np.ndarray  # shape (len(g_axis), len(t_axis))

    def __post_init__(self):
        g = np.array(self.g_axis, dtype=float)
        t = np.array(self.t_axis, dtype=float)
        s = np.array(self.sigma, dtype=float).reshape(g.size, t.size)
        if np.any(np.diff(g) <= 0) or np.any(np.diff(t) <= 0):
            raise RangeError("LUT axes must be strictly increasing")
        if np.any(s < 0):
            raise RangeError("LUT sigma must be non-negative")
        for name, arr in (("g_axis", g), ("t_axis", t), ("sigma", s)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def to_dict(self):
        return {"g_axis": self.g_axis.tolist(), "t_axis": self.t_axis.tolist(),
                "sigma": self.sigma.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(data["g_axis"], data["t_axis"], data["sigma"])

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def check_lut_monotone(lut: NoiseLut, n_traces):
    """Raise if sigma rises with t or falls with g beyond MC tolerance."""
    tol = 3.0 / math.sqrt(n_traces)
    s = lut.sigma
    rise_t = s[:, 1:] - s[:, :-1] * (1 + tol)
    fall_g = s[:-1, :] * (1 - tol) - s[1:, :]
    if np.any(rise_t > 0):
        i, j = np.argwhere(rise_t > 0)[0]
        raise StatisticalQualityError(
            f"sigma increases with t at g={lut.g_axis[i]:.3g}, t={lut.t_axis[j + 1]:.3g}")
    if np.any(fall_g > 0):
        i, j = np.argwhere(fall_g > 0)[0]
        raise StatisticalQualityError(
            f"sigma decreases with g at g={lut.g_axis[i + 1]:.3g}, t={lut.t_axis[j]:.3g}")


def build_lut(cfg: NoiseConfig, g_grid, t_grid, n_traces, dt=1e-9, seed=None):
    """Monte-Carlo sigma(dG) over a conductance x integration-time grid.

    All cells share the same trace seeds, so the table is smooth across the
    grid and monotonicity can be checked tightly.
    """
    g_grid = np.asarray(g_grid, dtype=float)
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(g_grid) <= 0) or np.any(np.diff(t_grid) <= 0):
        raise RangeError("grids must be sorted ascending")
    lo, hi = LUT_T_RANGE
    if t_grid[0] < lo * (1 - 1e-9) or t_grid[-1] > hi * (1 + 1e-9):
        raise RangeError("t_grid must lie within 1-200 ns")
    seed = cfg.seed if seed is None else seed
    windows = [_steps(t, dt) for t in t_grid]
    sigma = np.stack([_sigma_ensemble(g, windows, n_traces, cfg, dt, seed) for g in g_grid])
    lut = NoiseLut(g_grid, t_grid, sigma)
    check_lut_monotone(lut, n_traces)
    return lut


def _axis_weights(axis, x):
    """Bracketing indices and linear weights with clamping at both ends."""
    x = np.clip(x, axis[0], axis[-1])
    if axis.size == 1:
        zero = np.zeros(np.shape(x), dtype=int)
        return zero, zero, np.zeros(np.shape(x))
    hi = np.clip(np.searchsorted(axis, x, side="right"), 1, axis.size - 1)
    lo = hi - 1
    w = (x - axis[lo]) / (axis[hi] - axis[lo])
    return lo, hi, w


def lut_sigma(lut: NoiseLut, g, t):
    """Bilinear interpolation on (g, log t), clamped to the table edges."""
    g = np.asarray(g, dtype=float)
    t = np.asarray(t, dtype=float)
    g, t = np.broadcast_arrays(g, t)
    g0, g1, wg = _axis_weights(lut.g_axis, g)
    t0, t1, wt = _axis_weights(np.log(lut.t_axis), np.log(t))
    s = lut.sigma
    out = ((1 - wg) * (1 - wt) * s[g0, t0] + wg * (1 - wt) * s[g1, t0]
           + (1 - wg) * wt * s[g0, t1] + wg * wt * s[g1, t1])
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True, eq=False)
class NoiseFit:
    """Per-integration-time fit ``sigma(G) = a * G**b + c``."""

    t_axis: np.ndarray
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    residual: np.ndarray  # normalised RMS residual per slice

    def evaluate(self, g, t):
        """Evaluate the fit, interpolating between slices on log t."""
        g = np.asarray(g, dtype=float)
        t = np.asarray(t, dtype=float)
        g, t = np.broadcast_arrays(g, t)
        t0, t1, w = _axis_weights(np.log(self.t_axis), np.log(t))

        def slice_value(j):
            return self.a[j] * np.power(g, self.b[j]) + self.c[j]

        out = (1 - w) * slice_value(t0) + w * slice_value(t1)
        return float(out) if out.ndim == 0 else out

    def to_list(self):
        return [{"t": float(t), "a": float(a), "b": float(b), "c": float(c)}
                for t, a, b, c in zip(self.t_axis, self.a, self.b, self.c)]

    def to_json(self):
        return json.dumps(self.to_list())

    @classmethod
    def from_list(cls, records):
        cols = {k: np.array([r[k] for r in records], dtype=float) for k in ("t", "a", "b", "c")}
        return cls(cols["t"], cols["a"], cols["b"], cols["c"], np.zeros(len(records)))

    @classmethod
    def from_json(cls, text):
        return cls.from_list(json.loads(text))


def _fit_slice(g, s):
    if not np.any(s > 0):
        return 0.0, 1.0, 0.0
    g_scale, s_scale = g.max(), s.max()
    x, y = g / g_scale, s / s_scale

    def model(xx, a, b, c):
        return a * np.power(xx, b) + c

    pos = (x > 0) & (y > 0)
    b0 = np.polyfit(np.log(x[pos]), np.log(y[pos]), 1)[0] if pos.sum() >= 2 else 1.0
    b0 = float(np.clip(b0, 0.05, 5.0))
    (a, b, c), _ = optimize.curve_fit(model, x, y, p0=(1.0, b0, 0.0),
                                      bounds=([0.0, 0.0, 0.0], [np.inf, 10.0, np.inf]),
                                      maxfev=20000)
    return a * s_scale / g_scale ** b, b, c * s_scale


def fit_analytical(lut: NoiseLut):
    """Least-squares power-law fit of every t slice of the table."""
    if lut.g_axis.size < 4:
        raise FitQualityError("analytical fit needs at least 4 conductance points")
    coeffs, residuals = [], []
    for j in range(lut.t_axis.size):
        s = lut.sigma[:, j]
        a, b, c = _fit_slice(lut.g_axis, s)
        pred = a * np.power(lut.g_axis, b) + c
        norm = math.sqrt(np.mean(s ** 2))
        res = math.sqrt(np.mean((pred - s) ** 2)) / norm if norm > 0 else 0.0
        if res > FIT_MAX_RESIDUAL:
            raise FitQualityError(
                f"power-law fit residual {res:.3f} at t={lut.t_axis[j]:.3g} exceeds 5%")
        coeffs.append((a, b, c))
        residuals.append(res)
    a, b, c = (np.array(v) for v in zip(*coeffs))
    return NoiseFit(lut.t_axis.copy(), a, b, c, np.array(residuals))


# ---------------------------------------------------------------------------
# Per-MAC sampling
# ---------------------------------------------------------------------------

def _mc_deltas(g, n_steps, weights, cfg, dt, seed):
    """Weighted window averages of synthesised traces, one per device."""
    n = trace_length(cfg, dt, n_steps)
    out = np.zeros(g.size)
    live = np.flatnonzero((g > 0) & (weights.sum(axis=-1) > 0))
    for start in range(0, live.size, 256):
        idx = live[start:start + 256]
        traces = _synthesize(g[idx], n, dt, cfg, [(seed, int(i)) for i in idx])
        w = weights[idx]
        out[idx] = np.sum(traces[:, :n_steps] * w, axis=-1) / w.sum(axis=-1)
    return out


def batch_mean_time(t_int):
    """Root-mean-square of the positive integration times in ``t_int``.

    Each device's noise enters the MAC scaled by its activation, so the
    quadratic mean represents a batch better than the arithmetic one.
    """
    t = np.asarray(t_int, dtype=float).ravel()
    t = t[t > 0]
    if t.size == 0:
        raise RangeError("batch has no driven rows")
    return float(np.sqrt(np.mean(t ** 2)))


def sample_noise_batch(column: ConductanceColumn, mean_t_int, tier, source, seed,
                       *, schedule: PwmSchedule | None = None, dt=1e-9):
    """Column with every device perturbed by read noise.

    Parameters
    ----------
    column : ConductanceColumn
    mean_t_int : float or array
        Integration time; a per-row array for the ``Lut``/``Analytical``
        tiers, the batch value for ``BatchMean`` (arrays are reduced with
        :func:`batch_mean_time`).
    tier : NoiseTier
    source : NoiseLut, NoiseFit or NoiseConfig (``MonteCarlo`` tier)
    seed : int or tuple
        Seed key for the Gaussian draws (or trace phases).
    schedule : PwmSchedule, optional
        Required by ``MonteCarlo``: each device's trace is averaged over
        the steps its row is driven, weighted by the phase tick weight.
    """
    tier = NoiseTier(tier)
    t = np.asarray(mean_t_int, dtype=float)
    if np.any(t <= 0):
        raise RangeError("integration time must be > 0")
    g = np.concatenate([column.g_pos, column.g_neg])
    n = len(column)
    if tier is NoiseTier.MONTE_CARLO:
        if schedule is None:
            m = np.broadcast_to(np.rint(t / dt).astype(int), (n,))
            n_steps = int(m.max())
            rows_w = (np.arange(n_steps)[None, :] < m[:, None]).astype(float)
        else:
            rows_w = np.concatenate(
                [(p.rails != Rail.OFF).T * float(p.tick_weight) for p in schedule.phases], axis=1)
            n_steps = rows_w.shape[1]
        weights = np.concatenate([rows_w, rows_w])
        dg = _mc_deltas(g, n_steps, weights, source, dt, seed)
    else:
        if tier is NoiseTier.BATCH_MEAN:
            t = np.full(n, batch_mean_time(t))
        t2 = np.concatenate([np.broadcast_to(t, (n,))] * 2)
        if tier is NoiseTier.ANALYTICAL:
            sigma = source.evaluate(g, t2)
        else:
            sigma = lut_sigma(source, g, t2)
        sigma = np.where(g > 0, sigma, 0.0)
        z = np.random.default_rng(seed_key(seed)).standard_normal(g.size)
        dg = sigma * z
    noisy = np.maximum(g + dg, 0.0)
    return ConductanceColumn(noisy[:n], noisy[n:])
