"""Fidelity metrics, per-term error heatmaps and per-column compensation."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, UndefinedMetricError


@dataclass(frozen=True)
class ErrorReport:
    epsilon: float
    r_squared: float
    fit_slope: float
    fit_offset: float
    n_points: int

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict())


def _linear_fit(x, y):
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    slope = float(np.dot(dx, y - ym) / np.dot(dx, dx))
    return slope, float(ym - slope * xm)


def epsilon_metric(actual, ideal):
    """Scatter of ``actual`` about its best affine fit to ``ideal``.

    The residual standard deviation is referred back to ideal units through
    the fitted slope, then divided by the spread of ``ideal``.  Any affine
    image of ``ideal`` therefore scores exactly zero, whatever its units.
    """
    y = np.asarray(actual, dtype=float)
    x = np.asarray(ideal, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError("actual and ideal must be 1-D and of equal length")
    if x.size < 3:
        raise UndefinedMetricError("need at least 3 points")
    if not np.std(x) > 0:
        raise UndefinedMetricError("ideal outputs are constant")
    slope, offset = _linear_fit(x, y)
    resid = y - (slope * x + offset)
    ss_res = float(np.dot(resid, resid))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res == 0 else 0.0)
    eps = math.inf if slope == 0 else float(np.std(resid) / (abs(slope) * np.std(x)))
    return ErrorReport(eps, r2, slope, offset, int(x.size))


def identity_mse(actual, ideal):
    """Mean squared distance from the identity line."""
    d = np.asarray(actual, dtype=float) - np.asarray(ideal, dtype=float)
    return float(np.mean(d ** 2))


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Heatmap:
    term_edges: np.ndarray
    error_edges: np.ndarray
    counts: np.ndarray  # (n_term_bins, n_error_bins)
    density: np.ndarray  # counts normalised within each term bin

    def error_bin_of(self, value):
        idx = np.searchsorted(self.error_edges, value, side="right") - 1
        return int(np.clip(idx, 0, self.error_edges.size - 2))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["term_lo", "term_hi", "error_lo", "error_hi", "count", "density"])
            for i in range(self.counts.shape[0]):
                for j in range(self.counts.shape[1]):
                    out.writerow([repr(float(self.term_edges[i])), repr(float(self.term_edges[i + 1])),
                                  repr(float(self.error_edges[j])), repr(float(self.error_edges[j + 1])),
                                  int(self.counts[i, j]), repr(float(self.density[i, j]))])


def _central_range(v, coverage, n_bins):
    tail = (1.0 - coverage) / 2.0
    lo, hi = np.quantile(v, [tail, 1.0 - tail])
    if hi - lo <= 1e-9 * max(abs(lo), abs(hi)):  # constant up to roundoff
        # centre the value inside a bin so roundoff cannot straddle an edge
        centre = 0.5 * (lo + hi)
        width = 2e-6 * max(abs(centre), 1.0) / n_bins
        lo = centre - (n_bins // 2 + 0.5) * width
        hi = lo + n_bins * width
    return float(lo), float(hi)


def term_error_heatmap(model_terms, oracle_terms, n_bins=64, coverage=0.995):
    """Row-normalised 2-D histogram of (oracle term, model - oracle).

    Bins are uniform over the central ``coverage`` quantile range of each
    axis; values outside are clipped into the edge bins.
    """
    model = np.asarray(model_terms, dtype=float).ravel()
    oracle = np.asarray(oracle_terms, dtype=float).ravel()
    if model.shape != oracle.shape:
        raise DimensionError("model and oracle term vectors differ in length")
    err = model - oracle
    t_edges = np.linspace(*_central_range(oracle, coverage, n_bins), n_bins + 1)
    e_edges = np.linspace(*_central_range(err, coverage, n_bins), n_bins + 1)
    ti = np.clip(np.searchsorted(t_edges, oracle, side="right") - 1, 0, n_bins - 1)
    ei = np.clip(np.searchsorted(e_edges, err, side="right") - 1, 0, n_bins - 1)
    counts = np.zeros((n_bins, n_bins), dtype=np.int64)
    np.add.at(counts, (ti, ei), 1)
    totals = counts.sum(axis=1, keepdims=True)
    density = np.divide(counts, totals, out=np.zeros(counts.shape), where=totals > 0)
    return Heatmap(t_edges, e_edges, counts, density)


# ---------------------------------------------------------------------------
# compensation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CompensationFactors:
    shift: np.ndarray
    scale: np.ndarray
    flagged: np.ndarray  # columns left at identity because they were degenerate

    def to_dict(self):
        return {"shift": self.shift.tolist(), "scale": self.scale.tolist(),
                "flagged": self.flagged.tolist()}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data):
        n = len(data["scale"])
        return cls(np.array(data["shift"], dtype=float), np.array(data["scale"], dtype=float),
                   np.array(data.get("flagged", [False] * n), dtype=bool))

    @classmethod
    def identity(cls, n_columns):
        return cls(np.zeros(n_columns), np.ones(n_columns), np.zeros(n_columns, dtype=bool))


def _as_matrix(a):
    a = np.asarray(a, dtype=float)
    return a[:, None] if a.ndim == 1 else a


def calibrate_columns(ideal_outputs, noisy_outputs):
    """Per-column least-squares ``ideal ~ scale * noisy + shift``."""
    ideal = _as_matrix(ideal_outputs)
    noisy = _as_matrix(noisy_outputs)
    if ideal.shape != noisy.shape:
        raise DimensionError("ideal and noisy outputs must have the same shape")
    if ideal.shape[0] < 8:
        raise DimensionError("calibration needs at least 8 samples")
    n_col = ideal.shape[1]
    shift, scale = np.zeros(n_col), np.ones(n_col)
    flagged = np.zeros(n_col, dtype=bool)
    for c in range(n_col):
        if not np.std(noisy[:, c]) > 0:
            flagged[c] = True
            continue
        scale[c], shift[c] = _linear_fit(noisy[:, c], ideal[:, c])
        if scale[c] == 0 or not np.isfinite(scale[c]):
            flagged[c] = True
            shift[c], scale[c] = 0.0, 1.0
    return CompensationFactors(shift, scale, flagged)


def apply_compensation(outputs, factors: CompensationFactors):
    out = np.asarray(outputs, dtype=float)
    squeeze = out.ndim == 1
    out = _as_matrix(out)
    if out.shape[1] != factors.scale.size:
        raise DimensionError("column count does not match the compensation factors")
    res = out * factors.scale[None, :] + factors.shift[None, :]
    return res[:, 0] if squeeze else res
