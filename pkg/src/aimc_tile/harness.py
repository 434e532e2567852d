"""Seeded Gaussian sweeps, experiment matrices and constant calibration."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .adc import integration_times, mac_pipeline
from .analysis import epsilon_metric
from .config import NoiseConfig, NoiseTier, OtaTable, PwmMode, TileConfig, _check_keys
from .errors import CalibrationError, ConfigError
from .irdrop import WireModel, oracle_waveform
from .noise import batch_mean_time, build_lut, fit_analytical
from .tile import build_schedule, map_weights, quantize_activations, quantize_weights

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUTPUT_DIR_ENV = "AIMC_TILE_OUTPUT_DIR"
CHECKPOINTS = ("analog", "digital")
EPSILON_IR_TARGET = 0.0231

# noise LUT grid used by the Lut/Analytical/BatchMean tiers
LUT_G_POINTS = 10
LUT_T_GRID = tuple(2.0 ** k * 1e-9 for k in range(8))  # 1 ... 128 ns
LUT_TRACES = 2000
EXACT_EPSILON = 1e-12  # epsilon at or below this is roundoff


# ---------------------------------------------------------------------------
# Config records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Distribution:
    """Gaussian clipped to ``[-clip, clip]``; ``clip`` is also the full scale."""

    mean: float = 0.0
    std: float = 0.3
    clip: float = 1.0

    def __post_init__(self):
        if self.std < 0 or not self.clip > 0:
            raise ConfigError("distribution needs std >= 0 and clip > 0")

    def to_dict(self):
        return {"mean": self.mean, "std": self.std, "clip": self.clip}

    @classmethod
    def from_dict(cls, data):
        _check_keys(data, ("mean", "std", "clip"), "distribution")
        return cls(**data)


@dataclass(frozen=True)
class Variant:
    """A set of enabled non-idealities."""

    apparent_weight: bool = False
    ir_drop: bool = False
    ota: bool = False
    noise: NoiseTier | None = None

    @classmethod
    def parse(cls, text):
        """Parse ``"ideal"``, ``"full"`` or ``"+"``-joined tokens.

        Tokens: ``aw``, ``ir``, ``ota``, ``noise:<tier>`` (tier defaults to
        ``Lut``); ``full`` stands for ``aw+ir+ota``.
        """
        flags = dict(apparent_weight=False, ir_drop=False, ota=False, noise=None)
        for tok in str(text).strip().lower().split("+"):
            tok = tok.strip()
            if tok == "ideal":
                continue
            if tok == "full":
                flags.update(apparent_weight=True, ir_drop=True, ota=True)
            elif tok == "aw":
                flags["apparent_weight"] = True
            elif tok == "ir":
                flags["ir_drop"] = True
            elif tok == "ota":
                flags["ota"] = True
            elif tok.startswith("noise"):
                _, _, tier = tok.partition(":")
                names = {t.value.lower(): t for t in NoiseTier}
                if tier and tier not in names:
                    raise ConfigError(f"unknown noise tier {tier!r}")
                flags["noise"] = names[tier] if tier else NoiseTier.LUT
            else:
                raise ConfigError(f"unknown variant token {tok!r}")
        return cls(**flags)

    @property
    def name(self):
        parts = [t for t, on in (("aw", self.apparent_weight), ("ir", self.ir_drop),
                                 ("ota", self.ota)) if on]
        if self.noise is not None:
            parts.append(f"noise:{self.noise.value}")
        return "+".join(parts) if parts else "ideal"

    def apply(self, tile: TileConfig):
        """Tile config with the disabled effects switched off."""
        noise = None
        if self.noise is not None:
            noise = replace(tile.noise or NoiseConfig(), tier=self.noise)
        return tile.with_(
            beta=tile.beta if self.apparent_weight else 0.0,
            r_scale=tile.r_scale if self.ir_drop else 0.0,
            ota_table=tile.ota_table if self.ota else OtaTable.zero(),
            noise=noise,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    tile: TileConfig = field(default_factory=TileConfig)
    n_macs: int = 200
    weight_dist: Distribution = field(default_factory=lambda: Distribution(0.0, 0.35, 1.0))
    activation_dist: Distribution = field(default_factory=lambda: Distribution(0.0, 0.45, 1.0))
    model_variants: tuple = ("ideal", "ir", "full")
    oracle_enabled: bool = False
    output_dir: str = "out"
    master_seed: int = 0
    workers: int = 1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.n_macs < 1:
            raise ConfigError("n_macs must be >= 1")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if isinstance(self.model_variants, str):
            object.__setattr__(self, "model_variants", (self.model_variants,))
        names = tuple(Variant.parse(v).name for v in self.model_variants)
        object.__setattr__(self, "model_variants", names)

    @property
    def variants(self):
        return [Variant.parse(v) for v in self.model_variants]

    def with_(self, **changes):
        return replace(self, **changes)

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "tile": self.tile.to_dict(),
            "n_macs": self.n_macs,
            "weight_dist": self.weight_dist.to_dict(),
            "activation_dist": self.activation_dist.to_dict(),
            "model_variants": list(self.model_variants),
            "oracle_enabled": self.oracle_enabled,
            "output_dir": self.output_dir,
            "master_seed": self.master_seed,
            "workers": self.workers,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, data):
        _check_keys(data, [f.name for f in fields(cls)], "ExperimentConfig")
        kwargs = dict(data)
        kwargs.setdefault("schema_version", SCHEMA_VERSION)
        if "tile" in kwargs:
            kwargs["tile"] = TileConfig.from_dict(kwargs["tile"])
        for key in ("weight_dist", "activation_dist"):
            if key in kwargs:
                kwargs[key] = Distribution.from_dict(kwargs[key])
        if "model_variants" in kwargs:
            kwargs["model_variants"] = tuple(kwargs["model_variants"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def resolve_output_dir(cfg: ExperimentConfig):
    return Path(os.environ.get(OUTPUT_DIR_ENV) or cfg.output_dir)


# ---------------------------------------------------------------------------
# Sweep generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Sweep:
    weights: np.ndarray  # (n_macs, n_rows), on the weight grid
    activations: np.ndarray  # (n_macs, n_rows), int PWM steps
    w_max: float


def generate_sweep(cfg: ExperimentConfig):
    """Seeded clipped-Gaussian weights and activations, already quantized."""
    shape = (cfg.n_macs, cfg.tile.n_rows)
    wd, ad = cfg.weight_dist, cfg.activation_dist
    rng_w = np.random.default_rng([cfg.master_seed, 0])
    rng_x = np.random.default_rng([cfg.master_seed, 1])
    w = np.clip(rng_w.normal(wd.mean, wd.std, shape), -wd.clip, wd.clip)
    x = np.clip(rng_x.normal(ad.mean, ad.std, shape), -ad.clip, ad.clip)
    return Sweep(quantize_weights(w, wd.clip), quantize_activations(x, ad.clip), wd.clip)


def sweep_current_range(cfg: ExperimentConfig, sweep: Sweep | None = None,
                        variant="full", wire_model=WireModel.PER_CELL):
    """Largest |column current| seen by the nodal oracle over the sweep."""
    sweep = generate_sweep(cfg) if sweep is None else sweep
    tile = Variant.parse(variant).apply(cfg.tile)
    peak = 0.0
    for w, x in zip(sweep.weights, sweep.activations):
        wave = oracle_waveform(map_weights(w, tile.g_max, sweep.w_max), build_schedule(x, tile),
                               tile, wire_model)
        if wave.currents.size:
            peak = max(peak, float(np.max(np.abs(wave.currents))))
    return peak


# ---------------------------------------------------------------------------
# Noise sources
# ---------------------------------------------------------------------------

_source_cache: dict = {}


def lut_grid(tile: TileConfig):
    g = np.geomspace(tile.g_max / 100.0, tile.g_max, LUT_G_POINTS)
    return g, np.array(LUT_T_GRID)


def noise_lut(noise: NoiseConfig, tile: TileConfig, n_traces=LUT_TRACES, cache_dir=None):
    """Build (or load from cache) the sigma(dG) table for ``noise``."""
    g, t = lut_grid(tile)
    key_src = json.dumps({"noise": replace(noise, tier=NoiseTier.LUT).to_dict(), "g": g.tolist(),
                          "t": t.tolist(), "n": n_traces, "dt": tile.dt}, sort_keys=True)
    key = hashlib.sha256(key_src.encode()).hexdigest()[:16]
    if key in _source_cache:
        return _source_cache[key]
    from .noise import NoiseLut

    path = None if cache_dir is None else Path(cache_dir) / f"noise_lut_{key}.json"
    if path is not None and path.exists():
        lut = NoiseLut.from_json(path.read_text())
    else:
        lut = build_lut(noise, g, t, n_traces, dt=tile.dt)
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(lut.to_json())
    _source_cache[key] = lut
    return lut


def noise_source(noise: NoiseConfig, tile: TileConfig, cache_dir=None):
    """Source object matching the tier: LUT, fitted power law or config (MC)."""
    if noise.tier is NoiseTier.MONTE_CARLO:
        return noise
    lut = noise_lut(noise, tile, cache_dir=cache_dir)
    if noise.tier is NoiseTier.ANALYTICAL:
        return fit_analytical(lut)
    return lut


def batch_mean_integration_time(sweep: Sweep, tile: TileConfig):
    """Batch integration time over every driven row of every MAC in the sweep."""
    t = np.concatenate([integration_times(build_schedule(x, tile), tile.dt)
                        for x in sweep.activations])
    return batch_mean_time(t) if np.any(t > 0) else tile.dt


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def canonical_name(variant):
    """Canonical variant name, keeping an ``@oracle`` suffix if present."""
    base, sep, suffix = str(variant).partition("@")
    return Variant.parse(base).name + sep + suffix


@dataclass(frozen=True, eq=False)
class SweepRecord:
    mac_index: int
    ideal_mac: float
    analog: dict  # variant name -> tick-weighted charge [C]
    digital: dict  # variant name -> digital MAC [counts]
    terms: dict | None = None  # variant name -> per-row charge terms


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    records: list
    reports: list  # (variant, checkpoint, ErrorReport)

    def report(self, variant, checkpoint="analog"):
        name = canonical_name(variant)
        for v, c, r in self.reports:
            if v == name and c == checkpoint:
                return r
        raise KeyError((variant, checkpoint))

    def epsilon(self, variant, checkpoint="analog"):
        return self.report(variant, checkpoint).epsilon

    def column(self, variant, checkpoint="analog"):
        name = canonical_name(variant)
        attr = "analog" if checkpoint == "analog" else "digital"
        return np.array([getattr(r, attr)[name] for r in self.records], dtype=float)

    @property
    def ideal(self):
        return np.array([r.ideal_mac for r in self.records])

    def epsilon_csv(self):
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["variant", "checkpoint", "epsilon", "r_squared", "fit_slope",
                      "fit_offset", "n"])
        for v, c, r in self.reports:
            out.writerow([v, c, repr(r.epsilon), repr(r.r_squared), repr(r.fit_slope),
                          repr(r.fit_offset), r.n_points])
        return buf.getvalue()

    def records_csv(self):
        names = list(self.records[0].analog) if self.records else []
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["mac", "ideal_mac"] + [f"{n}|analog" for n in names]
                     + [f"{n}|digital" for n in names])
        for r in self.records:
            out.writerow([r.mac_index, repr(r.ideal_mac)] + [repr(r.analog[n]) for n in names]
                         + [r.digital[n] for n in names])
        return buf.getvalue()


def _mac_task(args):
    w, x, tile, w_max, source, seed, batch_t, oracle, capture = args
    res = mac_pipeline(w, x, tile, w_max=w_max, noise_source=source, noise_seed=seed,
                       batch_mean_t=batch_t, capture_terms=capture, oracle=oracle)
    return res.analog, res.digital_mac, res.waveform.term_charges


def _map(tasks, workers):
    if workers <= 1:
        return [_mac_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map() yields in submission order, so results stay in MAC order
        return list(pool.map(_mac_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


def _variant_runs(cfg: ExperimentConfig):
    runs = [(v.name, v, None) for v in cfg.variants]
    if cfg.oracle_enabled:
        runs += [(f"{v.name}@oracle", v, WireModel.PER_CELL) for v in cfg.variants]
    return runs


def run_experiment(cfg: ExperimentConfig, sweep: Sweep | None = None, *, capture_terms=False,
                   write=False, cache_dir=None):
    """Evaluate every variant on the sweep and score both checkpoints.

    With ``oracle_enabled`` each variant is additionally evaluated with the
    per-cell nodal oracle in place of the fast model (suffix ``@oracle``).
    """
    sweep = generate_sweep(cfg) if sweep is None else sweep
    ideal = [float(np.dot(w, x)) for w, x in zip(sweep.weights, sweep.activations)]
    runs = _variant_runs(cfg)
    analog = {name: None for name, _, _ in runs}
    digital = dict(analog)
    terms = {} if capture_terms else None
    batch_t = None
    for name, variant, oracle in runs:
        tile = variant.apply(cfg.tile)
        source = None
        if tile.noise is not None:
            source = noise_source(tile.noise, tile, cache_dir=cache_dir)
            if tile.noise.tier is NoiseTier.BATCH_MEAN and batch_t is None:
                batch_t = batch_mean_integration_time(sweep, tile)
        seed_base = tile.noise.seed if tile.noise is not None else 0
        tasks = [(w, x, tile, sweep.w_max, source, (seed_base, i), batch_t, oracle, capture_terms)
                 for i, (w, x) in enumerate(zip(sweep.weights, sweep.activations))]
        out = _map(tasks, cfg.workers)
        analog[name] = [o[0] for o in out]
        digital[name] = [o[1] for o in out]
        if capture_terms:
            terms[name] = [o[2] for o in out]
    records = [SweepRecord(i, ideal[i], {n: analog[n][i] for n in analog},
                           {n: digital[n][i] for n in digital},
                           None if terms is None else {n: terms[n][i] for n in terms})
               for i in range(cfg.n_macs)]
    reports = []
    for name, _, _ in runs:
        reports.append((name, "analog", epsilon_metric(analog[name], ideal)))
        reports.append((name, "digital", epsilon_metric(np.array(digital[name], float), ideal)))
    result = ExperimentResult(records, reports)
    if write:
        out_dir = resolve_output_dir(cfg)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "epsilon.csv").write_text(result.epsilon_csv())
        (out_dir / "records.csv").write_text(result.records_csv())
    return result


# ---------------------------------------------------------------------------
# Calibration and PWM comparison
# ---------------------------------------------------------------------------

def _epsilon_ir(cfg: ExperimentConfig, sweep: Sweep, r_cell):
    run = cfg.with_(tile=cfg.tile.with_(r_cell=r_cell, r_scale=1.0), model_variants=("ir",),
                    oracle_enabled=False)
    return run_experiment(run, sweep).epsilon("ir", "analog")


@dataclass(frozen=True)
class CalibrationResult:
    tile: TileConfig
    epsilon_ir: float
    iterations: int


def calibrate_defaults(cfg: ExperimentConfig, target=EPSILON_IR_TARGET, *, r_max=10.0,
                       tol=2e-4, max_iter=60):
    """Bisect ``r_cell`` so the IR-drop-only analog epsilon hits ``target``.

    Returns the tile config with the calibrated ``r_cell`` (and
    ``r_scale = 1``).  ``tol`` is the absolute epsilon tolerance.
    """
    sweep = generate_sweep(cfg)
    if target <= 0:
        return CalibrationResult(cfg.tile.with_(r_cell=0.0, r_scale=1.0), 0.0, 0)
    hi_eps = _epsilon_ir(cfg, sweep, r_max)
    if hi_eps < target - tol:
        raise CalibrationError(
            f"epsilon target {target:.4f} unreachable: r_cell={r_max} ohm only gives {hi_eps:.4f}")
    lo, hi = 0.0, r_max
    eps = hi_eps
    mid = r_max
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        eps = _epsilon_ir(cfg, sweep, mid)
        log.debug("calibrate: r_cell=%.6g eps=%.6g", mid, eps)
        if abs(eps - target) <= tol:
            break
        if eps < target:
            lo = mid
        else:
            hi = mid
    else:
        raise CalibrationError(f"bisection did not converge (last eps {eps:.5f})")
    return CalibrationResult(cfg.tile.with_(r_cell=mid, r_scale=1.0), eps, it)


@dataclass(frozen=True)
class PwmComparison:
    variant: str
    epsilon: dict  # (mode, checkpoint) -> epsilon

    def ratio(self, checkpoint):
        conv = self.epsilon[(PwmMode.CONVENTIONAL.value, checkpoint)]
        split = self.epsilon[(PwmMode.SPLIT.value, checkpoint)]
        if max(conv, split) <= EXACT_EPSILON:
            return 1.0  # both exact up to roundoff
        if conv == 0:
            return 1.0 if split == 0 else float("inf")
        return split / conv

    def to_dict(self):
        return {
            "variant": self.variant,
            "epsilon": {f"{m}/{c}": e for (m, c), e in sorted(self.epsilon.items())},
            "ratio": {c: self.ratio(c) for c in CHECKPOINTS},
        }


def compare_pwm_modes(cfg: ExperimentConfig, variant="full", cache_dir=None):
    """epsilon under both PWM modes on identical sweeps and seeds."""
    sweep = generate_sweep(cfg)
    name = Variant.parse(variant).name
    eps = {}
    for mode in PwmMode:
        run = cfg.with_(tile=cfg.tile.with_(pwm_mode=mode), model_variants=(name,),
                        oracle_enabled=False)
        res = run_experiment(run, sweep, cache_dir=cache_dir)
        for c in CHECKPOINTS:
            eps[(mode.value, c)] = res.epsilon(name, c)
    return PwmComparison(name, eps)



# ---------------------------------------------------------------------------
# Per-term heatmaps and compensation study
# ---------------------------------------------------------------------------

HEATMAP_VARIANTS = ("ideal", "aw", "aw+ir", "full")


@dataclass(frozen=True, eq=False)
class TermStudy:
    heatmaps: dict  # variant -> Heatmap of per-term error against the oracle
    mac_reports: dict  # variant -> ErrorReport of model MAC vs oracle MAC


def term_heatmaps(cfg: ExperimentConfig, variants=HEATMAP_VARIANTS, truth="full", n_bins=64):
    """Per-term error of each model variant against the per-cell oracle.

    The oracle runs the ``truth`` variant and plays the role of the
    reference circuit.  Terms are expressed in ``x_i * w_i`` units.
    """
    from .adc import charge_per_mac_unit
    from .analysis import term_error_heatmap

    sweep = generate_sweep(cfg)
    scale = 1.0 / charge_per_mac_unit(cfg.tile, sweep.w_max)
    ref_cfg = cfg.with_(model_variants=(truth,), oracle_enabled=False)
    ref_tile = Variant.parse(truth).apply(cfg.tile)
    tasks = [(w, x, ref_tile, sweep.w_max, None, None, None, WireModel.PER_CELL, True)
             for w, x in zip(sweep.weights, sweep.activations)]
    ref = _map(tasks, ref_cfg.workers)
    ref_terms = np.concatenate([o[2] for o in ref]) * scale
    ref_mac = np.array([o[0] for o in ref]) * scale
    run = run_experiment(cfg.with_(model_variants=tuple(variants), oracle_enabled=False), sweep,
                         capture_terms=True)
    maps, reports = {}, {}
    for v in variants:
        name = Variant.parse(v).name
        terms = np.concatenate([r.terms[name] for r in run.records]) * scale
        maps[name] = term_error_heatmap(terms, ref_terms, n_bins)
        reports[name] = epsilon_metric(run.column(name) * scale, ref_mac)
    return TermStudy(maps, reports)


@dataclass(frozen=True)
class CompensationStudy:
    mse_before: float
    mse_after: float
    epsilon_before: tuple  # per column, held-out batch
    epsilon_after: tuple


def compensation_study(cfg: ExperimentConfig, r_scale=5.0, variant="full", n_columns=4,
                       n_samples=100, checkpoint="analog"):
    """Fit per-column compensation on one batch and score a held-out batch.

    Each column keeps a fixed weight vector while activations change between
    samples.  Outputs are expressed in ideal MAC units before fitting.
    """
    from .adc import charge_per_mac_unit, counts_per_mac_unit
    from .analysis import apply_compensation, calibrate_columns, identity_mse

    tile = Variant.parse(variant).apply(cfg.tile.with_(r_scale=r_scale))
    w_sweep = generate_sweep(cfg.with_(n_macs=n_columns))
    unit = (charge_per_mac_unit(tile, w_sweep.w_max) if checkpoint == "analog"
            else counts_per_mac_unit(tile, w_sweep.w_max))

    def batch(seed_offset):
        acts = generate_sweep(cfg.with_(n_macs=n_samples,
                                        master_seed=cfg.master_seed + seed_offset)).activations
        ideal = np.empty((n_samples, n_columns))
        out = np.empty((n_samples, n_columns))
        for c, w in enumerate(w_sweep.weights):
            tasks = [(w, x, tile, w_sweep.w_max, None, None, None, None, False) for x in acts]
            res = _map(tasks, cfg.workers)
            ideal[:, c] = acts @ w
            out[:, c] = [(o[0] if checkpoint == "analog" else o[1]) / unit for o in res]
        return ideal, out

    cal_ideal, cal_out = batch(1)
    test_ideal, test_out = batch(2)
    factors = calibrate_columns(cal_ideal, cal_out)
    comp = apply_compensation(test_out, factors)
    eps_before = tuple(epsilon_metric(test_out[:, c], test_ideal[:, c]).epsilon
                       for c in range(n_columns))
    eps_after = tuple(epsilon_metric(comp[:, c], test_ideal[:, c]).epsilon
                      for c in range(n_columns))
    return CompensationStudy(identity_mse(test_out, test_ideal), identity_mse(comp, test_ideal),
                             eps_before, eps_after)
