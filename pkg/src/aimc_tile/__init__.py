"""Column-level simulator for analog in-memory-compute MAC operations.

Submodules
----------
config    configuration records and JSON I/O
tile      weight mapping, PWM schedules, software MAC
irdrop    segment-lumped Thevenin IR-drop model and the nodal ladder oracle
noise     1/f read-noise synthesis, sigma(dG) table and its fit
adc       dual-CCO counter model and the end-to-end MAC pipeline
analysis  epsilon metric, term heatmaps, per-column compensation
harness   seeded sweeps, experiments, calibration
"""
from .adc import MacResult, accumulate_counts, digitize, mac_pipeline
from .analysis import (CompensationFactors, ErrorReport, apply_compensation, calibrate_columns,
                       epsilon_metric, term_error_heatmap)
from .config import AdcConfig, NoiseConfig, NoiseTier, OtaTable, PwmMode, TileConfig
from .harness import ExperimentConfig, calibrate_defaults, generate_sweep, run_experiment
from .irdrop import WireModel, integrate_column, nodal_oracle_current, thevenin_reduce
from .tile import build_schedule, encode_pwm, ideal_mac, map_weights

__version__ = "0.1.0"
