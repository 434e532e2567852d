"""Command-line front end: ``aimc-tile <verb> [--config file.json] [--seed N]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import harness
from .config import NoiseConfig
from .errors import TileError
from .harness import ExperimentConfig

log = logging.getLogger("aimc_tile")


def _load(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_(master_seed=args.seed)
    if args.output_dir:
        cfg = cfg.with_(output_dir=args.output_dir)
    return cfg


def _out_dir(cfg):
    out = harness.resolve_output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, data):
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    log.info("wrote %s", path)


def cmd_sweep(args):
    cfg = _load(args)
    out = _out_dir(cfg)
    res = harness.run_experiment(cfg, write=True, cache_dir=out / "cache")
    _write_json(out / "experiment.json", cfg.to_dict())
    sys.stdout.write(res.epsilon_csv())


def cmd_calibrate(args):
    cfg = _load(args)
    out = _out_dir(cfg)
    cal = harness.calibrate_defaults(cfg, args.target)
    calibrated = cfg.with_(tile=cal.tile)
    _write_json(out / "calibrated_config.json", calibrated.to_dict())
    summary = {"target_epsilon_ir": args.target, "epsilon_ir": cal.epsilon_ir,
               "r_cell": cal.tile.r_cell, "iterations": cal.iterations,
               "max_abs_current": harness.sweep_current_range(calibrated)}
    _write_json(out / "calibration.json", summary)
    print(json.dumps(summary, sort_keys=True))


def cmd_compare_pwm(args):
    cfg = _load(args)
    out = _out_dir(cfg)
    if cfg.tile.noise is None:
        cfg = cfg.with_(tile=cfg.tile.with_(noise=NoiseConfig()))
    report = harness.compare_pwm_modes(cfg, args.variant, cache_dir=out / "cache")
    _write_json(out / "pwm_comparison.json", report.to_dict())
    print(json.dumps(report.to_dict()["ratio"], sort_keys=True))


def cmd_noise_lut(args):
    cfg = _load(args)
    out = _out_dir(cfg)
    noise = cfg.tile.noise or NoiseConfig()
    lut = harness.noise_lut(noise, cfg.tile, n_traces=args.traces)
    fit = harness.fit_analytical(lut)
    _write_json(out / "noise_lut.json", lut.to_dict())
    _write_json(out / "noise_fit.json", fit.to_list())
    print(f"noise LUT {lut.sigma.shape[0]}x{lut.sigma.shape[1]} written to {out}")


def cmd_heatmap(args):
    cfg = _load(args)
    out = _out_dir(cfg)
    study = harness.term_heatmaps(cfg)
    rows = []
    for name, hm in study.heatmaps.items():
        hm.to_csv(out / f"heatmap_{name.replace('+', '_')}.csv")
        rep = study.mac_reports[name]
        rows.append([name, repr(rep.epsilon), repr(rep.r_squared)])
    with open(out / "heatmap_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "epsilon_mac", "r_squared_mac"])
        w.writerows(rows)
    for r in rows:
        print(",".join(r))


def build_parser():
    p = argparse.ArgumentParser(prog="aimc-tile", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="ExperimentConfig JSON file")
        sp.add_argument("--seed", type=int, help="override master_seed")
        sp.add_argument("--output-dir", help=f"override output dir (else ${harness.OUTPUT_DIR_ENV})")
        sp.set_defaults(func=func)
        return sp

    verb("sweep", cmd_sweep, "run the configured variants and write epsilon.csv")
    sp = verb("calibrate", cmd_calibrate, "fit r_cell to the IR-drop-only epsilon target")
    sp.add_argument("--target", type=float, default=harness.EPSILON_IR_TARGET)
    sp = verb("compare-pwm", cmd_compare_pwm, "Split/Conventional epsilon ratios")
    sp.add_argument("--variant", default="full+noise:Lut")
    sp = verb("noise-lut", cmd_noise_lut, "build the sigma(dG) table and its power-law fit")
    sp.add_argument("--traces", type=int, default=harness.LUT_TRACES)
    verb("heatmap", cmd_heatmap, "per-term model-vs-oracle error heatmaps")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (TileError, ValueError, OSError) as exc:
        print(f"aimc-tile {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
