"""Command-line orchestration: generate a synthetic market, calibrate the
diffusion to it, audit the result by simulation, and aggregate residual logs.

Subcommands
    generate-market   write the instrument table for the configured surface
    calibrate         run the multiscale calibration, write artifacts
    verify            Monte-Carlo repricing audit of a calibrated surface
    report            merge residual logs into one plot-ready table

Exit codes: 0 success/converged, 2 calibration completed without reaching
tolerance, 1 hard failure. Artifacts are deterministic: identical config and
seed produce byte-identical files (no timestamps).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace

import yaml

from .config import RunConfig, load_config
from .market import generate_market, read_instruments, write_instruments
from .multiscale import LadderError, run_ladder
from .report import (
    merge_residual_logs,
    read_ivol_table,
    read_surface,
    write_audit_table,
    write_ivol_table,
    write_merged_residuals,
    write_residual_log,
    write_surface,
)
from .simulate import mc_audit

__all__ = [
    "main",
    "cmd_generate_market",
    "cmd_calibrate",
    "cmd_verify",
    "cmd_report",
]

log = logging.getLogger("entrocal.cli")

_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO,
           "debug": logging.DEBUG}


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 1


def _load(config_path: str | None) -> RunConfig:
    if config_path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    return load_config(config_path)


def _out_dir(cfg: RunConfig, override: str | None) -> str:
    out = override if override is not None else cfg.output.directory
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_generate_market(cfg: RunConfig, out: str) -> int:
    """Write {out}/instruments.csv. Deterministic — regeneration is
    byte-identical. Quote penalty weights come from solver.gamma."""
    iset = generate_market(cfg.market.ssvi, cfg.market.spot,
                           cfg.market.calibration_times,
                           cfg.market.strike_counts,
                           penalty_weight=cfg.solver.gamma)
    path = os.path.join(out, "instruments.csv")
    write_instruments(path, iset)
    print(f"wrote {len(iset)} instruments across {len(iset.times)} "
          f"maturities to {path}")
    return 0


def cmd_calibrate(cfg: RunConfig, out: str,
                  scale_override: int | None = None) -> int:
    """Run the calibration ladder on {out}/instruments.csv and write the
    residual log, surface table, and implied-vol table (as enabled)."""
    inst_path = os.path.join(out, "instruments.csv")
    if not os.path.exists(inst_path):
        return _fail(f"missing input {inst_path}; run generate-market first")
    iset = read_instruments(inst_path)

    ms_cfg = cfg.to_multiscale_config()
    if scale_override is not None:
        if scale_override < 1:
            return _fail("--scale-override must be a positive step count")
        ms_cfg = replace(ms_cfg, step_counts=(int(scale_override),))
    solver_cfg = cfg.solver.to_solver_config()
    accel = cfg.acceleration.to_anderson_config()

    t0 = time.perf_counter()
    try:
        ladder = run_ladder(iset, cfg.market.spot, ms_cfg, solver_cfg, accel)
    except LadderError as exc:
        return _fail(f"calibration failed at {exc}")
    except ValueError as exc:
        return _fail(f"calibration rejected its inputs: {exc}")
    elapsed = time.perf_counter() - t0

    if cfg.output.emit_residuals:
        write_residual_log(os.path.join(out, "residuals.csv"), ladder)
    if cfg.output.emit_surface:
        write_surface(os.path.join(out, "surface.csv"),
                      ladder.final.sigma_table)
    if cfg.output.emit_ivols:
        write_ivol_table(os.path.join(out, "ivols.csv"),
                         cfg.market.spot, ladder.final.fits)

    for i, s in enumerate(ladder.scales):
        print(f"scale {i} ({s.n_steps} steps): "
              f"{len(s.result.records)} sweeps, "
              f"price_err_l2={s.price_err_l2:.3e}, "
              f"mart_err_l2={s.mart_err_l2:.3e}, "
              f"max_rel_price_err={s.max_rel_price_err:.3e}, "
              f"converged={s.result.converged}")
    print(f"calibration finished in {elapsed:.1f}s, "
          f"converged={ladder.converged}")
    return 0 if ladder.converged else 2


def _model_reference_prices(out: str, iset):
    """Calibrated model prices aligned with the audit's instrument order,
    from a previously written ivols.csv; None when absent or misaligned."""
    path = os.path.join(out, "ivols.csv")
    if not os.path.exists(path):
        return None
    try:
        rows = read_ivol_table(path)
    except ValueError as exc:
        log.warning("ignoring %s: %s", path, exc)
        return None
    expected = []
    for idx, group in sorted(iset.by_time().items()):
        for inst in group:
            expected.append((iset.times[idx], inst.kind, inst.strike))
    actual = [(r["maturity_time"], r["kind"], r["strike"]) for r in rows]
    if actual != expected:
        log.warning("ignoring %s: rows do not match the instrument set",
                    path)
        return None
    return [r["model_price"] for r in rows]


def cmd_verify(cfg: RunConfig, out: str, seed: int | None,
               n_paths: int) -> int:
    """Reprice every instrument by simulating the calibrated surface; write
    {out}/audit.csv. Compares against the calibrated model prices when
    ivols.csv is present, else against the quotes."""
    if seed is None:
        seed = cfg.seed
    if seed is None:
        return _fail("verification needs a seed (--seed or the config's "
                     "seed field); refusing an unreproducible audit")
    missing = [p for p in (os.path.join(out, "surface.csv"),
                           os.path.join(out, "instruments.csv"))
               if not os.path.exists(p)]
    if missing:
        return _fail("missing input " + ", ".join(missing)
                     + "; run calibrate first")
    try:
        table = read_surface(os.path.join(out, "surface.csv"))
    except ValueError as exc:
        return _fail(f"bad surface file: {exc}")
    iset = read_instruments(os.path.join(out, "instruments.csv"))
    refs = _model_reference_prices(out, iset)
    against = "quotes" if refs is None else "calibrated model prices"
    try:
        fits = mc_audit(iset, cfg.market.spot, table, n_paths, int(seed),
                        reference_prices=refs)
    except ValueError as exc:
        return _fail(f"audit failed: {exc}")
    write_audit_table(os.path.join(out, "audit.csv"), fits)
    gaps = [abs(f.mc_vol - f.ref_vol) for f in fits
            if f.mc_vol == f.mc_vol and f.ref_vol == f.ref_vol]
    worst = max(gaps) if gaps else float("nan")
    print(f"audited {len(fits)} instruments at {n_paths} paths "
          f"(seed {seed}) against {against}; "
          f"max implied-vol gap {worst:.4f}")
    return 0


def cmd_report(out: str, inputs) -> int:
    """Merge residual logs (default: {out}/residuals.csv) into
    {out}/residuals_merged.csv plus {out}/scale_boundaries.csv."""
    paths = list(inputs) if inputs else [os.path.join(out, "residuals.csv")]
    merged, boundaries, missing = merge_residual_logs(paths)
    for path in missing:
        print(f"missing input: {path}", file=sys.stderr)
    if not merged:
        return _fail("no residual logs could be read")
    write_merged_residuals(os.path.join(out, "residuals_merged.csv"),
                           os.path.join(out, "scale_boundaries.csv"),
                           merged, boundaries)
    print(f"merged {len(merged)} rows from {len(paths) - len(missing)} "
          f"log(s); {len(boundaries)} scale boundaries")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="entrocal",
        description="Calibrate a discrete-time local-volatility diffusion "
                    "to option quotes by entropic regularization.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", metavar="PATH",
                        help="YAML run configuration (defaults used if "
                             "omitted)")
        sp.add_argument("--out", metavar="DIR",
                        help="artifact directory (overrides the config)")

    g = sub.add_parser("generate-market",
                       help="write the synthetic instrument table")
    common(g)

    c = sub.add_parser("calibrate", help="run the multiscale calibration")
    common(c)
    c.add_argument("--scale-override", type=int, metavar="N_T",
                   help="calibrate a single scale with this many time steps")

    v = sub.add_parser("verify", help="Monte-Carlo repricing audit")
    common(v)
    v.add_argument("--seed", type=int, metavar="N",
                   help="RNG seed (overrides the config)")
    v.add_argument("--paths", type=int, default=1_000_000, metavar="N",
                   help="number of Monte-Carlo paths (default 1000000)")

    r = sub.add_parser("report", help="merge residual logs")
    common(r)
    r.add_argument("inputs", nargs="*", metavar="LOG",
                   help="residual logs to merge (default: "
                        "OUT/residuals.csv)")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = _load(args.config)
    except (OSError, ValueError, yaml.YAMLError) as exc:
        return _fail(f"bad configuration: {exc}")
    logging.basicConfig(level=_LEVELS[cfg.output.verbosity],
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = _out_dir(cfg, args.out)
    except OSError as exc:
        return _fail(f"cannot create output directory: {exc}")

    try:
        if args.command == "generate-market":
            return cmd_generate_market(cfg, out)
        if args.command == "calibrate":
            return cmd_calibrate(cfg, out, args.scale_override)
        if args.command == "verify":
            return cmd_verify(cfg, out, args.seed, args.paths)
        if args.command == "report":
            return cmd_report(out, args.inputs)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
