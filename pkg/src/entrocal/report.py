"""Flat-file artifacts: residual logs, surface tables, implied-vol tables,
and the plot-ready merge of residual logs.

All files are comma-separated with a header row; floats carry 17 significant
digits so writing and re-reading is value-exact. Nothing here renders plots;
downstream tooling consumes the tables.
"""

from __future__ import annotations

import logging
import math

import numpy as np

from .market import implied_vol
from .multiscale import LadderResult, SigmaTable

__all__ = [
    "RESIDUAL_HEADER",
    "SURFACE_HEADER",
    "IVOL_HEADER",
    "AUDIT_HEADER",
    "fmt",
    "write_residual_log",
    "read_residual_log",
    "write_surface",
    "read_surface",
    "write_ivol_table",
    "read_ivol_table",
    "write_audit_table",
    "merge_residual_logs",
    "write_merged_residuals",
]

log = logging.getLogger("entrocal.report")

RESIDUAL_HEADER = "scale,iteration,accepted,e_max,price_err_l2,mart_err_l2"
SURFACE_HEADER = "t,x,sigma2"
IVOL_HEADER = ("maturity_time,kind,strike,target_price,model_price,"
               "target_iv,model_iv")
AUDIT_HEADER = ("maturity_time,kind,strike,mc_price,std_err,mc_iv,ref_iv")
BOUNDARY_HEADER = "scale,global_iteration"


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


# ---------------------------------------------------------------------------
# residual logs
# ---------------------------------------------------------------------------

def write_residual_log(path, ladder: LadderResult) -> None:
    """One row per sweep, scales in ladder order (0-based scale column)."""
    lines = [RESIDUAL_HEADER]
    for scale, sres in enumerate(ladder.scales):
        for rec in sres.result.records:
            lines.append(
                f"{scale},{rec.iteration},{int(rec.accepted)},"
                f"{fmt(rec.e_max)},{fmt(rec.price_err_l2)},"
                f"{fmt(rec.mart_err_l2)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_residual_log(path) -> list:
    """Rows as (scale, iteration, accepted, e_max, price_err_l2,
    mart_err_l2) tuples."""
    with open(path) as fh:
        header = fh.readline().strip()
        if header != RESIDUAL_HEADER:
            raise ValueError(f"unexpected residual header: {header!r}")
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            s, it, acc, e, pe, me = line.split(",")
            rows.append((int(s), int(it), bool(int(acc)), float(e),
                         float(pe), float(me)))
    return rows


def merge_residual_logs(paths) -> tuple[list, list, list]:
    """Concatenate residual logs into one long-format table.

    Returns (rows, boundaries, missing): rows carry a running global
    iteration count; boundaries mark the first global iteration of every
    scale after the first (a ladder of 5 scales yields 4 markers); missing
    lists inputs that could not be read, which are skipped rather than
    fatal so partial aggregation still produces output.
    """
    merged = []
    boundaries = []
    missing = []
    global_it = 0
    last_scale = None
    for path in paths:
        try:
            rows = read_residual_log(path)
        except (OSError, ValueError) as exc:
            log.warning("skipping residual log %s: %s", path, exc)
            missing.append(str(path))
            continue
        for scale, it, acc, e, pe, me in rows:
            global_it += 1
            if last_scale is not None and scale != last_scale:
                boundaries.append((scale, global_it))
            last_scale = scale
            merged.append((scale, it, acc, e, pe, me, global_it))
    return merged, boundaries, missing


def write_merged_residuals(path, boundary_path, merged, boundaries) -> None:
    lines = [RESIDUAL_HEADER + ",global_iteration"]
    for scale, it, acc, e, pe, me, git in merged:
        lines.append(f"{scale},{it},{int(acc)},{fmt(e)},{fmt(pe)},"
                     f"{fmt(me)},{git}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    blines = [BOUNDARY_HEADER]
    for scale, git in boundaries:
        blines.append(f"{scale},{git}")
    with open(boundary_path, "w") as fh:
        fh.write("\n".join(blines) + "\n")


# ---------------------------------------------------------------------------
# calibrated-surface tables
# ---------------------------------------------------------------------------

def write_surface(path, table: SigmaTable) -> None:
    """Long-format (t, x, sigma2) rows, t-major then x-ascending."""
    lines = [SURFACE_HEADER]
    for k, t in enumerate(table.times):
        for i, x in enumerate(table.points):
            lines.append(f"{fmt(t)},{fmt(x)},{fmt(table.sigma2[k, i])}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_surface(path) -> SigmaTable:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != SURFACE_HEADER:
            raise ValueError(f"unexpected surface header: {header!r}")
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            t_s, x_s, s_s = line.split(",")
            rows.append((float(t_s), float(x_s), float(s_s)))
    if not rows:
        raise ValueError("surface file has no rows")
    times = np.array(sorted({r[0] for r in rows}))
    points = np.array(sorted({r[1] for r in rows}))
    if times.size < 2:
        raise ValueError("need at least two time rows to infer the step")
    sigma2 = np.full((times.size, points.size), float("nan"))
    t_index = {t: k for k, t in enumerate(times)}
    x_index = {x: i for i, x in enumerate(points)}
    for t, x, s in rows:
        sigma2[t_index[t], x_index[x]] = s
    if np.isnan(sigma2).any():
        raise ValueError("surface table is not a complete (t, x) grid")
    step = float(times[1] - times[0])
    if not np.allclose(np.diff(times), step, rtol=1e-9, atol=0.0):
        raise ValueError("surface times must be uniformly spaced")
    return SigmaTable(times=times, points=points, sigma2=sigma2, step=step)


# ---------------------------------------------------------------------------
# implied-vol tables
# ---------------------------------------------------------------------------

def _vol_or_nan(price, spot, strike, t, kind) -> float:
    try:
        return implied_vol(price, spot, strike, t, kind)
    except ValueError:
        return float("nan")


def write_ivol_table(path, spot: float, fits) -> None:
    """Per-instrument quote-vs-model comparison, one row per calibrated
    strike (fits as produced by the ladder: maturities ascending)."""
    lines = [IVOL_HEADER]
    for f in fits:
        inst = f.instrument
        t = f.maturity_time
        tiv = _vol_or_nan(inst.target_price, spot, inst.strike, t, inst.kind)
        miv = _vol_or_nan(f.model_price, spot, inst.strike, t, inst.kind)
        lines.append(
            f"{fmt(t)},{inst.kind},{fmt(inst.strike)},"
            f"{fmt(inst.target_price)},{fmt(f.model_price)},"
            f"{fmt(tiv)},{fmt(miv)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_ivol_table(path) -> list:
    """Rows as dicts keyed by the header columns."""
    with open(path) as fh:
        header = fh.readline().strip()
        if header != IVOL_HEADER:
            raise ValueError(f"unexpected implied-vol header: {header!r}")
        cols = header.split(",")
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            row = dict(zip(cols, parts))
            for key in cols:
                if key != "kind":
                    row[key] = float(row[key])
            rows.append(row)
    return rows


def write_audit_table(path, mc_fits) -> None:
    """Monte-Carlo repricing audit rows (McFit objects)."""
    lines = [AUDIT_HEADER]
    for f in mc_fits:
        inst = f.instrument
        lines.append(
            f"{fmt(f.maturity_time)},{inst.kind},{fmt(inst.strike)},"
            f"{fmt(f.mc_price)},{fmt(f.std_err)},{fmt(f.mc_vol)},"
            f"{fmt(f.ref_vol)}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
