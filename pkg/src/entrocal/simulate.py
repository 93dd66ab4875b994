"""Monte Carlo audit of a calibrated local-variance table.

Euler paths of the log-price are driven by the table's own time grid with a
nearest-point variance lookup in space. Normals are drawn in fixed-size
blocks, each from its own independently seeded generator, so results are
bit-identical no matter how the path count splits across blocks or workers:
asking for fewer paths always yields a prefix of asking for more.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .market import Instrument, InstrumentSet, implied_vol
from .multiscale import SigmaTable

__all__ = ["BLOCK", "McFit", "simulate_snapshots", "mc_price_instruments",
           "mc_audit"]

log = logging.getLogger("entrocal.simulate")

BLOCK = 1 << 16  # paths per RNG block; fixed so path i never depends on n_paths


@dataclass
class McFit:
    instrument: Instrument
    maturity_time: float
    mc_price: float
    std_err: float
    mc_vol: float
    ref_vol: float  # implied vol of the comparison price (model or quote)


def _uniform_spacing(values: np.ndarray, what: str) -> float:
    diffs = np.diff(values)
    if diffs.size == 0:
        raise ValueError(f"need at least two {what} values")
    d = float(diffs[0])
    if d <= 0.0 or not np.allclose(diffs, d, rtol=1e-9, atol=0.0):
        raise ValueError(f"{what} must be uniformly spaced")
    return d


def simulate_snapshots(table: SigmaTable, x0: float, snap_steps,
                       n_paths: int, seed: int) -> np.ndarray:
    """Log-price at the requested steps, shape (len(snap_steps), n_paths).

    snap_steps are indices into the table's time grid, 1..n_steps. Every
    path starts at x0 and advances by x + (-sigma2/2) h + sigma sqrt(h) Z
    with sigma2 looked up at the nearest table point.
    """
    if seed is None:
        raise ValueError("seed is required; audits must be reproducible")
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    n_steps = table.sigma2.shape[0]
    snap_steps = [int(k) for k in snap_steps]
    if any(not 1 <= k <= n_steps for k in snap_steps):
        raise ValueError(f"snapshot steps must lie in 1..{n_steps}")
    row_of = {k: i for i, k in enumerate(snap_steps)}
    h = table.step
    sqh = math.sqrt(h)
    p0 = float(table.points[0])
    dx = _uniform_spacing(table.points, "table points")
    n_pts = table.points.size

    out = np.empty((len(snap_steps), n_paths))
    done = 0
    block = 0
    while done < n_paths:
        rng = np.random.default_rng([seed, block])
        # always draw the full block so path identities are offset-stable
        z = rng.standard_normal((n_steps, BLOCK))
        m = min(BLOCK, n_paths - done)
        x = np.full(m, float(x0))
        for k in range(n_steps):
            idx = np.clip(np.rint((x - p0) / dx).astype(np.intp), 0, n_pts - 1)
            s2 = table.sigma2[k, idx]
            x = x + (-0.5 * s2) * h + np.sqrt(s2) * sqh * z[k, :m]
            if k + 1 in row_of:
                out[row_of[k + 1], done:done + m] = x
        done += m
        block += 1
    return out


def _calib_snap_steps(times, table: SigmaTable) -> list:
    h = table.step
    horizon = table.times[-1] + h
    steps = []
    for t in times:
        k = round(t / h)
        if not (1 <= k <= table.sigma2.shape[0]) or \
                abs(k * h - t) > 1e-12 * max(1.0, horizon):
            raise ValueError(f"maturity {t} not on the simulation grid (h={h})")
        steps.append(k)
    return steps


def mc_price_instruments(iset: InstrumentSet, spot: float, table: SigmaTable,
                         n_paths: int, seed: int):
    """Monte Carlo prices and standard errors grouped as (instrument, price,
    std_err) triples, in market order within each maturity."""
    steps = _calib_snap_steps(iset.times, table)
    snaps = simulate_snapshots(table, math.log(spot), steps, n_paths, seed)
    rows = []
    for idx, group in sorted(iset.by_time().items()):
        s = np.exp(snaps[idx])
        for inst in group:
            if inst.kind == "call":
                pay = np.maximum(s - inst.strike, 0.0)
            else:
                pay = np.maximum(inst.strike - s, 0.0)
            price = float(pay.mean())
            se = float(pay.std(ddof=1) / math.sqrt(n_paths))
            rows.append((inst, price, se))
    return rows


def mc_audit(iset: InstrumentSet, spot: float, table: SigmaTable,
             n_paths: int, seed: int,
             reference_prices=None) -> list:
    """Price every instrument by simulation and compare implied vols.

    reference_prices, when given, are the comparison prices (e.g. the
    calibrated marginals' model prices) aligned with mc_price_instruments
    order: maturity groups ascending, market order within each group.
    Without them the quoted targets are compared against instead. Vol
    inversion failures (price outside the static bounds at low path counts)
    are reported as NaN rather than raised.
    """
    rows = mc_price_instruments(iset, spot, table, n_paths, seed)
    if reference_prices is not None and len(reference_prices) != len(rows):
        raise ValueError("need one reference price per instrument")
    fits = []
    for j, (inst, price, se) in enumerate(rows):
        t = iset.times[inst.maturity_index]
        ref_price = (inst.target_price if reference_prices is None
                     else float(reference_prices[j]))
        try:
            ref_vol = implied_vol(ref_price, spot, inst.strike, t, inst.kind)
        except ValueError:
            ref_vol = float("nan")
        try:
            mc_vol = implied_vol(price, spot, inst.strike, t, inst.kind)
        except ValueError:
            log.warning("MC price %.6g for %s %.6g @ t=%.4g outside "
                        "arbitrage bounds; vol set to NaN",
                        price, inst.kind, inst.strike, t)
            mc_vol = float("nan")
        fits.append(McFit(inst, t, price, se, mc_vol, ref_vol))
    return fits
