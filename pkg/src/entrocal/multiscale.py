"""Coarse-to-fine calibration: solve on a short time grid, read off the local
variance of the calibrated chain, and use it to build the reference measure
for the next, finer grid.

Each rung starts from zero potentials; what survives refinement is the
reference measure itself (drift pinned to -sigma^2/2 so the reference is
already risk-neutral to leading order), which absorbs the structure the
previous rung calibrated. Carrying the dual potentials forward as well would
double-apply the price pull the refined reference already encodes. The first
rung bootstraps its piecewise-constant vol term structure from ATM implied
total variances.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .market import Instrument, InstrumentSet, implied_vol, payoff_on_grid
from .propagation import conditional_moments, marginal, pairwise_joint
from .reference import (
    ReferenceMeasure,
    bootstrap_reference_vol,
    build_reference,
    build_space_grids,
    make_time_grid,
    piecewise_vol,
    truncate_domain,
)
from .sinkhorn import (
    ConstraintSet,
    RunResult,
    SolveError,
    SolverConfig,
    constraints_from_instruments,
    diagnostics,
    run,
)

__all__ = [
    "MultiscaleConfig",
    "SigmaTable",
    "PriceFit",
    "ScaleResult",
    "LadderResult",
    "LadderError",
    "atm_vol_proxy",
    "extract_sigma_table",
    "interp_sigma2",
    "run_ladder",
]

log = logging.getLogger("entrocal.multiscale")


class LadderError(RuntimeError):
    """A rung failed hard (grid blow-up, solver breakdown, bad inputs).
    Carries which rung so callers can report the offending scale."""

    def __init__(self, scale_index: int, n_steps: int, cause: Exception):
        super().__init__(f"scale {scale_index} ({n_steps} time steps): "
                         f"{cause}")
        self.scale_index = scale_index
        self.n_steps = n_steps


@dataclass
class MultiscaleConfig:
    step_counts: tuple = (5, 10, 20)  # time steps per rung, coarse to fine
    delta: float = 5.0  # truncation half-width in running stds
    points_per_std: float = 4.0  # spatial resolution per one-step std
    grid_cap: int = 2000
    sigma_floor: float = 0.01  # vols below this are clipped when extracted
    mollify_std: float = 0.0  # optional smoothing of the initial Dirac
    c_mart: float = 1e4
    martingale_step0: bool = True  # penalize the first transition too
    # relative row-mass cut for variance extraction: rows this far out in the
    # tail sit against the domain edge, where one-sided kernel truncation
    # biases the conditional variance; quoted strikes live at relative mass
    # >= 1e-3, so the cut discards only envelope-corrupting frontier rows
    mass_cut: float = 1e-5
    reference_atm_vols: tuple | None = None  # override the ATM-vol proxy

    def validate(self) -> None:
        if not self.step_counts:
            raise ValueError("need at least one rung in step_counts")
        if any(b <= a for a, b in zip(self.step_counts, self.step_counts[1:])):
            raise ValueError("step_counts must increase")
        if self.sigma_floor <= 0.0:
            raise ValueError("sigma_floor must be positive")
        if self.c_mart < 0.0:
            raise ValueError("c_mart must be nonnegative")


@dataclass
class SigmaTable:
    """Local variance of a calibrated chain: sigma2[k, i] is the conditional
    variance rate of the transition starting at times[k] from points[i]."""

    times: np.ndarray  # step-start times, shape (n_steps,)
    points: np.ndarray  # shared spatial grid
    sigma2: np.ndarray  # shape (n_steps, n_points)
    step: float  # duration of each transition


@dataclass
class PriceFit:
    instrument: Instrument
    maturity_time: float
    model_price: float
    rel_err: float


@dataclass
class ScaleResult:
    n_steps: int
    ref: ReferenceMeasure
    constraints: ConstraintSet
    result: RunResult
    price_err_l2: float
    mart_err_l2: float
    fits: list  # PriceFit per instrument, market order within maturities
    sigma_table: SigmaTable

    @property
    def max_rel_price_err(self) -> float:
        return max(abs(f.rel_err) for f in self.fits)


@dataclass
class LadderResult:
    scales: list

    @property
    def final(self) -> ScaleResult:
        return self.scales[-1]

    @property
    def converged(self) -> bool:
        return all(s.result.converged for s in self.scales)


def atm_vol_proxy(iset: InstrumentSet, spot: float) -> np.ndarray:
    """Per maturity, the implied vol of the quote struck nearest the spot —
    good enough to seed the reference term structure."""
    vols = []
    for idx, group in sorted(iset.by_time().items()):
        inst = min(group, key=lambda i: abs(i.strike - spot))
        t = iset.times[idx]
        vols.append(implied_vol(inst.target_price, spot, inst.strike, t,
                                inst.kind))
    return np.array(vols)


def extract_sigma_table(pots, props, ref: ReferenceMeasure,
                        cons: ConstraintSet, sigma_floor: float,
                        mass_cut: float) -> SigmaTable:
    """Conditional variance of the calibrated chain on its own grid.

    Two kinds of row carry no usable signal and inherit the value of the
    nearest trusted point instead (so downstream interpolation stays
    well-posed): rows with relative mass below mass_cut (states the chain
    never visits), and rows whose transition kernel reaches within a few
    standard deviations of the domain edge, where the renormalized kernel's
    conditional variance is truncation-biased.
    """
    h = ref.time_grid.step
    moment = cons.moment if cons.c_mart > 0.0 else None
    pts = ref.grids[0].points
    n = ref.n_steps
    sqh = math.sqrt(h)
    sig2 = np.empty((n, pts.size))
    for k in range(n):
        joint = pairwise_joint(k, pots, props, moment, ref)
        mom = conditional_moments(k, joint, ref.grids, h, moment)
        mass = joint.sum(axis=1)
        # the kernel's reach: whichever of the prior and extracted vols is
        # larger (a truncation-deflated extraction must not shrink its own
        # exclusion zone)
        reach = 4.0 * np.maximum(np.sqrt(np.abs(mom.sigma2)),
                                 ref.vol[k]) * sqh
        clear_of_edges = ((pts - pts[0] >= reach) & (pts[-1] - pts >= reach))
        ok = mom.valid & (mass > mass_cut * float(mass.max())) & clear_of_edges
        if not ok.any():
            raise RuntimeError(
                f"no trusted interior rows to extract variance at step {k}")
        idx = np.nonzero(ok)[0]
        nearest = idx[np.argmin(np.abs(np.arange(pts.size)[:, None]
                                       - idx[None, :]), axis=1)]
        sig2[k] = np.maximum(mom.sigma2[nearest], sigma_floor**2)
    return SigmaTable(times=ref.time_grid.times[:n].copy(),
                      points=pts.copy(), sigma2=sig2, step=h)


def interp_sigma2(table: SigmaTable, new_times, new_points) -> np.ndarray:
    """Bilinear interpolation of the variance table with constant extension
    beyond its support in both time and space."""
    new_times = np.asarray(new_times, dtype=float)
    new_points = np.asarray(new_points, dtype=float)
    in_x = np.empty((table.sigma2.shape[0], new_points.size))
    for i in range(table.sigma2.shape[0]):
        in_x[i] = np.interp(new_points, table.points, table.sigma2[i])
    out = np.empty((new_times.size, new_points.size))
    for j in range(new_points.size):
        out[:, j] = np.interp(new_times, table.times, in_x[:, j])
    return out


def _price_fits(iset: InstrumentSet, ref: ReferenceMeasure, model: dict,
                pots, props) -> list:
    """Model-vs-target price per instrument. Constrained instruments reuse
    the solver's own prices; zero-weight ones (absent from the constraint
    set) are priced directly against the calibrated marginal."""
    fits = []
    for idx, group in sorted(iset.by_time().items()):
        k = ref.time_grid.calib_steps[idx]
        prices = model.get(k)
        if prices is None or len(prices) != len(group):
            nu = marginal(k, pots, props)
            prices = np.array([payoff_on_grid(i.kind, i.strike,
                                              ref.grids[k].points) @ nu
                               for i in group])
        for j, inst in enumerate(group):
            rel = (float(prices[j]) - inst.target_price) / inst.target_price
            fits.append(PriceFit(inst, iset.times[idx], float(prices[j]),
                                 float(rel)))
    return fits


def run_ladder(iset: InstrumentSet, spot: float, ms_cfg: MultiscaleConfig,
               solver_cfg: SolverConfig, accel=None) -> LadderResult:
    """Calibrate through the whole ladder, one rung per entry of
    step_counts. Solver errors propagate; non-convergence of a rung is
    recorded and the ladder continues."""
    ms_cfg.validate()
    times = np.asarray(iset.times, dtype=float)
    horizon = float(times.max())
    x0 = math.log(spot)
    atm = (np.asarray(ms_cfg.reference_atm_vols, dtype=float)
           if ms_cfg.reference_atm_vols is not None
           else atm_vol_proxy(iset, spot))
    if atm.shape != times.shape:
        raise ValueError("need one reference ATM vol per calibration time")
    sig_boot = bootstrap_reference_vol(atm, times)
    sig_of_t = piecewise_vol(sig_boot, times)

    table: SigmaTable | None = None
    bounds0 = times0 = None  # scale-0 domain, inherited by finer rungs
    scales = []
    for scale_index, n_steps in enumerate(ms_cfg.step_counts):
        try:
            tg = make_time_grid(horizon, int(n_steps), times)
            step_times = tg.times[:-1]
            if table is None:
                # first rung: domain and spacing from the bootstrap term
                # structure
                sig_env = np.array([sig_of_t(t) for t in step_times])
                drift_env = np.stack([-0.5 * sig_env**2, -0.5 * sig_env**2],
                                     axis=1)
                bounds = truncate_domain(x0, ms_cfg.mollify_std, drift_env,
                                         sig_env, tg, delta=ms_cfg.delta)
                bounds0, times0 = bounds, tg.times
                sig2_env_lo = sig_env**2
            else:
                # finer rungs refine resolution on the first rung's domain:
                # the calibrated measure lives inside it by construction, and
                # a sup-over-space envelope of the extracted wings would
                # inflate the grid far beyond where any mass or quote lives
                bounds = np.column_stack(
                    [np.interp(tg.times, times0, bounds0[:, 0]),
                     np.interp(tg.times, times0, bounds0[:, 1])])
                probe = interp_sigma2(table, step_times, table.points)
                sig2_env_lo = probe.min(axis=1)
            grids = build_space_grids(bounds, tg.step, np.sqrt(sig2_env_lo),
                                      points_per_std=ms_cfg.points_per_std,
                                      cap=ms_cfg.grid_cap, anchor=x0)

            if table is None:
                sig_steps = sig_env

                def vol_fn(k, x, s=sig_steps):
                    return s[k]

                def drift_fn(k, x, s=sig_steps):
                    return -0.5 * s[k] ** 2
            else:
                sig2_grid = interp_sigma2(table, step_times, grids[0].points)

                def vol_fn(k, x, s2=sig2_grid):
                    return np.sqrt(s2[k])

                def drift_fn(k, x, s2=sig2_grid):
                    return -0.5 * s2[k]

            ref = build_reference(tg, grids, drift_fn, vol_fn, x0,
                                  mollify_std=ms_cfg.mollify_std,
                                  bounds=bounds)
            cons = constraints_from_instruments(
                iset, ref, c_mart=ms_cfg.c_mart,
                martingale_step0=ms_cfg.martingale_step0)
            log.info("rung %d: %d steps, %d grid points, %d instruments",
                     scale_index, n_steps, grids[0].n_points,
                     cons.n_instruments())
            result = run(ref, cons, solver_cfg, accel)
            if not result.converged:
                log.warning("rung with %d steps stopped at e_max=%.3e "
                            "without reaching tolerance", n_steps,
                            result.records[-1].e_max if result.records
                            else float("nan"))
            price_err, mart_err, model, props = diagnostics(result.potentials,
                                                            ref, cons)
            if not (math.isfinite(price_err) and math.isfinite(mart_err)):
                raise SolveError(
                    f"non-finite residuals (price_err_l2={price_err}, "
                    f"mart_err_l2={mart_err})", float("nan"))
            table = extract_sigma_table(result.potentials, props, ref, cons,
                                        ms_cfg.sigma_floor, ms_cfg.mass_cut)
        except (RuntimeError, ValueError, ArithmeticError) as exc:
            raise LadderError(scale_index, int(n_steps), exc) from exc
        scales.append(ScaleResult(
            n_steps=int(n_steps), ref=ref, constraints=cons, result=result,
            price_err_l2=price_err, mart_err_l2=mart_err,
            fits=_price_fits(iset, ref, model, result.potentials, props),
            sigma_table=table))
    return LadderResult(scales=scales)
