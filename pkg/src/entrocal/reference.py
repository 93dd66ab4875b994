"""Time grid, truncated space grids, and the reference Euler-Maruyama chain.

The reference measure is a Markov chain on per-step grids: an initial density
rho0 plus one row-stochastic Gaussian transition matrix per step. Rows are the
grid discretization of Normal(x + mu(x)h, sigma(x)^2 h), renormalized so each
row sums to one (truncation keeps the clipped mass negligible).

Log-domain code downstream needs finite numbers everywhere, so exact zeros in
densities are represented by a large negative sentinel instead of -inf.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LOG_SENTINEL",
    "TimeGrid",
    "SpaceGrid",
    "ReferenceMeasure",
    "make_time_grid",
    "truncate_domain",
    "build_space_grids",
    "build_reference",
    "bootstrap_reference_vol",
    "piecewise_vol",
    "reference_marginals",
]

# Finite stand-in for log(0). Large enough that exp() underflows to 0, small
# enough that sums of a few of them never overflow to -inf (which would breed
# NaN through inf - inf in shifted logsumexp).
LOG_SENTINEL = -1e300


def safe_log(p: np.ndarray) -> np.ndarray:
    """Elementwise log with zeros mapped to the finite sentinel."""
    p = np.asarray(p, dtype=float)
    out = np.full(p.shape, LOG_SENTINEL)
    pos = p > 0.0
    out[pos] = np.log(p[pos])
    return out


@dataclass(frozen=True)
class TimeGrid:
    n_steps: int
    step: float
    times: np.ndarray  # t_k = k*h, k = 0..n_steps
    calib_steps: dict  # maturity_index -> step index k

    @property
    def horizon(self) -> float:
        return float(self.times[-1])


def make_time_grid(horizon: float, n_steps: int, calibration_times=()) -> TimeGrid:
    """Uniform grid t_k = k*h with every calibration time required on-grid."""
    if n_steps < 1 or horizon <= 0.0:
        raise ValueError("need n_steps >= 1 and a positive horizon")
    h = horizon / n_steps
    times = np.linspace(0.0, horizon, n_steps + 1)
    calib_steps = {}
    for i, tau in enumerate(calibration_times):
        k = round(tau / h)
        if not (0 < k <= n_steps) or abs(times[k] - tau) > 1e-12 * max(1.0, horizon):
            raise ValueError(f"calibration time {tau} not on the grid (h={h})")
        calib_steps[i] = k
    return TimeGrid(n_steps=n_steps, step=h, times=times, calib_steps=calib_steps)


@dataclass(frozen=True)
class SpaceGrid:
    lower: float
    upper: float
    n_points: int
    points: np.ndarray

    @property
    def dx(self) -> float:
        return (self.upper - self.lower) / (self.n_points - 1)


def truncate_domain(m0: float, v0: float, drift, vol, grid: TimeGrid,
                    delta: float = 5.0) -> np.ndarray:
    """Per-time-point truncation bounds [m_k - delta*v_k, m_k + delta*v_k].

    m_k = m0 + h * sum_{l<k} mu_l and v_k = sqrt(v0^2 + h * sum_{l<k} sigma_l^2),
    so k=0 reproduces the initial mean/std untouched. drift and vol are
    per-step scalars (length n_steps) or constants; for state-dependent
    coefficients pass their extremes in space. drift may also be given as a
    (n_steps, 2) array of (lowest, highest) values, in which case the lower
    and upper bounds use the matching envelope.

    Returns an array of shape (n_steps + 1, 2).
    """
    if delta <= 0.0:
        raise ValueError("delta must be positive")
    n = grid.n_steps
    h = grid.step
    vol = np.broadcast_to(np.asarray(vol, dtype=float), (n,)).copy()
    drift = np.asarray(drift, dtype=float)
    if drift.ndim < 2:
        drift = np.broadcast_to(drift, (n,))
        drift_lo = drift_hi = drift
    else:
        drift_lo, drift_hi = drift[:, 0], drift[:, 1]

    bounds = np.empty((n + 1, 2))
    var = v0 * v0
    m_lo = m_hi = m0
    bounds[0] = (m0 - delta * v0, m0 + delta * v0)
    for k in range(n):
        m_lo += h * drift_lo[k]
        m_hi += h * drift_hi[k]
        var += h * vol[k] ** 2
        v = math.sqrt(var)
        bounds[k + 1] = (m_lo - delta * v, m_hi + delta * v)
    return bounds


def build_space_grids(bounds: np.ndarray, h: float, vol_min, *,
                      points_per_std: float = 4.0, cap: int = 2000,
                      anchor: float | None = None) -> list[SpaceGrid]:
    """One shared grid covering the union of the per-step bounds.

    The spacing obeys dx <= min_k (sigma_min_k * sqrt(h)) / points_per_std so
    transition kernels stay resolved at every step. When anchor is given the
    grid passes through it exactly (the initial log-spot must not be snapped).
    Identical bounds therefore yield identical grids across steps; the list
    returned has one entry per time point, all sharing the same grid.
    """
    if points_per_std < 2.0:
        raise ValueError("points_per_std must be at least 2")
    n_steps = len(bounds) - 1
    vol_min = np.broadcast_to(np.asarray(vol_min, dtype=float), (n_steps,))
    if np.any(vol_min <= 0.0):
        raise ValueError("vol must be positive")
    dx_max = float(np.min(vol_min)) * math.sqrt(h) / points_per_std
    lower = float(np.min(bounds[:, 0]))
    upper = float(np.max(bounds[:, 1]))
    if anchor is None:
        anchor = 0.5 * (lower + upper)
    n_lo = max(1, math.ceil((anchor - lower) / dx_max))
    n_hi = max(1, math.ceil((upper - anchor) / dx_max))
    n_points = n_lo + n_hi + 1
    if n_points > cap:
        raise RuntimeError(
            f"grid for steps 0..{n_steps} needs {n_points} points "
            f"(cap {cap}); widen dx or tighten bounds"
        )
    points = anchor + dx_max * np.arange(-n_lo, n_hi + 1)
    g = SpaceGrid(lower=float(points[0]), upper=float(points[-1]),
                  n_points=n_points, points=points)
    return [g] * (len(bounds))


@dataclass
class ReferenceMeasure:
    time_grid: TimeGrid
    grids: list  # SpaceGrid per time point, k = 0..n_steps
    rho0: np.ndarray
    log_rho0: np.ndarray
    kernels: list  # row-stochastic (n_k, n_{k+1}) matrices, one per step
    log_kernels: list
    drift: list = field(default_factory=list)  # mu_k(x) arrays per step
    vol: list = field(default_factory=list)  # sigma_k(x) arrays per step
    bounds: np.ndarray | None = None  # per-step truncation metadata

    @property
    def n_steps(self) -> int:
        return self.time_grid.n_steps


def build_reference(time_grid: TimeGrid, grids: list, drift_fn, vol_fn,
                    x0: float, mollify_std: float = 0.0,
                    bounds: np.ndarray | None = None) -> ReferenceMeasure:
    """Assemble the Euler-Maruyama reference chain on the given grids.

    drift_fn(k, x) and vol_fn(k, x) evaluate mu and sigma on the step-k grid.
    rho0 is a grid Dirac at the point nearest x0, or a discretized Gaussian of
    std mollify_std when that is positive.
    """
    h = time_grid.step
    n = time_grid.n_steps
    kernels = []
    log_kernels = []
    drift = []
    vol = []
    for k in range(n):
        x = grids[k].points
        y = grids[k + 1].points
        mu = np.broadcast_to(np.asarray(drift_fn(k, x), dtype=float), x.shape)
        sig = np.broadcast_to(np.asarray(vol_fn(k, x), dtype=float), x.shape)
        if np.any(sig <= 0.0):
            bad = x[np.asarray(sig <= 0.0).nonzero()[0][0]]
            raise ValueError(f"vol must be positive everywhere, got <= 0 at step {k}, x={bad}")
        mean = x + mu * h
        std = sig * math.sqrt(h)
        z = (y[None, :] - mean[:, None]) / std[:, None]
        rows = np.exp(-0.5 * z * z) / (std[:, None] * math.sqrt(2.0 * math.pi))
        rows *= grids[k + 1].dx
        mass = rows.sum(axis=1)
        if np.any(mass <= 0.0):
            raise ValueError(f"transition row with no mass at step {k}")
        rows /= mass[:, None]
        kernels.append(rows)
        log_kernels.append(safe_log(rows))
        drift.append(np.array(mu))
        vol.append(np.array(sig))

    x = grids[0].points
    if mollify_std > 0.0:
        z = (x - x0) / mollify_std
        rho0 = np.exp(-0.5 * z * z)
        rho0 /= rho0.sum()
    else:
        rho0 = np.zeros(grids[0].n_points)
        rho0[int(np.argmin(np.abs(x - x0)))] = 1.0
    return ReferenceMeasure(
        time_grid=time_grid, grids=list(grids), rho0=rho0, log_rho0=safe_log(rho0),
        kernels=kernels, log_kernels=log_kernels, drift=drift, vol=vol,
        bounds=bounds,
    )


def reference_marginals(ref: ReferenceMeasure) -> list[np.ndarray]:
    """Forward marginals of the reference chain (rho0 pushed through kernels)."""
    out = [ref.rho0]
    for kern in ref.kernels:
        out.append(out[-1] @ kern)
    return out


def bootstrap_reference_vol(atm_vols, calibration_times) -> np.ndarray:
    """Piecewise-constant forward vols from ATM implied vols.

    Total variance W_i = vol_i^2 * tau_i must be increasing; the instantaneous
    variance on (tau_{i-1}, tau_i] is the increment ratio
    (W_i - W_{i-1}) / (tau_i - tau_{i-1}), with W_0 spread over (0, tau_0].

    Returns one sigma per interval, same length as calibration_times.
    """
    vols = np.asarray(atm_vols, dtype=float)
    taus = np.asarray(calibration_times, dtype=float)
    if np.any(vols <= 0.0):
        raise ValueError("ATM vols must be positive")
    if np.any(np.diff(taus) <= 0.0) or taus[0] <= 0.0:
        raise ValueError("calibration times must be positive and increasing")
    W = vols * vols * taus
    dW = np.diff(np.concatenate(([0.0], W)))
    if np.any(dW <= 0.0):
        i = int(np.argmax(dW <= 0.0))
        raise ValueError(f"total variance not increasing at time {taus[i]} (calendar arbitrage)")
    dt = np.diff(np.concatenate(([0.0], taus)))
    return np.sqrt(dW / dt)


def piecewise_vol(sigmas, calibration_times):
    """sigma(t) lookup for the bootstrap output, keyed by the left endpoint of
    an Euler step: a step starting at t uses the interval (tau_{i-1}, tau_i]
    that contains (t, t+h). Constant extension beyond the final time."""
    sigmas = np.asarray(sigmas, dtype=float)
    taus = np.asarray(calibration_times, dtype=float)

    def sigma_of_t(t: float) -> float:
        i = int(np.searchsorted(taus, t + 1e-12, side="right"))
        return float(sigmas[min(i, len(sigmas) - 1)])

    return sigma_of_t
