"""Dual potentials and log-domain propagation for the tilted path measure.

The calibrated measure has density exp(D) against the reference chain, with

    D = sum_k [phi_nu_k(x_k) + Lambda_k . G_k(x_k)]
        + sum_k B(x_k, x_{k+1}) * phi_b_k(x_k) / h.

Everything here stays in log domain. The forward accumulator psi_up_k folds in
all factors strictly before step k (starting from log rho0); the backward
accumulator psi_down_k folds in everything strictly after. Marginals and
pairwise joints of the tilted measure then read off as single exp() products,
which is what keeps each Sinkhorn sweep at O(n_points^2) per step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .reference import LOG_SENTINEL, ReferenceMeasure, SpaceGrid

__all__ = [
    "DEAD",
    "PotentialSet",
    "Propagators",
    "SteppedMoment",
    "martingale_moment",
    "transition_log_tilt",
    "forward_sweep",
    "backward_sweep",
    "update_psi_up",
    "log_marginal",
    "marginal",
    "pairwise_joint",
    "Moments",
    "conditional_moments",
]

# Anything at or below this log level is treated as "no mass". Real grid
# log-densities bottom out near log(5e-324) ~ -745, so the gap is enormous.
DEAD = -1e290


def _lse(M: np.ndarray, axis: int) -> np.ndarray:
    """Max-shifted logsumexp along an axis, sentinel-aware.

    Rows/columns whose maximum is already dead collapse to LOG_SENTINEL
    exactly, so the sentinel pattern stays bit-stable across sweeps.
    """
    m = np.max(M, axis=axis)
    alive = m > DEAD
    shifted = M - np.expand_dims(np.where(alive, m, 0.0), axis)
    with np.errstate(over="ignore"):
        s = np.sum(np.exp(shifted, where=np.expand_dims(alive, axis),
                          out=np.zeros_like(shifted)), axis=axis)
    out = np.full(m.shape, LOG_SENTINEL)
    out[alive] = m[alive] + np.log(s[alive])
    out[out <= DEAD] = LOG_SENTINEL
    return out


@dataclass
class SteppedMoment:
    """A pair function B(x, y) precomputed on every transition's grid pair."""

    matrices: list  # per step k: array of shape (n_k, n_{k+1})

    @classmethod
    def from_function(cls, fn, grids: list) -> "SteppedMoment":
        mats = []
        for k in range(len(grids) - 1):
            x = grids[k].points[:, None]
            y = grids[k + 1].points[None, :]
            mats.append(np.asarray(fn(x, y), dtype=float))
        return cls(matrices=mats)


def martingale_moment(grids: list) -> SteppedMoment:
    """B(x, y) = 1 - e^(y - x); its vanishing conditional mean makes e^X a
    martingale step by step."""
    return SteppedMoment.from_function(lambda x, y: 1.0 - np.exp(y - x), grids)


@dataclass
class PotentialSet:
    """Dual variables: phi_nu per time point, phi_b per transition, and price
    multipliers Lambda grouped by time point alongside their payoff rows."""

    phi_nu: list  # arrays, k = 0..n_steps
    phi_b: list  # arrays, k = 0..n_steps-1
    lambdas: dict  # step k -> multiplier vector (m_k,)
    payoffs: dict  # step k -> payoff matrix (m_k, n_points_k), fixed

    @classmethod
    def zeros(cls, ref: ReferenceMeasure, payoffs: dict | None = None) -> "PotentialSet":
        payoffs = dict(payoffs or {})
        phi_nu = [np.zeros(g.n_points) for g in ref.grids]
        phi_b = [np.zeros(g.n_points) for g in ref.grids[:-1]]
        lambdas = {k: np.zeros(G.shape[0]) for k, G in payoffs.items()}
        return cls(phi_nu=phi_nu, phi_b=phi_b, lambdas=lambdas, payoffs=payoffs)

    def price_tilt(self, k: int) -> float | np.ndarray:
        """Lambda_k . G_k as a vector on grid k (0.0 when unconstrained)."""
        if k not in self.payoffs:
            return 0.0
        return self.lambdas[k] @ self.payoffs[k]

    def copy(self) -> "PotentialSet":
        return PotentialSet(
            phi_nu=[v.copy() for v in self.phi_nu],
            phi_b=[v.copy() for v in self.phi_b],
            lambdas={k: v.copy() for k, v in self.lambdas.items()},
            payoffs=self.payoffs,
        )

    # -- flattening for convergence norms and Anderson acceleration ---------
    # Sentinel entries (log-Dirac zeros in phi_nu_0) are excluded: they are
    # structural constants, not iteration variables.

    def _chunks(self):
        for v in self.phi_nu:
            yield v
        for v in self.phi_b:
            yield v
        for k in sorted(self.lambdas):
            yield self.lambdas[k]

    def flatten(self) -> np.ndarray:
        return np.concatenate([c[c > DEAD] for c in self._chunks()])

    def assign_flat(self, vec: np.ndarray) -> None:
        i = 0
        for c in self._chunks():
            m = c > DEAD
            n = int(m.sum())
            c[m] = vec[i:i + n]
            i += n
        if i != vec.size:
            raise ValueError("flat vector length mismatch")


@dataclass
class Propagators:
    psi_up: list  # k = 0..n_steps
    psi_down: list  # k = 0..n_steps


def transition_log_tilt(k: int, pots: PotentialSet, moment: SteppedMoment | None,
                        ref: ReferenceMeasure) -> np.ndarray:
    """Log of the un-normalized pairwise factor carried by transition k:
    B(x,y) phi_b_k(x)/h + phi_nu_k(x) + Lambda_k.G_k(x) + log kernel(x,y)."""
    h = ref.time_grid.step
    L = ref.log_kernels[k] + (pots.phi_nu[k] + pots.price_tilt(k))[:, None]
    if moment is not None:
        L = L + moment.matrices[k] * (pots.phi_b[k] / h)[:, None]
    return L


def _source_factor(k: int, pots: PotentialSet) -> np.ndarray:
    return pots.phi_nu[k] + pots.price_tilt(k)


def update_psi_up(k: int, psi_up_k: np.ndarray, pots: PotentialSet,
                  moment: SteppedMoment | None, ref: ReferenceMeasure) -> np.ndarray:
    """One forward step: fold everything at step k into psi_up_{k+1}."""
    h = ref.time_grid.step
    M = ref.log_kernels[k] + (psi_up_k + _source_factor(k, pots))[:, None]
    if moment is not None:
        M = M + moment.matrices[k] * (pots.phi_b[k] / h)[:, None]
    out = _lse(M, axis=0)
    if np.all(out <= DEAD):
        raise ValueError(f"no mass reachable at step {k + 1} (degenerate forward sweep)")
    return out


def forward_sweep(pots: PotentialSet, moment: SteppedMoment | None,
                  ref: ReferenceMeasure) -> list:
    psi_up = [ref.log_rho0.copy()]
    for k in range(ref.n_steps):
        psi_up.append(update_psi_up(k, psi_up[k], pots, moment, ref))
    return psi_up


def backward_sweep(pots: PotentialSet, moment: SteppedMoment | None,
                   ref: ReferenceMeasure) -> list:
    """psi_down_k from the terminal condition psi_down_{n} = 0 backwards; the
    arrival point's own factors (phi_nu, price tilt at k+1) are folded in."""
    h = ref.time_grid.step
    n = ref.n_steps
    psi_down = [None] * (n + 1)
    psi_down[n] = np.zeros(ref.grids[n].n_points)
    for k in range(n - 1, -1, -1):
        M = ref.log_kernels[k] + (psi_down[k + 1] + _source_factor(k + 1, pots))[None, :]
        if moment is not None:
            M = M + moment.matrices[k] * (pots.phi_b[k] / h)[:, None]
        psi_down[k] = _lse(M, axis=1)
    return psi_down


def log_marginal(k: int, pots: PotentialSet, props: Propagators) -> np.ndarray:
    val = props.psi_up[k] + pots.phi_nu[k] + pots.price_tilt(k) + props.psi_down[k]
    return np.where(val > DEAD, val, LOG_SENTINEL)


def marginal(k: int, pots: PotentialSet, props: Propagators) -> np.ndarray:
    """Tilted-measure marginal at step k. Sums to 1 only at a dual optimum
    with the hard initial constraint in force; the defect is the caller's to
    inspect, not silently repaired here."""
    lm = log_marginal(k, pots, props)
    out = np.zeros(lm.shape)
    alive = lm > DEAD
    out[alive] = np.exp(lm[alive])
    return out


def pairwise_joint(k: int, pots: PotentialSet, props: Propagators,
                   moment: SteppedMoment | None, ref: ReferenceMeasure) -> np.ndarray:
    """Tilted joint of (X_k, X_{k+1}); its row sums reproduce marginal(k)."""
    h = ref.time_grid.step
    logJ = (ref.log_kernels[k]
            + (props.psi_up[k] + _source_factor(k, pots))[:, None]
            + (props.psi_down[k + 1] + _source_factor(k + 1, pots))[None, :])
    if moment is not None:
        logJ = logJ + moment.matrices[k] * (pots.phi_b[k] / h)[:, None]
    out = np.zeros(logJ.shape)
    alive = logJ > DEAD
    out[alive] = np.exp(logJ[alive])
    return out


@dataclass
class Moments:
    beta: np.ndarray  # conditional drift estimate, per source point
    alpha: np.ndarray  # conditional second-moment rate
    b: np.ndarray  # general-moment rate (1/h) E[B | x]
    sigma2: np.ndarray  # local-variance estimate alpha - h * beta^2
    valid: np.ndarray  # rows with enough mass to trust


def conditional_moments(k: int, joint: np.ndarray, grids: list, h: float,
                        moment: SteppedMoment | None = None,
                        mass_floor: float = 1e-300) -> Moments:
    """Discrete conditional moments of one transition of the tilted chain.

    beta = (1/h) E[dX | x], alpha = (1/h) E[dX^2 | x], b = (1/h) E[B | x].
    Rows carrying less than mass_floor are flagged invalid and returned NaN.
    """
    x = grids[k].points
    y = grids[k + 1].points
    mass = joint.sum(axis=1)
    valid = mass > mass_floor
    beta = np.full(x.shape, np.nan)
    alpha = np.full(x.shape, np.nan)
    b = np.full(x.shape, np.nan)
    if np.any(valid):
        cond = joint[valid] / mass[valid, None]
        d = y[None, :] - x[valid, None]
        beta[valid] = (cond * d).sum(axis=1) / h
        alpha[valid] = (cond * d * d).sum(axis=1) / h
        if moment is not None:
            b[valid] = (cond * moment.matrices[k][valid]).sum(axis=1) / h
    sigma2 = alpha - h * beta * beta
    return Moments(beta=beta, alpha=alpha, b=b, sigma2=sigma2, valid=valid)
