"""Multi-marginal Sinkhorn sweeps for the calibration problem.

One sweep runs a full backward psi pass with the incoming potentials, then
walks the time steps upward, solving three kinds of block in place:

  * the hard initial marginal (closed form for phi_nu_0),
  * soft price constraints (small damped-Newton system per constrained step),
  * the soft martingale moment (pointwise damped Newton for phi_b_k, after
    which phi_nu_k is pinned to the Legendre coupling h * phi_b^2 / (4 c)).

The forward accumulator is rebuilt incrementally with the freshly updated
potentials; the backward one stays frozen for the duration of the sweep. The
terminal step only carries price constraints (its phi_nu is identically 0).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .market import InstrumentSet, payoff_on_grid
from .propagation import (
    DEAD,
    PotentialSet,
    Propagators,
    SteppedMoment,
    backward_sweep,
    conditional_moments,
    forward_sweep,
    marginal,
    martingale_moment,
    pairwise_joint,
    update_psi_up,
)
from .reference import LOG_SENTINEL, ReferenceMeasure

__all__ = [
    "ConstraintSet",
    "SolverConfig",
    "IterationRecord",
    "RunResult",
    "SolveError",
    "constraints_from_instruments",
    "solve_marginal_initial",
    "solve_prices",
    "solve_driftvol",
    "sinkhorn_sweep",
    "iterate_error",
    "diagnostics",
    "dual_objective",
    "run",
]

log = logging.getLogger("entrocal.sinkhorn")


class SolveError(RuntimeError):
    """A Newton block failed to converge; carries the residual norm."""

    def __init__(self, message: str, residual_norm: float):
        super().__init__(f"{message} (residual {residual_norm:.3e})")
        self.residual_norm = residual_norm


@dataclass
class ConstraintSet:
    """Everything the sweep needs to know about the calibration targets."""

    payoffs: dict  # step k -> payoff matrix (m_k, n_points)
    targets: dict  # step k -> target price vector
    weights: dict  # step k -> penalty curvature gamma per constraint
    c_mart: float = 0.0  # martingale penalty weight; 0 disables the block
    martingale_step0: bool = False  # also penalize the very first transition
    moment: SteppedMoment | None = None

    def price_steps(self):
        return sorted(self.payoffs)

    def moment_steps(self, n_steps: int):
        if self.moment is None or self.c_mart <= 0.0:
            return []
        first = 0 if self.martingale_step0 else 1
        return list(range(first, n_steps))

    def n_instruments(self) -> int:
        return sum(G.shape[0] for G in self.payoffs.values())


def constraints_from_instruments(iset: InstrumentSet, ref: ReferenceMeasure,
                                 c_mart: float = 0.0,
                                 martingale_step0: bool = False) -> ConstraintSet:
    """Group instruments by their time-grid step and evaluate payoffs there.

    Quotes with zero penalty weight exert no pull — their stationary
    multiplier is exactly zero — so they are left out of the solve entirely
    (a whole step disappears when none of its quotes carries weight).
    """
    payoffs: dict = {}
    targets: dict = {}
    weights: dict = {}
    for idx, insts in sorted(iset.by_time().items()):
        insts = [i for i in insts if i.penalty_weight > 0.0]
        if not insts:
            continue
        k = ref.time_grid.calib_steps[idx]
        x = ref.grids[k].points
        payoffs[k] = np.array([payoff_on_grid(i.kind, i.strike, x) for i in insts])
        targets[k] = np.array([i.target_price for i in insts])
        weights[k] = np.array([i.penalty_weight for i in insts])
    moment = martingale_moment(ref.grids) if c_mart > 0.0 else None
    return ConstraintSet(payoffs=payoffs, targets=targets, weights=weights,
                         c_mart=c_mart, martingale_step0=martingale_step0,
                         moment=moment)


@dataclass
class SolverConfig:
    eps_stop: float = 1e-9
    max_sweeps: int = 500
    newton_tol: float = 1e-11
    newton_max_iter: int = 60
    max_halvings: int = 30
    stop_metric: str = "relative"  # or "absolute"
    log_diagnostics: bool = True

    def validate(self) -> None:
        if self.eps_stop <= 0.0 or self.newton_tol <= 0.0:
            raise ValueError("tolerances must be positive")
        if self.stop_metric not in ("relative", "absolute"):
            raise ValueError(f"unknown stop metric {self.stop_metric!r}")


# ---------------------------------------------------------------------------
# block solves
# ---------------------------------------------------------------------------

def solve_marginal_initial(pots: PotentialSet, props: Propagators,
                           ref: ReferenceMeasure) -> None:
    """Exact update for the hard initial marginal: afterwards marginal(0)
    equals rho0 identically (with respect to the current accumulators)."""
    lr = ref.log_rho0
    alive = lr > DEAD
    tilt = pots.price_tilt(0)
    tilt = np.broadcast_to(np.asarray(tilt, dtype=float), lr.shape)
    phi = np.full(lr.shape, LOG_SENTINEL)
    phi[alive] = (lr[alive] - props.psi_up[0][alive] - tilt[alive]
                  - props.psi_down[0][alive])
    pots.phi_nu[0] = phi


def solve_prices(k: int, pots: PotentialSet, psi_up_k: np.ndarray,
                 psi_down_k: np.ndarray, constraints: ConstraintSet,
                 cfg: SolverConfig) -> None:
    """Damped Newton for the price multipliers Lambda_k.

    Stationarity in Lambda reads  E[G_i] + Lambda_i/gamma_i - c_i = 0  with
    the expectation under the un-normalized tilted marginal; the Jacobian
    G diag(nu) G^T + diag(1/gamma) is symmetric positive definite.
    """
    G = constraints.payoffs[k]
    c = constraints.targets[k]
    gamma = constraints.weights[k]
    base = psi_up_k + pots.phi_nu[k] + psi_down_k
    lam = pots.lambdas[k].copy()

    def residual(l):
        logv = base + l @ G
        nu = np.zeros(logv.shape)
        alive = logv > DEAD
        with np.errstate(over="ignore"):
            nu[alive] = np.exp(logv[alive])
        return G @ nu + l / gamma - c, nu

    r, nu = residual(lam)
    norm = float(np.linalg.norm(r))
    for _ in range(cfg.newton_max_iter):
        if np.max(np.abs(r)) <= cfg.newton_tol:
            pots.lambdas[k] = lam
            return
        H = (G * nu) @ G.T + np.diag(1.0 / gamma)
        try:
            delta = np.linalg.solve(H, r)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(H, r, rcond=None)[0]
        t = 1.0
        for _ in range(cfg.max_halvings):
            cand = lam - t * delta
            r_new, nu_new = residual(cand)
            norm_new = float(np.linalg.norm(r_new))
            if np.isfinite(norm_new) and norm_new < norm:
                lam, r, nu, norm = cand, r_new, nu_new, norm_new
                break
            t *= 0.5
        else:
            raise SolveError(f"price Newton stalled at step {k}", norm)
    raise SolveError(f"price Newton did not converge at step {k}", norm)


def solve_driftvol(k: int, pots: PotentialSet, psi_down_k1: np.ndarray,
                   constraints: ConstraintSet, ref: ReferenceMeasure,
                   cfg: SolverConfig, couple: bool = True,
                   psi_up_k: np.ndarray | None = None) -> int:
    """Pointwise damped Newton for the martingale potential phi_b_k.

    For each source point x the stationarity condition is

        bhat(x; phi) + h * phi(x) / (2 c_mart) = 0,

    where bhat is (1/h) times the conditional mean of B under the transition
    row re-tilted by exp(B phi/h). Both terms increase in phi (the first has
    slope Var[B]/h^2), so each scalar equation has a unique root. Afterwards
    phi_nu_k is pinned to the coupling h * phi^2 / (4 c_mart) unless couple
    is False (the initial step keeps phi_nu for its hard marginal).

    When psi_up_k is given, rows carrying no upward mass are degenerate —
    the objective does not depend on their potential — so they keep their
    previous value instead of chasing the arrival factors of paths that
    never occur (at the initial step, every row but the spot atom).

    Returns the number of points that failed to converge (their previous
    value is kept).
    """
    h = ref.time_grid.step
    c = constraints.c_mart
    B = constraints.moment.matrices[k]
    arrival = pots.phi_nu[k + 1] + pots.price_tilt(k + 1) + psi_down_k1
    Sfix = ref.log_kernels[k] + arrival[None, :]

    def residual(phi):
        M = Sfix + B * (phi / h)[:, None]
        m = np.max(M, axis=1)
        alive = m > DEAD
        w = np.exp(M - np.where(alive, m, 0.0)[:, None],
                   where=alive[:, None], out=np.zeros_like(M))
        Z = w.sum(axis=1)
        Z = np.where(alive, Z, 1.0)
        EB = (w * B).sum(axis=1) / Z
        EB2 = (w * B * B).sum(axis=1) / Z
        r = EB / h + h * phi / (2.0 * c)
        var = np.maximum(EB2 - EB * EB, 0.0)
        return r, var, alive

    phi0 = pots.phi_b[k].copy()
    phi = phi0.copy()
    r, var, alive = residual(phi)
    done = ~alive  # dead rows keep their previous value, silently
    if psi_up_k is not None:
        done = done | (psi_up_k <= DEAD)
    for _ in range(cfg.newton_max_iter):
        done = done | (np.abs(r) <= cfg.newton_tol)
        if np.all(done):
            break
        slope = var / (h * h) + h / (2.0 * c)
        step = np.where(done, 0.0, -r / slope)
        t = np.ones(phi.shape)
        for _ in range(cfg.max_halvings):
            cand = phi + t * step
            r_new, var_new, _ = residual(cand)
            worse = ~done & (np.abs(r_new) > np.abs(r)) & (np.abs(r) > 0)
            if not np.any(worse):
                break
            t[worse] *= 0.5
        phi = np.where(done, phi, phi + t * step)
        r, var, alive = residual(phi)

    flagged = ~done & alive
    n_flagged = int(flagged.sum())
    if n_flagged:
        log.warning("driftvol Newton left %d unconverged points at step %d "
                    "(max residual %.3e); keeping previous values",
                    n_flagged, k, float(np.max(np.abs(r[flagged]))))
        phi[flagged] = phi0[flagged]
    pots.phi_b[k] = phi
    if couple:
        pots.phi_nu[k] = h * phi * phi / (4.0 * c)
    return n_flagged


# ---------------------------------------------------------------------------
# the sweep (one application of the fixed-point map) and the outer loop
# ---------------------------------------------------------------------------

def sinkhorn_sweep(pots_in: PotentialSet, ref: ReferenceMeasure,
                   constraints: ConstraintSet, cfg: SolverConfig):
    """One full sweep; returns (new potentials, accumulators, flagged count).

    The input potentials are not mutated, so this is a pure map suitable for
    fixed-point acceleration.
    """
    moment = constraints.moment if constraints.c_mart > 0.0 else None
    pots = pots_in.copy()
    n = ref.n_steps
    psi_down = backward_sweep(pots, moment, ref)
    psi_up = [ref.log_rho0.copy()] + [None] * n
    props = Propagators(psi_up=psi_up, psi_down=psi_down)
    moment_steps = set(constraints.moment_steps(n))
    flagged = 0

    for k in range(n):
        if k == 0:
            solve_marginal_initial(pots, props, ref)
        if k in constraints.payoffs:
            solve_prices(k, pots, psi_up[k], psi_down[k], constraints, cfg)
        if k in moment_steps:
            flagged += solve_driftvol(k, pots, psi_down[k + 1], constraints,
                                      ref, cfg, couple=(k != 0),
                                      psi_up_k=psi_up[k])
        psi_up[k + 1] = update_psi_up(k, psi_up[k], pots, moment, ref)
    if n in constraints.payoffs:
        solve_prices(n, pots, psi_up[n], psi_down[n], constraints, cfg)
    return pots, props, flagged


def iterate_error(flat_old: np.ndarray, flat_new: np.ndarray,
                  metric: str = "relative") -> float:
    """Sup-norm change of the flattened potentials, relative by default with
    an absolute fallback when the previous iterate is (numerically) zero."""
    diff = float(np.max(np.abs(flat_new - flat_old))) if flat_old.size else 0.0
    if metric == "absolute":
        return diff
    denom = float(np.max(np.abs(flat_old))) if flat_old.size else 0.0
    if denom < 1e-30:
        return diff
    return diff / denom


@dataclass
class IterationRecord:
    iteration: int
    accepted: bool
    e_max: float
    price_err_l2: float
    mart_err_l2: float


@dataclass
class RunResult:
    potentials: PotentialSet
    records: list
    converged: bool
    n_map_evals: int


def diagnostics(pots: PotentialSet, ref: ReferenceMeasure,
                constraints: ConstraintSet):
    """Self-consistent error measures from fresh accumulators.

    price_err_l2: l2 norm over instruments of (model price - target).
    mart_err_l2: sqrt(sum_k h E_nu[bhat_k^2]) over all transition steps, the
    discrete L2(dt x measure) size of the martingale defect.
    """
    moment = constraints.moment if constraints.c_mart > 0.0 else None
    props = Propagators(psi_up=forward_sweep(pots, moment, ref),
                        psi_down=backward_sweep(pots, moment, ref))
    h = ref.time_grid.step

    sq = 0.0
    model: dict = {}
    for k in constraints.price_steps():
        nu = marginal(k, pots, props)
        model[k] = constraints.payoffs[k] @ nu
        sq += float(np.sum((model[k] - constraints.targets[k]) ** 2))
    price_err = float(np.sqrt(sq))

    mart_sq = 0.0
    if moment is not None:
        for k in range(ref.n_steps):
            joint = pairwise_joint(k, pots, props, moment, ref)
            mom = conditional_moments(k, joint, ref.grids, h, moment)
            mass = joint.sum(axis=1)
            ok = mom.valid
            mart_sq += h * float(np.sum(mass[ok] * mom.b[ok] ** 2))
    return price_err, float(np.sqrt(mart_sq)), model, props


def dual_objective(pots: PotentialSet, ref: ReferenceMeasure,
                   constraints: ConstraintSet) -> float:
    """The concave dual value J: linear terms minus the tilted total mass.
    Each exact block solve must not decrease it; used as a diagnostic."""
    moment = constraints.moment if constraints.c_mart > 0.0 else None
    alive = ref.log_rho0 > DEAD
    val = float(np.dot(ref.rho0[alive], pots.phi_nu[0][alive]))
    for k in constraints.price_steps():
        lam = pots.lambdas[k]
        val += float(np.sum(lam * constraints.targets[k]
                            - lam * lam / (2.0 * constraints.weights[k])))
    psi_up = forward_sweep(pots, moment, ref)
    top = psi_up[-1] + pots.phi_nu[-1] + np.broadcast_to(
        np.asarray(pots.price_tilt(ref.n_steps), dtype=float),
        psi_up[-1].shape)
    mass = float(np.sum(np.exp(top[top > DEAD])))
    return val - mass


def run(ref: ReferenceMeasure, constraints: ConstraintSet, cfg: SolverConfig,
        accel=None, initial: PotentialSet | None = None) -> RunResult:
    """Iterate sweeps (optionally Anderson-accelerated) until the iterate
    error drops below eps_stop or the sweep budget runs out. Non-convergence
    is reported in the result, never raised.

    initial, when given, seeds the iteration (e.g. potentials carried over
    from a coarser discretization); it is copied, not mutated.
    """
    cfg.validate()
    if initial is not None:
        pots = initial.copy()
    else:
        pots = PotentialSet.zeros(ref, constraints.payoffs)
    pots.phi_nu[0][ref.rho0 <= 0.0] = LOG_SENTINEL

    def diagnose(p: PotentialSet):
        if not cfg.log_diagnostics:
            return float("nan"), float("nan")
        price_err, mart_err, _, _ = diagnostics(p, ref, constraints)
        return price_err, mart_err

    if accel is not None:
        from .anderson import accelerate

        return accelerate(
            pots, lambda p: sinkhorn_sweep(p, ref, constraints, cfg)[0],
            cfg, accel, diagnose)

    records: list = []
    evals = 0
    converged = False
    for it in range(1, cfg.max_sweeps + 1):
        new, _, _ = sinkhorn_sweep(pots, ref, constraints, cfg)
        evals += 1
        e = iterate_error(pots.flatten(), new.flatten(), cfg.stop_metric)
        pots = new
        price_err, mart_err = diagnose(pots)
        records.append(IterationRecord(it, True, e, price_err, mart_err))
        if e < cfg.eps_stop:
            converged = True
            break
    return RunResult(potentials=pots, records=records, converged=converged,
                     n_map_evals=evals)
