"""Windowed Anderson acceleration for the sweep fixed point.

The sweep is viewed as a map s on the flattened potential vector with
residual g(x) = s(x) - x. Each iteration solves a small ridge-regularized
least-squares problem over the last `depth` residual differences and proposes
the extrapolated iterate

    x+ = x + g(x) - (dX + dG) gamma,

falling back to the plain step x + g(x) whenever the extrapolation inflates
the residual norm by more than the safeguard factor. Rejected candidates are
discarded entirely; accepted iterates (plain or extrapolated) enter the
difference window. Map evaluations are counted exactly: one per iteration,
plus one more when a candidate is rejected (the fallback's residual must
still be measured). Iteration stops when the residual norm at the current
iterate falls below the tolerance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .sinkhorn import IterationRecord, RunResult, SolverConfig, iterate_error

__all__ = ["AndersonConfig", "accelerate"]

log = logging.getLogger("entrocal.anderson")


@dataclass
class AndersonConfig:
    depth: int = 5          # residual-difference window size
    ridge: float = 1e-10    # Tikhonov weight, relative to the Gram matrix scale
    safeguard: float = 2.0  # max allowed residual growth factor for acceptance

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.ridge < 0.0 or self.safeguard <= 0.0:
            raise ValueError("ridge must be >= 0 and safeguard > 0")


def _mixing_weight_defect(gamma: np.ndarray) -> float:
    """The extrapolation is an affine combination of stored iterates; its
    implied weights telescope to 1 exactly. Returns |sum(alpha) - 1|."""
    alpha = np.empty(gamma.size + 1)
    alpha[0] = gamma[0]
    alpha[1:-1] = np.diff(gamma)
    alpha[-1] = 1.0 - gamma[-1]
    return abs(float(alpha.sum()) - 1.0)


def accelerate(pots0, fmap, cfg: SolverConfig, acfg: AndersonConfig,
               diagnose=None) -> RunResult:
    """Drive fmap (PotentialSet -> PotentialSet) to a fixed point.

    `diagnose`, if given, maps a PotentialSet to (price_err, mart_err) for
    the iteration records. Stopping measures the residual with the same
    relative sup-norm metric as the plain loop, so sweep counts are
    comparable across modes.
    """
    cfg.validate()
    acfg.validate()
    template = pots0.copy()
    evals = 0

    def g_of(x: np.ndarray) -> np.ndarray:
        nonlocal evals
        evals += 1
        p = template.copy()
        p.assign_flat(x)
        return fmap(p).flatten() - x

    def as_pots(x: np.ndarray):
        p = template.copy()
        p.assign_flat(x)
        return p

    x = pots0.flatten()
    gx = g_of(x)
    dX: list = []
    dG: list = []
    records: list = []
    converged = False

    for it in range(1, cfg.max_sweeps + 1):
        accepted = True
        if dG:
            Gbar = np.column_stack(dG)
            Xbar = np.column_stack(dX)
            A = Gbar.T @ Gbar
            mu = acfg.ridge * max(float(np.max(np.abs(A))), 1e-300)
            lhs = A + mu * np.eye(A.shape[0])
            rhs = Gbar.T @ gx
            try:
                gamma = np.linalg.solve(lhs, rhs)
            except np.linalg.LinAlgError:
                log.warning("gram system singular despite ridge; plain step "
                            "at iteration %d", it)
                gamma = None
            if gamma is None:
                x_new = x + gx
                g_new = g_of(x_new)
            else:
                defect = _mixing_weight_defect(gamma)
                if defect > 1e-10:
                    log.warning("mixing weights off affine hull by %.3e at "
                                "iteration %d", defect, it)
                cand = x + gx - (Xbar + Gbar) @ gamma
                g_cand = g_of(cand)
                cand_norm = float(np.linalg.norm(g_cand))
                bound = acfg.safeguard * float(np.linalg.norm(gx))
                if cand_norm <= bound:
                    # acceptance contract: extrapolation may not inflate the
                    # residual beyond the safeguard factor
                    assert cand_norm <= bound
                    x_new, g_new = cand, g_cand
                else:
                    accepted = False
                    x_new = x + gx
                    g_new = g_of(x_new)
        else:
            x_new = x + gx
            g_new = g_of(x_new)

        dX.append(x_new - x)
        dG.append(g_new - gx)
        if len(dG) > acfg.depth:
            dX.pop(0)
            dG.pop(0)

        # stop on the residual at the new iterate (its map value is already
        # evaluated), measured with the same metric as the plain loop
        e = iterate_error(x_new, x_new + g_new, cfg.stop_metric)
        x, gx = x_new, g_new
        if diagnose is not None:
            price_err, mart_err = diagnose(as_pots(x))
        else:
            price_err = mart_err = float("nan")
        records.append(IterationRecord(it, accepted, e, price_err, mart_err))
        if e < cfg.eps_stop:
            converged = True
            break

    return RunResult(potentials=as_pots(x), records=records,
                     converged=converged, n_map_evals=evals)
