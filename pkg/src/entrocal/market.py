"""Synthetic option market: SSVI total-variance surface, Black-Scholes pricing,
implied-volatility inversion, and instrument-set generation.

Everything is undiscounted and written on the forward (zero rates, zero
dividends), so forward == spot throughout. Payoffs are evaluated in log-price
coordinates x = log S because that is the state space of the solver.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

__all__ = [
    "SsviParams",
    "Instrument",
    "InstrumentSet",
    "ssvi_total_variance",
    "bs_price",
    "implied_vol",
    "payoff_on_grid",
    "arbitrage_bounds",
    "generate_market",
    "write_instruments",
    "read_instruments",
]

# Default strike-count schedule: at calibration time number i we quote
# calls at S0 + 1 + 4k and puts at S0 - 1 - 4k for k = 0..n_strikes[i].
DEFAULT_STRIKE_COUNTS = (5, 7, 9, 10, 12)
DEFAULT_CALIBRATION_TIMES = (0.2, 0.4, 0.6, 0.8, 1.0)


@dataclass(frozen=True)
class SsviParams:
    """Power-law SSVI parameters: phi(theta) = eta * theta^(-lam),
    theta_t = theta_slope * t."""

    eta: float = 1.6
    lam: float = 0.4
    rho: float = -0.15
    theta_slope: float = 0.04

    def validate(self) -> None:
        if not (abs(self.rho) < 1.0):
            raise ValueError(f"|rho| must be < 1, got {self.rho}")
        if not (self.eta > 0.0):
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not (0.0 < self.lam < 1.0):
            raise ValueError(f"lam must be in (0,1), got {self.lam}")
        if not (self.theta_slope > 0.0):
            raise ValueError(f"theta_slope must be positive, got {self.theta_slope}")


def ssvi_total_variance(p: SsviParams, k, t):
    """Total implied variance w(k, t) of the power-law SSVI surface.

    w = (theta_t/2) * (1 + rho*phi*k + sqrt((phi*k + rho)^2 + 1 - rho^2))
    with phi = eta * theta_t^(-lam) and theta_t = theta_slope * t.
    At k = 0 the bracket collapses to 2, so w(0, t) = theta_t exactly.
    """
    p.validate()
    t = np.asarray(t, dtype=float)
    k = np.asarray(k, dtype=float)
    if np.any(t <= 0.0):
        raise ValueError("maturity must be positive")
    theta = p.theta_slope * t
    phi = p.eta * theta ** (-p.lam)
    pk = phi * k
    w = 0.5 * theta * (1.0 + p.rho * pk + np.sqrt((pk + p.rho) ** 2 + 1.0 - p.rho**2))
    if not np.all(np.isfinite(w)):
        raise ValueError("SSVI produced a non-finite total variance")
    return w if w.ndim else float(w)


def bs_price(forward, strike, total_variance, kind: str = "call"):
    """Undiscounted Black-Scholes price on the forward.

    total_variance is sigma^2 * T. Zero variance returns intrinsic value.
    """
    F = np.asarray(forward, dtype=float)
    K = np.asarray(strike, dtype=float)
    w = np.asarray(total_variance, dtype=float)
    if np.any(F <= 0.0) or np.any(K <= 0.0):
        raise ValueError("forward and strike must be positive")
    if np.any(w < 0.0):
        raise ValueError("total variance must be nonnegative")
    if kind not in ("call", "put"):
        raise ValueError(f"kind must be 'call' or 'put', got {kind!r}")

    sw = np.sqrt(w)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = np.where(sw > 0.0, np.log(F / K) / np.where(sw > 0, sw, 1.0) + 0.5 * sw, 0.0)
    d2 = d1 - sw
    call = np.where(sw > 0.0, F * norm.cdf(d1) - K * norm.cdf(d2), np.maximum(F - K, 0.0))
    if kind == "call":
        out = call
    else:
        # put-call parity: put = call - (F - K), exact by construction
        out = call - (F - K)
    return out if out.ndim else float(out)


def bs_vega(forward, strike, sigma, maturity):
    """d(price)/d(sigma), same for calls and puts."""
    sw = sigma * math.sqrt(maturity)
    if sw <= 0.0:
        return 0.0
    d1 = math.log(forward / strike) / sw + 0.5 * sw
    return forward * norm.pdf(d1) * math.sqrt(maturity)


def arbitrage_bounds(forward: float, strike: float, kind: str):
    """(lower, upper) static no-arbitrage price bounds for a vanilla."""
    if kind == "call":
        return max(forward - strike, 0.0), forward
    return max(strike - forward, 0.0), strike


def implied_vol(price: float, forward: float, strike: float, maturity: float,
                kind: str = "call") -> float:
    """Invert the Black-Scholes formula for sigma.

    Bisection on a bracketing interval followed by Newton polishing; only used
    in reporting, so robustness wins over speed. Raises ValueError when the
    price sits at or outside the static arbitrage bounds.
    """
    lo_bound, hi_bound = arbitrage_bounds(forward, strike, kind)
    if not (lo_bound < price < hi_bound):
        raise ValueError(
            f"price {price!r} outside arbitrage bounds ({lo_bound!r}, {hi_bound!r}) "
            f"for {kind} F={forward} K={strike}"
        )

    def f(sig):
        return bs_price(forward, strike, sig * sig * maturity, kind) - price

    lo, hi = 1e-12, 1.0
    while f(hi) < 0.0 and hi < 1e3:
        hi *= 2.0
    # bisection to a decent neighbourhood
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if f(mid) <= 0.0:
            lo = mid
        else:
            hi = mid
    sigma = 0.5 * (lo + hi)
    # Newton polish; fall back to the bisection value if vega degenerates
    for _ in range(20):
        err = f(sigma)
        if abs(err) < 1e-12:
            break
        vega = bs_vega(forward, strike, sigma, maturity)
        if vega <= 0.0:
            break
        new = sigma - err / vega
        sigma = new if new > 0.0 else 0.5 * sigma
    return sigma


def payoff_on_grid(kind: str, strike: float, x: np.ndarray) -> np.ndarray:
    """Vanilla payoff evaluated at log-prices x."""
    s = np.exp(x)
    if kind == "call":
        return np.maximum(s - strike, 0.0)
    if kind == "put":
        return np.maximum(strike - s, 0.0)
    raise ValueError(f"unknown payoff kind {kind!r}")


@dataclass(frozen=True)
class Instrument:
    """One vanilla quote: maturity_index points into the calibration-time list."""

    maturity_index: int
    kind: str
    strike: float
    target_price: float
    penalty_weight: float

    def validate(self) -> None:
        if self.strike <= 0.0:
            raise ValueError("strike must be positive")
        if self.target_price < 0.0:
            raise ValueError("target price must be nonnegative")
        if self.penalty_weight < 0.0:
            # zero-weight quotes are informational: priced and reported but
            # never enforced
            raise ValueError("penalty weight must be nonnegative")
        if self.kind not in ("call", "put"):
            raise ValueError(f"unknown instrument kind {self.kind!r}")


@dataclass
class InstrumentSet:
    times: list[float] = field(default_factory=list)
    instruments: list[Instrument] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.instruments)

    def by_time(self) -> dict[int, list[Instrument]]:
        """Instruments grouped by maturity index."""
        groups: dict[int, list[Instrument]] = {}
        for inst in self.instruments:
            groups.setdefault(inst.maturity_index, []).append(inst)
        return groups


def generate_market(params: SsviParams, spot: float,
                    calibration_times=DEFAULT_CALIBRATION_TIMES,
                    strike_counts=DEFAULT_STRIKE_COUNTS,
                    penalty_weight: float = 1.0) -> InstrumentSet:
    """Build the synthetic instrument set priced off the SSVI surface.

    At time number i we emit calls struck at spot + 1 + 4k and puts struck at
    spot - 1 - 4k for k = 0..strike_counts[i]. Strikes that would be
    nonpositive are dropped with a warning. Targets are Black-Scholes prices
    under the surface's total variance; forward == spot.
    """
    times = [float(t) for t in calibration_times]
    if len(times) != len(strike_counts):
        raise ValueError("strike_counts must align with calibration_times")
    if any(t <= 0.0 for t in times) or any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("calibration times must be strictly increasing and positive")

    out = InstrumentSet(times=times)
    for i, (t, n_k) in enumerate(zip(times, strike_counts)):
        for k in range(int(n_k) + 1):
            for kind, strike in (("call", spot + 1.0 + 4.0 * k),
                                 ("put", spot - 1.0 - 4.0 * k)):
                if strike <= 0.0:
                    import warnings

                    warnings.warn(f"dropping nonpositive strike {strike} at t={t}")
                    continue
                w = ssvi_total_variance(params, math.log(strike / spot), t)
                price = bs_price(spot, strike, w, kind)
                inst = Instrument(i, kind, float(strike), float(price), penalty_weight)
                inst.validate()
                out.instruments.append(inst)
    return out


# ----------------------------------------------------------------------------
# flat-file round trip (comma separated, 17 significant digits)
# ----------------------------------------------------------------------------

INSTRUMENT_HEADER = "maturity_time,kind,strike,target_price,penalty_weight"


def write_instruments(path, iset: InstrumentSet) -> None:
    lines = [INSTRUMENT_HEADER]
    for inst in iset.instruments:
        t = iset.times[inst.maturity_index]
        lines.append(
            f"{t:.17g},{inst.kind},{inst.strike:.17g},"
            f"{inst.target_price:.17g},{inst.penalty_weight:.17g}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_instruments(path) -> InstrumentSet:
    with open(path) as fh:
        header = fh.readline().strip()
        if header != INSTRUMENT_HEADER:
            raise ValueError(f"unexpected instrument header: {header!r}")
        rows = []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            t_s, kind, k_s, p_s, w_s = line.split(",")
            rows.append((float(t_s), kind, float(k_s), float(p_s), float(w_s)))
    times = sorted({r[0] for r in rows})
    index = {t: i for i, t in enumerate(times)}
    iset = InstrumentSet(times=times)
    for t, kind, strike, price, weight in rows:
        iset.instruments.append(Instrument(index[t], kind, strike, price, weight))
    return iset
