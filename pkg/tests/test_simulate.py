"""Monte Carlo engine: determinism contract, exact laws, and repricing."""

import math

import numpy as np
import pytest

from entrocal.market import Instrument, InstrumentSet, bs_price, implied_vol
from entrocal.multiscale import SigmaTable, extract_sigma_table
from entrocal.simulate import (
    BLOCK,
    mc_audit,
    mc_price_instruments,
    simulate_snapshots,
)
from entrocal.sinkhorn import SolverConfig, diagnostics, run

from test_sinkhorn import SPOT, X0, flat_vol_instruments, gaussian_ref


def flat_table(sigma, n_steps, horizon, lo=-1.5, hi=1.5, n_pts=41):
    """Constant-vol table centred on the spot's log price."""
    h = horizon / n_steps
    times = np.arange(n_steps) * h
    points = X0 + np.linspace(lo, hi, n_pts)
    sigma2 = np.full((n_steps, n_pts), float(sigma) ** 2)
    return SigmaTable(times=times, points=points, sigma2=sigma2, step=h)


class TestValidation:
    def test_seed_is_mandatory(self):
        table = flat_table(0.2, 2, 0.5)
        with pytest.raises(ValueError, match="seed is required"):
            simulate_snapshots(table, X0, [2], 100, None)

    def test_path_count_positive(self):
        table = flat_table(0.2, 2, 0.5)
        with pytest.raises(ValueError, match="n_paths must be positive"):
            simulate_snapshots(table, X0, [2], 0, 7)

    @pytest.mark.parametrize("bad", [0, 3, -1])
    def test_snapshot_steps_in_range(self, bad):
        table = flat_table(0.2, 2, 0.5)
        with pytest.raises(ValueError, match="snapshot steps must lie"):
            simulate_snapshots(table, X0, [bad], 100, 7)

    def test_nonuniform_points_rejected(self):
        table = flat_table(0.2, 2, 0.5)
        pts = table.points.copy()
        pts[3] += 1e-3
        bad = SigmaTable(times=table.times, points=pts, sigma2=table.sigma2,
                         step=table.step)
        with pytest.raises(ValueError, match="uniformly spaced"):
            simulate_snapshots(bad, X0, [2], 100, 7)

    def test_off_grid_maturity_rejected(self):
        table = flat_table(0.2, 4, 1.0)  # h = 0.25
        iset = flat_vol_instruments((0.3,), {0: [("call", 100.0)]})
        with pytest.raises(ValueError, match="not on the simulation grid"):
            mc_price_instruments(iset, SPOT, table, 100, 7)


class TestDeterminism:
    def test_prefix_stability_across_block_boundary(self):
        """Path i is the same whether or not more paths follow it, even when
        the larger request spans an extra RNG block."""
        table = flat_table(0.25, 2, 0.5)
        small = simulate_snapshots(table, X0, [1, 2], 700, seed=11)
        large = simulate_snapshots(table, X0, [1, 2], BLOCK + 500, seed=11)
        np.testing.assert_array_equal(small, large[:, :700])

    def test_same_seed_identical_different_seed_not(self):
        table = flat_table(0.25, 3, 0.6)
        a = simulate_snapshots(table, X0, [3], 5000, seed=3)
        b = simulate_snapshots(table, X0, [3], 5000, seed=3)
        c = simulate_snapshots(table, X0, [3], 5000, seed=4)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_kernel_recurrence_bitwise(self):
        """For a sub-block request the output must equal the documented
        recurrence applied to the block's own seeded stream, bit for bit."""
        h = 0.3
        times = np.array([0.0, h])
        points = X0 + np.array([-0.2, 0.0, 0.2])
        sigma2 = np.array([[0.01, 0.04, 0.09],
                           [0.16, 0.04, 0.01]])
        table = SigmaTable(times=times, points=points, sigma2=sigma2, step=h)
        n, seed = 7, 123

        z = np.random.default_rng([seed, 0]).standard_normal((2, BLOCK))
        x = np.full(n, X0)
        expect = np.empty((2, n))
        for k in range(2):
            idx = np.clip(np.rint((x - points[0]) / 0.2).astype(np.intp), 0, 2)
            s2 = sigma2[k, idx]
            x = x + (-0.5 * s2) * h + np.sqrt(s2) * math.sqrt(h) * z[k, :n]
            expect[k] = x

        got = simulate_snapshots(table, X0, [1, 2], n, seed)
        np.testing.assert_array_equal(got, expect)


class TestLognormalLaw:
    """With a constant table the chain is exactly a lognormal walk, so the
    closed form is an independent oracle up to Monte Carlo error."""

    def test_terminal_moments_and_forward(self):
        sigma, horizon, n = 0.2, 1.0, 200_000
        table = flat_table(sigma, 5, horizon)
        x = simulate_snapshots(table, X0, [5], n, seed=42)[0]
        mean_se = sigma * math.sqrt(horizon / n)
        assert abs(x.mean() - (X0 - 0.5 * sigma**2 * horizon)) < 5 * mean_se
        var = x.var(ddof=1)
        var_se = sigma**2 * horizon * math.sqrt(2.0 / (n - 1))
        assert abs(var - sigma**2 * horizon) < 5 * var_se
        s = np.exp(x)
        fwd_se = s.std(ddof=1) / math.sqrt(n)
        assert abs(s.mean() - SPOT) < 5 * fwd_se

    def test_mc_prices_match_black_scholes(self):
        vol, t = 0.2, 0.5
        table = flat_table(vol, 4, t)
        iset = flat_vol_instruments(
            (t,), {0: [("call", 100.0), ("put", 90.0)]}, vol=vol)
        rows = mc_price_instruments(iset, SPOT, table, 200_000, seed=9)
        for inst, price, se in rows:
            target = bs_price(SPOT, inst.strike, vol * vol * t, inst.kind)
            assert se > 0.0
            assert abs(price - target) < 4 * se


class TestZeroVariance:
    def test_prices_are_intrinsic_exactly(self):
        table = flat_table(0.0, 3, 0.6)
        iset = InstrumentSet(times=[0.6])
        iset.instruments = [
            Instrument(0, "call", 90.0, 10.0, 1.0),
            Instrument(0, "put", 110.0, 10.0, 1.0),
            Instrument(0, "call", 120.0, 0.5, 1.0),
        ]
        rows = mc_price_instruments(iset, SPOT, table, 1000, seed=5)
        spot_sim = math.exp(X0)  # the engine's own rounding of exp(log S0)
        intrinsic = {("call", 90.0): spot_sim - 90.0,
                     ("put", 110.0): 110.0 - spot_sim,
                     ("call", 120.0): 0.0}
        for inst, price, se in rows:
            want = intrinsic[(inst.kind, inst.strike)]
            if want == 0.0:
                assert price == 0.0  # all payoffs identically zero
            else:
                # identical payoffs; only the mean's summation rounds
                assert price == pytest.approx(want, rel=1e-12)
            assert se <= 1e-12  # identical payoffs up to the mean's rounding

    def test_audit_reports_nan_vol_for_degenerate_price(self):
        table = flat_table(0.0, 3, 0.6)
        iset = flat_vol_instruments((0.6,), {0: [("call", 120.0)]}, vol=0.2)
        fits = mc_audit(iset, SPOT, table, 1000, seed=5)
        assert math.isnan(fits[0].mc_vol)
        assert fits[0].ref_vol == pytest.approx(0.2, rel=1e-9)


class TestAudit:
    def test_reference_price_alignment_checked(self):
        table = flat_table(0.2, 2, 0.5)
        iset = flat_vol_instruments((0.5,), {0: [("call", 100.0)]}, vol=0.2)
        with pytest.raises(ValueError, match="one reference price per"):
            mc_audit(iset, SPOT, table, 100, seed=1, reference_prices=[1., 2.])

    def test_reference_prices_set_the_comparison_vol(self):
        vol, t = 0.2, 0.5
        table = flat_table(vol, 2, t)
        iset = flat_vol_instruments((t,), {0: [("call", 100.0)]}, vol=vol)
        other = bs_price(SPOT, 100.0, 0.3 * 0.3 * t, "call")
        fits = mc_audit(iset, SPOT, table, 50_000, seed=2,
                        reference_prices=[other])
        assert fits[0].ref_vol == pytest.approx(0.3, rel=1e-9)
        fits_default = mc_audit(iset, SPOT, table, 50_000, seed=2)
        assert fits_default[0].ref_vol == pytest.approx(vol, rel=1e-9)


class TestCalibratedReprice:
    def test_extracted_table_reprices_like_the_model(self):
        """End-to-end link: calibrate a toy smile, read off the variance
        table, simulate it, and land near the model's implied vols. The
        Gaussian walk only matches the tilted chain to weak order one, so
        the comparison lives in vol points, like the audit contract."""
        t = 0.4
        ref = gaussian_ref(t, 5, calibration_times=(t,), sigma=0.2)
        iset = flat_vol_instruments(
            (t,), {0: [("call", 104.0), ("put", 96.0), ("call", 110.0)]},
            vol=0.24)
        from entrocal.sinkhorn import constraints_from_instruments
        cons = constraints_from_instruments(iset, ref, c_mart=1e4)
        res = run(ref, cons, SolverConfig(eps_stop=1e-8, max_sweeps=400))
        price_err, mart_err, model, props = diagnostics(res.potentials, ref,
                                                        cons)
        table = extract_sigma_table(res.potentials, props, ref, cons,
                                    sigma_floor=0.01, mass_cut=1e-5)
        k = ref.time_grid.calib_steps[0]
        fits = mc_audit(iset, SPOT, table, 400_000, seed=77,
                        reference_prices=[float(p) for p in model[k]])
        for f in fits:
            assert abs(f.mc_vol - f.ref_vol) < 0.01
