import math

import numpy as np
import pytest

import verdictfit.forward_model as fm
from verdictfit.protocol import default_protocol


# --- independent test-side oracles -----------------------------------------

def bisect_root(f, lo, hi, tol=1e-12):
    f_lo = f(lo)
    assert f_lo * f(hi) < 0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        f_mid = f(mid)
        if hi - lo < tol:
            return mid
        if (f_mid > 0) == (f_lo > 0):
            lo, f_lo = mid, f_mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def oracle_roots(count):
    """Plain bisection on the root condition over successive brackets."""
    f = lambda x: (x * x - 2.0) * math.sin(x) + 2.0 * x * math.cos(x)
    roots = [bisect_root(f, 0.1, 4.0)]
    for m in range(2, count + 1):
        roots.append(bisect_root(f, (m - 1) * math.pi + 1e-9, m * math.pi - 1e-9))
    return np.array(roots)


def erf_series(z, terms=60):
    """Maclaurin series of erf, independent of scipy."""
    total = 0.0
    for n in range(terms):
        total += (-1) ** n * z ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * total


def interior_params(n, seed):
    rng = np.random.default_rng(seed)
    lows = np.array([0.05, 0.05, 0.5, 0.6, 0.7])
    highs = np.array([0.6, 0.6, 14.0, 2.9, 1.3])
    p = lows + rng.random((n, 5)) * (highs - lows)
    p[:, 1] = np.clip(p[:, 1], 0.05, 0.93 - p[:, 0])
    return p


# --- roots ------------------------------------------------------------------

class TestGpdRoots:
    def test_first_root_value(self):
        table = fm.compute_gpd_roots(1)
        assert table.roots[0] == pytest.approx(2.0816, abs=1e-4)
        assert table.roots[0] == pytest.approx(oracle_roots(1)[0], abs=1e-9)

    def test_first_three_against_bisection_oracle(self):
        table = fm.compute_gpd_roots(3)
        assert np.all(np.diff(table.roots) > 0)
        np.testing.assert_allclose(table.roots, oracle_roots(3), atol=1e-9)
        assert np.abs(table.residuals()).max() <= 1e-12

    def test_twenty_roots_spacing_approaches_pi(self):
        table = fm.compute_gpd_roots(20)
        np.testing.assert_allclose(table.roots, oracle_roots(20), atol=1e-8)
        last_gap = table.roots[-1] - table.roots[-2]
        assert abs(last_gap - math.pi) / math.pi < 0.01

    def test_residuals_small_for_forty(self):
        table = fm.compute_gpd_roots(40)
        assert np.abs(table.residuals()).max() <= 1e-12

    def test_invalid_count(self):
        with pytest.raises(ValueError):
            fm.compute_gpd_roots(0)


# --- compartment signals ----------------------------------------------------

class TestSignalEes:
    def test_b0_identity(self):
        assert fm.signal_ees(0.0, 2.7) == 1.0

    def test_scalar_values(self):
        assert fm.signal_ees(2.0, 2.0) == pytest.approx(0.018316, abs=1e-6)
        assert fm.signal_ees(3.0, 0.5) == pytest.approx(0.223130, abs=1e-6)


class TestSignalVasc:
    def test_zero_limit(self):
        assert fm.signal_vasc(0.0, 8.0) == 1.0

    def test_bd_one_against_erf_series(self):
        got = fm.signal_vasc(1.0, 1.0)
        assert got == pytest.approx(0.74682, abs=1e-5)
        expected = 0.5 * math.sqrt(math.pi) * erf_series(1.0)
        assert got == pytest.approx(expected, abs=1e-10)

    def test_large_argument(self):
        # erf(sqrt(24)) is 1 to machine precision
        got = fm.signal_vasc(3.0, 8.0)
        assert got == pytest.approx(0.18087, abs=1e-4)
        assert got == pytest.approx(0.5 * math.sqrt(math.pi) / math.sqrt(24.0), abs=1e-12)

    def test_series_branch_continuous(self):
        below = fm.signal_vasc(0.999e-6, 1.0)
        above = fm.signal_vasc(1.001e-6, 1.0)
        assert abs(below - above) < 1e-9

    def test_range(self):
        b = np.linspace(0.0, 3.0, 50)
        s = fm.signal_vasc(b, 8.0)
        assert np.all((s > 0) & (s <= 1.0))


class TestSignalSphere:
    def setup_method(self):
        self.proto = default_protocol()
        self.b3000 = self.proto.settings[4]

    def test_b0_gives_one(self):
        b0 = self.proto.settings[5]
        assert fm.signal_sphere(b0, 8.0) == 1.0

    def test_tiny_sphere_no_dephasing(self):
        assert fm.signal_sphere(self.b3000, 0.01) >= 0.999

    def test_larger_sphere_attenuates_more(self):
        assert fm.signal_sphere(self.b3000, 12.0) < fm.signal_sphere(self.b3000, 6.0)

    def test_monotone_in_radius_on_probe_grid(self):
        vals = [fm.signal_sphere(self.b3000, r) for r in np.linspace(3.0, 14.0, 12)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_nonincreasing_in_gradient_at_fixed_geometry(self):
        # same delta/Delta, growing b (hence G): attenuation deepens
        from verdictfit.protocol import MeasurementSetting
        for radius in (4.0, 8.0, 13.0):
            vals = [
                fm.signal_sphere(
                    MeasurementSetting(b=b, delta=18.9, Delta=38.8, te=90.0,
                                       is_b0=b == 0), radius)
                for b in (0.0, 500.0, 1000.0, 2000.0, 3000.0)
            ]
            assert all(b <= a for a, b in zip(vals, vals[1:]))

    def test_series_truncation_stable(self):
        p = interior_params(50, seed=5)
        s20 = fm.signal_total(p, self.proto, roots=fm.compute_gpd_roots(20), validate=False)
        s40 = fm.signal_total(p, self.proto, roots=fm.compute_gpd_roots(40), validate=False)
        assert np.abs(s20 - s40).max() < 1e-8


class TestSignalTotal:
    def setup_method(self):
        self.proto = default_protocol()

    def test_b0_equals_s0_exactly(self):
        p = fm.TissueParams(f_ic=0.37, f_ees=0.21, radius=9.3, d_ees=1.7, s0=0.83)
        s = fm.signal_total(p, self.proto)
        assert np.all(s[self.proto.is_b0] == 0.83)

    def test_composition_from_compartments(self):
        # f_ic=0.01, f_ees=0.98 at the b=2.0 ms/um^2 setting
        setting = self.proto.settings[3]
        assert setting.b == 2000.0
        radius = 8.0
        expected = (
            0.01 * fm.signal_sphere(setting, radius)
            + 0.98 * fm.signal_ees(2.0, 2.0)
            + 0.01 * fm.signal_vasc(2.0, 8.0)
        )
        p = fm.TissueParams(f_ic=0.01, f_ees=0.98, radius=radius, d_ees=2.0, s0=1.0)
        got = fm.signal_total(p, self.proto)[3]
        assert got == pytest.approx(expected, abs=1e-12)

    def test_convex_combination_bounds(self):
        p = interior_params(100, seed=9)
        total = fm.signal_total(p, self.proto, validate=False)
        b = self.proto.b_internal
        for i in range(p.shape[0]):
            comp = np.stack([
                fm.signal_vasc(b, 8.0),
                np.array([fm.signal_sphere(s, p[i, 2]) for s in self.proto.settings]),
                fm.signal_ees(b, p[i, 3]),
            ])
            lo = p[i, 4] * comp.min(axis=0) - 1e-12
            hi = p[i, 4] * comp.max(axis=0) + 1e-12
            assert np.all((total[i] >= lo) & (total[i] <= hi))

    def test_nonincreasing_in_b_per_compartment(self):
        b = np.linspace(0.0, 3.0, 40)
        assert np.all(np.diff(fm.signal_ees(b, 1.5)) <= 0)
        assert np.all(np.diff(fm.signal_vasc(b, 8.0)) <= 0)

    def test_out_of_range_rejected(self):
        bad = np.array([1.2, 0.1, 5.0, 1.0, 1.0])
        with pytest.raises(ValueError):
            fm.signal_total(bad, self.proto)
        pair = np.array([0.6, 0.6, 5.0, 1.0, 1.0])
        with pytest.raises(ValueError):
            fm.signal_total(pair, self.proto)

    def test_single_and_batch_agree(self):
        p = interior_params(4, seed=2)
        batch = fm.signal_total(p, self.proto, validate=False)
        for i in range(4):
            row = fm.signal_total(p[i], self.proto, validate=False)
            np.testing.assert_array_equal(row, batch[i])


class TestJacobian:
    def setup_method(self):
        self.proto = default_protocol()

    def test_s0_column_is_unit_signal(self):
        p = interior_params(10, seed=3)
        jac = fm.signal_jacobian(p, self.proto)
        unit = p.copy()
        unit[:, 4] = 1.0
        np.testing.assert_allclose(
            jac[:, :, 4], fm.signal_total(unit, self.proto, validate=False),
            rtol=0, atol=1e-14)

    def test_b0_rows_structure(self):
        p = interior_params(5, seed=4)
        jac = fm.signal_jacobian(p, self.proto)
        b0 = self.proto.is_b0
        assert np.all(jac[:, b0, 2] == 0.0)  # radius
        assert np.all(jac[:, b0, 3] == 0.0)  # d_ees
        assert np.all(jac[:, b0, 4] == 1.0)  # s0

    def test_against_central_differences(self):
        # 100 seeded interior points, relative error <= 1e-4
        p = interior_params(100, seed=42)
        jac = fm.signal_jacobian(p, self.proto)
        worst = 0.0
        for k in range(5):
            h = 1e-5 * np.maximum(np.abs(p[:, k]), 1e-3)
            plus, minus = p.copy(), p.copy()
            plus[:, k] += h
            minus[:, k] -= h
            fd = (
                fm.signal_total(plus, self.proto, validate=False)
                - fm.signal_total(minus, self.proto, validate=False)
            ) / (2 * h[:, None])
            scale = np.maximum(np.abs(fd), 1e-8)
            worst = max(worst, (np.abs(jac[:, :, k] - fd) / scale).max())
        assert worst <= 1e-4

    def test_signal_and_jacobian_consistent(self):
        p = interior_params(20, seed=6)
        total, jac = fm.signal_and_jacobian(p, self.proto)
        np.testing.assert_array_equal(total, fm.signal_total(p, self.proto, validate=False))
        np.testing.assert_array_equal(jac, fm.signal_jacobian(p, self.proto))


class TestTissueParams:
    def test_f_vasc_derived(self):
        p = fm.TissueParams(f_ic=0.3, f_ees=0.45, radius=5.0, d_ees=1.0)
        assert p.f_vasc == pytest.approx(0.25)

    def test_array_round_trip(self):
        p = fm.TissueParams(f_ic=0.3, f_ees=0.45, radius=5.0, d_ees=1.0, s0=0.9)
        assert fm.TissueParams.from_array(p.to_array()) == p

    def test_validate(self):
        with pytest.raises(ValueError):
            fm.TissueParams(f_ic=0.6, f_ees=0.6, radius=5.0, d_ees=1.0).validate()
