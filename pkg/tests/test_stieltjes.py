import numpy as np
import pytest

from app.core.exceptions import DomainError, InputValidationError, SolverFailure
from app.models.schemas import CovarianceSpec, MeasureKind, SpectralMeasure
from app.services import spectra, stieltjes

IDENTITY = SpectralMeasure.point_mass(1.0)


@pytest.fixture(scope="module")
def ar_esd():
    return spectra.esd(CovarianceSpec.autoregressive(200, 0.9))


class TestSolveM:
    @pytest.mark.parametrize("z", np.geomspace(0.01, 10.0, 20))
    def test_matches_closed_form_on_grid(self, z):
        for c in np.geomspace(0.1, 10.0, 20):
            solved = stieltjes.solve_m(z, c, IDENTITY).value
            assert solved == pytest.approx(stieltjes.m_closed_iid(z, c), rel=1e-10, abs=1e-12)

    def test_identity_example(self):
        # c = 1, z = 1: g = 1/(g + 1) gives the golden-ratio conjugate
        assert stieltjes.solve_m(1.0, 1.0, IDENTITY).value == pytest.approx((np.sqrt(5) - 1) / 2, rel=1e-11)

    @pytest.mark.parametrize("z,c", [(0.1, 0.5), (1.0, 2.0), (0.05, 3.0), (10.0, 0.2)])
    def test_fixed_point_defect(self, ar_esd, z, c):
        res = stieltjes.solve_m(z, c, ar_esd)
        m = res.value
        k = 1.0 - c + c * z * m
        defect = abs(m - np.sum(ar_esd.weights / (ar_esd.lambdas * k + z)))
        assert defect <= 1e-10
        assert res.residual <= 1e-12 * max(1.0, m)
        assert k > 0

    def test_solver_paths(self):
        assert stieltjes.solve_m(1.0, 0.5, IDENTITY).method == "fixed_point"
        # k(g0) <= 0 from the start, so the bracket takes over
        assert stieltjes.solve_m(0.01, 3.0, IDENTITY).method == "brent"

    def test_decreasing_in_z(self, ar_esd):
        values = [stieltjes.solve_m(z, 2.0, ar_esd).value for z in (0.01, 0.1, 1.0, 10.0)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_extreme_complexity_small_ridge(self):
        res = stieltjes.solve_m(1e-3, 50.0, IDENTITY)
        assert res.value == pytest.approx(stieltjes.m_closed_iid(1e-3, 50.0), rel=1e-9)

    @pytest.mark.parametrize("z", [0.0, -1.0, float("nan"), float("inf")])
    def test_rejects_bad_ridge(self, z):
        with pytest.raises(DomainError):
            stieltjes.solve_m(z, 1.0, IDENTITY)

    @pytest.mark.parametrize("c", [1e-5, 1e4])
    def test_rejects_complexity_outside_band(self, c):
        with pytest.raises(DomainError):
            stieltjes.solve_m(1.0, c, IDENTITY)

    def test_rejects_signed_measure(self):
        signed = SpectralMeasure(lambdas=[1.0, 2.0], weights=[0.7, -0.2], kind=MeasureKind.SIGNED)
        with pytest.raises(InputValidationError):
            stieltjes.solve_m(1.0, 1.0, signed)

    def test_iteration_cap(self):
        with pytest.raises(SolverFailure) as info:
            stieltjes.solve_m(0.1, 0.5, IDENTITY, max_iter=1)
        assert info.value.iterations >= 1


class TestDerivatives:
    @pytest.mark.parametrize("z,c", [(0.1, 0.5), (1.0, 2.0), (0.5, 3.0)])
    def test_analytic_matches_finite_difference(self, ar_esd, z, c):
        analytic = stieltjes.m_prime(z, c, ar_esd)
        numeric = stieltjes.m_prime(z, c, ar_esd, method="finite_difference")
        assert analytic > 0
        assert analytic == pytest.approx(numeric, rel=1e-5)

    @pytest.mark.parametrize("z,c", [(0.1, 0.5), (0.01, 2.0), (3.0, 5.0)])
    def test_identity_forms(self, z, c):
        m = stieltjes.m_closed_iid(z, c)
        k = 1.0 - c + c * z * m
        closed = (1.0 + c * m) / ((k + z) ** 2 + c * z)
        assert stieltjes.m_prime(z, c, IDENTITY, m=m) == pytest.approx(closed, rel=1e-12)
        assert stieltjes.m1(z, c, IDENTITY, m) == pytest.approx(stieltjes.m1_closed_iid(z, c), rel=1e-12)

    def test_m1_example(self):
        # cphi = 0.5, z = 1: k = 0.5 + 0.5 m with m = m(-1; 0.5)
        m = stieltjes.m_closed_iid(1.0, 0.5)
        k = 0.5 + 0.5 * m
        assert stieltjes.m1_closed_iid(1.0, 0.5) == pytest.approx(k / ((k + 1.0) ** 2 + 0.5), rel=1e-14)

    def test_companion_positive(self, ar_esd):
        for z, c in [(0.1, 0.5), (1.0, 2.0), (0.01, 3.0)]:
            assert stieltjes.companion_r(z, c, ar_esd) > 0


class TestS0:
    @pytest.mark.parametrize("c", [1.5, 2.0, 3.0, 10.0, 50.0])
    def test_identity_closed_form(self, c):
        assert stieltjes.solve_s0(c, IDENTITY).value == pytest.approx(1.0 / (c * (c - 1.0)), rel=1e-10)
        assert stieltjes.s0_closed_iid(c) == pytest.approx(1.0 / (c * (c - 1.0)))

    def test_general_defect(self, ar_esd):
        c = 2.5
        s0 = stieltjes.solve_s0(c, ar_esd).value
        lhs = np.sum(ar_esd.weights / (1.0 + ar_esd.lambdas * c * s0))
        assert lhs == pytest.approx(1.0 - 1.0 / c, abs=1e-12)
        assert stieltjes.s0_prime(c, ar_esd, s0) > 0

    def test_identity_derivative_ratio(self):
        # for a point mass the ratio of the two integrals is the atom itself
        assert stieltjes.s0_prime(3.0, IDENTITY, stieltjes.s0_closed_iid(3.0)) == pytest.approx(1.0)

    @pytest.mark.parametrize("c", [0.5, 1.0, 1.0005])
    def test_domain(self, c):
        with pytest.raises(DomainError):
            stieltjes.solve_s0(c, IDENTITY)

    def test_unbracketable_null_mass(self):
        mostly_null = SpectralMeasure(lambdas=[0.0, 1.0], weights=[0.9, 0.1])
        with pytest.raises(SolverFailure):
            stieltjes.solve_s0(2.0, mostly_null)
