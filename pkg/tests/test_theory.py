import numpy as np
import pytest

from app.core.exceptions import DomainError, InputValidationError
from app.models.schemas import CovarianceSpec, DriftGeometry, ModelSpec, Regime, SpectralMeasure
from app.services import spectra, stieltjes, theory


def _geometry(p: int = 30, q: int = 20, k: float = 0.7, seed: int = 0) -> DriftGeometry:
    rng = np.random.default_rng(seed)
    beta = rng.standard_normal(p) / np.sqrt(p)
    theta = rng.standard_normal(q) / np.sqrt(q)
    return DriftGeometry(beta_is=beta, beta_oos=k * beta + 0.1 * rng.standard_normal(p) / np.sqrt(p),
                         theta_is=theta, theta_oos=k * theta)


class TestShrinkage:
    def test_ridgeless_values(self):
        assert theory.f_iid(0.0, 50.0) == pytest.approx(0.02)
        assert theory.f_iid(0.0, 0.5) == 1.0

    def test_range_and_monotonicity(self):
        for cphi in (0.1, 0.5, 2.0, 10.0):
            values = [theory.f_iid(z, cphi) for z in np.geomspace(1e-3, 1e3, 30)]
            assert all(0.0 <= v < 1.0 for v in values)
            assert all(a > b for a, b in zip(values, values[1:]))

    def test_threshold_is_a_domain_error(self):
        with pytest.raises(DomainError):
            theory.f_iid(0.0, 1.0)
        with pytest.raises(DomainError):
            theory.f_iid(-0.1, 0.5)

    def test_h_kernel_recovers_f_at_unit_atom(self):
        mu = SpectralMeasure.point_mass(1.0)
        for z, cphi in [(0.01, 3.0), (1.0, 0.5), (0.0, 2.0), (0.0, 0.5)]:
            assert theory.h_kernel(np.array([1.0]), z, cphi, mu)[0] == pytest.approx(theory.f_iid(z, cphi), rel=1e-10)


class TestIsotropicMoments:
    def test_mean_linear_in_drift(self):
        beta = np.full(40, np.sqrt(1 / 40))
        f = theory.f_iid(0.1, 0.5)
        for k in (0.2, 0.6, 1.0, -0.4):
            geom = DriftGeometry(beta_is=beta, beta_oos=k * beta)
            assert theory.expected_return_iid(0.1, 0.5, geom) == pytest.approx(f * k, rel=1e-12)

    def test_orthogonal_drift_has_zero_mean_and_sharpe(self):
        geom = DriftGeometry(beta_is=[1.0, 0.0], beta_oos=[0.0, 1.0])
        assert theory.expected_return_iid(0.1, 2.0, geom) == 0.0
        assert theory.sharpe_iid(0.1, 2.0, geom) == 0.0

    def test_mean_monotone_in_ridge(self):
        beta = np.full(10, 0.3)
        up = DriftGeometry(beta_is=beta, beta_oos=0.5 * beta)
        down = DriftGeometry(beta_is=beta, beta_oos=-0.5 * beta)
        zs = np.geomspace(1e-3, 1e2, 25)
        ups = [theory.expected_return_iid(z, 2.0, up) for z in zs]
        downs = [theory.expected_return_iid(z, 2.0, down) for z in zs]
        assert all(a > b for a, b in zip(ups, ups[1:]))
        assert all(a < b for a, b in zip(downs, downs[1:]))

    def test_drift_penalty_identity(self):
        rng = np.random.default_rng(11)
        for _ in range(10_000):
            beta_is = rng.standard_normal(8)
            beta_oos = rng.standard_normal(8)
            beta_oos *= np.linalg.norm(beta_is) / np.linalg.norm(beta_oos)
            geom = DriftGeometry(beta_is=beta_is, beta_oos=beta_oos)
            z, cphi = rng.uniform(0.01, 5.0), rng.uniform(0.1, 5.0)
            f = theory.f_iid(z, cphi)
            expected = theory.expected_return_no_drift(z, cphi, geom) - 0.5 * f * geom.drift_sq
            assert theory.expected_return_iid(z, cphi, geom) == pytest.approx(expected, rel=1e-10, abs=1e-12)

    def test_gaussian_latents_have_no_kurtosis_contribution(self):
        geom = _geometry()
        gaussian = theory.strategy_moments_iid(0.1, 0.5, geom, m4=3.0)
        heavy = theory.strategy_moments_iid(0.1, 0.5, geom, m4=6.0)
        assert heavy.variance - gaussian.variance == pytest.approx(3.0 * gaussian.kurtosis_term, rel=1e-12)

    def test_pure_noise_strategy(self):
        geom = DriftGeometry(beta_is=np.zeros(5), beta_oos=np.zeros(5))
        variance, leverage = theory.variance_iid(0.1, 0.5, geom)
        assert variance == pytest.approx(leverage)
        assert theory.expected_return_iid(0.1, 0.5, geom) == 0.0

    def test_sharpe_is_mean_over_vol(self):
        geom = _geometry(seed=4)
        for z, cphi in [(0.01, 3.0), (0.1, 0.5), (0.0, 2.0), (0.0, 0.3)]:
            variance, _ = theory.variance_iid(z, cphi, geom)
            expected = theory.expected_return_iid(z, cphi, geom) / np.sqrt(variance)
            assert theory.sharpe_iid(z, cphi, geom) == pytest.approx(expected, rel=1e-12)

    def test_sharpe_is_odd_in_trading_loadings(self):
        geom = _geometry(seed=2)
        flipped = DriftGeometry(beta_is=geom.beta_is, beta_oos=-geom.beta_oos,
                                theta_is=geom.theta_is, theta_oos=-geom.theta_oos)
        assert theory.sharpe_iid(0.1, 2.0, flipped) == pytest.approx(-theory.sharpe_iid(0.1, 2.0, geom), rel=1e-12)

    def test_second_moment_path_agrees(self):
        moments = theory.strategy_moments_iid(0.1, 2.0, _geometry(seed=9), m4=4.0)
        assert moments.second_moment - moments.mean**2 == pytest.approx(moments.variance, rel=1e-10)
        assert moments.regime == Regime.RIDGE

    def test_ridgeless_leverage_closed_forms(self):
        beta = np.full(4, 0.5)
        geom = DriftGeometry(beta_is=beta, beta_oos=beta)
        assert theory.leverage_iid(0.0, 0.5, geom) == pytest.approx(1.0 + 0.5 / 0.5)
        assert theory.leverage_iid(0.0, 2.0, geom) == pytest.approx(0.5 + 1.0)

    def test_m4_below_one_rejected(self):
        with pytest.raises(InputValidationError):
            theory.strategy_moments_iid(0.1, 0.5, _geometry(), m4=0.5)


class TestGeneralCovariance:
    @pytest.mark.parametrize("z,p", [(0.01, 30), (0.1, 150), (10.0, 30), (0.0, 30), (0.0, 150)])
    def test_identity_reduces_to_isotropic(self, z, p):
        n, q = 100, 20
        geom = _geometry(p=p, q=q, seed=p)
        spec = ModelSpec(n=n, p=p, q=q, z=z, sigma_x=CovarianceSpec.explicit(np.eye(p)), geometry=geom)
        cphi = p / n
        general = theory.strategy_moments_general(z, None, spec, m4=5.0)
        iid = theory.strategy_moments_iid(z, cphi, geom, m4=5.0)
        assert general.mean == pytest.approx(iid.mean, rel=1e-9, abs=1e-12)
        assert general.leverage == pytest.approx(iid.leverage, rel=1e-9)
        assert general.kurtosis_term == pytest.approx(iid.kurtosis_term, rel=1e-9, abs=1e-14)
        assert general.variance == pytest.approx(iid.variance, rel=1e-9)

    def test_zero_projection_behaves_well_specified(self):
        p, q = 20, 10
        geom = _geometry(p=p, q=q, seed=1)
        spec = ModelSpec(n=50, p=p, q=q, geometry=geom, mixing=np.zeros((q, p)))
        assert theory.expected_return_general(0.1, None, spec) == pytest.approx(
            theory.f_iid(0.1, p / 50) * geom.inner, rel=1e-10
        )
        assert theory.misspecification_terms(0.1, None, spec) == (0.0, 0.0, 0.0)

    def test_misspecification_decomposition(self, ar_spec):
        total = theory.expected_return_general(0.1, None, ar_spec)
        well = theory.expected_return_wellspecified(0.1, None, ar_spec)
        j1, j2, j3 = theory.misspecification_terms(0.1, None, ar_spec)
        assert total == pytest.approx(well + j1 + j2 + j3, rel=1e-9)

    def test_unobserved_trading_loadings_vanish_from_j2_j3(self, ar_spec):
        geom = ar_spec.geometry
        stale = DriftGeometry(beta_is=geom.beta_is, beta_oos=geom.beta_oos, theta_is=geom.theta_is,
                              theta_oos=np.zeros(ar_spec.q))
        _, j2, j3 = theory.misspecification_terms(0.1, None, ar_spec.with_geometry(stale))
        assert j2 == 0.0 and j3 == 0.0

    def test_wellspecified_ridgeless_matches_kernel_integral(self):
        p = 40
        sigma = CovarianceSpec.autoregressive(p, 0.5)
        beta = np.linspace(0.1, 0.3, p)
        spec = ModelSpec(n=20, p=p, sigma_x=sigma, geometry=DriftGeometry(beta_is=beta, beta_oos=beta))
        root = spectra.covariance_sqrt(sigma)
        omega = root @ beta
        eig = spectra.eigensystem(sigma)
        s0 = stieltjes.solve_s0(2.0, spectra.esd(sigma)).value
        h = eig.values * 2.0 * s0 / (1.0 + eig.values * 2.0 * s0)
        direct = float(np.sum(h * (eig.vectors.T @ omega) ** 2))
        assert theory.expected_return_general(0.0, None, spec) == pytest.approx(direct, rel=1e-9)

    def test_variance_dual_path_and_kurtosis(self, ar_spec):
        gaussian = theory.strategy_moments_general(0.1, None, ar_spec)
        assert gaussian.second_moment - gaussian.mean**2 == pytest.approx(gaussian.variance, rel=1e-10)
        variance, leverage, kurt = theory.variance_general(0.1, None, ar_spec, m4=3.0)
        assert variance == pytest.approx(gaussian.variance)
        assert leverage > 0 and kurt > 0

    @pytest.mark.parametrize("cphi_n", [(0.5, 100), (2.0, 20)])
    def test_ridge_to_ridgeless_continuity(self, cphi_n):
        cphi, n = cphi_n
        p = int(cphi * n)
        sigma = CovarianceSpec.autoregressive(p, 0.9)
        beta = np.full(p, np.sqrt(1.0 / p))
        spec = ModelSpec(n=n, p=p, sigma_x=sigma, geometry=DriftGeometry(beta_is=beta, beta_oos=0.8 * beta))
        e0 = theory.expected_return_general(0.0, None, spec)
        assert theory.expected_return_general(1e-8, None, spec) == pytest.approx(e0, abs=1e-4)
        v0, l0, _ = theory.variance_general(0.0, None, spec)
        v1, l1, _ = theory.variance_general(1e-5, None, spec)
        assert v1 == pytest.approx(v0, rel=1e-2)
        assert l1 == pytest.approx(l0, rel=1e-2)

    @pytest.mark.parametrize("cphi", [0.5, 2.0])
    def test_isotropic_continuity(self, cphi):
        geom = _geometry(seed=3)
        assert theory.expected_return_iid(1e-8, cphi, geom) == pytest.approx(
            theory.expected_return_iid(0.0, cphi, geom), abs=1e-4
        )
        assert theory.variance_iid(1e-4, cphi, geom)[0] == pytest.approx(theory.variance_iid(0.0, cphi, geom)[0], rel=1e-2)

    def test_direct_quadratic_forms_above_cap(self, ar_spec, monkeypatch):
        from app.core.config import get_settings

        reference = theory.strategy_moments_general(0.1, None, ar_spec, m4=5.0)
        monkeypatch.setattr(get_settings(), "VARPI_MAX_DIM", 1)
        direct = theory.strategy_moments_general(0.1, None, ar_spec, m4=5.0)
        assert direct.kurtosis_term == pytest.approx(reference.kurtosis_term, rel=1e-9)

    def test_sharpe_general_sign(self, ar_spec):
        assert theory.sharpe_general(0.1, None, ar_spec) > 0
        geom = ar_spec.geometry
        flipped = DriftGeometry(beta_is=geom.beta_is, beta_oos=-geom.beta_oos,
                                theta_is=geom.theta_is, theta_oos=-geom.theta_oos)
        assert theory.sharpe_general(0.1, None, ar_spec.with_geometry(flipped)) < 0


class TestDriftDiagnostics:
    def test_linear_drift_examples(self):
        rng = np.random.default_rng(5)
        beta = rng.standard_normal(6)
        f = theory.f_iid(0.1, 0.5)
        assert theory.linear_drift_return(0.1, 0.5, beta, np.eye(6)) == pytest.approx(f * beta @ beta)
        assert theory.linear_drift_return(0.1, 0.5, beta, -np.eye(6)) == pytest.approx(-f * beta @ beta)
        a = rng.standard_normal((6, 6))
        assert theory.linear_drift_return(0.1, 0.5, beta, a @ a.T) >= 0
        # non-symmetric maps use the direct form only
        assert theory.linear_drift_return(0.1, 0.5, beta, a) == pytest.approx(f * beta @ a @ beta)

    def test_drift_hurts_examples(self):
        beta = np.array([1.0, -2.0, 0.5])
        assert theory.drift_hurts(DriftGeometry(beta_is=beta, beta_oos=0.5 * beta))
        assert not theory.drift_hurts(DriftGeometry(beta_is=beta, beta_oos=beta))
        assert not theory.drift_hurts(DriftGeometry(beta_is=beta, beta_oos=2.0 * beta))

    def test_drift_criteria_agree_on_random_geometries(self):
        rng = np.random.default_rng(0)
        draws = rng.standard_normal((10_000, 2, 5))
        for beta_is, beta_oos in draws:
            geom = DriftGeometry(beta_is=beta_is, beta_oos=beta_oos)
            by_norms = geom.norm_oos_sq - geom.norm_is_sq < geom.drift_sq
            assert theory.drift_hurts(geom) == by_norms

    def test_polarization(self):
        rng = np.random.default_rng(8)
        sigma = CovarianceSpec.autoregressive(12, 0.6)
        u, v = rng.standard_normal(12), rng.standard_normal(12)
        a = spectra.covariance_matrix(sigma)

        def form(x, y):
            return np.linalg.norm(x) * np.linalg.norm(y) * spectra.integrate(lambda lam: lam, spectra.vesd(sigma, x, y))

        assert form(u - v, u - v) == pytest.approx(form(u, u) + form(v, v) - 2 * form(u, v), rel=1e-10)
        assert form(u, v) == pytest.approx(u @ a @ v, rel=1e-10)


class TestPredictionRisk:
    def test_examples(self):
        beta = np.full(4, 0.5)
        same = DriftGeometry(beta_is=beta, beta_oos=beta)
        assert theory.prediction_risk(0.5, same) == pytest.approx(1.0)
        assert theory.prediction_risk(2.0, same) == pytest.approx(1.5)
        assert theory.prediction_risk(0.5, DriftGeometry(beta_is=beta, beta_oos=-beta)) == pytest.approx(5.0)

    def test_diverges_at_threshold(self):
        beta = np.full(4, 0.5)
        geom = DriftGeometry(beta_is=beta, beta_oos=beta)
        for bound in (1e2, 1e4, 1e6):
            delta = 1.0 / (2 * bound)
            assert theory.prediction_risk(1.0 - delta, geom) > bound
            assert theory.prediction_risk(1.0 + delta, geom) > bound
        with pytest.raises(DomainError):
            theory.prediction_risk(1.0, geom)


class TestLatentModel:
    def test_ridgeless_underparameterized(self):
        assert theory.latent_g(0.0, 0.5, 0.25) == pytest.approx(1.0 / 1.25)

    def test_vanishes_under_heavy_shrinkage(self):
        values = [theory.latent_g(z, 2.0, 0.5) for z in (1.0, 1e2, 1e4, 1e6)]
        assert all(a > b for a, b in zip(values, values[1:]))
        assert values[-1] < 1e-4

    def test_ridge_continuity(self):
        assert theory.latent_g(1e-8, 2.0, 0.5) == pytest.approx(theory.latent_g(0.0, 2.0, 0.5), abs=1e-4)

    @pytest.mark.parametrize("upsilon", [0.0, 1.0, 1.5])
    def test_upsilon_domain(self, upsilon):
        with pytest.raises(DomainError):
            theory.latent_g(0.1, 2.0, upsilon)


def test_sharpe_curve_shape():
    frame = theory.sharpe_curve([0.2, 2.0, 5.0], 1e-5, 3.0, [0.5, 1.5, 2.5, 3.0], n=200)
    assert set(frame["signal"]) == {0.2, 2.0, 5.0}
    assert len(frame) == 12
    assert frame["sharpe"].notna().all()
    # stronger signal, higher Sharpe at every complexity
    pivot = frame.pivot(index="cphi", columns="signal", values="sharpe")
    assert (pivot[5.0] > pivot[0.2]).all()
    with pytest.raises(InputValidationError):
        theory.sharpe_curve([], 0.1, 3.0, [1.0])
