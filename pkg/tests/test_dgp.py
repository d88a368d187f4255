import numpy as np
import pytest

from app.core.exceptions import InputValidationError
from app.models.schemas import DriftGeometry, LatentDistribution, ModelSpec, SolverTag
from app.services import dgp
from app.utils.rng import Stream, stream_rng


def test_sample_shapes(iid_spec):
    draw = dgp.sample(iid_spec, 0)
    assert draw.X.shape == (100, 50)
    assert draw.W.shape == (100, 50)
    assert draw.y.shape == (100,)
    assert draw.x_next.shape == (50,)
    assert isinstance(draw.r_next, float)


def test_sample_is_keyed_by_draw(iid_spec):
    first, again, other = dgp.sample(iid_spec, 4), dgp.sample(iid_spec, 4), dgp.sample(iid_spec, 5)
    np.testing.assert_array_equal(first.X, again.X)
    assert first.r_next == again.r_next
    assert not np.allclose(first.X, other.X)


def test_labels_follow_training_loadings(ar_spec):
    draw = dgp.sample(ar_spec, 1)
    noise = draw.y - draw.X @ ar_spec.geometry.beta_is - draw.W @ ar_spec.geometry.theta_is
    expected = stream_rng(ar_spec.seed, 1, Stream.NOISE).standard_normal(ar_spec.n + 1)[: ar_spec.n]
    np.testing.assert_allclose(noise, expected, atol=1e-10)


def test_projected_unobserved_block_is_mixed_observed_latents():
    p, q = 6, 3
    mixing = np.arange(q * p, dtype=float).reshape(q, p) / 10.0
    geom = DriftGeometry(beta_is=np.ones(p), beta_oos=np.ones(p), theta_is=np.ones(q), theta_oos=np.ones(q))
    spec = ModelSpec(n=20, p=p, q=q, mixing=mixing, geometry=geom, seed=2)
    draw = dgp.sample(spec, 0)
    # identity sigma_x keeps X equal to its latents
    np.testing.assert_allclose(draw.W, draw.X @ mixing.T, atol=1e-12)


def test_discrete_latents_have_requested_moments():
    rng = np.random.default_rng(0)
    draws = dgp.draw_latents(rng, 400_000, LatentDistribution.DISCRETE, m4=4.0)
    assert set(np.unique(draws)) <= {-2.0, 0.0, 2.0}
    assert draws.mean() == pytest.approx(0.0, abs=0.01)
    assert (draws**2).mean() == pytest.approx(1.0, abs=0.01)
    assert (draws**4).mean() == pytest.approx(4.0, abs=0.05)


def test_rademacher_edge_case():
    draws = dgp.draw_latents(np.random.default_rng(1), 1000, LatentDistribution.DISCRETE, m4=1.0)
    assert set(np.unique(draws)) == {-1.0, 1.0}


class TestEstimators:
    @pytest.fixture
    def design(self):
        rng = np.random.default_rng(3)
        return rng.standard_normal((30, 12)), rng.standard_normal(30)

    def test_primal_matches_normal_equations(self, design):
        X, y = design
        fit = dgp.fit_ridge(X, y, 0.2)
        assert fit.solver == SolverTag.PRIMAL
        direct = np.linalg.solve(X.T @ X + 30 * 0.2 * np.eye(12), X.T @ y)
        np.testing.assert_allclose(fit.beta_hat, direct, rtol=1e-10)

    def test_dual_matches_primal(self, design):
        X, y = design
        wide = X.T[:, :20]  # 12 x 20, p > n
        labels = y[:12]
        fit = dgp.fit_ridge(wide, labels, 0.5)
        assert fit.solver == SolverTag.DUAL
        direct = np.linalg.solve(wide.T @ wide + 12 * 0.5 * np.eye(20), wide.T @ labels)
        np.testing.assert_allclose(fit.beta_hat, direct, rtol=1e-9, atol=1e-12)

    def test_path_agrees_with_single_fits(self, design):
        X, y = design
        zs = [0.0, 0.01, 1.0]
        path = dgp.fit_path(X, y, zs)
        np.testing.assert_allclose(path[0], dgp.fit_ridgeless(X, y).beta_hat, rtol=1e-8, atol=1e-12)
        for row, z in zip(path[1:], zs[1:]):
            np.testing.assert_allclose(row, dgp.fit_ridge(X, y, z).beta_hat, rtol=1e-8, atol=1e-12)

    def test_ridgeless_interpolates_when_wide(self):
        rng = np.random.default_rng(4)
        X, y = rng.standard_normal((10, 25)), rng.standard_normal(10)
        beta = dgp.fit_ridgeless(X, y).beta_hat
        np.testing.assert_allclose(X @ beta, y, atol=1e-10)
        np.testing.assert_allclose(beta, np.linalg.pinv(X) @ y, atol=1e-10)

    def test_small_ridge_approaches_ridgeless(self, design):
        X, y = design
        np.testing.assert_allclose(
            dgp.fit_ridge(X, y, 1e-10).beta_hat, dgp.fit_ridgeless(X, y).beta_hat, rtol=1e-6
        )

    def test_rejects_bad_inputs(self, design):
        X, y = design
        with pytest.raises(InputValidationError):
            dgp.fit_ridge(X, y, 0.0)
        with pytest.raises(InputValidationError):
            dgp.fit_ridge(X, y[:-1], 0.1)
        bad = X.copy()
        bad[0, 0] = np.nan
        with pytest.raises(InputValidationError):
            dgp.fit_ridgeless(bad, y)


def test_strategy_return():
    assert dgp.strategy_return(np.array([1.0, 2.0]), np.array([0.5, -1.0]), 2.0) == pytest.approx(-3.0)


def test_latent_sample_structure():
    draw = dgp.sample_latent(40, 10, 2, np.ones(2), np.zeros(2), seed=1)
    assert draw.X.shape == (40, 10) and draw.W.shape == (40, 2)
    residual = draw.X[:, 2:]
    np.testing.assert_allclose(
        residual, stream_rng(1, 0, Stream.OBSERVED).standard_normal((41, 10))[:40, 2:], atol=1e-12
    )
    with pytest.raises(InputValidationError):
        dgp.sample_latent(40, 10, 10, np.ones(10), np.ones(10))
