import numpy as np
import pytest
from scipy.stats import multivariate_normal

from crysgen.core import Lattice, cell_volume, lattice_invariants
from crysgen.gmm import (
    COV_FLOOR,
    ConditioningError,
    GaussianMixture,
    LatticeModel,
    SamplingError,
    canonicalize_lattice,
    condition,
    fit_em,
    fit_lattice_model,
    lattice_to_vector,
    sample_lattice,
)
from tests.conftest import toy_records


def test_em_monotone_log_likelihood():
    rng = np.random.default_rng(0)
    for trial in range(20):
        data = np.vstack(
            [
                rng.normal(loc=rng.uniform(-3, 3, 3), scale=rng.uniform(0.3, 1.5), size=(40, 3))
                for _ in range(2)
            ]
        )
        mix = fit_em(data, k=3, max_iters=60, seed=trial)
        trace = np.array(mix.log_likelihood_trace)
        assert np.all(np.diff(trace) >= -1e-8), f"trial {trial}: trace not monotone"


def test_em_k1_matches_closed_form_mle():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(200, 4)) @ rng.normal(size=(4, 4)) + rng.normal(size=4)
    mix = fit_em(data, k=1, max_iters=50, seed=0)
    # K=1 MLE: sample mean and biased covariance (plus the diagonal floor)
    np.testing.assert_allclose(mix.means[0], data.mean(axis=0), atol=1e-8)
    expected_cov = np.cov(data, rowvar=False, bias=True) + COV_FLOOR * np.eye(4)
    np.testing.assert_allclose(mix.covariances[0], expected_cov, atol=1e-8)
    np.testing.assert_allclose(mix.weights, [1.0])


def test_em_two_cluster_recovery():
    rng = np.random.default_rng(2)
    true_means = np.array([[-3.0, 0.0], [3.0, 1.0]])
    data = np.vstack(
        [rng.normal(m, 0.3, size=(150, 2)) for m in true_means]
    )
    mix = fit_em(data, k=2, max_iters=200, seed=0)
    got = mix.means[np.argsort(mix.means[:, 0])]
    np.testing.assert_allclose(got, true_means, atol=0.1)
    np.testing.assert_allclose(mix.weights, [0.5, 0.5], atol=0.05)


def test_em_requires_enough_samples():
    with pytest.raises(ValueError):
        fit_em(np.zeros((2, 3)), k=5)


def test_log_pdf_matches_scipy():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 3))
    mix = GaussianMixture(
        np.array([0.4, 0.6]),
        rng.normal(size=(2, 3)),
        np.stack([a @ a.T + np.eye(3), 2.0 * np.eye(3)]),
    )
    x = rng.normal(size=(5, 3))
    expected = np.log(
        0.4 * multivariate_normal.pdf(x, mix.means[0], mix.covariances[0])
        + 0.6 * multivariate_normal.pdf(x, mix.means[1], mix.covariances[1])
    )
    np.testing.assert_allclose(mix.log_pdf(x), expected, atol=1e-10)


# ------------------------------------------------------------- conditioning


def test_conditioning_matches_grid_integration_oracle():
    # K=1 full-covariance 2-D Gaussian; condition on x0 = 0.7 and compare the
    # conditional mean/variance of x1 against dense numerical integration
    cov = np.array([[1.0, 0.6], [0.6, 0.8]])
    mean = np.array([0.2, -0.3])
    mix = GaussianMixture(np.array([1.0]), mean[None], cov[None])
    cond = condition(mix, [0], [0.7])

    grid = np.linspace(-8, 8, 4001)
    pts = np.stack([np.full_like(grid, 0.7), grid], axis=1)
    density = multivariate_normal.pdf(pts, mean, cov)
    density /= np.trapezoid(density, grid)
    mu_num = np.trapezoid(grid * density, grid)
    var_num = np.trapezoid((grid - mu_num) ** 2 * density, grid)

    assert cond.means[0, 0] == pytest.approx(mu_num, abs=1e-2)
    assert cond.covariances[0, 0, 0] == pytest.approx(var_num, abs=1e-2)


def test_conditioning_closed_form_k1():
    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    mean = np.array([1.0, -1.0])
    mix = GaussianMixture(np.array([1.0]), mean[None], cov[None])
    y = 2.0
    cond = condition(mix, [0], [y])
    assert cond.means[0, 0] == pytest.approx(mean[1] + 0.5 / 2.0 * (y - mean[0]), abs=1e-12)
    assert cond.covariances[0, 0, 0] == pytest.approx(1.0 - 0.25 / 2.0 + COV_FLOOR, abs=1e-12)


def test_conditioning_reweights_by_likelihood_ratio():
    rng = np.random.default_rng(4)
    k = 3
    means = rng.normal(size=(k, 3))
    covs = np.stack([np.eye(3) * s for s in (0.5, 1.0, 2.0)])
    w = np.array([0.2, 0.3, 0.5])
    mix = GaussianMixture(w, means, covs)
    y = np.array([0.4, -0.2])
    cond = condition(mix, [0, 2], y)
    lik = np.array(
        [
            multivariate_normal.pdf(y, means[j][[0, 2]], covs[j][np.ix_([0, 2], [0, 2])])
            for j in range(k)
        ]
    )
    expected = w * lik / np.sum(w * lik)
    np.testing.assert_allclose(cond.weights, expected, atol=1e-9)


def test_conditioning_validation():
    mix = GaussianMixture(np.array([1.0]), np.zeros((1, 3)), np.eye(3)[None])
    with pytest.raises(ConditioningError):
        condition(mix, [0, 0], [1.0, 2.0])
    with pytest.raises(ConditioningError):
        condition(mix, [5], [1.0])
    with pytest.raises(ConditioningError):
        condition(mix, [0], [np.nan])
    with pytest.raises(ConditioningError):
        condition(mix, [0, 1], [1.0])


# ------------------------------------------------------------- lattice front


def test_canonicalize_lattice():
    rng = np.random.default_rng(5)
    rows = rng.normal(size=(3, 3)) + 4 * np.eye(3)
    lat = Lattice(rows)
    canon = canonicalize_lattice(lat)
    assert canon.rows[0, 1] == 0.0 and canon.rows[0, 2] == 0.0 and canon.rows[1, 2] == 0.0
    np.testing.assert_allclose(
        lattice_invariants(canon), lattice_invariants(lat), atol=1e-9
    )


def test_lattice_to_vector_rotation_invariant():
    rng = np.random.default_rng(6)
    rows = rng.normal(size=(3, 3)) + 4 * np.eye(3)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    v1 = lattice_to_vector(Lattice(rows))
    v2 = lattice_to_vector(Lattice(rows @ q.T))
    np.testing.assert_allclose(v1, v2, atol=1e-8)


def test_sample_lattice_volume_rejection():
    rng = np.random.default_rng(7)
    base = np.diag([4.0, 5.0, 6.0]).reshape(9)
    mix = GaussianMixture(np.array([1.0]), base[None], (4.0 * np.eye(9))[None])
    for _ in range(200):
        lat = sample_lattice(mix, rng)
        assert cell_volume(lat) >= 10.0


def test_sample_lattice_exhausts_attempts():
    # mixture concentrated on a degenerate cell: every draw is rejected
    mix = GaussianMixture(np.array([1.0]), np.zeros((1, 9)), (1e-12 * np.eye(9))[None])
    with pytest.raises(SamplingError):
        sample_lattice(mix, np.random.default_rng(0), max_attempts=50)


def test_sample_lattice_requires_dim_9():
    mix = GaussianMixture(np.array([1.0]), np.zeros((1, 3)), np.eye(3)[None])
    with pytest.raises(ValueError):
        sample_lattice(mix, np.random.default_rng(0))


# ------------------------------------------------------------- LatticeModel


def test_fit_lattice_model_and_roundtrip(tmp_path):
    records = toy_records(8, seed=9)
    model = fit_lattice_model(records, k=2, seed=0)
    path = tmp_path / "lattice.json"
    model.save(path)
    loaded = LatticeModel.load(path)
    np.testing.assert_allclose(loaded.mixture.means, model.mixture.means)
    np.testing.assert_allclose(loaded.mixture.weights, model.mixture.weights)
    lat = loaded.sample(np.random.default_rng(0))
    assert cell_volume(lat) >= 10.0


def test_lattice_model_conditioning_schema(tmp_path):
    records = toy_records(8, seed=10)
    model = fit_lattice_model(records, k=2, seed=0, condition_props=["band_gap"])
    assert model.mixture.dim == 10
    lat = model.sample(np.random.default_rng(1), conditions={"band_gap": 1.5})
    assert cell_volume(lat) >= 10.0
    with pytest.raises(ConditioningError):
        model.conditioned({})  # missing value
    plain = fit_lattice_model(records, k=2, seed=0)
    with pytest.raises(ConditioningError):
        plain.conditioned({"band_gap": 1.0})


def test_fit_lattice_model_missing_property():
    records = toy_records(4, seed=11)
    object.__setattr__(records[0], "properties", {})
    with pytest.raises(ConditioningError):
        fit_lattice_model(records, k=1, condition_props=["band_gap"])
