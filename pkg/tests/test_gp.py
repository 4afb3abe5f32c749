import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mabo_dmpc import gp
from mabo_dmpc.errors import InputError, NumericalError


def test_kernel_at_zero_distance_is_signal_variance():
    assert gp.se_kernel([0.3, -1.0], [0.3, -1.0], gp.KernelHyper(2.0, 0.7)) == 2.0


def test_kernel_unit_distance_value():
    assert gp.se_kernel([0.0], [1.0], gp.KernelHyper(1.0, 1.0)) == pytest.approx(np.exp(-0.5), abs=1e-15)
    assert gp.se_kernel([0.0], [1.0], gp.KernelHyper(1.0, 1.0)) == pytest.approx(0.60653, abs=1e-5)


def test_kernel_decays_to_zero():
    h = gp.KernelHyper(1.0, 0.5)
    vals = [gp.se_kernel([0.0], [r], h) for r in (0.1, 1.0, 5.0, 50.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] == 0.0


def test_kernel_dimension_mismatch():
    with pytest.raises(InputError):
        gp.se_kernel([0.0, 1.0], [0.0], gp.KernelHyper())


@given(
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.lists(st.floats(-5, 5), min_size=3, max_size=3),
    st.floats(0.1, 10), st.floats(0.05, 5),
)
def test_kernel_symmetric_and_bounded(a, b, s2, ell):
    h = gp.KernelHyper(s2, ell)
    k = gp.se_kernel(a, b, h)
    assert k == gp.se_kernel(b, a, h)
    assert 0.0 <= k <= s2


def test_hyper_validation():
    with pytest.raises(InputError):
        gp.KernelHyper(0.0, 1.0)
    with pytest.raises(InputError):
        gp.KernelHyper(1.0, -1.0)
    with pytest.raises(InputError):
        gp.KernelHyper(1.0, 1.0, -1e-3)


def test_single_point_interpolation():
    m = gp.fit(gp.Dataset([[0.0]], [3.0]), gp.KernelHyper())
    mean, var = gp.posterior(m, [0.0])
    assert mean == pytest.approx(3.0, abs=1e-12)
    assert var == pytest.approx(0.0, abs=1e-12)


def test_empty_dataset_rejected():
    with pytest.raises(InputError):
        gp.fit(gp.Dataset(np.zeros((0, 1)), []), gp.KernelHyper())


def test_mismatched_dataset_rejected():
    with pytest.raises(InputError):
        gp.Dataset([[0.0], [1.0]], [1.0])


def test_training_means_match_dense_solve():
    rng = np.random.default_rng(3)
    X = rng.uniform(-1, 1, size=(3, 2))
    y = rng.normal(size=3)
    h = gp.KernelHyper(1.3, 0.8, 1e-3)
    m = gp.fit(gp.Dataset(X, y), h)
    K = np.array([[h.signal_variance * np.exp(-np.sum((a - b) ** 2) / (2 * h.length_scale ** 2)) for b in X] for a in X])
    alpha = np.linalg.solve(K + h.noise_variance * np.eye(3), y)
    mean, _ = gp.predict(m, X)
    np.testing.assert_allclose(mean, K @ alpha, atol=1e-8)


def test_factor_reconstructs_covariance():
    rng = np.random.default_rng(4)
    X = rng.uniform(-1, 1, size=(8, 2))
    h = gp.KernelHyper(1.0, 0.5, 1e-4)
    m = gp.fit(gp.Dataset(X, rng.normal(size=8)), h)
    K = gp.kernel_matrix(X, X, h) + h.noise_variance * np.eye(8)
    L = m.factor
    assert np.linalg.norm(L @ L.T - K) / np.linalg.norm(K) <= 1e-8
    assert np.allclose(L, np.tril(L))


def test_two_point_hand_solve():
    # inverse of [[a, c], [c, a]] is [[a, -c], [-c, a]] / (a^2 - c^2)
    h = gp.KernelHyper(2.0, 0.5, 0.1)
    x1, x2, y1, y2, q = 0.0, 0.4, 1.0, -2.0, 0.25
    a = 2.0 + 0.1
    c = 2.0 * np.exp(-(0.4 ** 2) / (2 * 0.25))
    det = a * a - c * c
    k1 = 2.0 * np.exp(-(q - x1) ** 2 / (2 * 0.25))
    k2 = 2.0 * np.exp(-(q - x2) ** 2 / (2 * 0.25))
    w1 = (a * y1 - c * y2) / det
    w2 = (-c * y1 + a * y2) / det
    mean_ref = k1 * w1 + k2 * w2
    var_ref = 2.0 - (a * k1 * k1 - 2 * c * k1 * k2 + a * k2 * k2) / det
    m = gp.fit(gp.Dataset([[x1], [x2]], [y1, y2]), h)
    mean, var = gp.posterior(m, [q])
    assert abs(mean - mean_ref) <= 1e-10
    assert abs(var - var_ref) <= 1e-10


def test_prior_recovery_far_away():
    h = gp.KernelHyper(1.7, 0.3, 1e-6)
    m = gp.fit(gp.Dataset([[0.0, 0.0], [0.2, 0.1]], [5.0, -3.0]), h)
    mean, var = gp.posterior(m, [100.0, -100.0])
    assert abs(mean) <= 1e-12
    assert var == pytest.approx(1.7, abs=1e-12)


def test_interpolation_at_training_inputs():
    rng = np.random.default_rng(5)
    X = rng.uniform(-2, 2, size=(5, 1))
    y = np.sin(3 * X[:, 0])
    m = gp.fit(gp.Dataset(X, y), gp.KernelHyper(1.0, 0.7, 0.0))
    mean, var = gp.predict(m, X)
    np.testing.assert_allclose(mean, y, atol=1e-6)
    assert np.all(var <= 1e-6)


def test_query_dimension_checked():
    m = gp.fit(gp.Dataset([[0.0, 1.0]], [1.0]), gp.KernelHyper())
    with pytest.raises(InputError):
        gp.posterior(m, [0.0])


def test_refit_is_identical():
    rng = np.random.default_rng(6)
    d = gp.Dataset(rng.normal(size=(6, 2)), rng.normal(size=6))
    h = gp.KernelHyper(1.0, 0.9, 1e-3)
    q = rng.normal(size=(4, 2))
    a = gp.predict(gp.fit(d, h), q)
    b = gp.predict(gp.fit(d, h), q)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_variance_never_negative(seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, size=(6, 2))
    m = gp.fit(gp.Dataset(X, rng.normal(size=6)), gp.KernelHyper(1.0, float(rng.uniform(0.1, 3)), 0.0))
    _, var = gp.predict(m, np.vstack([X, rng.uniform(-2, 2, size=(10, 2))]))
    assert np.all(var >= 0.0)


def test_duplicate_inputs_get_jitter():
    d = gp.Dataset([[0.5], [0.5]], [1.0, 2.0])
    m = gp.fit(d, gp.KernelHyper(1.0, 1.0, 0.0))
    assert m.jitter > 0
    h = gp.optimize_hyperparameters(d, gp.HyperBounds(noise_variance=(0.0, 0.0)))
    assert h.noise_variance > 0


def test_jitter_exhaustion_raises():
    K = np.array([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(NumericalError) as err:
        gp._cholesky_with_jitter(K)
    assert err.value.jitter is not None


def test_collapsed_bounds_return_the_point():
    d = gp.Dataset([[0.0], [1.0], [2.0]], [0.0, 1.0, 0.5])
    b = gp.HyperBounds((2.0, 2.0), (0.4, 0.4), (0.01, 0.01))
    h = gp.optimize_hyperparameters(d, b)
    assert (h.signal_variance, h.length_scale, h.noise_variance) == pytest.approx((2.0, 0.4, 0.01), rel=1e-12)


def test_length_scale_recovered_within_factor_two():
    rng = np.random.default_rng(0)
    X = np.linspace(0, 5, 60)[:, None]
    true = gp.KernelHyper(1.0, 0.5, 1e-4)
    K = gp.kernel_matrix(X, X, true) + 1e-4 * np.eye(60)
    y = np.linalg.cholesky(K) @ rng.standard_normal(60)
    h = gp.optimize_hyperparameters(gp.Dataset(X, y), seed=1)
    assert 0.25 <= h.length_scale <= 1.0


def test_hyperparameter_search_deterministic():
    rng = np.random.default_rng(2)
    d = gp.Dataset(rng.uniform(size=(10, 2)), rng.normal(size=10))
    assert gp.optimize_hyperparameters(d, seed=4) == gp.optimize_hyperparameters(d, seed=4)


def test_hyperparameter_search_needs_two_points():
    with pytest.raises(InputError):
        gp.optimize_hyperparameters(gp.Dataset([[0.0]], [1.0]))


def test_normalized_fit_reports_original_units():
    X = np.array([[0.0], [1.0], [2.0]])
    y = np.array([100.0, 102.0, 101.0])
    m = gp.fit(gp.Dataset(X, y), gp.KernelHyper(1.0, 1.0, 0.0), normalize=True)
    mean, _ = gp.predict(m, X)
    np.testing.assert_allclose(mean, y, atol=1e-6)
