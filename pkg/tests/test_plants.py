import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mabo_dmpc import plants
from mabo_dmpc.errors import InputError
from mabo_dmpc.scenarios import load_scenario

A1 = [[0.9, 0.35], [0.0, 1.1]]
B1 = [[0.0813], [0.2]]


def arc(x0, v, om, t):
    """Exact unicycle motion under constant (v, omega)."""
    px, py, psi = x0
    if om == 0:
        return np.array([px + v * t * np.cos(psi), py + v * t * np.sin(psi), psi])
    return np.array([
        px + v / om * (np.sin(psi + om * t) - np.sin(psi)),
        py - v / om * (np.cos(psi + om * t) - np.cos(psi)),
        psi + om * t,
    ])


def test_linear_step_agent1():
    m = plants.LinearAgentModel(A1, B1)
    np.testing.assert_allclose(plants.step_linear(m, [1.0, 0.0], [0.0]), [0.9, 0.0], atol=1e-15)


def test_linear_step_origin():
    m = plants.LinearAgentModel(A1, B1)
    assert np.all(plants.step_linear(m, [0.0, 0.0], [0.0]) == 0.0)


def test_disturbance_statistics():
    m = plants.LinearAgentModel(np.zeros((2, 2)), np.zeros((2, 1)), (-0.1, 0.0))
    rng = np.random.default_rng(0)
    e = np.array([plants.step_linear(m, [0, 0], [0], rng)[0] for _ in range(100_000)])
    se = 0.1 / np.sqrt(12) / np.sqrt(e.size)
    assert abs(e.mean() + 0.05) <= 3 * se
    assert e.min() >= -0.1 and e.max() <= 0.0


def test_disturbance_only_on_first_state():
    m = plants.LinearAgentModel(np.eye(2), np.zeros((2, 1)), (-0.1, 0.0))
    x = plants.step_linear(m, [1.0, 1.0], [0.0], np.random.default_rng(1))
    assert x[1] == 1.0 and -0.1 <= x[0] - 1.0 <= 0.0


def test_disturbance_needs_rng():
    m = plants.LinearAgentModel(A1, B1, (-0.1, 0.0))
    with pytest.raises(InputError):
        plants.step_linear(m, [0, 0], [0])


def test_disturbance_reproducible():
    m = plants.LinearAgentModel(A1, B1, (-0.1, 0.0))
    a = [plants.step_linear(m, [0, 0], [0], r) for r in [np.random.default_rng(5)] * 3]
    b = [plants.step_linear(m, [0, 0], [0], r) for r in [np.random.default_rng(5)] * 3]
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_invalid_models():
    with pytest.raises(InputError):
        plants.LinearAgentModel([[1.0, 0.0]], [[1.0]])
    with pytest.raises(InputError):
        plants.LinearAgentModel(A1, B1, (0.0, -0.1))
    with pytest.raises(InputError):
        plants.WMRModel(input_scale=0.0)
    with pytest.raises(InputError):
        plants.WMRModel(step_size=-0.1)


def test_wmr_rest():
    m = plants.WMRModel()
    x = np.array([0.3, -1.2, 0.7])
    assert np.array_equal(plants.step_wmr(m, x, [0.0, 0.0]), x)


def test_wmr_straight_line():
    m = plants.WMRModel(1.0, 0.1)
    np.testing.assert_allclose(plants.step_wmr(m, [2.0, 1.0, 0.0], [1.0, 0.0]), [2.1, 1.0, 0.0], atol=1e-15)


def test_wmr_arc():
    m = plants.WMRModel(1.0, 0.1)
    x = plants.step_wmr(m, [0.0, 0.0, 0.0], [1.0, 1.0])
    np.testing.assert_allclose(x, [np.sin(0.1), 1 - np.cos(0.1), 0.1], atol=1e-6)


def test_wmr_rk4_order():
    x0 = np.array([0.0, 0.0, 0.3])
    T = 1.0
    errs = []
    for dt in (0.2, 0.1, 0.05):
        m = plants.WMRModel(1.0, dt)
        x = x0.copy()
        for _ in range(int(round(T / dt))):
            x = m.step(x, np.array([1.0, 2.0]))
        errs.append(np.linalg.norm(x - arc(x0, 1.0, 2.0, T)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(orders >= 3.9)


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-3, 3), min_size=3, max_size=3),
    st.lists(st.floats(-2, 2), min_size=2, max_size=2),
    st.floats(0.2, 2.0),
)
def test_wmr_scalar_path_matches_batched(x, u, scale):
    m = plants.WMRModel(scale, 0.1)
    x, u = np.array(x), np.array(u)
    single = m.step(x, u)
    batched = m.step(x[None], u[None])[0]
    np.testing.assert_allclose(single, batched, atol=1e-12)


def test_wmr_input_scale_equals_scaled_input():
    a = plants.WMRModel(0.2, 0.1).step(np.zeros(3), np.array([1.0, 0.5]))
    b = plants.WMRModel(1.0, 0.1).step(np.zeros(3), np.array([0.2, 0.1]))
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_example1_prediction_models_shared():
    cfg = load_scenario("example1-linear")
    for i in range(3):
        m = plants.prediction_model(i, cfg)
        np.testing.assert_array_equal(m.A, [[1.0, 0.25], [0.0, 1.0]])
        np.testing.assert_array_equal(m.B, [[0.0312], [0.25]])
        assert m.disturbance is None
    assert plants.true_model(0, cfg).disturbance == (-0.1, 0.0)
    assert plants.true_model(1, cfg).disturbance is None


def test_example2_prediction_scales():
    cfg = load_scenario("example2-wmr")
    assert [plants.prediction_model(i, cfg).input_scale for i in range(3)] == [1.0, 0.2, 1.5]
    assert all(plants.true_model(i, cfg).input_scale == 1.0 for i in range(3))


def test_unknown_agent():
    cfg = load_scenario("example1-linear")
    with pytest.raises(InputError):
        plants.prediction_model(3, cfg)
