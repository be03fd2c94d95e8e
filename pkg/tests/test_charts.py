import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from maniforge.charts import Chart, ChartMap
from maniforge.models import TimeMap, TimeStepScheme, build_model
from maniforge.spectral import Splitting

finite = st.floats(-10, 10, allow_nan=False)


def oblique_chart(seed=0, n=4, m=2):
    rng = np.random.default_rng(seed)
    basis = rng.normal(size=(n, n)) + 2 * np.eye(n)
    return Chart(rng.normal(size=n), basis[:, :m], basis[:, m:])


@given(x=arrays(float, (5, 2), elements=finite), y=arrays(float, (5, 2), elements=finite))
def test_lift_then_coordinates_round_trip(x, y):
    chart = oblique_chart()
    xx, yy = chart.coordinates(chart.lift(x, y))
    np.testing.assert_allclose(xx, x, atol=1e-10)
    np.testing.assert_allclose(yy, y, atol=1e-10)


def test_vector_coordinates_are_linear_part_of_coordinates():
    chart = oblique_chart(1)
    w = np.random.default_rng(2).normal(size=(3, 4, 2))
    p, q = chart.vector_coordinates(w)
    for b in range(3):
        for r in range(2):
            x0, y0 = chart.coordinates(chart.origin)
            x1, y1 = chart.coordinates(chart.origin + w[b, :, r])
            np.testing.assert_allclose(p[b, :, r], x1 - x0, atol=1e-12)
            np.testing.assert_allclose(q[b, :, r], y1 - y0, atol=1e-12)


def test_index_chart_is_a_coordinate_permutation():
    chart = Chart.index(Splitting(np.array([2]), np.array([0, 1])))
    x, y = chart.coordinates(np.array([5.0, 6.0, 7.0]))
    np.testing.assert_array_equal(x, [7.0])
    np.testing.assert_array_equal(y, [5.0, 6.0])
    assert (chart.n, chart.m, chart.k) == (3, 1, 2)


def test_bad_bases_are_rejected():
    with pytest.raises(ValueError, match="singular"):
        Chart(np.zeros(2), np.array([[1.0], [1.0]]), np.array([[2.0], [2.0]]))
    with pytest.raises(ValueError):
        Chart(np.zeros(3), np.eye(3)[:, :1], np.eye(3)[:, 1:2])


def test_chart_map_dimension_check():
    g = TimeMap(build_model("Saddle2", {}, 1.0), TimeStepScheme.for_tau("ExactDuhamel", 1.0))
    with pytest.raises(ValueError):
        ChartMap(g, Chart.index(Splitting(np.array([0]), np.array([1, 2]))))


def test_saddle_in_its_index_chart():
    tau = math.log(2.0)
    g = TimeMap(build_model("Saddle2", {}, tau), TimeStepScheme.for_tau("ExactDuhamel", tau))
    cm = ChartMap(g, Chart.index(Splitting(np.array([0]), np.array([1]))))
    g1, g2 = cm(np.array([[1.0]]), np.array([[0.0]]))
    np.testing.assert_allclose(g1, [[2.0]])
    np.testing.assert_allclose(g2, [[7.0 / 6.0]])
    d12, d22 = cm.normal_blocks(np.array([[1.0]]), np.array([[0.0]]))
    np.testing.assert_allclose(d12, [[[0.0]]], atol=1e-15)
    np.testing.assert_allclose(d22, [[[0.5]]], atol=1e-15)


def test_chart_map_tangent_against_differences():
    model = build_model("AppendixPolar", {"h": 0.1}, 0.5)
    g = TimeMap(model, TimeStepScheme.for_tau("RK4", 0.5, 0.01))
    chart = Chart(np.array([1.0, 0.0]), np.array([[0.6], [0.8]]), np.array([[1.0], [0.0]]))
    cm = ChartMap(g, chart)
    rng = np.random.default_rng(0)
    x = rng.uniform(-0.2, 0.2, (8, 1))
    y = rng.uniform(-0.2, 0.2, (8, 1))
    T = rng.uniform(-1, 1, (8, 1, 1))
    g1, g2, d1, d2 = cm.with_tangent(x, y, T)
    e = 1e-6
    p1, p2 = cm(x + e, y + e * T[:, :, 0])
    m1, m2 = cm(x - e, y - e * T[:, :, 0])
    np.testing.assert_allclose(d1[:, :, 0], (p1 - m1) / (2 * e), atol=1e-7)
    np.testing.assert_allclose(d2[:, :, 0], (p2 - m2) / (2 * e), atol=1e-7)
    np.testing.assert_allclose(cm(x, y)[0], g1, atol=1e-15)


def test_fiber_norm_uses_the_gamma_weights():
    model = build_model("KuramotoSivashinsky", {"L": 2 * math.pi * math.sqrt(2), "N": 8}, 1.0, gamma=0.5)
    g = TimeMap(model, TimeStepScheme.for_tau("IMEXEuler", 1.0, 0.1))
    split = Splitting.leading(model.dim, 1)
    cm = ChartMap(g, Chart.index(split))
    y = np.zeros((1, model.dim - 1))
    y[0, 0] = 1.0
    full = np.zeros(model.dim)
    full[1] = 1.0
    assert cm.fiber_norm(y)[0] == pytest.approx(float(model.norm(full)))
