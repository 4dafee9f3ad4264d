import json
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphlimit.graph import (EdgeCoefficients, Graph, GraphHistogram, GraphPoint, compute_coefficients,
                              edge_integral, identify, identify_many, level_set_integral)
from graphlimit.model import AnnulusModel


def test_identify_examples(annulus):
    assert identify(annulus, np.array([1.5, 0.0])) == GraphPoint.root()
    y = identify(annulus, np.array([0.5, 0.0]))
    assert y.edge == 1 and y.h == pytest.approx(-0.375, abs=1e-15)
    y = identify(annulus, np.array([0.0, 0.0]))
    assert y.edge == 1 and y.h == -0.5
    with pytest.raises(ValueError):
        identify(annulus, np.array([2.5, 0.0]))


def test_edge_zero_is_root():
    assert GraphPoint(1, 0.0) == GraphPoint.root()
    assert repr(GraphPoint(1, 0.0)) == "RootO"
    g = Graph((-0.5, -1.0))
    assert g.distance(GraphPoint(1, -0.2), GraphPoint(2, -0.3)) == pytest.approx(0.5)
    assert g.distance(GraphPoint(1, 0.0), GraphPoint.root()) == 0.0
    with pytest.raises(ValueError):
        Graph((0.1,))


def test_identify_many_matches_scalar(annulus):
    rng = np.random.default_rng(0)
    x = rng.uniform(-1.4, 1.4, (200, 2))
    edge, h = identify_many(annulus, x)
    for xi, e, hi in zip(x, edge, h):
        y = identify(annulus, xi)
        assert y.edge == e and y.h == pytest.approx(hi, abs=1e-15)


@pytest.mark.parametrize("h", [-0.49, -0.375, -0.1, 0.0])
def test_level_set_integrals(annulus, h):
    inv = lambda x: 1 / np.linalg.norm(x, axis=-1)
    assert level_set_integral(annulus, 1, h, inv) == pytest.approx(2 * np.pi, rel=1e-12)
    assert level_set_integral(annulus, 1, h, lambda x: np.zeros(x.shape[:-1])) == 0.0


def test_level_set_gradient_norm_at_zero(annulus):
    val = level_set_integral(annulus, 1, 0.0, lambda x: np.linalg.norm(x, axis=-1))
    assert val == pytest.approx(2 * np.pi, rel=1e-12)


def test_level_set_out_of_range(annulus):
    with pytest.raises(ValueError):
        level_set_integral(annulus, 1, -0.6, lambda x: np.ones(x.shape[:-1]))
    with pytest.raises(ValueError):
        level_set_integral(annulus, 1, 0.1, lambda x: np.ones(x.shape[:-1]))


def test_coefficients_closed_forms(coeffs):
    h = coeffs.h[0]
    np.testing.assert_allclose(coeffs.M[0], 2 * np.pi, rtol=1e-10)
    np.testing.assert_allclose(coeffs.abar[0], 2 * h + 1, atol=1e-10)
    np.testing.assert_allclose(coeffs.fbar[0], np.sqrt(2 * h + 1) - 4 / 3, atol=1e-10)
    assert coeffs.p[0] == pytest.approx(2 * np.pi, rel=1e-12)
    assert coeffs.vol_E == pytest.approx(3 * np.pi, rel=1e-12)
    assert coeffs.fbar_O == pytest.approx(2 / 9, rel=1e-12)


def test_coefficient_invariants(coeffs):
    assert np.all(coeffs.M[0][1:] > 0) and np.all(coeffs.abar[0][1:] > 0)
    assert coeffs.p[0] == pytest.approx(coeffs.flux_coefficient(1)[-1], rel=1e-6)
    assert coeffs.edge_volume(1) == pytest.approx(np.pi, rel=1e-6)
    assert coeffs.vol_U[0] == pytest.approx(np.pi, rel=1e-6)
    assert abs(coeffs.compatibility_residual()) <= 1e-6


def test_zero_forcing_gives_zero_fbar():
    c = compute_coefficients(AnnulusModel(forcing="zero"), n=64)
    assert np.all(c.fbar[0] == 0) and c.fbar_O == 0


def test_node_doubling_changes_little(annulus):
    a = compute_coefficients(annulus, n=64, n_nodes=128)
    b = compute_coefficients(annulus, n=64, n_nodes=256)
    for name in ("M", "abar"):
        x, y = getattr(a, name)[0][1:], getattr(b, name)[0][1:]
        assert np.max(np.abs(x - y) / np.abs(y)) < 1e-8
    assert abs(a.p[0] - b.p[0]) / b.p[0] < 1e-8


def test_json_round_trip(coeffs):
    text = coeffs.to_json()
    assert json.loads(text)["schema"] == "graphlimit.edge_coefficients/1"
    back = EdgeCoefficients.from_json(text)
    np.testing.assert_array_equal(back.M[0], coeffs.M[0])
    assert back.to_json() == text
    bad = json.loads(text)
    bad["schema"] = "other/9"
    with pytest.raises(ValueError):
        EdgeCoefficients.from_json(json.dumps(bad))


def test_edge_integral_handles_sqrt_endpoint():
    h = np.linspace(-0.5, 0.0, 65)
    # int sqrt(2h+1) dh over [-1/2, 0] = 1/3
    assert edge_integral(h, -0.5, np.sqrt(2 * h + 1)) == pytest.approx(1 / 3, abs=1e-10)


def test_histogram_from_samples_and_tv():
    edge = np.array([0, 0, 1, 1])
    h = np.array([0.0, 0.0, -0.49, -0.01])
    hist = GraphHistogram.from_samples((-0.5,), edge, h, n_bins=4)
    assert hist.root_mass == 0.5 and hist.total() == pytest.approx(1.0)
    np.testing.assert_allclose(hist.mass[0], [0.25, 0, 0, 0.25])
    one = GraphHistogram.from_samples((-0.5,), np.array([1]), np.array([-0.2]), n_bins=4)
    assert one.total() == 1.0 and np.count_nonzero(one.vector()) == 1
    assert hist.tv_distance(hist) == 0.0
    assert 0 < hist.tv_distance(one) <= 1


@settings(max_examples=100, deadline=None)
@given(st.floats(-0.4999, 0.0))
def test_coefficient_interpolation_consistent(h):
    c = _small_coeffs()
    assert c.interpolate(1, "M", h) == pytest.approx(2 * np.pi, rel=1e-9)
    assert c.interpolate(1, "abar", h) == pytest.approx(2 * h + 1, abs=1e-9)


_CACHE = {}


def _small_coeffs():
    if "c" not in _CACHE:
        _CACHE["c"] = compute_coefficients(AnnulusModel(), n=128)
    return _CACHE["c"]
