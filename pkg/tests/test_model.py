import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphlimit.model import AnnulusModel, Model, build_model, conormal, sample_points, validate


def test_annulus_validates(annulus):
    rep = validate(annulus, 10_000)
    assert rep.passed, rep.summary()
    assert rep.checks["first_integral"].value <= 1e-10
    assert rep.checks["sigma0_reconstruction"].value <= 1e-12


def test_sample_count_precondition(annulus):
    with pytest.raises(ValueError):
        validate(annulus, 50)


class ZeroA1(AnnulusModel):
    def a1(self, x):
        return np.zeros(np.shape(x)[:-1] + (2, 2))

    def sigma1(self, x):
        return self.a1(x)


class NanA0(AnnulusModel):
    def a0(self, x):
        a = super().a0(x)
        a[..., 0, 0] = np.where(np.hypot(x[..., 0], x[..., 1]) > 1.9, np.nan, a[..., 0, 0])
        return a


def test_zero_a1_fails_positive_definiteness():
    rep = validate(ZeroA1(), 1000)
    assert not rep.passed
    assert not rep.checks["a1_pd"].passed


def test_constant_forcing_fails_zero_mean():
    rep = validate(AnnulusModel(forcing="one"), 1000)
    assert not rep.checks["zero_mean"].passed
    assert rep.checks["zero_mean"].value == pytest.approx(4 * np.pi, rel=1e-10)


def test_non_finite_reported_with_location():
    rep = validate(NanA0(), 1000)
    assert not rep.passed
    bad = rep.checks["finite"]
    assert not bad.passed and bad.location is not None
    assert np.hypot(*bad.location) > 1.9


def test_polar_structure(annulus):
    x = sample_points(annulus, 2000, seed=3)
    r = np.hypot(x[:, 0], x[:, 1])
    keep = r > 1e-6
    x, r = x[keep], r[keep]
    er = x / r[:, None]
    et = np.stack([-er[:, 1], er[:, 0]], axis=-1)
    a0 = annulus.a0(x)
    lam = np.where(r >= 1, (r - 1) ** 2, 0.0)
    np.testing.assert_allclose(np.einsum("nij,nj->ni", a0, er), lam[:, None] * er, atol=1e-12)
    np.testing.assert_allclose(np.einsum("nij,nj->ni", a0, et), r[:, None] * et, atol=1e-12)


def test_non_degeneracy_and_degeneracy_order(annulus):
    x = sample_points(annulus, 5000, seed=5)
    r = np.hypot(x[:, 0], x[:, 1])
    inside = (r < 1) & (r > 1e-6)
    e = np.stack([-x[inside, 1], x[inside, 0]], axis=-1) / r[inside, None]
    q = np.einsum("ni,nij,nj->n", e, annulus.a0(x[inside]), e)
    assert np.all(q >= r[inside] - 1e-12)
    band = (r > 1) & (r < 1.2)
    er = x[band] / r[band, None]
    q = np.einsum("ni,nij,nj->n", er, annulus.a0(x[band]), er)
    np.testing.assert_allclose(q, (r[band] - 1) ** 2, atol=1e-12)


def test_edge_minimum_and_gamma(annulus):
    assert annulus.m[0] == -0.5
    th = np.linspace(0, 2 * np.pi, 17)
    pts = np.stack([np.cos(th), np.sin(th)], axis=-1)
    np.testing.assert_allclose(annulus.H_k(1, pts), 0.0, atol=1e-15)
    np.testing.assert_array_equal(annulus.a0(np.zeros((1, 2))), np.zeros((1, 2, 2)))


def test_divergence_matches_finite_differences(annulus):
    x = sample_points(annulus, 500, seed=9)
    x = x[np.abs(np.hypot(x[:, 0], x[:, 1]) - 1) > 1e-3]
    fd = Model.div_a0(annulus, x)
    np.testing.assert_allclose(annulus.div_a0(x), fd, atol=1e-6)


@pytest.mark.parametrize("x,eps,expected", [((2.0, 0.0), 0.3, (-1.0, 0.0)), ((0.0, 2.0), 0.1, (0.0, -1.0))])
def test_conormal_examples(annulus, x, eps, expected):
    np.testing.assert_allclose(conormal(annulus, np.array(x), eps), expected, atol=1e-14)


def test_conormal_identity_matrices_gives_normal():
    class Iso(AnnulusModel):
        def a0(self, x):
            return np.broadcast_to(np.eye(2), np.shape(x)[:-1] + (2, 2)).copy()

    x = np.array([np.sqrt(2), np.sqrt(2)])
    np.testing.assert_allclose(conormal(Iso(), x, 0.7), -x / 2, atol=1e-14)


def test_conormal_rejects_interior_point(annulus):
    with pytest.raises(ValueError):
        conormal(annulus, np.array([1.0, 0.0]), 0.1)


def test_build_model_from_config():
    m = build_model({"name": "annulus", "forcing": "zero", "x_O": [1.2, 0.0]})
    assert m.forcing == "zero" and m.x_O[0] == 1.2
    with pytest.raises(ValueError):
        build_model({"name": "torus"})


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 2.0), st.floats(0.0, 2 * np.pi))
def test_sigma_squares_to_a(r, th):
    m = AnnulusModel()
    x = np.array([[r * np.cos(th), r * np.sin(th)]])
    s0 = m.sigma0(x)[0]
    np.testing.assert_allclose(s0 @ s0.T, m.a0(x)[0], atol=1e-12)
    a = m.a0(x)[0]
    assert np.allclose(a, a.T) and np.linalg.eigvalsh(a).min() >= -1e-14
