import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graphlimit.model import AnnulusModel
from graphlimit.sde import (SimConfig, SimulationError, empirical_marginal, estimate_exit_time,
                            feynman_kac_many, feynman_kac_u, reflect, simulate_occupation, simulate_paths,
                            step, with_eps)


def exact_u_eps(r, eps, r_O=1.5, n=4001):
    """Radial Neumann solution of the eps-problem with ``f = r - 4/3``, zero at ``r_O``."""
    def du(s):
        lam = np.where(s >= 1, (s - 1) ** 2, 0.0)
        return (2 / 3) * s * (s - 2) / (lam / eps + 1)

    s = np.linspace(r_O, r, n)
    g = du(s)
    return float(np.sum((g[1:] + g[:-1]) / 2 * np.diff(s)))


# -- configuration -----------------------------------------------------------

def test_simconfig_defaults_and_validation():
    c = SimConfig(eps=0.1)
    assert c.dt == pytest.approx(1e-3)
    assert SimConfig(eps=0.1, dt=0.005).dt == 0.005
    with pytest.raises(ValueError):
        SimConfig(eps=0.1, dt=0.006)
    with pytest.raises(ValueError):
        SimConfig(eps=0.1, n_paths=0)
    with pytest.raises(ValueError):
        SimConfig(eps=0.0)
    with pytest.raises(ValueError):
        SimConfig(eps=0.1, scheme="milstein")
    assert with_eps(SimConfig(eps=0.1, dt=0.002), 0.01).dt == pytest.approx(2e-4)


# -- single steps ------------------------------------------------------------

def test_reflect_example(annulus):
    y = reflect(annulus, np.array([[2.01, 0.0]]), 0.1)
    assert np.allclose(y, [[1.99, 0.0]], atol=1e-14)
    inside = np.array([[0.3, -1.2]])
    assert np.array_equal(reflect(annulus, inside, 0.1), inside)


@settings(max_examples=200, deadline=None)
@given(st.floats(2.0, 2.1, exclude_min=True), st.floats(0, 2 * np.pi), st.sampled_from([1e-3, 0.1, 1.0]))
def test_reflect_identity(r, th, eps):
    ann = AnnulusModel()
    y = reflect(ann, np.array([[r * np.cos(th), r * np.sin(th)]]), eps)
    assert np.hypot(*y[0]) == pytest.approx(4 - r, abs=1e-12)
    assert np.allclose(y[0] / np.hypot(*y[0]), [np.cos(th), np.sin(th)], atol=1e-12)


def test_step_euler_inside_unchanged_by_reflection(annulus):
    c = SimConfig(eps=0.1, scheme="euler")
    x = np.array([[0.4, 0.1], [1.3, -0.2]])
    z = np.random.default_rng(1).standard_normal((2, 4)) * 0.1
    y = step(annulus, c, x, z)
    dt, eps = c.dt, c.eps
    # direct Euler-Maruyama proposal
    drift = annulus.div_a0(x) / (2 * eps) + annulus.div_a1(x) / 2
    prop = (x + drift * dt + math.sqrt(dt / eps) * np.einsum("...ij,...j", annulus.sigma0(x), z[:, :2])
            + math.sqrt(dt) * np.einsum("...ij,...j", annulus.sigma1(x), z[:, 2:]))
    assert np.all(annulus.inside_G(prop))
    assert np.allclose(y, prop, atol=1e-15)


def test_step_zero_noise_zero_drift(annulus):
    # inside the well a1 = I has no divergence and the fast step is a pure rotation
    c = SimConfig(eps=0.1)
    x = np.array([[0.3, 0.4], [-0.7, 0.1]])
    assert np.allclose(step(annulus, c, x, np.zeros((2, 6))), x, atol=1e-15)


def test_step_nonfinite_carries_last_state(annulus):
    c = SimConfig(eps=0.1, scheme="euler")
    x = np.array([[np.nan, 0.0]])
    with pytest.raises(SimulationError) as info:
        step(annulus, c, x, np.zeros((1, 4)))
    assert info.value.last_state is not None


def test_step_engines_agree(annulus):
    # vectorized numpy path engine and compiled kernels consume identical streams
    x0 = np.array([[0.5, 0.0], [1.5, 0.0], [1.99, 0.0]])
    out = []
    for engine in ("compiled", "numpy"):
        c = SimConfig(eps=0.1, n_paths=64, seed=3, engine=engine, block_size=32)
        out.append(simulate_paths(annulus, c, x0, t_end=0.1, record_times=(0.05, 0.1), n_windows=2))
    assert np.allclose(out[0].states, out[1].states, atol=1e-12)
    assert np.allclose(out[0].f_windows, out[1].f_windows, atol=1e-12)
    assert np.array_equal(out[0].occupation, out[1].occupation)


def test_euler_scheme_runs_contained(annulus):
    c = SimConfig(eps=0.1, n_paths=32, scheme="euler", debug=True, seed=5)
    rec = simulate_paths(annulus, c, [1.9, 0.0], t_end=0.05, record_times=(0.05,))
    assert np.all(annulus.inside_G(rec.states))


# -- determinism -------------------------------------------------------------

def test_determinism_across_workers(annulus):
    base = dict(eps=0.1, n_paths=200, seed=42, block_size=64)
    a = simulate_paths(annulus, SimConfig(**base, workers=1), [0.5, 0.0], t_end=0.2, record_times=(0.2,))
    b = simulate_paths(annulus, SimConfig(**base, workers=2), [0.5, 0.0], t_end=0.2, record_times=(0.2,))
    c = simulate_paths(annulus, SimConfig(**base, workers=1), [0.5, 0.0], t_end=0.2, record_times=(0.2,))
    assert np.array_equal(a.states, b.states) and np.array_equal(a.states, c.states)
    d = simulate_paths(annulus, SimConfig(**dict(base, seed=43)), [0.5, 0.0], t_end=0.2, record_times=(0.2,))
    assert not np.array_equal(a.states, d.states)


def test_debug_containment(annulus):
    c = SimConfig(eps=0.05, n_paths=256, seed=9, debug=True)
    rec = simulate_paths(annulus, c, [1.98, 0.0], t_end=0.2, record_times=np.linspace(0, 0.2, 11))
    assert np.all(np.hypot(rec.states[..., 0], rec.states[..., 1]) <= 2.0)


def test_lebesgue_invariance(annulus):
    # a uniform start in [G] stays uniform under the adjusted split scheme
    rng = np.random.default_rng(0)
    n = 20000
    r = 2 * np.sqrt(rng.random(n))
    th = 2 * np.pi * rng.random(n)
    x = np.stack([r * np.cos(th), r * np.sin(th)], -1)
    c = SimConfig(eps=0.1, dt=0.005)
    for _ in range(200):
        x = step(annulus, c, x, np.concatenate([rng.standard_normal((n, 4)), rng.random((n, 2))], 1))
    r = np.hypot(x[:, 0], x[:, 1])
    assert abs(np.mean(r >= 1) - 0.75) < 4 * math.sqrt(0.75 * 0.25 / n)
    # radial law P(r <= s) = s^2 / 4 at a few quantiles
    for s in (0.5, 1.5, 1.9):
        assert abs(np.mean(r <= s) - s * s / 4) < 4 * math.sqrt(0.25 / n)


# -- occupation --------------------------------------------------------------

def test_occupation_trivial(annulus):
    c = SimConfig(eps=0.1, T=0.01, n_paths=50, seed=1)
    assert simulate_occupation(annulus, c, [1.5, 0.0]).mean == 1.0
    assert simulate_occupation(annulus, c, [0.0, 0.0]).mean == 0.0


def test_occupation_dt_robust(annulus):
    res = []
    for dt in (1e-3, 5e-4):
        c = SimConfig(eps=0.1, T=4.0, n_paths=300, seed=17, dt=dt)
        res.append(simulate_occupation(annulus, c, [0.5, 0.0]))
    diff = abs(res[0].mean - res[1].mean)
    assert diff < 2 * math.hypot(res[0].stderr, res[1].stderr)


# -- exit times --------------------------------------------------------------

def test_exit_time_start_on_target(annulus):
    c = SimConfig(eps=0.01, n_paths=20)
    st_ = estimate_exit_time(annulus, c, annulus.level_points(0.1, 20), [0.1, 0.5])
    assert st_.mean == 0.0 and st_.probability(0.1) == 1.0 and st_.n_censored == 0


def test_exit_time_frequencies(annulus):
    c = SimConfig(eps=0.01, n_paths=300, seed=2)
    st_ = estimate_exit_time(annulus, c, annulus.level_points(0.1, 300), [0.0, 0.2])
    assert st_.mean >= 0 and st_.n_censored == 0
    assert st_.probability(0.0) + st_.probability(0.2) == pytest.approx(1.0)
    assert 0 < st_.probability(0.0) < 1
    with pytest.raises(ValueError):
        estimate_exit_time(annulus, c, np.array([[0.5, 0.0]] * 150 + [[1.5, 0.0]] * 150), [0.0])


def test_exit_time_censoring_reported(annulus):
    # H_ext never exceeds 1, so this level is unreachable
    c = SimConfig(eps=0.1, T=0.01, n_paths=10, seed=3)
    st_ = estimate_exit_time(annulus, c, [1.5, 0.0], [2.0])
    assert st_.n_censored == 10 and st_.censored_fraction == 1.0
    assert np.all(st_.times == pytest.approx(1.0))


def test_exit_engines_agree_in_law(annulus):
    out = []
    for engine in ("compiled", "numpy"):
        c = SimConfig(eps=0.01, n_paths=400, seed=4, engine=engine)
        out.append(estimate_exit_time(annulus, c, annulus.level_points(0.05, 400), [0.0, 0.1]))
    se = math.hypot(out[0].stderr, out[1].stderr)
    assert abs(out[0].mean - out[1].mean) < 4 * se


# -- Feynman-Kac -------------------------------------------------------------

def test_fk_at_x_O_is_zero(annulus):
    c = SimConfig(eps=0.1, n_paths=50, seed=1)
    val, se, _ = feynman_kac_u(annulus, c, annulus.x_O, t_max=0.5)
    assert val == 0.0 and se == 0.0


def test_fk_zero_forcing():
    ann = AnnulusModel(forcing="zero")
    c = SimConfig(eps=0.1, n_paths=50, seed=1)
    val, se, res = feynman_kac_u(ann, c, [0.5, 0.0], t_max=0.5)
    assert val == 0.0 and se == 0.0 and not res.warning


def test_fk_matches_exact_eps_solution(annulus):
    eps = 0.1
    c = SimConfig(eps=eps, n_paths=2000, seed=21)
    xs = np.array([[0.5, 0.0], [1.2, 0.0]])
    res = feynman_kac_many(annulus, c, xs, t_max=4.0, max_doublings=0)
    for j, x in enumerate(xs):
        ref = exact_u_eps(x[0], eps)
        assert abs(res.value[j] - ref) < 4 * res.stderr[j] + 2e-3, (x, res.value[j], ref, res.stderr[j])


def test_fk_crn_vs_independent(annulus):
    c = SimConfig(eps=0.1, n_paths=400, seed=5)
    a = feynman_kac_many(annulus, c, [[0.5, 0.0]], t_max=2.0, max_doublings=0)
    b = feynman_kac_many(annulus, c, [[0.5, 0.0]], t_max=2.0, crn=False, max_doublings=0)
    assert abs(a.value[0] - b.value[0]) < 4 * math.hypot(a.stderr[0], b.stderr[0])


# -- marginals ---------------------------------------------------------------

def test_marginal_t0_and_single_path(annulus):
    c = SimConfig(eps=0.1, T=0.5, n_paths=100)
    h = empirical_marginal(annulus, c, [1.5, 0.0], 0.0)
    assert h.root_mass == 1.0 and h.total() == pytest.approx(1.0)
    one = empirical_marginal(annulus, SimConfig(eps=0.1, T=0.5, n_paths=1, seed=4), [0.5, 0.0], 0.5)
    v = one.vector()
    assert np.count_nonzero(v) == 1 and v.sum() == 1.0
    with pytest.raises(ValueError):
        empirical_marginal(annulus, c, [0.5, 0.0], 0.6)


def test_marginal_root_mass_near_stationary(annulus):
    c = SimConfig(eps=0.1, T=3.0, n_paths=2000, seed=6, dt=0.004)
    h = empirical_marginal(annulus, c, [0.5, 0.0], 3.0)
    assert abs(h.root_mass - 0.75) < 4 * math.sqrt(0.75 * 0.25 / 2000) + 0.01
