import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metadyn.errors import InvalidInputError
from metadyn.numerics import RngStream
from metadyn.oracles import (
    FourierGridPosterior,
    bandit_oracle_trace,
    bayes_bandit_posterior,
    bayes_fourier_posterior_mean,
    bayes_linear_posterior,
    bin_center_task,
    fourier_oracle_trace,
    linear_oracle_trace,
    phase_grid,
)
from metadyn.tasks import BanditTask, LinearTask, eval_fourier, sample_linear_episode

# --- linear ----------------------------------------------------------------


def test_linear_prior_mean_is_zero():
    post = bayes_linear_posterior(np.zeros((0, 3)), np.zeros((0, 2)), 0.1)
    assert post.mean.shape == (2, 3) and np.all(post.mean == 0)


def test_linear_noiseless_interpolation(rng):
    w = rng.normal(size=(3, 4))
    x = rng.normal(size=(4, 4))
    post = bayes_linear_posterior(x, x @ w.T, 1e-12)
    assert np.max(np.abs(post.mean - w)) < 1e-6


def test_linear_scalar_closed_form():
    assert bayes_linear_posterior([[2.0]], [[4.0]], 1.0).mean[0, 0] == pytest.approx(1.6, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), t=st.integers(0, 12), nx=st.integers(1, 5), ny=st.integers(1, 5),
       var=st.floats(1e-4, 10.0))
def test_linear_equals_ridge(seed, t, nx, ny, var):
    r = RngStream(seed)
    x, y = r.normal(size=(t, nx)), r.normal(size=(t, ny))
    # independent oracle: augmented least-squares form of ridge regression
    xa = np.vstack([x, np.sqrt(var) * np.eye(nx)])
    ya = np.vstack([y, np.zeros((nx, ny))])
    ridge = np.linalg.lstsq(xa, ya, rcond=None)[0].T
    assert np.max(np.abs(bayes_linear_posterior(x, y, var).mean - ridge)) < 1e-10


def test_linear_order_invariance(rng):
    x, y = rng.normal(size=(15, 3)), rng.normal(size=(15, 2))
    perm = rng.permutation(15)
    a = bayes_linear_posterior(x, y, 0.01).mean
    b = bayes_linear_posterior(x[perm], y[perm], 0.01).mean
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_linear_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        bayes_linear_posterior(np.ones((2, 2)), np.ones((2, 2)), 0.0)
    with pytest.raises(InvalidInputError):
        bayes_linear_posterior(np.ones((2, 2)), np.ones((3, 2)), 1.0)


def test_linear_trace_shape_and_convergence(rng):
    task = LinearTask(rng.normal(size=(2, 3)), 0.01)
    ep = sample_linear_episode(task, 20, rng)
    tr = linear_oracle_trace(task, ep.inputs, ep.targets)
    assert tr.shape == (21, 2, 3)
    assert np.all(tr[0] == 0)
    assert np.max(np.abs(tr[-1] - task.w)) < 0.02


# --- fourier ---------------------------------------------------------------


def test_fourier_prior_mean_vanishes():
    post = bayes_fourier_posterior_mean([], np.ones(3), 1e-4, bins=16)
    assert np.max(np.abs(post.mean)) < 1e-12
    assert np.allclose(post.weights, 1 / 16**3)


def test_fourier_weights_normalised(rng):
    task = bin_center_task(rng, n_modes=3, bins=8)
    obs = [(x, eval_fourier(task, x)) for x in rng.uniform(-0.5, 0.5, size=10)]
    post = bayes_fourier_posterior_mean(obs, task.amplitudes, 1e-4, bins=8)
    assert abs(post.weights.sum() - 1) < 1e-12


def test_fourier_single_mode_recovers_bin(rng):
    task = bin_center_task(rng, n_modes=1, bins=16, noise_std=0.0)
    obs = [(x, eval_fourier(task, x)) for x in (-0.31, 0.07, 0.22)]
    post = bayes_fourier_posterior_mean(obs, task.amplitudes, 1e-4, bins=16)
    true_bin = int(np.argmin(np.abs(phase_grid(16) - task.phases[0])))
    assert post.weights[true_bin] > 0.99


def test_fourier_budget_exceeded():
    with pytest.raises(InvalidInputError):
        FourierGridPosterior(np.ones(6), 1e-4, bins=16)


def test_fourier_full_grid_feasible():
    post = FourierGridPosterior(np.ones(5), 1e-4, bins=16)
    assert post.logw.size == 16**5


def test_fourier_marginal_mean_matches_brute_force(rng):
    """The marginal shortcut equals averaging every hypothesis's function."""
    task = bin_center_task(rng, n_modes=2, bins=6)
    post = FourierGridPosterior(task.amplitudes, 0.05, bins=6)
    for x in rng.uniform(-0.5, 0.5, size=4):
        post.observe(x, eval_fourier(task, x) + 0.1 * rng.normal())
    xs = np.linspace(-0.5, 0.5, 7)
    w = post.weights()
    ph = phase_grid(6)
    brute = sum(w[i, j] * (np.sin(2 * np.pi * xs + ph[i]) + np.sin(4 * np.pi * xs + ph[j]))
                for i in range(6) for j in range(6))
    np.testing.assert_allclose(post.mean_function(xs), brute, atol=1e-12)


def test_fourier_trace_order_invariance(rng):
    task = bin_center_task(rng, n_modes=2, bins=8, noise_std=0.01)
    x = rng.uniform(-0.5, 0.5, size=6)
    y = eval_fourier(task, x) + 0.01 * rng.normal(size=6)
    perm = rng.permutation(6)
    a = fourier_oracle_trace(task, x, y, bins=8)[-1]
    b = fourier_oracle_trace(task, x[perm], y[perm], bins=8)[-1]
    np.testing.assert_allclose(a, b, atol=1e-10)


# --- bandit ----------------------------------------------------------------


def test_bandit_prior_uniform():
    np.testing.assert_array_equal(bayes_bandit_posterior([], 5, 5).mean, np.full((5, 5), 0.2))


def test_bandit_single_observation():
    p = bayes_bandit_posterior([(0, 2, 1)], 5, 5).mean
    assert p[0, 2] == pytest.approx(0.5, abs=1e-12)
    np.testing.assert_allclose(p[0, [0, 1, 3, 4]], 0.125, atol=1e-12)
    np.testing.assert_array_equal(p[1:], 0.2)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_bandit_factorisation(seed):
    r = RngStream(seed)
    hist = [(int(c), int(a), int(rw)) for c, a, rw in
            zip(r.integers(0, 3, 40), r.integers(0, 4, 40), r.integers(0, 2, 40))]
    full = bayes_bandit_posterior(hist, 3, 4).mean
    for c in range(3):
        only = bayes_bandit_posterior([h for h in hist if h[0] == c], 3, 4).mean
        np.testing.assert_allclose(full[c], only[c], atol=1e-12)
    np.testing.assert_allclose(full.sum(axis=1), 1.0, atol=1e-12)


def test_bandit_deterministic_rewards():
    p = bayes_bandit_posterior([(0, 1, 1)], 1, 3, p_correct=1.0, p_incorrect=0.0).mean
    np.testing.assert_array_equal(p[0], [0, 1, 0])


def test_bandit_invalid_history():
    with pytest.raises(InvalidInputError):
        bayes_bandit_posterior([(5, 0, 1)], 5, 5)


def test_bandit_trace(rng):
    task = BanditTask(np.array([1, 0]), 2)
    tr = bandit_oracle_trace(task, [0, 0, 1], [1, 1, 0], [1, 1, 0])
    assert tr.shape == (4, 2, 2)
    assert tr[2, 0, 1] > tr[1, 0, 1] > tr[0, 0, 1] == 0.5
