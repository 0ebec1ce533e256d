import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from metadyn.errors import InvalidInputError
from metadyn.numerics import RngStream, dft_real, svd
from metadyn.tasks import (
    BanditTask,
    FourierTask,
    LinearTask,
    LinearTaskDistribution,
    bandit_reward,
    eval_fourier,
    expected_spectrum,
    sample_bandit_task,
    sample_contexts,
    sample_fourier_episode,
    sample_fourier_task,
    sample_linear_episode,
    sample_linear_task,
    singular_value_samples,
    spectrum_percentiles,
    task_to_json,
)

# --- linear ----------------------------------------------------------------


def test_fixed_spectrum_2d(rng):
    task = sample_linear_task(LinearTaskDistribution("fixed-spectrum", spectrum=(3.0, 0.06)), rng)
    np.testing.assert_allclose(svd(task.w)[1], [3.0, 0.06], atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(nx=st.integers(1, 5), ny=st.integers(1, 5), seed=st.integers(0, 2**31))
def test_spectrum_substitution_property(nx, ny, seed):
    r = RngStream(seed)
    spec = tuple(r.uniform(0.01, 4.0, size=min(nx, ny)))
    task = sample_linear_task(LinearTaskDistribution("fixed-spectrum", nx=nx, ny=ny, spectrum=spec), r)
    np.testing.assert_allclose(svd(task.w)[1], sorted(spec, reverse=True), atol=1e-10)


def test_fixed_spectrum_length_error(rng):
    with pytest.raises(InvalidInputError):
        sample_linear_task(LinearTaskDistribution("fixed-spectrum", spectrum=(1.0,)), rng)


def test_fixed_task_verbatim(rng):
    w = np.array([[2.0, 0.0], [0.0, 0.5]])
    dist = LinearTaskDistribution("fixed-task", w=w)
    for _ in range(3):
        assert np.array_equal(sample_linear_task(dist, rng).w, w)


def test_uniform_spectrum_range(rng):
    dist = LinearTaskDistribution("uniform-spectrum", nx=3, ny=3, s_min=0.5, s_max=2.0)
    s = np.concatenate([svd(sample_linear_task(dist, rng.derive(i)).w)[1] for i in range(50)])
    assert s.min() >= 0.5 - 1e-10 and s.max() <= 2.0 + 1e-10


def test_distribution_validation():
    with pytest.raises(InvalidInputError):
        LinearTaskDistribution("matrix-normal", scale=0.0)
    with pytest.raises(InvalidInputError):
        LinearTaskDistribution("bogus")
    with pytest.raises(InvalidInputError):
        LinearTaskDistribution("fixed-task")


def test_matrix_normal_percentile_matches_independent_oracle(rng):
    # independent oracle: plain numpy generator and LAPACK SVD
    g = np.random.default_rng(99).standard_normal((100_000, 2, 2))
    oracle = np.percentile(np.linalg.svd(g, compute_uv=False).ravel(), 95)
    ours = spectrum_percentiles(LinearTaskDistribution(), [95], 100_000, rng)[0]
    assert abs(ours - oracle) < 0.02
    assert abs(ours - 2.65) < 0.02


def test_expected_5d_spectrum(rng):
    s = expected_spectrum(LinearTaskDistribution(nx=5, ny=5), 20_000, rng)
    np.testing.assert_allclose(s, [3.648, 2.586, 1.738, 0.977, 0.307], atol=0.02)


def test_matrix_normal_scale_property(rng):
    base = singular_value_samples(LinearTaskDistribution(), 5_000, rng.derive("a")).ravel()
    scaled = singular_value_samples(LinearTaskDistribution(scale=10.0), 5_000, rng.derive("b")).ravel() / 10.0
    assert ks_2samp(base, scaled).statistic < 0.02


def test_matrix_normal_scale_is_exact_per_draw():
    a = sample_linear_task(LinearTaskDistribution(scale=1.0), RngStream(5)).w
    b = sample_linear_task(LinearTaskDistribution(scale=10.0), RngStream(5)).w
    np.testing.assert_allclose(b, 10 * a, rtol=1e-14)


def test_linear_episode_identity_noiseless(rng):
    ep = sample_linear_episode(LinearTask(np.eye(3), 0.0), 20, rng)
    assert len(ep) == 20
    assert np.array_equal(ep.inputs, ep.targets)


def test_linear_episode_noise_std(rng):
    task = LinearTask(rng.normal(size=(2, 2)), 0.01)
    ep = sample_linear_episode(task, 100_000, rng)
    resid = ep.targets - ep.inputs @ task.w.T
    assert abs(resid.std() - 0.01) < 2e-4


def test_linear_episode_rejects_t0(rng):
    with pytest.raises(InvalidInputError):
        sample_linear_episode(LinearTask(np.eye(2)), 0, rng)


def test_linear_task_validation():
    with pytest.raises(InvalidInputError):
        LinearTask(np.array([[np.inf]]))
    with pytest.raises(InvalidInputError):
        LinearTask(np.eye(2), -0.1)


# --- fourier ---------------------------------------------------------------


def test_eval_fourier_values():
    assert eval_fourier(FourierTask(np.ones(5), np.full(5, np.pi / 2)), 0.0) == pytest.approx(5.0, abs=1e-14)
    assert eval_fourier(FourierTask(np.ones(5), np.zeros(5)), 0.0) == 0.0


def test_eval_fourier_dft_magnitudes(rng):
    task = sample_fourier_task("unit", rng)
    x = np.linspace(-0.5, 0.5, 41)[:-1]
    mags = np.abs(dft_real(eval_fourier(task, x)))
    np.testing.assert_allclose(mags[1:6], 0.5, atol=1e-12)
    assert np.max(mags[6:]) < 1e-12 and mags[0] < 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_eval_fourier_periodic(seed):
    task = sample_fourier_task("uniform", RngStream(seed))
    assert abs(eval_fourier(task, -0.5) - eval_fourier(task, 0.5)) < 1e-12


def test_fourier_modes(rng):
    np.testing.assert_array_equal(sample_fourier_task("unit", rng).amplitudes, np.ones(5))
    np.testing.assert_array_equal(sample_fourier_task("bandpass", rng).amplitudes, [0, 0, 1, 1, 1])
    amps = sample_fourier_task("uniform", rng).amplitudes
    assert np.all((amps >= 0) & (amps <= 1))
    with pytest.raises(InvalidInputError):
        sample_fourier_task("lowpass", rng)


def test_fourier_task_determinism():
    a = sample_fourier_task("unit", RngStream(3, 9))
    b = sample_fourier_task("unit", RngStream(3, 9))
    assert np.array_equal(a.phases, b.phases)
    assert np.all((a.phases >= 0) & (a.phases < 2 * np.pi))


def test_fourier_episode(rng):
    ep = sample_fourier_episode(sample_fourier_task("unit", rng), 40, rng)
    assert len(ep) == 40
    zero = FourierTask(np.zeros(5), np.zeros(5), 0.0)
    assert np.all(sample_fourier_episode(zero, 40, rng).targets == 0)


def test_fourier_inputs_moments(rng):
    x = sample_fourier_episode(FourierTask(np.zeros(1), np.zeros(1), 0.0), 100_000, rng).inputs
    assert x.min() >= -0.5 and x.max() < 0.5
    assert abs(x.mean()) < 0.005


# --- bandit ----------------------------------------------------------------


def test_bandit_conflict_is_permutation(rng):
    for i in range(20):
        t = sample_bandit_task(rng.derive(i))
        assert sorted(t.correct_actions.tolist()) == [0, 1, 2, 3, 4]
        assert (t.p_correct, t.p_incorrect) == (0.8, 0.2)


def test_bandit_conflict_needs_enough_actions(rng):
    with pytest.raises(InvalidInputError):
        sample_bandit_task(rng, n_contexts=5, n_actions=3)


def test_bandit_independent_frequencies(rng):
    counts = np.zeros((5, 5))
    for i in range(20_000):
        t = sample_bandit_task(rng.derive(i), conflict=False)
        counts[np.arange(5), t.correct_actions] += 1
    assert np.max(np.abs(counts / 20_000 - 0.2)) < 0.01


def test_bandit_reward_deterministic_variant(rng):
    t = BanditTask(np.array([1, 0]), 3, 1.0, 0.0)
    assert np.all(bandit_reward(t, np.zeros(100, int), np.ones(100, int), rng) == 1)
    assert np.all(bandit_reward(t, np.zeros(100, int), np.zeros(100, int), rng) == 0)


def test_bandit_reward_frequency(rng):
    t = sample_bandit_task(rng)
    wrong = (t.correct_actions[0] + 1) % 5
    r = bandit_reward(t, np.zeros(100_000, int), np.full(100_000, wrong), rng)
    assert set(np.unique(r)) <= {0.0, 1.0}
    assert abs(r.mean() - 0.2) < 0.01


def test_bandit_reward_range_errors(rng):
    t = sample_bandit_task(rng)
    with pytest.raises(InvalidInputError):
        bandit_reward(t, 5, 0, rng)
    with pytest.raises(InvalidInputError):
        bandit_reward(t, 0, -1, rng)


def test_bandit_task_validation():
    with pytest.raises(InvalidInputError):
        BanditTask(np.array([0]), 5, 0.2, 0.8)
    with pytest.raises(InvalidInputError):
        BanditTask(np.array([7]), 5)


def test_contexts_uniform(rng):
    c = sample_contexts(sample_bandit_task(rng), rng, 50_000)
    np.testing.assert_allclose(np.bincount(c) / 50_000, 0.2, atol=0.01)


# --- JSON ------------------------------------------------------------------


def test_task_json_field_names(rng):
    lin = json.loads(task_to_json(LinearTask(np.eye(2))))
    four = json.loads(task_to_json(sample_fourier_task("unit", rng)))
    band = json.loads(task_to_json(sample_bandit_task(rng)))
    assert set(lin) == {"w", "noise_std"}
    assert set(four) == {"amplitudes", "phases", "noise_std"}
    assert set(band) == {"correct_actions", "p_correct", "p_incorrect"}


def test_task_json_roundtrip(rng):
    for t in (LinearTask(rng.normal(size=(2, 3))), sample_fourier_task("uniform", rng), sample_bandit_task(rng)):
        back = type(t).from_json(json.loads(task_to_json(t)))
        assert task_to_json(back) == task_to_json(t)
