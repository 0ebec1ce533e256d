import numpy as np
import pytest

from metadyn import analysis, metalearners
from metadyn.errors import DivergenceError, InvalidInputError
from metadyn.learners import (
    LearnerConfig,
    bandit_learner_config,
    fourier_learner_config,
    linear_learner_config,
    relu_control_config,
    train_bandit_coupled,
    train_bandit_decoupled,
    train_fourier_learner,
    train_linear_learner,
    train_lstm_control,
)
from metadyn.numerics import RngStream, svd
from metadyn.tasks import BanditTask, FourierTask, LinearTask, LinearTaskDistribution, sample_linear_task


def fixed_task(spectrum, rng, nx=2, ny=2):
    return sample_linear_task(LinearTaskDistribution("fixed-spectrum", nx=nx, ny=ny, spectrum=spectrum), rng)


# --- config ----------------------------------------------------------------


def test_linear_defaults():
    cfg = linear_learner_config()
    assert (cfg.hidden, cfg.lr, cfg.batch_size, cfg.steps, cfg.init_sigma) == ((10,), 1e-3, 100, 4000, 0.1)
    assert cfg.optimizer == "sgd" and cfg.activation == "linear"


def test_fourier_defaults():
    cfg = fourier_learner_config()
    assert len(cfg.hidden) + 1 == 6 and set(cfg.hidden) == {256}
    assert (cfg.optimizer, cfg.lr, cfg.batch_size, cfg.steps) == ("adam", 1e-4, 40, 5000)


def test_bandit_defaults():
    cfg = bandit_learner_config()
    assert (cfg.optimizer, cfg.lr, cfg.batch_size, cfg.stop_at) == ("adam", 1e-4, 200, 0.98)


def test_snapshot_schedule_geometric():
    snaps = linear_learner_config().snapshots
    assert list(snaps[:101]) == list(range(101))
    assert snaps[-1] == 4000 and list(snaps) == sorted(set(snaps))


def test_config_validation():
    with pytest.raises(InvalidInputError):
        LearnerConfig("nope")
    with pytest.raises(InvalidInputError):
        linear_learner_config(steps=10, snapshots=(0, 20))
    with pytest.raises(InvalidInputError):
        linear_learner_config(snapshots=(5, 2))


# --- linear ----------------------------------------------------------------


def test_linear_zero_init_zero_steps(rng):
    task = fixed_task((3.0, 0.06), rng)
    tr = train_linear_learner(task, linear_learner_config(steps=0, init_sigma=0), rng)
    assert tr.steps == [0]
    assert np.all(tr.payload_array == 0)
    assert np.all(tr.progress() == 0)


def test_linear_learner_converges_and_orders(rng):
    task = fixed_task((3.0, 1.0), rng)
    tr = train_linear_learner(task, linear_learner_config(), rng.derive("run"))
    q = tr.progress()
    assert np.all(q[-1] > 0.9)
    table = analysis.ThresholdTable.from_trace(tr.steps, q, [0.8])
    assert table.get(1, 0.8) < table.get(2, 0.8)


def test_linear_snapshot_loss_matches_effective_matrix(rng):
    """The recorded minibatch loss agrees with the loss implied by W_hat."""
    task = fixed_task((2.0, 0.5), rng)
    tr = train_linear_learner(task, linear_learner_config(steps=300), rng.derive("run"))
    # E||(W_hat - W) x||^2 + noise for x ~ N(0, I); minibatch of 100 gives ~15% scatter per snapshot
    expected = np.array([np.sum((w - task.w) ** 2) + task.ny * task.noise_std**2 for w in tr.payload])
    ratio = np.asarray(tr.loss) / expected
    assert abs(ratio.mean() - 1) < 0.05
    assert np.all(np.abs(ratio - 1) < 0.8)


def test_linear_relu_control_probe(rng):
    task = fixed_task((2.0, 1.0), rng)
    tr = train_linear_learner(task, relu_control_config(steps=1500, lr=1e-2), rng.derive("run"))
    assert tr.payload_array.shape[1:] == (2, 2)
    assert np.all(np.isfinite(tr.payload_array))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_linear_divergence_raises_with_trace(rng):
    task = fixed_task((3.0, 1.0), rng)
    with pytest.raises(DivergenceError) as exc:
        train_linear_learner(task, linear_learner_config(lr=50.0, steps=200), rng)
    assert exc.value.last_good is not None and len(exc.value.last_good.steps) > 0


def test_linear_determinism(rng):
    task = fixed_task((3.0, 0.06), rng)
    a = train_linear_learner(task, linear_learner_config(steps=100), RngStream(5))
    b = train_linear_learner(task, linear_learner_config(steps=100), RngStream(5))
    assert np.array_equal(a.payload_array, b.payload_array) and a.loss == b.loss


def test_linear_csv_schema(rng):
    task = fixed_task((3.0, 0.06), rng)
    tr = train_linear_learner(task, linear_learner_config(steps=5), rng)
    assert tr.csv_header() == ["run_id", "step", "loss_or_reward", "s_hat_1", "s_hat_2"]
    rows = list(tr.csv_rows(3))
    assert len(rows) == 6 and rows[0][0] == 3
    u, _, v = svd(task.w)
    np.testing.assert_allclose(rows[-1][3:], analysis.effective_spectrum(tr.payload[-1], u, v))


# --- fourier ---------------------------------------------------------------


def test_fourier_zero_net_constant(rng):
    task = FourierTask(np.ones(5), np.zeros(5))
    cfg = fourier_learner_config(steps=1, hidden=(8, 8), init_sigma=0, bias_sigma=0, snapshots=(0,))
    tr = train_fourier_learner(task, cfg, rng)
    assert np.all(tr.payload[0] == tr.payload[0][0])


def test_fourier_single_tone_converges():
    task = FourierTask(np.ones(1), np.array([0.7]), 0.01)
    cfg = fourier_learner_config(steps=3000, lr=1e-3, hidden=(64, 64, 64), snapshots=(3000,))
    tr = train_fourier_learner(task, cfg, RngStream(0))
    q = tr.progress()[-1]
    assert abs(q[0] - 1) < 0.05
    coeffs = np.abs(analysis.fourier_coefficients(tr.payload[-1]))
    assert coeffs[1] > 5 * np.max(np.delete(coeffs, 1))


def test_fourier_csv_columns(rng):
    task = FourierTask(np.ones(5), np.zeros(5))
    tr = train_fourier_learner(task, fourier_learner_config(steps=2, hidden=(8,)), rng)
    assert tr.csv_header()[3:] == [f"yprobe_{i}" for i in range(1, 41)]


def test_wrong_family_rejected(rng):
    with pytest.raises(InvalidInputError):
        train_fourier_learner(FourierTask(np.ones(1), np.zeros(1)), linear_learner_config(), rng)
    with pytest.raises(InvalidInputError):
        train_bandit_coupled(BanditTask(np.arange(5)), bandit_learner_config(coupled=False), rng)


# --- bandits ---------------------------------------------------------------


def test_bandit_near_uniform_start(rng):
    task = BanditTask(np.array([2, 0, 4, 1, 3]))
    cfg = bandit_learner_config(steps=1, init_sigma=0.1, bias_sigma=0.0)
    tr = train_bandit_coupled(task, cfg, rng)
    assert np.all(np.abs(tr.payload[0] - 0.2) < 0.1)
    assert tr.loss[0] == pytest.approx(0.32, abs=0.05)


def test_bandit_single_arm_degenerate(rng):
    task = BanditTask(np.array([0]), n_actions=1)
    tr = train_bandit_coupled(task, bandit_learner_config(steps=2000), rng)
    assert tr.progress()[-1, 0] == pytest.approx(1.0)


def test_bandit_policies_normalised_and_stop(rng):
    task = BanditTask(np.array([1, 0]), n_actions=2)
    cfg = bandit_learner_config(coupled=False, lr=0.05, steps=5000)
    tr = train_bandit_decoupled(task, cfg, rng)
    np.testing.assert_allclose(tr.payload_array.sum(axis=-1), 1.0, atol=1e-12)
    assert tr.meta["stopped"]
    assert np.mean(tr.progress()[-1]) >= 0.98


def test_bandit_decoupled_permutation_symmetry():
    task = BanditTask(np.array([2, 0, 4, 1, 3]))
    cfg = bandit_learner_config(coupled=False, init_sigma=0, bias_sigma=0, lr=0.01, steps=200, stop_at=None)
    perm = np.array([3, 1, 4, 0, 2])
    a = train_bandit_decoupled(task, cfg, RngStream(1))
    b = train_bandit_decoupled(BanditTask(task.correct_actions[perm]), cfg, RngStream(1))
    # relabelled contexts learn at the same rate, up to sampling noise
    qa, qb = a.progress(), b.progress()
    assert np.max(np.abs(qa.mean(axis=1) - qb.mean(axis=1))) < 0.1


def test_bandit_csv_columns(rng):
    tr = train_bandit_coupled(BanditTask(np.arange(5)), bandit_learner_config(steps=3), rng)
    cols = tr.csv_header()[3:]
    assert cols[0] == "pi_c0_a0" and cols[-1] == "pi_c4_a4" and len(cols) == 25


# --- lstm control ----------------------------------------------------------


def test_lstm_control_untrained_is_small(rng):
    cfg = metalearners.MetaTrainConfig("linear", {"mode": "fixed-task", "w": [[2.0, 0.0], [0.0, 0.5]]},
                                       budget=1, checkpoints=(0,), batch_size=4, hidden=16)
    tr = train_lstm_control(cfg, rng)
    assert tr.steps == [0]
    assert np.all(np.abs(tr.progress()[0]) < 0.5)


def test_lstm_control_requires_fixed_task(rng):
    with pytest.raises(InvalidInputError):
        train_lstm_control(metalearners.linear_meta_config(budget=1), rng)


def test_lstm_control_converges_to_fixed_task():
    cfg = metalearners.MetaTrainConfig("linear", {"mode": "fixed-task", "w": [[2.0, 0.0], [0.0, 0.5]]},
                                       optimizer="adam", lr=3e-3, budget=600, checkpoints=(0, 600), batch_size=20,
                                       hidden=32)
    tr = train_lstm_control(cfg, RngStream(0))
    assert np.all(np.abs(tr.progress()[-1] - 1) < 0.2)
