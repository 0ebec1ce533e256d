import numpy as np
import pytest

from metadyn import analysis
from metadyn.errors import InvalidInputError
from metadyn.metalearners import (
    MetaTrainConfig,
    bandit_meta_config,
    bandit_rollout,
    fourier_meta_config,
    init_lstm,
    linear_meta_config,
    load_checkpoints,
    outer_dynamics_sweep,
    outer_train,
    probe_bandit_episodes,
    probe_episodes,
    probe_inner,
    probe_inner_fourier,
    probe_inner_linear,
    sample_probe_tasks,
)
from metadyn.nets import lstm_forward, softmax, zero_lstm
from metadyn.numerics import RngStream
from metadyn.store import export_checkpoint, import_checkpoint, meta_run_dir, trained_meta
from metadyn.tasks import FourierTask, LinearTask, sample_bandit_task


def tiny(factory, **kw):
    base = dict(budget=4, checkpoints=(0, 2, 4), batch_size=4, hidden=8)
    base.update(kw)
    return factory(**base)


# --- configuration -----------------------------------------------------------


def test_defaults():
    lin, four, band = linear_meta_config(), fourier_meta_config(), bandit_meta_config()
    assert (lin.hidden, lin.optimizer, lin.lr, lin.batch_size, lin.T) == (64, "sgd", 1e-2, 200, 20)
    assert (four.optimizer, four.lr, four.batch_size, four.T) == ("adam", 1e-4, 200, 40)
    assert (band.hidden, band.optimizer, band.lr, band.batch_size, band.T) == (64, "adam", 1e-4, 200, 100)
    assert len(lin.checkpoints) >= 20 and lin.checkpoints[-1] == lin.budget


def test_config_validation():
    with pytest.raises(InvalidInputError):
        MetaTrainConfig("quadratic")
    with pytest.raises(InvalidInputError):
        linear_meta_config(T=0)
    with pytest.raises(InvalidInputError):
        linear_meta_config(budget=10, checkpoints=(0, 11))


# --- outer training ----------------------------------------------------------


@pytest.mark.parametrize("factory", [linear_meta_config, fourier_meta_config, bandit_meta_config])
def test_zero_update_checkpoint_is_init(factory):
    cfg = factory(budget=0, checkpoints=(0,), hidden=8, batch_size=2)
    cks = outer_train(cfg, RngStream(3))
    init = init_lstm(cks[0].params.input_size, cks[0].params.output_size, RngStream(3).derive("init"), hidden_size=8)
    assert len(cks) == 1 and cks[0].step == 0
    for k, v in init.tensors.items():
        assert np.array_equal(cks[0].params.tensors[k], v)


def test_outer_training_reduces_linear_loss():
    cfg = linear_meta_config(budget=400, checkpoints=(0, 100, 400), batch_size=32, hidden=16, optimizer="adam",
                             lr=1e-2)
    cks = outer_train(cfg, RngStream(0))
    assert cks[-1].loss < 0.8 * cks[1].loss


def test_outer_training_deterministic():
    cfg = tiny(fourier_meta_config)
    a, b = outer_train(cfg, RngStream(1)), outer_train(cfg, RngStream(1))
    for ca, cb in zip(a, b):
        assert ca.loss == cb.loss or (np.isnan(ca.loss) and np.isnan(cb.loss))
        for k in ca.params.tensors:
            assert np.array_equal(ca.params.tensors[k], cb.params.tensors[k])


@pytest.mark.parametrize("factory", [linear_meta_config, lambda **kw: bandit_meta_config(coupled=False, **kw)])
def test_resume_matches_uninterrupted(tmp_path, factory):
    full = tiny(factory, budget=6, checkpoints=(0, 3, 6), optimizer="adam", lr=1e-2)
    head = tiny(factory, budget=3, checkpoints=(0, 3), optimizer="adam", lr=1e-2)
    ref = outer_train(full, RngStream(2), run_dir=tmp_path / "a", save_every=1)
    outer_train(head, RngStream(2), run_dir=tmp_path / "b", save_every=1)
    resumed = outer_train(full, RngStream(2), run_dir=tmp_path / "b", save_every=1)
    assert [c.step for c in resumed] == [0, 3, 6]
    nets_a = ref[-1].params if isinstance(ref[-1].params, tuple) else (ref[-1].params,)
    nets_b = resumed[-1].params if isinstance(resumed[-1].params, tuple) else (resumed[-1].params,)
    for pa, pb in zip(nets_a, nets_b):
        for k in pa.tensors:
            assert np.array_equal(pa.tensors[k], pb.tensors[k])
    loaded = load_checkpoints(tmp_path / "a", full)
    assert [c.step for c in loaded] == [0, 3, 6]


def test_trained_meta_is_cached(tmp_path):
    cfg = tiny(linear_meta_config)
    first = trained_meta(cfg, seed=0, root=tmp_path, save_every=1)
    assert meta_run_dir(cfg, 0, 0, tmp_path).is_dir()
    again = trained_meta(cfg, seed=0, root=tmp_path, save_every=1)
    assert np.array_equal(first[-1].params.tensors["w_out"], again[-1].params.tensors["w_out"])


def test_untrained_bandit_reward_near_chance():
    cfg = bandit_meta_config(budget=0, checkpoints=(0,), hidden=16)
    params = outer_train(cfg, RngStream(0))[0].params
    tasks = sample_probe_tasks(cfg, 100, RngStream(1))
    traces = probe_bandit_episodes(params, tasks, RngStream(2), cfg.T)
    mean_r = np.mean([tr.behaviour["rewards"].mean() for tr in traces])
    assert mean_r == pytest.approx(0.32, abs=0.02)
    pol = np.stack([tr.payload for tr in traces])
    assert np.max(np.abs(pol - 0.2)) < 0.1


# --- probing -----------------------------------------------------------------


def test_zero_params_give_zero_matrix(rng):
    task = LinearTask(rng.normal(size=(2, 2)), 0.01)
    tr = probe_inner_linear(zero_lstm(4, 2, 8), task, rng)
    assert len(tr) == 20 and tr.payload.shape == (20, 2, 2)
    assert np.max(np.abs(tr.payload)) < 1e-12


def test_constant_net_has_only_dc(rng):
    params = zero_lstm(2, 1, 8)
    params.tensors["b_out"][:] = 0.7
    tr = probe_inner_fourier(params, FourierTask(np.ones(5), np.zeros(5)), rng)
    coeffs = analysis.fourier_coefficients(tr.payload[-1])
    assert abs(coeffs[0] - 0.7) < 1e-12 and np.max(np.abs(coeffs[1:])) < 1e-12


def test_linear_probe_reproducible_and_isolated(rng):
    params = init_lstm(4, 2, rng.derive("init"), hidden_size=16)
    task = LinearTask(rng.normal(size=(2, 2)), 0.01)
    a = probe_inner_linear(params, task, RngStream(9))
    b = probe_inner_linear(params, task, RngStream(9))
    assert np.max(np.abs(a.payload - b.payload)) < 1e-10
    # the behavioural outputs equal a plain rollout that never probes
    x, y = a.behaviour["inputs"], a.behaviour["targets"]
    inputs = np.concatenate([x, np.vstack([np.zeros((1, 2)), y[:-1]])], -1)[:, None, :]
    plain, _, _ = lstm_forward(params, inputs, keep_cache=False)
    assert np.array_equal(plain[:, 0], a.behaviour["outputs"])


def test_probe_episode_independent_of_batch(rng):
    params = init_lstm(4, 2, rng.derive("init"), hidden_size=16)
    cfg = linear_meta_config()
    tasks = sample_probe_tasks(cfg, 6, RngStream(4))
    together = probe_episodes(params, tasks, cfg, RngStream(5))
    alone = probe_episodes(params, tasks[3:4], cfg, RngStream(5), episode_ids=[3])
    np.testing.assert_allclose(alone[0].payload, together[3].payload, atol=1e-10)


def test_bandit_probe_isolated_and_fork_matches_behaviour(rng):
    params = init_lstm(11, 5, rng.derive("init"), hidden_size=16)
    task = sample_bandit_task(rng)
    tr = probe_bandit_episodes(params, [task], RngStream(8), 100)[0]
    np.testing.assert_allclose(tr.payload.sum(axis=-1), 1.0, atol=1e-9)
    # replay the same episode without any forks
    r = RngStream(8).derive("episode", 0)
    ctx = r.derive("contexts").integers(0, 5, size=100)
    u_act = r.derive("act").random(size=100)[:, None]
    u_rew = r.derive("reward").random(size=100)[:, None]
    reward_p = task.reward_probs()[ctx][:, None, :]
    logits, _, actions, rewards = bandit_rollout(params, np.eye(5)[ctx][:, None, :], reward_p, u_act, u_rew,
                                                 keep_cache=False)
    assert np.array_equal(actions[:, 0], tr.behaviour["actions"])
    assert np.array_equal(rewards[:, 0], tr.behaviour["rewards"])
    visited = tr.payload[np.arange(100), ctx]
    np.testing.assert_allclose(visited, softmax(logits[:, 0]), atol=1e-12)


def test_probe_family_mismatch(rng):
    cfg = linear_meta_config()
    with pytest.raises(InvalidInputError):
        probe_inner(zero_lstm(4, 2, 8), FourierTask(np.ones(5), np.zeros(5)), cfg, rng)
    with pytest.raises(InvalidInputError):
        probe_inner_linear(zero_lstm(2, 1, 8), LinearTask(np.eye(2)), rng)


def test_inner_csv_rows(rng):
    tr = probe_inner_linear(zero_lstm(4, 2, 8), LinearTask(np.diag([2.0, 1.0])), rng, T=3)
    assert tr.csv_header() == ["meta_run_id", "checkpoint_step", "episode_id", "t", "s_hat_1", "s_hat_2"]
    rows = list(tr.csv_rows(0, 10, 7))
    assert [r[3] for r in rows] == [1, 2, 3] and rows[0][:3] == [0, 10, 7]


# --- outer dynamics ------------------------------------------------------------


def test_sweep_untrained_is_unreached(rng):
    cfg = tiny(linear_meta_config, budget=0, checkpoints=(0,))
    cks = outer_train(cfg, rng)
    rows = outer_dynamics_sweep(cks, cfg, sample_probe_tasks(cfg, 5, rng), rng)
    assert rows == [(0, 1, None), (0, 2, None)]


def test_sweep_family_mismatch(rng):
    cfg = tiny(bandit_meta_config, budget=0, checkpoints=(0,))
    cks = outer_train(cfg, rng)
    dec = bandit_meta_config(coupled=False, hidden=8)
    with pytest.raises(InvalidInputError):
        outer_dynamics_sweep(cks, dec, sample_probe_tasks(dec, 2, rng), rng)


# --- export ------------------------------------------------------------------


@pytest.mark.parametrize("coupled", [True, False])
def test_export_import_roundtrip(tmp_path, coupled):
    cfg = tiny(bandit_meta_config, coupled=coupled)
    ck = outer_train(cfg, RngStream(0))[-1]
    export_checkpoint(tmp_path / "ck", cfg, ck)
    assert (tmp_path / "ck.bin").exists() and (tmp_path / "ck.json").exists()
    cfg2, ck2 = import_checkpoint(tmp_path / "ck.bin")
    assert cfg2 == cfg and ck2.step == ck.step
    nets_a = ck.params if isinstance(ck.params, tuple) else (ck.params,)
    nets_b = ck2.params if isinstance(ck2.params, tuple) else (ck2.params,)
    for pa, pb in zip(nets_a, nets_b):
        for k in pa.tensors:
            assert np.array_equal(pa.tensors[k], pb.tensors[k])
