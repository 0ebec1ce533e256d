"""LSTM Meta-Learners: outer training across task distributions and inner probing.

Outer training draws every minibatch from ``rng.derive("batch", step)``, so a
run can be resumed from any saved update and still reproduce the same
checkpoints. Probes run one frozen network over many episodes at once; each
episode owns the stream ``rng.derive("episode", i)`` which makes the result
independent of how episodes are chunked across workers.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .errors import DivergenceError, InvalidInputError
from .nets import (
    AdamState,
    L2Loss,
    LstmParams,
    LstmState,
    Optimizer,
    ReinforceLoss,
    init_lstm,
    load_archive,
    lstm_backward,
    lstm_forward,
    lstm_step,
    save_archive,
    softmax,
)
from .numerics import RngStream, least_squares
from .tasks import (
    BanditTask,
    FourierTask,
    LinearTask,
    LinearTaskDistribution,
    sample_bandit_task,
    sample_fourier_task,
    sample_linear_task,
)

log = logging.getLogger(__name__)

META_FAMILIES = ("linear", "fourier", "bandit-coupled", "bandit-decoupled")


@dataclass
class MetaTrainConfig:
    """Outer-training setup.

    ``task`` holds the family's distribution parameters:

    * linear: the fields of :class:`LinearTaskDistribution`
    * fourier: ``mode``, ``n_modes``, ``noise_std``, ``band``; or ``fixed`` (a task JSON)
    * bandit: ``n_contexts``, ``n_actions``, ``p_correct``, ``p_incorrect``; or ``fixed``

    ``baseline`` is ``"none"`` or ``"moving-average"`` (per-step EMA of the
    return, decay ``baseline_decay``) and only applies to bandit families.
    """

    family: str
    task: dict = field(default_factory=dict)
    T: int = 20
    batch_size: int = 200
    optimizer: str = "sgd"
    lr: float = 1e-2
    budget: int = 100_000
    checkpoints: tuple | None = None
    hidden: int = 64
    baseline: str = "none"
    baseline_decay: float = 0.99
    discount: float = 1.0

    def __post_init__(self):
        if self.family not in META_FAMILIES:
            raise InvalidInputError(f"unknown meta family {self.family!r}")
        if self.T < 1:
            raise InvalidInputError("T must be >= 1")
        if self.budget < 0:
            raise InvalidInputError("budget must be >= 0")
        if self.batch_size < 1 or self.hidden < 1:
            raise InvalidInputError("batch size and hidden size must be positive")
        if self.baseline not in ("none", "moving-average"):
            raise InvalidInputError(f"unknown baseline {self.baseline!r}")
        if self.checkpoints is None:
            self.checkpoints = tuple(analysis.log_schedule(self.budget, 20))
        cks = sorted({int(c) for c in self.checkpoints})
        if cks and (cks[0] < 0 or cks[-1] > self.budget):
            raise InvalidInputError("checkpoint indices must lie in [0, budget]")
        self.checkpoints = tuple(cks)


def linear_meta_config(**overrides):
    base = dict(family="linear", task={"mode": "matrix-normal", "nx": 2, "ny": 2, "scale": 1.0}, T=20,
                batch_size=200, optimizer="sgd", lr=1e-2, budget=100_000)
    base.update(overrides)
    return MetaTrainConfig(**base)


def fourier_meta_config(**overrides):
    base = dict(family="fourier", task={"mode": "unit", "n_modes": 5, "noise_std": 0.01}, T=40,
                batch_size=200, optimizer="adam", lr=1e-4, budget=200_000)
    base.update(overrides)
    return MetaTrainConfig(**base)


def bandit_meta_config(coupled=True, **overrides):
    base = dict(family="bandit-coupled" if coupled else "bandit-decoupled",
                task={"n_contexts": 5, "n_actions": 5, "p_correct": 0.8, "p_incorrect": 0.2}, T=100,
                batch_size=200, optimizer="adam", lr=1e-4, budget=100_000)
    base.update(overrides)
    return MetaTrainConfig(**base)


@dataclass
class MetaCheckpoint:
    """Frozen weights at one outer step.

    ``params`` is one :class:`LstmParams`, or a tuple of them (one per
    context) for the decoupled bandit family. ``loss`` is the mean outer loss
    over the updates since the previous checkpoint (NaN at step 0).
    """

    step: int
    params: object
    loss: float


@dataclass
class InnerTrace:
    """One probed episode: ``payload[t]`` for inner steps ``t = 1..T``."""

    family: str
    payload: np.ndarray
    task: object
    meta: dict = field(default_factory=dict)
    behaviour: dict = field(default_factory=dict)

    def __len__(self):
        return self.payload.shape[0]

    def progress(self):
        return analysis.task_progress(self.task, self.payload)

    def csv_header(self):
        p = self.payload
        if isinstance(self.task, LinearTask):
            cols = [f"s_hat_{k}" for k in range(1, min(self.task.w.shape) + 1)]
        elif isinstance(self.task, FourierTask):
            cols = [f"yprobe_{i}" for i in range(1, p.shape[1] + 1)]
        else:
            cols = [f"pi_c{c}_a{a}" for c in range(p.shape[1]) for a in range(p.shape[2])]
        return ["meta_run_id", "checkpoint_step", "episode_id", "t"] + cols

    def csv_rows(self, meta_run_id, checkpoint_step, episode_id):
        p = self.payload
        if isinstance(self.task, LinearTask):
            from .numerics import svd

            u, _, v = svd(self.task.w)
            p = analysis.effective_spectrum(p, u, v)
        for t, row in enumerate(p.reshape(p.shape[0], -1), start=1):
            yield [meta_run_id, checkpoint_step, episode_id, t, *row.tolist()]


# --------------------------------------------------------------------------
# Task distributions, batched
# --------------------------------------------------------------------------


def linear_distribution(cfg: MetaTrainConfig) -> LinearTaskDistribution:
    spec = dict(cfg.task)
    if "spectrum" in spec:
        spec["spectrum"] = tuple(spec["spectrum"])
    if "w" in spec and spec["w"] is not None:
        spec["w"] = np.asarray(spec["w"], dtype=float)
    return LinearTaskDistribution(**spec)


def fixed_task_of(cfg: MetaTrainConfig):
    """The single task of a fixed-task distribution, else ``None``."""
    if cfg.family == "linear":
        dist = linear_distribution(cfg)
        return LinearTask(dist.w.copy(), dist.noise_std) if dist.mode == "fixed-task" else None
    fixed = cfg.task.get("fixed")
    if fixed is None:
        return None
    if cfg.family == "fourier":
        return FourierTask.from_json(fixed)
    return BanditTask.from_json(fixed, cfg.task.get("n_actions", 5))


def sample_linear_batch(dist: LinearTaskDistribution, B: int, rng: RngStream):
    """``[B, Ny, Nx]`` target matrices drawn from ``dist``."""
    ny, nx = dist.ny, dist.nx
    if dist.mode == "fixed-task":
        return np.broadcast_to(dist.w, (B, ny, nx)).copy()
    g = rng.normal(size=(B, ny, nx))
    if dist.mode == "matrix-normal":
        return dist.scale * g
    # Gaussian singular vectors are Haar distributed; only the spectrum is swapped.
    u, _, vt = np.linalg.svd(g, full_matrices=False)
    k = min(nx, ny)
    if dist.mode == "fixed-spectrum":
        s = np.broadcast_to(np.sort(np.asarray(dist.spectrum, dtype=float))[::-1], (B, k))
    else:
        s = rng.uniform(dist.s_min, dist.s_max, size=(B, k))
    return np.einsum("bik,bk,bkj->bij", u, s, vt)


def _fourier_batch_params(cfg: MetaTrainConfig, B: int, rng: RngStream):
    spec = cfg.task
    fixed = fixed_task_of(cfg)
    if fixed is not None:
        return np.tile(fixed.amplitudes, (B, 1)), np.tile(fixed.phases, (B, 1)), fixed.noise_std
    K = int(spec.get("n_modes", 5))
    mode = spec.get("mode", "unit")
    band = tuple(spec.get("band", (3, 5)))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(B, K))
    if mode == "unit":
        amps = np.ones((B, K))
    elif mode == "uniform":
        amps = rng.uniform(0.0, 1.0, size=(B, K))
    elif mode == "bandpass":
        k = np.arange(1, K + 1)
        amps = np.tile(((k >= band[0]) & (k <= band[1])).astype(float), (B, 1))
    else:
        raise InvalidInputError(f"unknown fourier mode {mode!r}")
    return amps, phases, float(spec.get("noise_std", 0.01))


def _fourier_values(amps, phases, x):
    """``x`` is ``[..., B]``; amplitudes/phases ``[B, K]``."""
    k = np.arange(1, amps.shape[-1] + 1)
    return np.sum(amps * np.sin(2.0 * np.pi * x[..., None] * k + phases), axis=-1)


def regression_batch(cfg: MetaTrainConfig, rng: RngStream):
    """One outer minibatch: ``(inputs [T, B, nx + ny], targets [T, B, ny])``."""
    T, B = cfg.T, cfg.batch_size
    if cfg.family == "linear":
        dist = linear_distribution(cfg)
        w = sample_linear_batch(dist, B, rng.derive("tasks"))
        x = rng.derive("x").normal(size=(T, B, dist.nx))
        y = np.einsum("bij,tbj->tbi", w, x)
        noise = dist.noise_std
    elif cfg.family == "fourier":
        amps, phases, noise = _fourier_batch_params(cfg, B, rng.derive("tasks"))
        x = rng.derive("x").uniform(-0.5, 0.5, size=(T, B))
        y = _fourier_values(amps, phases, x)[..., None]
        x = x[..., None]
    else:
        raise InvalidInputError(f"{cfg.family} is not a regression family")
    if noise > 0:
        y = y + rng.derive("noise").normal(0.0, noise, size=y.shape)
    return regression_inputs(x, y), y


def regression_inputs(x, y):
    """``concat(x_t, y_{t-1})`` along the last axis with ``y_0 = 0``; time is axis 0."""
    y_prev = np.zeros_like(y)
    y_prev[1:] = y[:-1]
    return np.concatenate([x, y_prev], axis=-1)


def _io_sizes(cfg: MetaTrainConfig):
    if cfg.family == "linear":
        dist = linear_distribution(cfg)
        return dist.nx + dist.ny, dist.ny
    if cfg.family == "fourier":
        return 2, 1
    kc, ka = int(cfg.task.get("n_contexts", 5)), int(cfg.task.get("n_actions", 5))
    if cfg.family == "bandit-coupled":
        return kc + ka + 1, ka
    return ka + 1, ka


# --------------------------------------------------------------------------
# Outer training
# --------------------------------------------------------------------------


def _copy_params(params: LstmParams) -> LstmParams:
    return LstmParams(params.input_size, params.hidden_size, params.output_size,
                      {k: v.copy() for k, v in params.tensors.items()})


class _Resume:
    """Saves and restores the full training state under ``run_dir``."""

    def __init__(self, run_dir, every):
        self.dir = Path(run_dir) if run_dir is not None else None
        self.every = every
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    def load(self, params, opt, extra):
        """Returns ``(params, start_step, checkpoints, pending_losses)``."""
        if self.dir is None or not (self.dir / "latest.json").exists():
            return params, 0, [], []
        tensors, meta = load_archive(self.dir / "latest")
        p = LstmParams(params.input_size, params.hidden_size, params.output_size,
                       {k: tensors[k] for k in params.tensors})
        if opt.kind == "adam" and meta["adam_t"] > 0:
            opt.state = AdamState({k: tensors["m/" + k] for k in p.tensors},
                                  {k: tensors["v/" + k] for k in p.tensors}, meta["adam_t"])
        for k, arr in extra.items():
            arr[...] = tensors["extra/" + k]
        cks = []
        for step, loss in meta["checkpoints"]:
            t, _ = load_archive(self.dir / f"ckpt_{step:09d}")
            cks.append(MetaCheckpoint(step, LstmParams(p.input_size, p.hidden_size, p.output_size, t),
                                      float("nan") if loss is None else loss))
        log.info("resuming from update %d", meta["step"])
        return p, meta["step"], cks, list(meta["pending"])

    def checkpoint(self, ck: MetaCheckpoint):
        if self.dir is not None:
            save_archive(self.dir / f"ckpt_{ck.step:09d}", ck.params.tensors, {"step": ck.step})

    def save(self, step, params, opt, cks, pending, extra, force=False):
        if self.dir is None or (not force and step % self.every):
            return
        tensors = dict(params.tensors)
        tensors.update({"extra/" + k: v for k, v in extra.items()})
        adam_t = 0
        if opt.kind == "adam" and opt.state.m:
            adam_t = opt.state.t
            tensors.update({"m/" + k: v for k, v in opt.state.m.items()})
            tensors.update({"v/" + k: v for k, v in opt.state.v.items()})
        meta = {"step": step, "adam_t": adam_t, "pending": pending,
                "checkpoints": [[c.step, None if np.isnan(c.loss) else c.loss] for c in cks]}
        save_archive(self.dir / "latest", tensors, meta)


def _outer_loop(cfg: MetaTrainConfig, rng: RngStream, params: LstmParams, grad_fn, run_dir=None, save_every=1000):
    """Shared outer loop; ``grad_fn(params, step) -> (loss, grads)``."""
    opt = Optimizer(cfg.optimizer, cfg.lr)
    res = _Resume(run_dir, save_every)
    extra = getattr(grad_fn, "extra", {})
    params, start, cks, pending = res.load(params, opt, extra)
    schedule = set(cfg.checkpoints)
    for step in range(start, cfg.budget + 1):
        if step in schedule and not any(c.step == step for c in cks):
            ck = MetaCheckpoint(step, _copy_params(params), float(np.mean(pending)) if pending else float("nan"))
            cks.append(ck)
            res.checkpoint(ck)
            pending = []
        if step == cfg.budget:
            break
        loss, grads = grad_fn(params, step)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            raise DivergenceError(f"non-finite outer loss at update {step}", last_good=cks)
        params = opt.step(params, grads)
        pending.append(float(loss))
        res.save(step + 1, params, opt, cks, pending, extra)
    res.save(cfg.budget, params, opt, cks, pending, extra, force=True)
    return cks


def outer_train_regression(cfg: MetaTrainConfig, rng: RngStream, run_dir=None, save_every=1000):
    """Train on the mean over episodes of ``(1/T) sum_t ||y_hat_t - y_t||^2``."""
    if cfg.family not in ("linear", "fourier"):
        raise InvalidInputError("outer_train_regression needs a linear or fourier config")
    i, o = _io_sizes(cfg)
    params = init_lstm(i, o, rng.derive("init"), hidden_size=cfg.hidden)

    def grad_fn(p, step):
        inputs, targets = regression_batch(cfg, rng.derive("batch", step))
        outputs, _, cache = lstm_forward(p, inputs)
        loss, d = L2Loss(targets).value_and_grad(outputs)
        return loss, lstm_backward(p, cache, d)

    return _outer_loop(cfg, rng, params, grad_fn, run_dir, save_every)


def _sample_from(probs, u):
    """Inverse-CDF sampling of one index per row from uniforms ``u``."""
    idx = np.sum(np.cumsum(probs, axis=-1) < u[..., None], axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def bandit_rollout(params: LstmParams, ctx_onehot, reward_p, u_act, u_rew, keep_cache=True):
    """Closed-loop episode batch.

    ``ctx_onehot`` is ``[T, B, K_c]`` (``K_c`` may be 0), ``reward_p[t, b, a]``
    the reward probability of action ``a``. Returns
    ``(outputs, cache, actions, rewards)``.
    """
    T, B = u_act.shape
    ka = reward_p.shape[-1]
    inputs = np.zeros((T, B, ctx_onehot.shape[-1] + ka + 1))
    inputs[:, :, : ctx_onehot.shape[-1]] = ctx_onehot
    actions = np.zeros((T, B), dtype=int)
    rewards = np.zeros((T, B))
    rows = np.arange(B)

    def feedback(t, logits):
        a = _sample_from(softmax(logits), u_act[t])
        r = (u_rew[t] < reward_p[t, rows, a]).astype(float)
        actions[t], rewards[t] = a, r
        if t + 1 < T:
            nxt = inputs[t + 1].copy()
            nxt[:, ctx_onehot.shape[-1] :] = 0.0
            nxt[rows, ctx_onehot.shape[-1] + a] = 1.0
            nxt[:, -1] = r
            return nxt
        return None

    outputs, _, cache = lstm_forward(params, inputs, keep_cache=keep_cache, feedback=feedback)
    return outputs, cache, actions, rewards


def _returns_to_go(rewards, discount):
    g = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[1])
    for t in reversed(range(rewards.shape[0])):
        acc = rewards[t] + discount * acc
        g[t] = acc
    return g


def _bandit_episode_batch(cfg: MetaTrainConfig, brng: RngStream, decoupled: bool):
    """Tasks and all episode randomness for one outer minibatch."""
    spec = cfg.task
    kc, ka = int(spec.get("n_contexts", 5)), int(spec.get("n_actions", 5))
    pc, pi = float(spec.get("p_correct", 0.8)), float(spec.get("p_incorrect", 0.2))
    T, B = cfg.T, cfg.batch_size
    fixed = fixed_task_of(cfg)
    trng = brng.derive("tasks")
    if decoupled:
        correct = trng.integers(0, ka, size=B) if fixed is None else np.full(B, fixed.correct_actions[0])
        p = np.full((B, ka), pi)
        p[np.arange(B), correct] = pc
        reward_p = np.broadcast_to(p, (T, B, ka))
        ctx = np.zeros((T, B, 0))
    else:
        if fixed is None:
            correct = np.stack([sample_bandit_task(trng.derive(b), kc, ka, pc, pi).correct_actions for b in range(B)])
        else:
            correct = np.tile(fixed.correct_actions, (B, 1))
        table = np.full((B, kc, ka), pi)
        table[np.arange(B)[:, None], np.arange(kc)[None, :], correct] = pc
        contexts = brng.derive("contexts").integers(0, kc, size=(T, B))
        reward_p = table[np.arange(B)[None, :], contexts]
        ctx = np.eye(kc)[contexts]
    u_act = brng.derive("act").random(size=(T, B))
    u_rew = brng.derive("reward").random(size=(T, B))
    return ctx, reward_p, u_act, u_rew


def _bandit_grad_fn(cfg: MetaTrainConfig, rng: RngStream, decoupled: bool):
    baseline = np.zeros(cfg.T)

    def grad_fn(p, step):
        ctx, reward_p, u_act, u_rew = _bandit_episode_batch(cfg, rng.derive("batch", step), decoupled)
        outputs, cache, actions, rewards = bandit_rollout(p, ctx, reward_p, u_act, u_rew)
        g = _returns_to_go(rewards, cfg.discount)
        adv = g
        if cfg.baseline == "moving-average":
            adv = g - baseline[:, None]
            baseline[:] = cfg.baseline_decay * baseline + (1 - cfg.baseline_decay) * g.mean(axis=1)
        _, d = ReinforceLoss(actions, adv).value_and_grad(outputs)
        # report mean reward per step, the quantity of interest
        return float(rewards.mean()), lstm_backward(p, cache, d)

    grad_fn.extra = {"baseline": baseline}
    return grad_fn


def outer_train_bandit(cfg: MetaTrainConfig, rng: RngStream, run_dir=None, save_every=1000):
    """REINFORCE outer training; decoupled configs train one LSTM per context.

    Checkpoint ``loss`` holds the mean reward per step (higher is better).
    """
    if cfg.family not in ("bandit-coupled", "bandit-decoupled"):
        raise InvalidInputError("outer_train_bandit needs a bandit config")
    i, o = _io_sizes(cfg)
    if cfg.family == "bandit-coupled":
        params = init_lstm(i, o, rng.derive("init"), hidden_size=cfg.hidden)
        return _outer_loop(cfg, rng, params, _bandit_grad_fn(cfg, rng, False), run_dir, save_every)
    kc = int(cfg.task.get("n_contexts", 5))
    per_ctx = []
    for c in range(kc):
        crng = rng.derive("context-net", c)
        params = init_lstm(i, o, crng.derive("init"), hidden_size=cfg.hidden)
        sub = None if run_dir is None else Path(run_dir) / f"context_{c}"
        per_ctx.append(_outer_loop(cfg, crng, params, _bandit_grad_fn(cfg, crng, True), sub, save_every))
    return [MetaCheckpoint(cks[0].step, tuple(ck.params for ck in cks), float(np.mean([ck.loss for ck in cks])))
            for cks in zip(*per_ctx)]


def outer_train(cfg: MetaTrainConfig, rng: RngStream, run_dir=None, save_every=1000):
    if cfg.family in ("linear", "fourier"):
        return outer_train_regression(cfg, rng, run_dir, save_every)
    return outer_train_bandit(cfg, rng, run_dir, save_every)


def load_checkpoints(run_dir, cfg: MetaTrainConfig):
    """Checkpoints previously written by :func:`outer_train` under ``run_dir``."""
    run_dir = Path(run_dir)
    i, o = _io_sizes(cfg)

    def load_one(d):
        out = []
        for step in cfg.checkpoints:
            t, _ = load_archive(d / f"ckpt_{step:09d}")
            out.append(MetaCheckpoint(step, LstmParams(i, cfg.hidden, o, t), float("nan")))
        return out

    if cfg.family != "bandit-decoupled":
        return load_one(run_dir)
    per = [load_one(run_dir / f"context_{c}") for c in range(int(cfg.task.get("n_contexts", 5)))]
    return [MetaCheckpoint(cks[0].step, tuple(c.params for c in cks), float("nan")) for cks in zip(*per)]


# --------------------------------------------------------------------------
# Inner probing
# --------------------------------------------------------------------------


def _episode_rngs(rng: RngStream, ids):
    return [rng.derive("episode", int(i)) for i in ids]


def _probe_states(params: LstmParams, inputs):
    """Saved states before each step: ``h, c`` of shape ``[T, B, H]``."""
    _, (hs, cs), _ = lstm_forward(params, inputs, keep_cache=False)
    return hs[:-1], cs[:-1]


def _probe_outputs(params, hs, cs, probe_inputs):
    """Evaluate ``[T, B, N, I]`` probe inputs against frozen ``[T, B, H]`` states."""
    T, B, N, _ = probe_inputs.shape
    H = params.hidden_size
    h = np.broadcast_to(hs[:, :, None, :], (T, B, N, H)).reshape(-1, H)
    c = np.broadcast_to(cs[:, :, None, :], (T, B, N, H)).reshape(-1, H)
    _, y = lstm_step(params, LstmState(h, c), probe_inputs.reshape(T * B * N, -1))
    return y.reshape(T, B, N, -1)


def probe_linear_episodes(params: LstmParams, tasks, rng: RngStream, T: int, n_probe=100, episode_ids=None):
    """Vectorised :func:`probe_inner_linear` over a list of tasks."""
    ids = range(len(tasks)) if episode_ids is None else episode_ids
    rngs = _episode_rngs(rng, ids)
    nx, ny = tasks[0].nx, tasks[0].ny
    if params.input_size != nx + ny or params.output_size != ny:
        raise InvalidInputError("network does not match the linear task shape")
    xs, ys, xps = [], [], []
    for task, r in zip(tasks, rngs):
        orng = r.derive("obs")
        x = orng.normal(size=(T, nx))
        y = x @ task.w.T
        if task.noise_std > 0:
            y = y + orng.normal(0.0, task.noise_std, size=(T, ny))
        xs.append(x)
        ys.append(y)
        xps.append(r.derive("probe").normal(size=(T, n_probe, nx)))
    x = np.stack(xs, axis=1)
    y = np.stack(ys, axis=1)
    inputs = regression_inputs(x, y)
    outputs, _, _ = lstm_forward(params, inputs, keep_cache=False)
    hs, cs = _probe_states(params, inputs)
    y_prev = inputs[:, :, nx:]
    xp = np.stack(xps, axis=1)
    traces = []
    B = len(tasks)
    w_hat = np.empty((B, T, ny, nx))
    for t in range(T):
        pin = np.concatenate([xp[t : t + 1], np.broadcast_to(y_prev[t : t + 1, :, None, :], (1, B, n_probe, ny))], -1)
        yp = _probe_outputs(params, hs[t : t + 1], cs[t : t + 1], pin)[0]
        for b in range(B):
            w_hat[b, t] = least_squares(xp[t, b], yp[b])
    for b, (task, i) in enumerate(zip(tasks, ids)):
        traces.append(InnerTrace("linear", w_hat[b], task, {"episode_id": int(i)},
                                 {"inputs": x[:, b], "targets": y[:, b], "outputs": outputs[:, b]}))
    return traces


def probe_inner_linear(params: LstmParams, task: LinearTask, rng: RngStream, T: int = 20, n_probe=100):
    """Least-squares effective matrix ``W_hat_t`` read out at every inner step."""
    return probe_linear_episodes(params, [task], rng, T, n_probe)[0]


def probe_fourier_episodes(params: LstmParams, tasks, rng: RngStream, T: int, episode_ids=None):
    ids = range(len(tasks)) if episode_ids is None else episode_ids
    rngs = _episode_rngs(rng, ids)
    if params.input_size != 2 or params.output_size != 1:
        raise InvalidInputError("network does not match the fourier task shape")
    grid = analysis.probe_grid()
    xs, ys = [], []
    from .tasks import eval_fourier

    for task, r in zip(tasks, rngs):
        orng = r.derive("obs")
        x = orng.uniform(-0.5, 0.5, size=T)
        y = eval_fourier(task, x)
        if task.noise_std > 0:
            y = y + orng.normal(0.0, task.noise_std, size=T)
        xs.append(x)
        ys.append(y)
    x = np.stack(xs, axis=1)[..., None]
    y = np.stack(ys, axis=1)[..., None]
    inputs = regression_inputs(x, y)
    outputs, _, _ = lstm_forward(params, inputs, keep_cache=False)
    hs, cs = _probe_states(params, inputs)
    B, N = len(tasks), grid.shape[0]
    pin = np.concatenate([np.broadcast_to(grid[None, None, :, None], (T, B, N, 1)),
                          np.broadcast_to(inputs[:, :, None, 1:], (T, B, N, 1))], -1)
    yp = _probe_outputs(params, hs, cs, pin)[..., 0]
    return [InnerTrace("fourier", yp[:, b].copy(), task, {"episode_id": int(i)},
                       {"inputs": x[:, b, 0], "targets": y[:, b, 0], "outputs": outputs[:, b, 0]})
            for b, (task, i) in enumerate(zip(tasks, ids))]


def probe_inner_fourier(params: LstmParams, task: FourierTask, rng: RngStream, T: int = 40):
    """Frozen-state outputs on :func:`analysis.probe_grid` at every inner step."""
    return probe_fourier_episodes(params, [task], rng, T)[0]


def probe_bandit_episodes(params, tasks, rng: RngStream, T: int, episode_ids=None):
    """Behavioural rollouts with counterfactual forks over every context.

    ``params`` is one network (coupled) or a tuple with one network per
    context (decoupled). For the coupled case all contexts are evaluated from
    the same saved state as one batch and the behavioural step reuses the
    row of the visited context, so fork and behaviour agree exactly.
    """
    ids = range(len(tasks)) if episode_ids is None else episode_ids
    rngs = _episode_rngs(rng, ids)
    kc, ka = tasks[0].n_contexts, tasks[0].n_actions
    E = len(tasks)
    contexts = np.stack([r.derive("contexts").integers(0, kc, size=T) for r in rngs], axis=1)
    u_act = np.stack([r.derive("act").random(size=T) for r in rngs], axis=1)
    u_rew = np.stack([r.derive("reward").random(size=T) for r in rngs], axis=1)
    reward_p = np.stack([t.reward_probs() for t in tasks])
    policies = np.empty((T, E, kc, ka))
    actions = np.zeros((T, E), dtype=int)
    rewards = np.zeros((T, E))
    rows = np.arange(E)
    decoupled = isinstance(params, (tuple, list))
    if decoupled:
        if len(params) != kc:
            raise InvalidInputError("decoupled probe needs one network per context")
        H = params[0].hidden_size
        nets = params
        h = np.zeros((kc, E, H))
        c = np.zeros((kc, E, H))
        prev = np.zeros((kc, E, ka + 1))
        for t in range(T):
            for k in range(kc):
                _, logits = lstm_step(nets[k], LstmState(h[k], c[k]), prev[k])
                policies[t, :, k] = softmax(logits)
            ct = contexts[t]
            for k in range(kc):
                sel = ct == k
                if not sel.any():
                    continue
                st, _ = lstm_step(nets[k], LstmState(h[k][sel], c[k][sel]), prev[k][sel])
                h[k][sel], c[k][sel] = st.h, st.c
            pi = policies[t, rows, ct]
            a = _sample_from(pi, u_act[t])
            r = (u_rew[t] < reward_p[rows, ct, a]).astype(float)
            actions[t], rewards[t] = a, r
            prev[ct, rows] = 0.0
            prev[ct, rows, a] = 1.0
            prev[ct, rows, -1] = r
    else:
        if params.input_size != kc + ka + 1 or params.output_size != ka:
            raise InvalidInputError("network does not match the bandit task shape")
        H = params.hidden_size
        h = np.zeros((E, H))
        c = np.zeros((E, H))
        prev = np.zeros((E, ka + 1))
        eye = np.eye(kc)
        for t in range(T):
            fork_in = np.concatenate([np.broadcast_to(eye[None], (E, kc, kc)),
                                      np.broadcast_to(prev[:, None, :], (E, kc, ka + 1))], -1)
            st, logits = lstm_step(params, LstmState(np.repeat(h, kc, 0), np.repeat(c, kc, 0)),
                                   fork_in.reshape(E * kc, -1))
            policies[t] = softmax(logits).reshape(E, kc, ka)
            ct = contexts[t]
            pick = rows * kc + ct
            h, c = st.h[pick], st.c[pick]
            pi = policies[t, rows, ct]
            a = _sample_from(pi, u_act[t])
            r = (u_rew[t] < reward_p[rows, ct, a]).astype(float)
            actions[t], rewards[t] = a, r
            prev = np.zeros((E, ka + 1))
            prev[rows, a] = 1.0
            prev[:, -1] = r
    fam = "bandit-decoupled" if decoupled else "bandit-coupled"
    return [InnerTrace(fam, policies[:, e].copy(), task, {"episode_id": int(i)},
                       {"contexts": contexts[:, e], "actions": actions[:, e], "rewards": rewards[:, e]})
            for e, (task, i) in enumerate(zip(tasks, ids))]


def probe_inner_bandit(params, task: BanditTask, rng: RngStream, T: int = 100):
    return probe_bandit_episodes(params, [task], rng, T)[0]


def probe_episodes(params, tasks, cfg: MetaTrainConfig, rng: RngStream, episode_ids=None, n_probe=100):
    """Family dispatch for the vectorised probes."""
    if cfg.family == "linear":
        return probe_linear_episodes(params, tasks, rng, cfg.T, n_probe, episode_ids)
    if cfg.family == "fourier":
        return probe_fourier_episodes(params, tasks, rng, cfg.T, episode_ids)
    return probe_bandit_episodes(params, tasks, rng, cfg.T, episode_ids)


def probe_inner(params, task, cfg: MetaTrainConfig, rng: RngStream):
    kind = {"linear": LinearTask, "fourier": FourierTask}.get(cfg.family, BanditTask)
    if not isinstance(task, kind):
        raise InvalidInputError(f"{type(task).__name__} cannot be probed with a {cfg.family} network")
    return probe_episodes(params, [task], cfg, rng)[0]


def sample_probe_tasks(cfg: MetaTrainConfig, n: int, rng: RngStream):
    """``n`` tasks from the training distribution (for in-distribution probing)."""
    if cfg.family == "linear":
        dist = linear_distribution(cfg)
        return [sample_linear_task(dist, rng.derive("task", i)) for i in range(n)]
    if cfg.family == "fourier":
        fixed = fixed_task_of(cfg)
        if fixed is not None:
            return [fixed] * n
        spec = cfg.task
        return [sample_fourier_task(spec.get("mode", "unit"), rng.derive("task", i), int(spec.get("n_modes", 5)),
                                    float(spec.get("noise_std", 0.01)), tuple(spec.get("band", (3, 5))))
                for i in range(n)]
    spec = cfg.task
    return [sample_bandit_task(rng.derive("task", i), int(spec.get("n_contexts", 5)), int(spec.get("n_actions", 5)),
                               float(spec.get("p_correct", 0.8)), float(spec.get("p_incorrect", 0.2)))
            for i in range(n)]


def mean_progress(traces, rank_order=False):
    """Mean ``q[t, k]`` over episodes; bandit traces may be rank-ordered per episode first."""
    qs = []
    for tr in traces:
        q = tr.progress()
        if rank_order:
            q = analysis.rank_order_contexts(q)[1]
        qs.append(q)
    return np.mean(qs, axis=0)


def outer_dynamics_sweep(checkpoints, cfg: MetaTrainConfig, tasks, rng: RngStream, cutoff=0.8, modes=None):
    """Inner steps-to-threshold of the episode-mean ``q`` at every checkpoint.

    Returns rows ``(outer_step, mode, inner_step_or_None)``; modes are
    1-based, and bandit contexts are rank-ordered within each episode.
    """
    rows = []
    for ck in checkpoints:
        fam_ok = isinstance(ck.params, (tuple, list)) == (cfg.family == "bandit-decoupled")
        if not fam_ok:
            raise InvalidInputError("checkpoint does not match the configured family")
        traces = probe_episodes(ck.params, tasks, cfg, rng.derive("sweep"))
        q = mean_progress(traces, rank_order=cfg.family.startswith("bandit"))
        table = analysis.ThresholdTable.from_trace(np.arange(1, cfg.T + 1), q, (cutoff,), modes)
        for m in table.modes:
            rows.append((ck.step, m, table.get(m, cutoff)))
    return rows


def first_outer_step(rows, mode):
    """Earliest outer step at which ``mode`` reaches threshold within the episode."""
    hits = [s for s, m, inner in rows if m == mode and inner is not None]
    return min(hits) if hits else None
