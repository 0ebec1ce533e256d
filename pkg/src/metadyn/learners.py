"""Sample-inefficient baselines trained directly on a single task.

Each trainer returns a :class:`LearnerTrace` with one record per scheduled
snapshot. Trainers draw every minibatch from ``rng.derive("batch", step)`` so a
run is a pure function of ``(task, cfg, rng)``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import analysis
from .errors import DivergenceError, InvalidInputError
from .nets import Optimizer, effective_matrix, init_mlp, mlp_forward, mlp_l2_grad, softmax
from .numerics import RngStream, least_squares, sample_truncated_normal, svd
from .tasks import BanditTask, FourierTask, LinearTask, eval_fourier

log = logging.getLogger(__name__)

FAMILIES = ("linear-regression", "fourier-regression", "bandit-coupled", "bandit-decoupled", "lstm-control")


@dataclass
class LearnerConfig:
    family: str
    hidden: tuple = (10,)
    activation: str = "linear"
    optimizer: str = "sgd"
    lr: float = 1e-3
    batch_size: int = 100
    steps: int = 4000
    init_sigma: float | None = 0.1
    bias_sigma: float = 0.0
    snapshots: tuple | None = None
    n_probe: int = 100
    stop_at: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidInputError(f"unknown learner family {self.family!r}")
        if self.steps < 0 or (self.steps < 1 and self.family != "linear-regression"):
            raise InvalidInputError("step budget must be >= 1")
        if self.snapshots is None:
            self.snapshots = tuple(analysis.geometric_schedule(self.steps))
        snaps = list(self.snapshots)
        if snaps != sorted(snaps) or (snaps and snaps[-1] > self.steps):
            raise InvalidInputError("snapshot steps must be sorted and within the budget")
        self.snapshots = tuple(int(s) for s in snaps)


def linear_learner_config(**overrides):
    base = dict(family="linear-regression", hidden=(10,), activation="linear", optimizer="sgd", lr=1e-3,
                batch_size=100, steps=4000, init_sigma=0.1)
    base.update(overrides)
    return LearnerConfig(**base)


def relu_control_config(**overrides):
    base = dict(hidden=(10, 10), activation="relu")
    base.update(overrides)
    return linear_learner_config(**base)


def fourier_learner_config(**overrides):
    base = dict(family="fourier-regression", hidden=(256,) * 5, activation="relu", optimizer="adam", lr=1e-4,
                batch_size=40, steps=5000, init_sigma=None, bias_sigma=None)
    base.update(overrides)
    return LearnerConfig(**base)


def bandit_learner_config(coupled=True, **overrides):
    base = dict(family="bandit-coupled" if coupled else "bandit-decoupled", hidden=(), optimizer="adam", lr=1e-4,
                batch_size=200, steps=200_000, init_sigma=1.0 / np.sqrt(5.0), bias_sigma=1.0 / np.sqrt(5.0),
                stop_at=0.98)
    base.update(overrides)
    return LearnerConfig(**base)


@dataclass
class LearnerTrace:
    """Snapshots of one training run.

    ``payload`` is ``[n_snapshots, ...]``: the effective matrix for linear
    regression, probe-grid outputs for Fourier regression, or the full policy
    table ``pi[c, a]`` for bandits.
    """

    family: str
    steps: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    payload: list = field(default_factory=list)
    task: object = None
    meta: dict = field(default_factory=dict)

    def record(self, step, loss, payload):
        self.steps.append(int(step))
        self.loss.append(float(loss))
        self.payload.append(np.array(payload, dtype=float))

    @property
    def payload_array(self):
        return np.stack(self.payload)

    def progress(self):
        """Per-snapshot ``q`` matrix ``[n_snapshots, K]`` in the family's own sense."""
        if self.task is None:
            raise InvalidInputError("trace has no task attached")
        return analysis.task_progress(self.task, self.payload_array)

    def csv_header(self):
        p = self.payload_array
        if isinstance(self.task, LinearTask):
            cols = [f"s_hat_{k}" for k in range(1, min(self.task.w.shape) + 1)]
        elif isinstance(self.task, FourierTask):
            cols = [f"yprobe_{i}" for i in range(1, p.shape[1] + 1)]
        else:
            cols = [f"pi_c{c}_a{a}" for c in range(p.shape[1]) for a in range(p.shape[2])]
        return ["run_id", "step", "loss_or_reward"] + cols

    def csv_rows(self, run_id):
        p = self.payload_array
        if isinstance(self.task, LinearTask):
            u, _, v = svd(self.task.w)
            p = analysis.effective_spectrum(p, u, v)
        for step, loss, row in zip(self.steps, self.loss, p.reshape(len(self.steps), -1)):
            yield [run_id, step, loss, *row.tolist()]


def _check_finite(loss, params, trace, step):
    if not np.isfinite(loss) or not all(np.all(np.isfinite(t)) for t in params.tensors.values()):
        raise DivergenceError(f"non-finite loss or parameters at step {step}", last_good=trace)


def _init_net(sizes, activations, cfg, rng):
    params = init_mlp(sizes, activations, rng.derive("init"), sigma=cfg.init_sigma)
    if cfg.bias_sigma != 0:
        brng = rng.derive("init-bias")
        for i in range(params.n_layers):
            fan_in = sizes[i]
            s = 1.0 / np.sqrt(fan_in) if cfg.bias_sigma is None else cfg.bias_sigma
            params.tensors[f"b{i}"] = sample_truncated_normal(s, brng, size=sizes[i + 1])
    return params


def train_linear_learner(task: LinearTask, cfg: LearnerConfig, rng: RngStream) -> LearnerTrace:
    """SGD/Adam on freshly sampled ``(x, Wx + noise)`` minibatches.

    Snapshots hold the effective matrix: the exact layer product for a linear
    network, or a least-squares fit on ``cfg.n_probe`` fresh Gaussian inputs
    for the ReLU control.
    """
    if cfg.family != "linear-regression":
        raise InvalidInputError("config family must be linear-regression")
    n_layers = len(cfg.hidden) + 1
    sizes = [task.nx, *cfg.hidden, task.ny]
    acts = [cfg.activation] * (n_layers - 1) + ["linear"]
    params = _init_net(sizes, acts, cfg, rng)
    linear = cfg.activation == "linear"
    opt = Optimizer(cfg.optimizer, cfg.lr)
    trace = LearnerTrace("linear-regression", task=task, meta={"sizes": sizes, "activation": cfg.activation})
    snaps = set(cfg.snapshots)
    for step in range(cfg.steps + 1):
        brng = rng.derive("batch", step)
        x = brng.normal(size=(cfg.batch_size, task.nx))
        y = x @ task.w.T + brng.normal(0.0, task.noise_std, size=(cfg.batch_size, task.ny))
        loss, grads = mlp_l2_grad(params, x, y)
        _check_finite(loss, params, trace, step)
        if step in snaps:
            if linear:
                w_hat = effective_matrix(params)
            else:
                xp = rng.derive("probe", step).normal(size=(cfg.n_probe, task.nx))
                w_hat = least_squares(xp, mlp_forward(params, xp)[0])
            trace.record(step, loss, w_hat)
        if step < cfg.steps:
            params = opt.step(params, grads)
    trace.meta["final_params"] = params
    return trace


def train_fourier_learner(task: FourierTask, cfg: LearnerConfig, rng: RngStream) -> LearnerTrace:
    """Deep ReLU regression on ``x ~ U[-0.5, 0.5)``; snapshots hold probe-grid outputs."""
    if cfg.family != "fourier-regression":
        raise InvalidInputError("config family must be fourier-regression")
    n_layers = len(cfg.hidden) + 1
    sizes = [1, *cfg.hidden, 1]
    acts = [cfg.activation] * (n_layers - 1) + ["linear"]
    params = _init_net(sizes, acts, cfg, rng)
    opt = Optimizer(cfg.optimizer, cfg.lr)
    grid = analysis.probe_grid()[:, None]
    trace = LearnerTrace("fourier-regression", task=task, meta={"sizes": sizes})
    snaps = set(cfg.snapshots)
    for step in range(cfg.steps + 1):
        brng = rng.derive("batch", step)
        x = brng.uniform(-0.5, 0.5, size=cfg.batch_size)
        y = eval_fourier(task, x) + brng.normal(0.0, task.noise_std, size=cfg.batch_size)
        loss, grads = mlp_l2_grad(params, x[:, None], y[:, None])
        _check_finite(loss, params, trace, step)
        if step in snaps:
            trace.record(step, loss, mlp_forward(params, grid)[0][:, 0])
        if step < cfg.steps:
            params = opt.step(params, grads)
    trace.meta["final_params"] = params
    return trace


# --------------------------------------------------------------------------
# Bandits
# --------------------------------------------------------------------------


def _bandit_batch(task: BanditTask, policy, batch_size, brng: RngStream):
    """Sufficient statistics of one on-policy minibatch.

    Returns ``(visits[c], rewarded[c, a])``: how many samples landed in each
    context, and how many rewarded samples each (context, action) produced.
    Sampling is done through multinomial/binomial counts, which is
    distributionally identical to drawing the samples one by one.
    """
    kc = task.n_contexts
    visits = brng.generator.multinomial(batch_size, np.full(kc, 1.0 / kc))
    pulls = brng.generator.multinomial(visits, policy)
    rewarded = brng.generator.binomial(pulls, task.reward_probs())
    return visits, pulls, rewarded


def _normalised_reward(task, q):
    """Mean correct-action probability, i.e. expected reward rescaled to [0, 1]."""
    return float(np.mean(q))


def _run_bandit(task: BanditTask, cfg: LearnerConfig, rng: RngStream, coupled: bool) -> LearnerTrace:
    kc, ka = task.n_contexts, task.n_actions
    irng = rng.derive("init")
    if coupled:
        # logits = W c + b, with c one-hot: column c of W plus the shared bias
        tensors = {
            "w": sample_truncated_normal(cfg.init_sigma, irng, size=(ka, kc)) if cfg.init_sigma else np.zeros((ka, kc)),
            "b": sample_truncated_normal(cfg.bias_sigma, irng, size=ka) if cfg.bias_sigma else np.zeros(ka),
        }
    else:
        # one linear+softmax net per context; its single input is constant
        tensors = {
            "w": sample_truncated_normal(cfg.init_sigma, irng, size=(ka, kc)) if cfg.init_sigma else np.zeros((ka, kc)),
            "b": sample_truncated_normal(cfg.bias_sigma, irng, size=(ka, kc)) if cfg.bias_sigma else np.zeros((ka, kc)),
        }
    opt = Optimizer(cfg.optimizer, cfg.lr)
    family = "bandit-coupled" if coupled else "bandit-decoupled"
    trace = LearnerTrace(family, task=task)
    snaps = set(cfg.snapshots)
    correct = task.correct_actions
    ctx = np.arange(kc)

    def policy_table(t):
        logits = (t["w"] + t["b"][:, None]) if coupled else (t["w"] + t["b"])
        return softmax(logits.T)  # [K_c, K_a]

    stopped = False
    for step in range(cfg.steps + 1):
        pi = policy_table(tensors)
        q = pi[ctx, correct]
        reward = float(np.mean(q * task.p_correct + (1 - q) * task.p_incorrect))
        if not np.all(np.isfinite(pi)):
            raise DivergenceError(f"non-finite policy at step {step}", last_good=trace)
        done = cfg.stop_at is not None and _normalised_reward(task, q) >= cfg.stop_at
        if step in snaps or done or step == cfg.steps:
            if not trace.steps or trace.steps[-1] != step:
                trace.record(step, reward, pi)
        if done:
            stopped = True
            break
        if step == cfg.steps:
            break
        visits, _, rewarded = _bandit_batch(task, pi, cfg.batch_size, rng.derive("batch", step))
        # REINFORCE on -r log pi(a|c), summed over samples then averaged:
        # per context, d/dlogits = sum_a R_ca * (pi_c - onehot_a)
        r_tot = rewarded.sum(axis=1)
        g_logits = (r_tot[:, None] * pi - rewarded) / cfg.batch_size  # [K_c, K_a]
        if coupled:
            grads = {"w": g_logits.T, "b": g_logits.sum(axis=0)}
        else:
            grads = {"w": g_logits.T, "b": g_logits.T}
        tensors = opt.step(tensors, grads)
    trace.meta.update(stopped=stopped, final_step=trace.steps[-1])
    return trace


def train_bandit_coupled(task: BanditTask, cfg: LearnerConfig, rng: RngStream) -> LearnerTrace:
    """Single linear+softmax policy with a bias shared by all contexts, trained by REINFORCE."""
    if cfg.family != "bandit-coupled":
        raise InvalidInputError("config family must be bandit-coupled")
    return _run_bandit(task, cfg, rng, coupled=True)


def train_bandit_decoupled(task: BanditTask, cfg: LearnerConfig, rng: RngStream) -> LearnerTrace:
    """One independent linear+softmax policy per context (effectively tabular)."""
    if cfg.family != "bandit-decoupled":
        raise InvalidInputError("config family must be bandit-decoupled")
    return _run_bandit(task, cfg, rng, coupled=False)


def train_lstm_control(meta_cfg, rng: RngStream) -> LearnerTrace:
    """LSTM trained with the Meta-Learner loop on one fixed task.

    Each checkpoint contributes the function expressed at the final step of a
    probe episode on that fixed task.
    """
    from . import metalearners

    task = metalearners.fixed_task_of(meta_cfg)
    if task is None:
        raise InvalidInputError("lstm control needs a fixed-task distribution")
    checkpoints = metalearners.outer_train(meta_cfg, rng)
    trace = LearnerTrace("lstm-control", task=task)
    for ck in checkpoints:
        inner = metalearners.probe_inner(ck.params, task, meta_cfg, rng.derive("probe", ck.step))
        trace.record(ck.step, ck.loss, inner.payload[-1])
    trace.meta["checkpoints"] = checkpoints
    return trace
