"""Procedural task and episode generation for the three experiment families."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .numerics import RngStream, sample_gaussian_matrix, svd

LINEAR_NOISE_STD = 0.01


@dataclass
class LinearTask:
    w: np.ndarray
    noise_std: float = LINEAR_NOISE_STD

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if not np.all(np.isfinite(self.w)):
            raise InvalidInputError("task matrix must be finite")
        if self.noise_std < 0:
            raise InvalidInputError("noise_std must be non-negative")

    @property
    def nx(self):
        return self.w.shape[1]

    @property
    def ny(self):
        return self.w.shape[0]

    def to_json(self):
        return {"w": self.w.tolist(), "noise_std": self.noise_std}

    @classmethod
    def from_json(cls, d):
        return cls(np.array(d["w"], dtype=float), float(d["noise_std"]))


@dataclass
class LinearTaskDistribution:
    """How target matrices are drawn.

    ``mode`` is one of ``matrix-normal`` (uses ``scale``), ``fixed-spectrum``
    (``spectrum``), ``uniform-spectrum`` (``s_min``/``s_max``) or
    ``fixed-task`` (``w``).
    """

    mode: str = "matrix-normal"
    nx: int = 2
    ny: int = 2
    scale: float = 1.0
    spectrum: tuple = ()
    s_min: float = 0.0
    s_max: float = 1.0
    w: np.ndarray | None = None
    noise_std: float = LINEAR_NOISE_STD

    def __post_init__(self):
        if self.mode not in ("matrix-normal", "fixed-spectrum", "uniform-spectrum", "fixed-task"):
            raise InvalidInputError(f"unknown linear task mode {self.mode!r}")
        if not self.scale > 0:
            raise InvalidInputError("scale must be positive")
        if any(s < 0 for s in self.spectrum) or self.s_min < 0 or self.s_max < self.s_min:
            raise InvalidInputError("spectra must be non-negative and ordered")
        if self.mode == "fixed-task":
            if self.w is None:
                raise InvalidInputError("fixed-task mode needs w")
            self.w = np.asarray(self.w, dtype=float)
            self.ny, self.nx = self.w.shape


def with_spectrum(w, spectrum):
    """Keep the singular vectors of ``w``, swap in ``spectrum`` (sorted descending)."""
    u, _, v = svd(w)
    s = np.sort(np.asarray(spectrum, dtype=float))[::-1]
    if s.shape[0] != u.shape[1]:
        raise InvalidInputError(f"spectrum length {s.shape[0]} != min(Nx, Ny) = {u.shape[1]}")
    return u @ np.diag(s) @ v.T


def sample_linear_task(dist: LinearTaskDistribution, rng: RngStream) -> LinearTask:
    k = min(dist.nx, dist.ny)
    if dist.mode == "fixed-task":
        return LinearTask(dist.w.copy(), dist.noise_std)
    if dist.mode == "fixed-spectrum" and len(dist.spectrum) != k:
        raise InvalidInputError(f"spectrum length {len(dist.spectrum)} != min(Nx, Ny) = {k}")
    if dist.mode == "matrix-normal":
        # entries ~ N(0, scale^2): singular values scale linearly with `scale`
        w = sample_gaussian_matrix(dist.ny, dist.nx, dist.scale, rng)
        return LinearTask(w, dist.noise_std)
    base = sample_gaussian_matrix(dist.ny, dist.nx, 1.0, rng)
    if dist.mode == "fixed-spectrum":
        spectrum = dist.spectrum
    else:
        spectrum = rng.uniform(dist.s_min, dist.s_max, size=k)
    return LinearTask(with_spectrum(base, spectrum), dist.noise_std)


@dataclass
class Episode:
    """Supervised episode: ``inputs[t]`` and ``targets[t]`` for ``t < T``."""

    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


def sample_linear_episode(task: LinearTask, T: int, rng: RngStream) -> Episode:
    if T < 1:
        raise InvalidInputError("T must be >= 1")
    x = rng.normal(size=(T, task.nx))
    y = x @ task.w.T
    if task.noise_std > 0:
        y = y + rng.normal(0.0, task.noise_std, size=(T, task.ny))
    return Episode(x, y)


# --------------------------------------------------------------------------
# Fourier regression
# --------------------------------------------------------------------------

FOURIER_NOISE_STD = 0.01


@dataclass
class FourierTask:
    amplitudes: np.ndarray
    phases: np.ndarray
    noise_std: float = FOURIER_NOISE_STD

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=float)
        self.phases = np.asarray(self.phases, dtype=float)
        if self.amplitudes.shape != self.phases.shape:
            raise InvalidInputError("amplitudes and phases must have equal length")
        if np.any(self.amplitudes < 0):
            raise InvalidInputError("amplitudes must be non-negative")

    @property
    def n_modes(self):
        return self.amplitudes.shape[0]

    def to_json(self):
        return {"amplitudes": self.amplitudes.tolist(), "phases": self.phases.tolist(), "noise_std": self.noise_std}

    @classmethod
    def from_json(cls, d):
        return cls(d["amplitudes"], d["phases"], float(d["noise_std"]))


def eval_fourier(task: FourierTask, x):
    """``sum_k a_k sin(2 pi k x + phi_k)`` for k = 1..K; ``x`` scalar or array."""
    x = np.asarray(x, dtype=float)
    k = np.arange(1, task.n_modes + 1)
    arg = 2.0 * np.pi * x[..., None] * k + task.phases
    out = np.sin(arg) @ task.amplitudes
    return float(out) if out.ndim == 0 else out


FOURIER_MODES = ("unit", "uniform", "bandpass")


def sample_fourier_task(mode: str, rng: RngStream, n_modes: int = 5, noise_std: float = FOURIER_NOISE_STD,
                        band=(3, 5)) -> FourierTask:
    """Random phases on ``[0, 2 pi)``; amplitudes per ``mode``.

    ``unit``: all ones. ``uniform``: each ``U[0, 1]``. ``bandpass``: ones on
    the inclusive ``band`` of frequencies, zero elsewhere.
    """
    if mode not in FOURIER_MODES:
        raise InvalidInputError(f"unknown fourier mode {mode!r}")
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_modes)
    if mode == "unit":
        amps = np.ones(n_modes)
    elif mode == "uniform":
        amps = rng.uniform(0.0, 1.0, size=n_modes)
    else:
        k = np.arange(1, n_modes + 1)
        amps = ((k >= band[0]) & (k <= band[1])).astype(float)
    return FourierTask(amps, phases, noise_std)


def sample_fourier_inputs(rng: RngStream, size):
    return rng.uniform(-0.5, 0.5, size=size)


def sample_fourier_episode(task: FourierTask, T: int, rng: RngStream) -> Episode:
    if T < 1:
        raise InvalidInputError("T must be >= 1")
    x = sample_fourier_inputs(rng, T)
    y = eval_fourier(task, x)
    if task.noise_std > 0:
        y = y + rng.normal(0.0, task.noise_std, size=T)
    return Episode(x[:, None], np.asarray(y)[:, None])


# --------------------------------------------------------------------------
# Contextual bandits
# --------------------------------------------------------------------------


@dataclass
class BanditTask:
    correct_actions: np.ndarray
    n_actions: int = 5
    p_correct: float = 0.8
    p_incorrect: float = 0.2

    def __post_init__(self):
        self.correct_actions = np.asarray(self.correct_actions, dtype=int)
        if not 0 <= self.p_incorrect < self.p_correct <= 1:
            raise InvalidInputError("need 0 <= p_incorrect < p_correct <= 1")
        if np.any(self.correct_actions < 0) or np.any(self.correct_actions >= self.n_actions):
            raise InvalidInputError("correct action out of range")

    @property
    def n_contexts(self):
        return self.correct_actions.shape[0]

    def reward_probs(self):
        """``[K_c, K_a]`` table of Bernoulli reward probabilities."""
        p = np.full((self.n_contexts, self.n_actions), self.p_incorrect)
        p[np.arange(self.n_contexts), self.correct_actions] = self.p_correct
        return p

    def to_json(self):
        return {
            "correct_actions": self.correct_actions.tolist(),
            "p_correct": self.p_correct,
            "p_incorrect": self.p_incorrect,
        }

    @classmethod
    def from_json(cls, d, n_actions=5):
        return cls(d["correct_actions"], n_actions, d["p_correct"], d["p_incorrect"])


def sample_bandit_task(rng: RngStream, n_contexts=5, n_actions=5, p_correct=0.8, p_incorrect=0.2,
                       conflict=True) -> BanditTask:
    """Conflict mode: distinct correct actions per context. Otherwise i.i.d. uniform."""
    if conflict:
        if n_actions < n_contexts:
            raise InvalidInputError("conflict mode needs at least as many actions as contexts")
        correct = rng.permutation(n_actions)[:n_contexts]
    else:
        correct = rng.integers(0, n_actions, size=n_contexts)
    return BanditTask(correct, n_actions, p_correct, p_incorrect)


def bandit_reward(task: BanditTask, context, action, rng: RngStream):
    """Bernoulli reward(s); vectorised over array-valued ``context``/``action``."""
    context = np.asarray(context)
    action = np.asarray(action)
    if np.any(context < 0) or np.any(context >= task.n_contexts):
        raise InvalidInputError("context out of range")
    if np.any(action < 0) or np.any(action >= task.n_actions):
        raise InvalidInputError("action out of range")
    p = np.where(action == task.correct_actions[context], task.p_correct, task.p_incorrect)
    r = (rng.random(size=p.shape) < p).astype(float)
    return float(r) if r.ndim == 0 else r


def sample_contexts(task: BanditTask, rng: RngStream, size):
    return rng.integers(0, task.n_contexts, size=size)


def task_to_json(task) -> str:
    return json.dumps(task.to_json(), sort_keys=True)


def singular_value_samples(dist: LinearTaskDistribution, n: int, rng: RngStream):
    """``[n, min(Nx, Ny)]`` descending spectra of ``n`` draws from ``dist``."""
    from .metalearners import sample_linear_batch

    return np.linalg.svd(sample_linear_batch(dist, n, rng), compute_uv=False)


def spectrum_percentiles(dist: LinearTaskDistribution, percentiles, n: int, rng: RngStream):
    """Percentiles of the pooled singular values of ``dist`` (Monte Carlo)."""
    return np.percentile(singular_value_samples(dist, n, rng).ravel(), percentiles)


def expected_spectrum(dist: LinearTaskDistribution, n: int, rng: RngStream):
    """Mean descending spectrum of ``dist`` (Monte Carlo)."""
    return singular_value_samples(dist, n, rng).mean(axis=0)
