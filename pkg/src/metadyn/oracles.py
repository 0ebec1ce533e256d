"""Exact Bayes-optimal baselines for the three task families."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import analysis
from .errors import InvalidInputError
from .tasks import BanditTask, FourierTask, LinearTask

GRID_BUDGET = 10**7


@dataclass
class PosteriorSummary:
    """Posterior mean after ``t`` observations.

    ``mean`` is a ``[Ny, Nx]`` matrix (linear), probe-grid values (Fourier)
    or a ``[K_c, K_a]`` table of per-context probabilities that each arm is
    the correct one (bandit).
    """

    mean: np.ndarray
    t: int
    precision: np.ndarray | None = None
    weights: np.ndarray | None = None


def bayes_linear_posterior(x_obs, y_obs, noise_var: float) -> PosteriorSummary:
    """Conjugate posterior mean for ``y = W x + noise`` under a standard matrix-normal prior.

    ``x_obs`` is ``[t, Nx]`` and ``y_obs`` ``[t, Ny]``; the mean is returned in
    the ``[Ny, Nx]`` orientation of ``W``.
    """
    if not noise_var > 0:
        raise InvalidInputError("noise variance must be positive")
    x = np.asarray(x_obs, dtype=float)
    y = np.asarray(y_obs, dtype=float)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise InvalidInputError("x_obs and y_obs must be [t, Nx] and [t, Ny] with equal t")
    lam = x.T @ x + noise_var * np.eye(x.shape[1])
    return PosteriorSummary(np.ascontiguousarray(np.linalg.solve(lam, x.T @ y).T), x.shape[0], precision=lam)


def linear_oracle_trace(task: LinearTask, x, y, noise_var=None):
    """Posterior means after ``t = 0..T`` observations: ``[T + 1, Ny, Nx]``."""
    noise_var = task.noise_std**2 if noise_var is None else noise_var
    return np.stack([bayes_linear_posterior(x[:t], y[:t], noise_var).mean for t in range(x.shape[0] + 1)])


def phase_grid(bins: int):
    """Bin centres on ``[0, 2 pi)``."""
    return (np.arange(bins) + 0.5) * (2.0 * np.pi / bins)


class FourierGridPosterior:
    """Enumerated posterior over phase vectors on a ``bins ** K`` grid.

    Amplitudes are known. Log-weights are updated one observation at a time;
    the posterior mean function follows from the per-mode marginals because
    the function is a sum of single-mode terms.
    """

    def __init__(self, amplitudes, noise_var: float, bins: int = 16):
        self.amplitudes = np.asarray(amplitudes, dtype=float)
        K = self.amplitudes.shape[0]
        if bins**K > GRID_BUDGET:
            raise InvalidInputError(f"grid of {bins}^{K} hypotheses exceeds the enumeration budget")
        if not noise_var > 0:
            raise InvalidInputError("noise variance must be positive")
        self.K, self.bins, self.noise_var = K, bins, noise_var
        self.phases = phase_grid(bins)
        self.logw = np.zeros((bins,) * K)
        self.t = 0

    def _mode_values(self, x):
        """``[K, bins]`` contributions of each mode at ``x`` for every phase bin."""
        k = np.arange(1, self.K + 1)
        return self.amplitudes[:, None] * np.sin(2.0 * np.pi * k[:, None] * x + self.phases[None, :])

    def observe(self, x, y):
        vals = self._mode_values(float(x))
        g = np.zeros(self.logw.shape)
        for k in range(self.K):
            shape = [1] * self.K
            shape[k] = self.bins
            g = g + vals[k].reshape(shape)
        self.logw -= (float(y) - g) ** 2 / (2.0 * self.noise_var)
        self.t += 1

    def weights(self):
        w = np.exp(self.logw - self.logw.max())
        return w / w.sum()

    def marginals(self):
        """``[K, bins]`` posterior marginal over each mode's phase bin."""
        w = self.weights()
        axes = tuple(range(self.K))
        return np.stack([w.sum(axis=tuple(a for a in axes if a != k)) for k in range(self.K)])

    def mean_function(self, x):
        x = np.asarray(x, dtype=float)
        marg = self.marginals()
        k = np.arange(1, self.K + 1)
        s = np.sin(2.0 * np.pi * k[:, None, None] * x[None, None, :] + self.phases[None, :, None])
        return np.einsum("k,kb,kbx->x", self.amplitudes, marg, s)

    def summary(self, x=None):
        x = analysis.probe_grid() if x is None else x
        return PosteriorSummary(self.mean_function(x), self.t)


def bayes_fourier_posterior_mean(observations, amplitudes, noise_var: float, bins: int = 16, x=None):
    """Posterior mean function on ``x`` (default the probe grid) after ``observations``."""
    post = FourierGridPosterior(amplitudes, noise_var, bins)
    for xo, yo in observations:
        post.observe(xo, yo)
    out = post.summary(x)
    out.weights = post.weights()
    return out


def fourier_oracle_trace(task: FourierTask, x, y, noise_var=None, bins=16):
    """Posterior means on the probe grid after ``t = 0..T`` observations."""
    noise_var = task.noise_std**2 if noise_var is None else noise_var
    post = FourierGridPosterior(task.amplitudes, noise_var, bins)
    grid = analysis.probe_grid()
    out = [post.mean_function(grid)]
    for xo, yo in zip(x, y):
        post.observe(xo, yo)
        out.append(post.mean_function(grid))
    return np.stack(out)


def bin_center_task(rng, n_modes=5, bins=16, noise_std=0.01, amplitudes=None):
    """Unit-amplitude Fourier task whose phases sit exactly on grid bin centres."""
    amps = np.ones(n_modes) if amplitudes is None else np.asarray(amplitudes, dtype=float)
    return FourierTask(amps, phase_grid(bins)[rng.integers(0, bins, size=n_modes)], noise_std)


def bayes_bandit_posterior(history, n_contexts: int, n_actions: int, p_correct=0.8, p_incorrect=0.2):
    """Per-context posterior over which arm is correct, from a ``[(c, a, r)]`` history.

    The prior is uniform and independent across contexts, so each context's
    posterior only uses that context's observations.
    """
    logp = np.zeros((n_contexts, n_actions))
    lc = (np.log(p_correct), np.log1p(-p_correct) if p_correct < 1 else -np.inf)
    li = (np.log(p_incorrect) if p_incorrect > 0 else -np.inf, np.log1p(-p_incorrect))
    for c, a, r in history:
        if not (0 <= c < n_contexts and 0 <= a < n_actions and r in (0, 1, 0.0, 1.0)):
            raise InvalidInputError(f"invalid history entry {(c, a, r)}")
        hit = lc[0] if r else lc[1]
        miss = li[0] if r else li[1]
        row = np.full(n_actions, miss)
        row[a] = hit
        logp[c] += row
    with np.errstate(invalid="ignore"):
        m = logp.max(axis=1, keepdims=True)
        p = np.exp(logp - m)
    p /= p.sum(axis=1, keepdims=True)
    return PosteriorSummary(p, len(history))


def bandit_oracle_trace(task: BanditTask, contexts, actions, rewards):
    """Posterior tables after ``t = 0..T`` steps of a given behavioural history."""
    hist = list(zip(np.asarray(contexts).tolist(), np.asarray(actions).tolist(), np.asarray(rewards).tolist()))
    return np.stack([bayes_bandit_posterior(hist[:t], task.n_contexts, task.n_actions, task.p_correct,
                                            task.p_incorrect).mean for t in range(len(hist) + 1)])

