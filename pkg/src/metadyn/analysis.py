"""Measurements on learning trajectories.

The same functions are applied to Learner traces, Meta-Learner inner traces
and Bayes-oracle traces; nothing here knows which produced its input.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, UndefinedModeError
from .numerics import dft_real_batch

DEFAULT_CUTOFFS = (0.5, 0.6, 0.7, 0.8, 0.9)
PROBE_POINTS = 40


def effective_spectrum(w_hat, u, v):
    """``diag(u.T @ w_hat @ v)``; ``w_hat`` may carry leading batch axes."""
    w_hat = np.ascontiguousarray(w_hat, dtype=float)  # layout-independent summation order
    if w_hat.shape[-2:] != (u.shape[0], v.shape[0]):
        raise InvalidInputError(f"w_hat shape {w_hat.shape[-2:]} does not match factors {u.shape[0]}x{v.shape[0]}")
    return np.einsum("ik,...ij,jk->...k", u, w_hat, v)


def spectrum_proportions(s_hat, s):
    """``q_k = s_hat_k / s_k``; modes with ``s_k == 0`` come back as NaN."""
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.asarray(s_hat, dtype=float) / s
    return np.where(s > 0, q, np.nan)


def probe_grid():
    """40 equispaced points covering one period, centred on zero."""
    x = np.linspace(-0.5, 0.5, PROBE_POINTS + 1)[:-1]
    return x - x.mean()


def fourier_coefficients(values):
    """DFT (k = 0..N/2) of function values sampled on :func:`probe_grid`."""
    return dft_real_batch(values)


def fourier_projection(g_hat_coeffs, g_coeffs, modes=None, phase_aware=True):
    """Normalised projection of learned Fourier coefficients onto the true ones.

    ``modes`` lists the frequency indices to project (default: every k >= 1
    with non-zero target amplitude). With ``phase_aware=False`` the ratio of
    spectral energies ``|g_hat_k|^2 / |g_k|^2`` is returned instead.
    Leading axes of ``g_hat_coeffs`` are preserved.
    """
    g_hat = np.asarray(g_hat_coeffs)
    g = np.asarray(g_coeffs)
    if g_hat.shape[-1] != g.shape[-1]:
        raise InvalidInputError("coefficient lengths differ")
    if modes is None:
        modes = [k for k in range(1, g.shape[-1]) if np.all(np.abs(g[..., k]) > 1e-12)]
    modes = list(modes)
    gk = g[..., modes]
    if np.any(np.abs(gk) <= 1e-12):
        raise UndefinedModeError("projection onto a zero-amplitude Fourier mode")
    ghk = g_hat[..., modes]
    power = np.abs(gk) ** 2
    if phase_aware:
        return np.real(ghk * np.conj(gk)) / power
    return np.abs(ghk) ** 2 / power


UNREACHED = None


def steps_to_threshold(steps, q, cutoff):
    """First step whose ``q`` is strictly above ``cutoff``; ``None`` if never.

    ``q`` may be ``[n_snapshots]`` (returns a scalar) or ``[n_snapshots, K]``
    (returns a list, one entry per column). No interpolation between snapshots.
    """
    if not 0 < cutoff < 1:
        raise InvalidInputError("cutoff must lie in (0, 1)")
    steps = np.asarray(steps)
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        hit = np.flatnonzero(q > cutoff)
        return int(steps[hit[0]]) if hit.size else UNREACHED
    return [steps_to_threshold(steps, q[:, k], cutoff) for k in range(q.shape[1])]


@dataclass
class ThresholdTable:
    """First-crossing steps per (mode, cutoff). ``None`` marks unreached."""

    modes: list
    cutoffs: tuple
    steps: dict = field(default_factory=dict)

    @classmethod
    def from_trace(cls, steps, q, cutoffs=DEFAULT_CUTOFFS, modes=None):
        q = np.asarray(q, dtype=float)
        modes = list(range(1, q.shape[1] + 1)) if modes is None else list(modes)
        table = cls(modes, tuple(cutoffs))
        for c in cutoffs:
            for m, s in zip(modes, steps_to_threshold(steps, q, c)):
                table.steps[(m, c)] = s
        return table

    def get(self, mode, cutoff):
        return self.steps[(mode, cutoff)]

    def ratio(self, num_mode, den_mode, cutoff):
        """steps[num] / steps[den], or None if either is unreached."""
        a, b = self.get(num_mode, cutoff), self.get(den_mode, cutoff)
        if a is None or b is None:
            return None
        return a / max(b, 1)

    def rows(self):
        for (m, c), s in sorted(self.steps.items(), key=lambda kv: (kv[0][1], kv[0][0])):
            yield m, c, s


def bandit_expected_reward(q, p_correct, p_incorrect):
    """Expected reward given probability ``q`` of the correct action (vectorised)."""
    q = np.asarray(q, dtype=float)
    if np.any(q < -1e-12) or np.any(q > 1 + 1e-12):
        raise InvalidInputError("q must lie in [0, 1]")
    r = q * p_correct + (1.0 - q) * p_incorrect
    return float(r) if r.ndim == 0 else r


def correct_action_probs(policies, correct_actions):
    """``q_c = pi(a*(c) | c)`` from a ``[..., K_c, K_a]`` policy table."""
    policies = np.asarray(policies)
    idx = np.arange(policies.shape[-2])
    return policies[..., idx, np.asarray(correct_actions)]


def rank_order_contexts(q_trace):
    """Sort contexts by descending time-averaged ``q_c``; ties keep nominal order.

    Returns ``(order, reordered)`` where ``reordered[:, k] = q_trace[:, order[k]]``.
    """
    q_trace = np.asarray(q_trace, dtype=float)
    avg = q_trace.mean(axis=0)
    order = np.argsort(-avg, kind="stable")
    return order, q_trace[:, order]


@dataclass
class Aggregate:
    mean: np.ndarray
    stderr: np.ndarray | None
    n: int


def aggregate(replicas, episode_axis=False):
    """Mean and standard error across replicas.

    With ``episode_axis=True`` every replica carries a leading episode axis
    that is averaged within the replica before the across-replica statistics.
    ``stderr`` is ``None`` for a single replica.
    """
    flat = [np.asarray(r, dtype=float) for r in replicas]
    if not flat:
        raise InvalidInputError("nothing to aggregate")
    if episode_axis:
        flat = [r.mean(axis=0) for r in flat]
    if any(r.shape != flat[0].shape for r in flat):
        raise InvalidInputError("replica shapes are inconsistent")
    stack = np.stack(flat)
    n = stack.shape[0]
    mean = stack.mean(axis=0)
    if n < 2:
        return Aggregate(mean, None, n)
    return Aggregate(mean, stack.std(axis=0, ddof=1) / np.sqrt(n), n)


def geometric_schedule(budget: int, dense_until: int = 100, growth: float = 1.05, start: int = 0):
    """Every step up to ``dense_until``, then multiplicative spacing; always ends at ``budget``."""
    if budget < 0:
        raise InvalidInputError("budget must be non-negative")
    steps = list(range(start, min(dense_until, budget) + 1))
    s = float(max(dense_until, 1))
    while True:
        s *= growth
        nxt = int(round(s))
        if nxt >= budget:
            break
        if nxt > steps[-1]:
            steps.append(nxt)
    if steps[-1] != budget:
        steps.append(budget)
    return steps


def log_schedule(budget: int, n_points: int = 20):
    """``n_points`` roughly geometric indices in ``[0, budget]``, always including both ends."""
    if budget <= 0:
        return [0]
    pts = np.unique(np.round(np.geomspace(1, budget, n_points - 1)).astype(int))
    return [0] + [int(p) for p in pts]


def task_progress(task, payload):
    """Per-record ``q`` matrix ``[n, K]`` for a payload stack produced on ``task``.

    Linear payloads are effective matrices, Fourier payloads are probe-grid
    values, bandit payloads are ``[n, K_c, K_a]`` policy tables.
    """
    from .numerics import svd
    from .tasks import BanditTask, FourierTask, LinearTask, eval_fourier

    payload = np.asarray(payload, dtype=float)
    if isinstance(task, LinearTask):
        u, s, v = svd(task.w)
        return spectrum_proportions(effective_spectrum(payload, u, v), s)
    if isinstance(task, FourierTask):
        g = fourier_coefficients(eval_fourier(task, probe_grid()))
        return fourier_projection(fourier_coefficients(payload), g)
    if isinstance(task, BanditTask):
        return correct_action_probs(payload, task.correct_actions)
    raise InvalidInputError(f"no progress measure for {type(task).__name__}")


def progress_from_columns(task, payload):
    """``q`` matrix from payload columns as written in trace CSVs.

    Linear traces store effective singular values rather than matrices, and
    bandit traces store flattened policy tables.
    """
    from .numerics import svd
    from .tasks import BanditTask, LinearTask

    payload = np.asarray(payload, dtype=float)
    if isinstance(task, LinearTask):
        return spectrum_proportions(payload, svd(task.w)[1])
    if isinstance(task, BanditTask):
        payload = payload.reshape(payload.shape[0], task.n_contexts, -1)
    return task_progress(task, payload)
