"""Small deterministic numerical kernels.

Everything here works on plain ``numpy`` arrays. Matrices are 2-D float arrays,
spectra are 1-D complex arrays. Randomness flows exclusively through
:class:`RngStream`, a counter-based (Philox) generator keyed on
``(seed, stream_id)`` so that replicas can draw from disjoint streams.
"""
from __future__ import annotations

import hashlib
import math

import numpy as np

from .errors import InvalidInputError, SingularSystemError

_MASK64 = (1 << 64) - 1


def _hash64(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(repr(p).encode())
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Reproducible random stream identified by ``(seed, stream_id)``.

    Two streams with the same pair produce bit-identical sequences. Child
    streams are obtained with :meth:`derive`, which hashes a label path into
    a fresh stream id; the parent's counter is left untouched.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def derive(self, *labels) -> "RngStream":
        return RngStream(self.seed, _hash64(self.stream_id, *labels))

    # thin wrappers, so callers never reach for the global numpy state
    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def random(self, size=None):
        return self.generator.random(size)

    def permutation(self, n):
        return self.generator.permutation(n)


def _check_finite(m, name="input"):
    if not np.all(np.isfinite(m)):
        raise InvalidInputError(f"{name} contains non-finite values")


def svd(m, *, max_sweeps: int = 60):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``(u, s, v)`` with ``m == u @ diag(s) @ v.T``, ``s`` sorted
    descending. Sign convention: the first non-negligible entry of each left
    singular vector is positive; the right vector is flipped with it.
    """
    a = np.array(m, dtype=float)
    if a.ndim != 2:
        raise InvalidInputError("svd expects a 2-D matrix")
    _check_finite(a)
    rows, cols = a.shape
    if rows > 32 or cols > 32:
        raise InvalidInputError("svd is limited to matrices up to 32x32")
    if rows < cols:
        v, s, u = svd(a.T, max_sweeps=max_sweeps)
        return _fix_signs(u, s, v)

    n = cols
    work = a.copy()
    v = np.eye(n)
    eps = np.finfo(float).eps
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                x, y = work[:, p], work[:, q]
                alpha = x @ x
                beta = y @ y
                gamma = x @ y
                if abs(gamma) <= eps * math.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
                c = 1.0 / math.sqrt(1.0 + t * t)
                sn = c * t
                wp = work[:, p].copy()
                work[:, p] = c * wp - sn * work[:, q]
                work[:, q] = sn * wp + c * work[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - sn * v[:, q]
                v[:, q] = sn * vp + c * v[:, q]
        if not rotated:
            break

    s = np.sqrt(np.einsum("ij,ij->j", work, work))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    work = work[:, order]
    v = v[:, order]

    tiny = max(rows, cols) * eps * (s[0] if n else 0.0)
    u = np.zeros((rows, n))
    for j in range(n):
        if s[j] > tiny:
            u[:, j] = work[:, j] / s[j]
        else:
            s[j] = 0.0
            u[:, j] = _complete_basis(u[:, :j], rows)
    return _fix_signs(u, s, v)


def _complete_basis(basis, dim):
    # Gram-Schmidt a unit vector orthogonal to the existing columns.
    for e in np.eye(dim):
        r = e - basis @ (basis.T @ e)
        r = r - basis @ (basis.T @ r)
        nrm = np.linalg.norm(r)
        if nrm > 1e-6:
            return r / nrm
    raise SingularSystemError("could not complete orthonormal basis")


def _fix_signs(u, s, v):
    u = u.copy()
    v = v.copy()
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            v[:, j] = -v[:, j]
    return u, s, v


def _dft_matrix(n):
    k = np.arange(n // 2 + 1)[:, None]
    idx = np.arange(n)[None, :]
    return np.exp(-2j * np.pi * k * idx / n)


def dft_real(signal):
    """Direct DFT of a real, even-length signal, normalised by ``1/N``.

    Returns coefficients ``k = 0..N/2``.
    """
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1:
        raise InvalidInputError("dft_real expects a 1-D signal")
    n = x.shape[0]
    if n < 2 or n % 2:
        raise InvalidInputError(f"signal length must be even and >= 2, got {n}")
    return _dft_matrix(n) @ x / n


def dft_real_batch(signals):
    """Row-wise :func:`dft_real` for a ``(..., N)`` array."""
    x = np.asarray(signals, dtype=float)
    n = x.shape[-1]
    if n < 2 or n % 2:
        raise InvalidInputError(f"signal length must be even and >= 2, got {n}")
    return x @ _dft_matrix(n).T / n


def idft_real(coeffs, n: int):
    """Inverse of :func:`dft_real` for a length-``n`` real signal."""
    c = np.asarray(coeffs, dtype=complex)
    if c.shape[0] != n // 2 + 1:
        raise InvalidInputError("coefficient count does not match n")
    idx = np.arange(n)
    out = np.full(n, c[0].real)
    for k in range(1, n // 2):
        out += 2.0 * np.real(c[k] * np.exp(2j * np.pi * k * idx / n))
    out += c[n // 2].real * np.cos(np.pi * idx)
    return out


def sample_gaussian_matrix(rows: int, cols: int, scale: float, rng: RngStream):
    if not scale > 0:
        raise InvalidInputError("scale must be positive")
    return rng.normal(0.0, scale, size=(rows, cols))


def sample_truncated_normal(sigma: float, rng: RngStream, bound: float | None = None, size=None):
    """Normal(0, sigma^2) draws restricted to ``|x| <= bound`` by resampling.

    ``bound`` defaults to ``2 * sigma``. Returns a float when ``size`` is None.
    """
    if not sigma > 0:
        raise InvalidInputError("sigma must be positive")
    if bound is None:
        bound = 2.0 * sigma
    shape = () if size is None else size
    out = rng.normal(0.0, sigma, size=shape)
    out = np.asarray(out, dtype=float)
    bad = np.abs(out) > bound
    while np.any(bad):
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return float(out) if size is None else out


def least_squares(x, y):
    """Solve ``min_W sum_n ||y_n - W x_n||^2``.

    ``x`` is ``[N, Nx]`` and ``y`` is ``[N, Ny]``; returns ``W`` as ``[Ny, Nx]``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise InvalidInputError("x and y must share the sample dimension")
    n, nx = x.shape
    if n < nx:
        raise SingularSystemError(f"need at least {nx} samples, got {n}")
    sol, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    if rank < nx:
        raise SingularSystemError("design matrix is rank deficient")
    return sol.T
