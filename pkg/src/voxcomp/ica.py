"""Blind decomposition of voxel time series into temporal patterns.

The (n_voxels, T) series matrix is factored as ``maps @ patterns`` where the
K rows of ``patterns`` are temporal activation courses and ``maps`` holds
the per-voxel loadings.  Whitening diagonalizes the T-by-T covariance over
voxels, which yields a rank-k temporal basis; the symmetric fixed-point
iteration with a tanh contrast then rotates that basis until the pattern
rows are maximally independent across time.  Distinct stimulus-driven
courses are non-Gaussian and mutually independent, which is exactly the
regime where this rotation identifies them.

Scale and sign indeterminacies are fixed so results are reproducible: each
pattern row is normalized to unit sample variance and flipped so its
largest-magnitude sample is positive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LengthMismatch, RankDeficient

_EIG_TOL = 1e-10  # relative eigenvalue floor for usable directions


@dataclass
class Whitener:
    """Linear maps between series space and the whitened coordinates."""

    forward: np.ndarray       # (k, T): whitened = centered @ forward.T
    backward: np.ndarray      # (T, k): centered ~= whitened @ backward.T
    mean_series: np.ndarray   # (T,) column means removed before projection
    eigenvalues: np.ndarray   # all covariance eigenvalues, descending


@dataclass
class IcaDecomposition:
    """K temporal patterns plus per-voxel mixing coefficients."""

    patterns: np.ndarray      # (K, T), unit-variance rows
    maps: np.ndarray          # (n_voxels, K)
    mean_series: np.ndarray   # (T,)
    whitener: np.ndarray      # (K, T) projection used
    non_converged: bool = False
    n_iter: int = 0

    @property
    def k(self) -> int:
        return self.patterns.shape[0]

    @property
    def n_frames(self) -> int:
        return self.patterns.shape[1]

    def reconstruct(self) -> np.ndarray:
        """Rank-K approximation of the centered input, shape (n_voxels, T)."""
        return self.maps @ self.patterns + self.mean_series


def whiten(series: np.ndarray, k: int) -> tuple[np.ndarray, Whitener]:
    """Project the series onto k uncorrelated, unit-variance coordinates.

    The sample covariance of the output (with the 1/n convention over the
    voxel dimension) is the identity.  Raises :class:`RankDeficient` when the
    temporal covariance has fewer than k non-negligible eigenvalues.
    """
    series = np.asarray(series, dtype=np.float64)
    n, t = series.shape
    if not 1 <= k <= min(n, t):
        raise ValueError(f"k={k} must lie in [1, min(n={n}, T={t})]")

    mean_series = series.mean(axis=0)
    centered = series - mean_series
    cov = centered.T @ centered / n
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]

    if eigvals[k - 1] <= _EIG_TOL * max(eigvals[0], 0.0):
        usable = int(np.sum(eigvals > _EIG_TOL * max(eigvals[0], 0.0)))
        raise RankDeficient(f"requested {k} components, covariance supports {usable}")

    scales = np.sqrt(eigvals[:k])
    forward = (eigvecs[:, :k] / scales).T          # (k, T)
    backward = eigvecs[:, :k] * scales              # (T, k)
    whitened = centered @ forward.T                 # (n, k)
    return whitened, Whitener(forward, backward, mean_series, eigvals)


def _sym_orth(w: np.ndarray) -> np.ndarray:
    """Symmetric orthogonalization (W W^T)^{-1/2} W."""
    vals, vecs = np.linalg.eigh(w @ w.T)
    return vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T @ w


def fast_ica(
    series: np.ndarray,
    k: int,
    tol: float = 1e-4,
    max_iter: int = 500,
    seed: int = 0,
) -> IcaDecomposition:
    """Symmetric fixed-point decomposition with tanh contrast.

    The temporal courses are the independent sources: the rank-k time basis
    from whitening is rotated so the resulting patterns are maximally
    independent across time samples.  All k rotation rows are updated in
    parallel and re-orthogonalized each step; iteration stops when the
    largest per-row rotation drops below ``tol``.  If ``max_iter`` is
    exhausted first the result is still returned with ``non_converged`` set.

    Callers normally pass temporally centered series (mean-frame residuals);
    the across-voxel mean series is removed internally either way.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if tol <= 0:
        raise ValueError("tol must be positive")

    series = np.asarray(series, dtype=np.float64)
    _, wh = whiten(series, k)
    n, t = series.shape
    centered = series - wh.mean_series

    # orthonormal time basis of the top-k subspace, scaled to unit power
    basis = (wh.backward / np.sqrt(wh.eigenvalues[:k])).T * np.sqrt(t)  # (k, T)
    basis = basis - basis.mean(axis=1, keepdims=True)
    cov = basis @ basis.T / t
    vals, vecs = np.linalg.eigh(cov)
    if vals[0] <= _EIG_TOL * vals[-1]:
        raise RankDeficient("time basis collapsed after centering")
    sources = vecs @ np.diag(1.0 / np.sqrt(vals)) @ vecs.T @ basis      # white

    rng = np.random.default_rng(seed)
    w = _sym_orth(rng.normal(size=(k, k)))

    non_converged = True
    it = 0
    for it in range(1, max_iter + 1):
        y = w @ sources                   # (k, T) pattern estimates
        g = np.tanh(y)
        g_prime = 1.0 - g ** 2
        w_new = _sym_orth(g @ sources.T / t - g_prime.mean(axis=1)[:, None] * w)
        rotation = np.max(np.abs(1.0 - np.abs(np.sum(w_new * w, axis=1))))
        w = w_new
        if rotation < tol:
            non_converged = False
            break

    patterns = w @ sources                # (k, T) zero-mean rows

    # fix scale: unit-variance pattern rows
    stds = patterns.std(axis=1)
    stds[stds == 0] = 1.0
    patterns = patterns / stds[:, None]
    # fix sign: largest-magnitude sample of each pattern row is positive
    peaks = np.abs(patterns).argmax(axis=1)
    signs = np.sign(patterns[np.arange(k), peaks])
    signs[signs == 0] = 1.0
    patterns = patterns * signs[:, None]

    # per-voxel loadings by least squares against the centered input
    gram = patterns @ patterns.T
    maps = centered @ patterns.T @ np.linalg.inv(gram)

    return IcaDecomposition(
        patterns=patterns,
        maps=maps,
        mean_series=wh.mean_series,
        whitener=wh.forward,
        non_converged=non_converged,
        n_iter=it,
    )


def components_for_init(decomp: IcaDecomposition, t_target: int) -> np.ndarray:
    """Pattern matrix ready to copy into a (K, t_target) learnable bank."""
    if decomp.n_frames != t_target:
        raise LengthMismatch(
            f"decomposition has T={decomp.n_frames}, bank needs T={t_target}"
        )
    return decomp.patterns.copy()


def amari_index(mixing_true: np.ndarray, mixing_est: np.ndarray) -> float:
    """Permutation/scale-invariant distance between two mixing matrices.

    Zero iff the estimated mixing equals the true one up to permutation and
    scaling of columns; useful as an oracle on problems with known mixing.
    """
    g = np.abs(np.linalg.pinv(mixing_est) @ mixing_true)
    k = g.shape[0]
    row = (g.sum(axis=1) / g.max(axis=1) - 1.0).sum()
    col = (g.sum(axis=0) / g.max(axis=0) - 1.0).sum()
    return float((row + col) / (2.0 * k * (k - 1)))
