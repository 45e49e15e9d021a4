"""Isotropic and directed anisotropic diffusion maps.

The directed kernel multiplies the Gaussian kernel by a penalty on the
displacement component aligned with a local drift direction::

    k(x, y) = exp(-|x - y|^2 / eps - <grad f(x), x - y>^2 / eps^2)

where ``-grad f`` is estimated from the data as a central-difference
velocity.  Rows of the kernel are normalized by their sums to give a
Markov matrix whose leading eigenpairs define the embedding
``Phi_i = lambda_i * phi_i``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from .ingest import TimeSeriesMatrix

log = logging.getLogger(__name__)

GRADIENT_SOURCES = ("finite-difference-of-data", "explicit-field")
IMAG_TOL = 1e-8
EIGENVALUE_FLOOR = 1e-10


class EigenSolveError(RuntimeError):
    """Raised when the eigenproblem has no usable real solution."""

    def __init__(self, message: str, pair_index: Optional[int] = None):
        super().__init__(message)
        self.pair_index = pair_index


@dataclass(frozen=True)
class KernelConfig:
    epsilon: float = 1.0
    directed: bool = False
    gradient_source: str = "finite-difference-of-data"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.gradient_source not in GRADIENT_SOURCES:
            raise ValueError(f"unknown gradient_source {self.gradient_source!r}")

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "directed": self.directed,
            "gradient_source": self.gradient_source,
        }


@dataclass(frozen=True)
class DriftField:
    """Velocity estimates ``-grad f`` at each sample, one row per time point."""

    vectors: np.ndarray

    def __post_init__(self):
        v = np.array(self.vectors, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if not np.all(np.isfinite(v)):
            raise ValueError("drift field contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def gradient(self) -> np.ndarray:
        """The potential gradient ``grad f`` (the negated velocity)."""
        return -self.vectors


def estimate_drift(ts: TimeSeriesMatrix) -> DriftField:
    """Finite-difference velocity of the series.

    Interior rows use ``(x[i+1] - x[i-1]) / (2 dt)``; the first and last rows
    use one-sided differences so that every sample keeps a drift vector.
    """
    x = ts.data
    v = np.empty_like(x)
    v[1:-1] = (x[2:] - x[:-2]) / (2.0 * ts.dt)
    v[0] = (x[1] - x[0]) / ts.dt
    v[-1] = (x[-1] - x[-2]) / ts.dt
    return DriftField(v)


def _cross_kernel(x, y, epsilon, gradient=None):
    """Kernel between rows of `x` (sources, carrying the gradient) and rows of `y`."""
    expo = cdist(x, y, "sqeuclidean") / epsilon
    if gradient is not None:
        # <g_i, x_i - y_j> for every pair
        proj = np.einsum("ij,ij->i", gradient, x)[:, None] - gradient @ y.T
        expo += proj**2 / epsilon**2
    return np.exp(-expo)


def kernel_matrix(
    ts: TimeSeriesMatrix, cfg: KernelConfig, drift: Optional[DriftField] = None
) -> np.ndarray:
    """Dense N x N kernel; symmetric unless ``cfg.directed``.  The diagonal is exactly 1."""
    x = ts.data
    gradient = None
    if cfg.directed:
        if drift is None:
            raise ValueError("a directed kernel needs a drift field")
        if drift.vectors.shape != x.shape:
            raise ValueError(
                f"drift field shape {drift.vectors.shape} does not match data shape {x.shape}"
            )
        gradient = drift.gradient
    K = _cross_kernel(x, x, cfg.epsilon, gradient)
    np.fill_diagonal(K, 1.0)
    return K


def markov_normalize(K: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize a positive kernel; returns ``(P, degrees)``."""
    K = np.asarray(K, dtype=float)
    degrees = K.sum(axis=1)
    if np.any(degrees <= 0) or not np.all(np.isfinite(degrees)):
        row = int(np.nonzero(~(degrees > 0))[0][0])
        raise ValueError(f"kernel row {row} has non-positive sum")
    return K / degrees[:, None], degrees


@dataclass(frozen=True)
class DiffusionEmbedding:
    """Leading eigenpairs of the Markov matrix and the diffusion coordinates.

    ``eigenvalues[0]`` is the stationary eigenvalue 1 with the constant
    eigenvector; ``coordinates`` starts at the first nontrivial pair, so column
    ``j`` equals ``eigenvalues[j + offset] * eigenvectors[:, j + offset]``.
    Eigenvectors are scaled to unit root-mean-square.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    coordinates: np.ndarray
    config: KernelConfig
    training_data: Optional[TimeSeriesMatrix] = field(default=None, repr=False)
    kernel_degrees: Optional[np.ndarray] = field(default=None, repr=False)
    offset: int = 1

    @property
    def nontrivial_eigenvalues(self) -> np.ndarray:
        return self.eigenvalues[self.offset :]

    @property
    def n_coordinates(self) -> int:
        return self.coordinates.shape[1]


def _is_symmetric(M: np.ndarray, tol: float = 1e-12) -> bool:
    return M.shape[0] == M.shape[1] and np.allclose(M, M.T, rtol=0.0, atol=tol)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def _rms_normalize(vectors: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(vectors**2, axis=0))
    return vectors / rms


def _pin_stationary(values, vectors, weights):
    """Make the first eigenvector the stationary (constant) one.

    `vectors` are orthonormal in the inner product weighted by `weights`;
    within the eigenspace of eigenvalue 1 the constant direction is put first
    and the remainder re-orthonormalized.
    """
    top = np.nonzero(np.abs(values - 1.0) < 1e-9)[0]
    if top.size == 0:
        return values, vectors
    n = vectors.shape[0]
    basis = vectors[:, top]
    ones = np.ones(n) / np.sqrt(np.sum(weights))
    coef = basis.T @ (weights * ones)
    if np.linalg.norm(coef) < 0.5:
        return values, vectors
    rest = [ones]
    for j in range(basis.shape[1]):
        v = basis[:, j].copy()
        for u in rest:
            v -= (u @ (weights * v)) * u
        nrm = np.sqrt(v @ (weights * v))
        if nrm > 1e-8 and len(rest) < top.size:
            rest.append(v / nrm)
    vectors = vectors.copy()
    vectors[:, top] = np.column_stack(rest[: top.size])
    return values, vectors


def spectral_embedding(
    P: np.ndarray,
    n_components: int,
    cfg: KernelConfig,
    degrees: Optional[np.ndarray] = None,
    training_data: Optional[TimeSeriesMatrix] = None,
) -> DiffusionEmbedding:
    """Leading `n_components` eigenpairs of a row-stochastic matrix.

    With a symmetric kernel (`degrees` given and ``cfg.directed`` false, or a
    symmetric `P`) the eigenpairs come from the symmetric matrix
    ``D^(1/2) P D^(-1/2)``; otherwise a general eigensolver is used and pairs
    whose imaginary part exceeds 1e-8 relative magnitude raise
    :class:`EigenSolveError`.
    """
    P = np.asarray(P, dtype=float)
    N = P.shape[0]
    if P.ndim != 2 or P.shape[1] != N:
        raise ValueError(f"P must be square, got shape {P.shape}")
    if not 1 <= n_components <= N:
        raise ValueError(f"need 1 <= n_components <= N={N}, got {n_components}")

    if degrees is not None and not cfg.directed:
        d = np.asarray(degrees, dtype=float)
        sq = np.sqrt(d)
        S = sq[:, None] * P / sq[None, :]
        S = 0.5 * (S + S.T)
        values, psi = _eigh(S)
        vectors = psi / sq[:, None]
        values, vectors = _pin_stationary(values, vectors, d)
    elif _is_symmetric(P):
        values, vectors = _eigh(P)
        values, vectors = _pin_stationary(values, vectors, np.ones(N))
    else:
        values, vectors = _eig_general(P, n_components)

    order = _descending_order(values)
    values = values[order][:n_components]
    vectors = vectors[:, order][:, :n_components]
    vectors = _fix_signs(_rms_normalize(vectors))

    offset = _stationary_offset(values, vectors)
    coords = values[offset:] * vectors[:, offset:]
    return DiffusionEmbedding(
        eigenvalues=values,
        eigenvectors=vectors,
        coordinates=coords,
        config=cfg,
        training_data=training_data,
        kernel_degrees=None if degrees is None else np.asarray(degrees, dtype=float),
        offset=offset,
    )


def _eigh(S):
    try:
        return np.linalg.eigh(S)
    except np.linalg.LinAlgError as exc:
        raise EigenSolveError(f"symmetric eigensolver failed to converge: {exc}") from exc


def _eig_general(P, n_components):
    try:
        values, vectors = np.linalg.eig(P)
    except np.linalg.LinAlgError as exc:
        raise EigenSolveError(f"eigensolver failed to converge: {exc}") from exc
    order = _descending_order(values)
    for rank, j in enumerate(order[:n_components]):
        lam = values[j]
        if abs(lam.imag) > IMAG_TOL * max(abs(lam), 1e-300):
            raise EigenSolveError(
                f"eigenpair {rank} is complex (lambda = {lam:.6g})", pair_index=rank
            )
        vec = vectors[:, j]
        # A real eigenvalue's eigenvector is real up to a complex phase.
        k = np.argmax(np.abs(vec))
        vec = vec * (abs(vec[k]) / vec[k])
        if np.linalg.norm(vec.imag) > IMAG_TOL * np.linalg.norm(vec):
            raise EigenSolveError(f"eigenvector {rank} is complex", pair_index=rank)
        vectors[:, j] = vec
    return values.real, vectors.real


def _descending_order(values):
    # stable sort on -|lambda|, ties broken by larger real part first; magnitudes
    # are rounded so that rounding noise does not decide ties on the unit circle
    return np.lexsort((-np.real(values), -np.round(np.abs(values), 12)))


def _stationary_offset(values, vectors) -> int:
    """1 when the leading pair is the stationary one (lambda = 1, constant vector), else 0."""
    v0 = vectors[:, 0]
    if abs(values[0] - 1.0) < 1e-9 and np.ptp(v0) <= 1e-6 * np.max(np.abs(v0)):
        return 1
    return 0


def diffusion_map(
    ts: TimeSeriesMatrix,
    cfg: KernelConfig,
    n_components: int = 10,
    drift: Optional[DriftField] = None,
) -> DiffusionEmbedding:
    """Kernel, normalization and eigendecomposition in one call."""
    if cfg.directed and drift is None:
        if cfg.gradient_source == "explicit-field":
            raise ValueError("gradient_source 'explicit-field' requires a drift field")
        drift = estimate_drift(ts)
    K = kernel_matrix(ts, cfg, drift)
    P, degrees = markov_normalize(K)
    n_components = min(n_components, ts.n_points - 1)
    return spectral_embedding(P, n_components, cfg, degrees, ts)


def kernel_summary(K: np.ndarray, P: np.ndarray, embedding: DiffusionEmbedding) -> dict:
    return {
        "max_row_sum_error": float(np.max(np.abs(P.sum(axis=1) - 1.0))),
        "symmetric": bool(_is_symmetric(K)),
        "lambda_1": float(embedding.eigenvalues[0]),
        "leading_nontrivial_eigenvalue": (
            float(embedding.nontrivial_eigenvalues[0])
            if embedding.nontrivial_eigenvalues.size
            else None
        ),
    }


def spectral_gap_dimension(eigenvalues, max_d: int = 5) -> int:
    """Index of the largest gap ``lambda_i - lambda_(i+1)`` over nontrivial eigenvalues.

    `eigenvalues` must already exclude the stationary eigenvalue.  Ties go to
    the smaller dimension.
    """
    lam = np.asarray(eigenvalues, dtype=float)
    if lam.size < 2:
        raise ValueError("need at least 2 nontrivial eigenvalues")
    top = max(1, min(int(max_d), lam.size - 1))
    gaps = lam[:top] - lam[1 : top + 1]
    d = int(np.argmax(gaps)) + 1
    log.info("spectral gaps %s -> dimension %d", np.round(gaps, 6).tolist(), d)
    return d


def extend(
    embedding: DiffusionEmbedding,
    new_points: TimeSeriesMatrix,
    use_drift: bool = True,
) -> np.ndarray:
    """Nystrom extension of the diffusion coordinates to new points.

    Each coordinate is ``(1/lambda_i) sum_j p(x*, x_j) Phi_i(x_j)`` where
    ``p`` is the row-normalized training kernel.  For directed embeddings the
    drift at the new points comes from their own temporal neighbours; with
    ``use_drift=False`` (or fewer than 3 points) the isotropic kernel is used.
    """
    train = embedding.training_data
    if train is None:
        raise ValueError("embedding carries no training data")
    X = train.data
    Y = new_points.data
    if Y.shape[1] != X.shape[1]:
        raise ValueError(
            f"new points have {Y.shape[1]} dimensions, training data has {X.shape[1]}"
        )
    lam = embedding.nontrivial_eigenvalues
    for i, value in enumerate(lam):
        if abs(value) < EIGENVALUE_FLOOR:
            raise ValueError(
                f"coordinate {i} has eigenvalue {value:.3g} below the floor {EIGENVALUE_FLOOR}"
            )
    cfg = embedding.config
    gradient = None
    if cfg.directed and use_drift and new_points.n_points >= 3:
        gradient = estimate_drift(new_points).gradient
    K = _cross_kernel(Y, X, cfg.epsilon, gradient)
    # exact zero distance means the same sample
    same = cdist(Y, X, "sqeuclidean") == 0.0
    K[same] = 1.0
    W = K / K.sum(axis=1, keepdims=True)
    return (W @ embedding.coordinates) / lam
