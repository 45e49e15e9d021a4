"""Latent SDE identification by Gaussian one-step likelihood.

Drift and diffusion are linear combinations of monomials of the latent
coordinates (diagonal diffusivity).  For a snapshot pair
``(z, z_next)`` with step ``dt`` the loss per component is::

    (z_next - z - dt*mu(z))**2 / (dt*eta(z)**2) + log(dt*eta(z)**2) + log(2*pi)

and the model is fitted by full-batch preconditioned gradient descent
with step halving.  The sign of ``eta`` is not identifiable; magnitudes are
reported.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np
from scipy.signal import find_peaks

log = logging.getLogger(__name__)

DIFFUSION_FLOOR = 1e-6  # lower bound on eta**2
LOG_2PI = math.log(2.0 * math.pi)


class DiffusionFloorError(ValueError):
    pass


class TrajectoryEscapeError(RuntimeError):
    """Raised when a simulated path leaves the guard box."""

    def __init__(self, step: int, guard: float):
        super().__init__(f"trajectory left the guard box |z| <= {guard:g} at step {step}")
        self.step = step


def monomial_exponents(dim: int, degree: int) -> np.ndarray:
    """Exponent table of all monomials of total degree <= `degree`, graded order.

    For ``dim=1`` the rows are ``[0], [1], ..., [degree]``.
    """
    rows = []
    for deg in range(degree + 1):
        for combo in combinations_with_replacement(range(dim), deg):
            e = [0] * dim
            for k in combo:
                e[k] += 1
            rows.append(e)
    return np.array(rows, dtype=int).reshape(len(rows), dim)


def design_matrix(z: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    return np.prod(z[:, None, :] ** exponents[None, :, :], axis=2)


def _derivative_design(z, exponents, k):
    """d/dz_k of every monomial."""
    z = np.atleast_2d(z)
    e = exponents.copy()
    factor = e[:, k].astype(float)
    e[:, k] = np.maximum(e[:, k] - 1, 0)
    return design_matrix(z, e) * factor[None, :]


@dataclass(frozen=True)
class RescaleTransform:
    """Affine per-component map ``model = (z - center) / half_range``."""

    center: np.ndarray
    half_range: np.ndarray

    @classmethod
    def fit(cls, z: np.ndarray) -> "RescaleTransform":
        z = np.atleast_2d(np.asarray(z, dtype=float))
        lo, hi = z.min(axis=0), z.max(axis=0)
        half = (hi - lo) / 2.0
        half[half == 0] = 1.0
        return cls((hi + lo) / 2.0, half)

    def apply(self, z):
        return (np.asarray(z, dtype=float) - self.center) / self.half_range

    def invert(self, u):
        return np.asarray(u, dtype=float) * self.half_range + self.center

    def to_dict(self):
        return {"center": self.center.tolist(), "half_range": self.half_range.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["center"], float), np.asarray(d["half_range"], float))


@dataclass(frozen=True)
class SnapshotSet:
    z: np.ndarray
    z_next: np.ndarray
    dt: float
    train_index: np.ndarray
    test_index: np.ndarray
    transform: Optional[RescaleTransform] = None

    @property
    def n_pairs(self) -> int:
        return self.z.shape[0]

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def train(self):
        return self.z[self.train_index], self.z_next[self.train_index]

    def test(self):
        return self.z[self.test_index], self.z_next[self.test_index]


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def make_snapshots(
    coords: np.ndarray,
    dt: float,
    train_fraction: float = 0.8,
    seed: int = 0,
    rescale: bool = True,
) -> SnapshotSet:
    """Consecutive pairs of a trajectory with a seeded random train/test split.

    With `rescale` each component is first mapped affinely onto [-1, 1].
    """
    z = np.asarray(coords, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    if z.shape[0] < 2:
        raise ValueError("need at least 2 time points")
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    transform = None
    if rescale:
        transform = RescaleTransform.fit(z)
        z = transform.apply(z)
    return snapshots_from_pairs(z[:-1], z[1:], dt, train_fraction, seed, transform)


def snapshots_from_pairs(z, z_next, dt, train_fraction=0.8, seed=0, transform=None):
    """Snapshot set from explicit (z, z_next) pairs, e.g. independent one-step transitions."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    z_next = np.asarray(z_next, dtype=float).reshape(z.shape)
    n = z.shape[0]
    n_train = min(n, _round_half_up(train_fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    train = np.sort(perm[:n_train])
    test = np.sort(perm[n_train:])
    return SnapshotSet(z, z_next, float(dt), train, test, transform)


@dataclass(frozen=True)
class LatentSde:
    """Polynomial drift and diagonal diffusion ``dz = mu(z) dt + eta(z) dB``.

    `drift_coeffs` has shape ``(dim, n_drift_basis)`` and `diff_coeffs`
    ``(dim, n_diffusion_basis)`` over :func:`monomial_exponents`.
    """

    drift_coeffs: np.ndarray
    diff_coeffs: np.ndarray
    drift_degree: int = 3
    diffusion_degree: int = 0
    train_loss: Optional[float] = None
    test_loss: Optional[float] = None
    iterations: int = 0
    converged: bool = True
    transform: Optional[RescaleTransform] = None

    def __post_init__(self):
        mu = np.atleast_2d(np.asarray(self.drift_coeffs, dtype=float))
        eta = np.atleast_2d(np.asarray(self.diff_coeffs, dtype=float))
        dim = mu.shape[0]
        if eta.shape[0] != dim:
            raise ValueError("drift and diffusion coefficients disagree on dimension")
        if mu.shape[1] != len(monomial_exponents(dim, self.drift_degree)):
            raise ValueError(f"drift needs {len(monomial_exponents(dim, self.drift_degree))} coefficients per component")
        if eta.shape[1] != len(monomial_exponents(dim, self.diffusion_degree)):
            raise ValueError("diffusion coefficient count does not match its degree")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(eta))):
            raise ValueError("coefficients must be finite")
        object.__setattr__(self, "drift_coeffs", mu)
        object.__setattr__(self, "diff_coeffs", eta)

    @classmethod
    def from_polynomials(cls, drift, diffusion, **kw) -> "LatentSde":
        """1-d model from ascending drift coefficients and a constant or polynomial diffusion."""
        drift = np.atleast_1d(np.asarray(drift, dtype=float))
        diffusion = np.atleast_1d(np.asarray(diffusion, dtype=float))
        return cls(drift[None, :], diffusion[None, :], len(drift) - 1, len(diffusion) - 1, **kw)

    @property
    def dim(self) -> int:
        return self.drift_coeffs.shape[0]

    @property
    def drift_exponents(self) -> np.ndarray:
        return monomial_exponents(self.dim, self.drift_degree)

    @property
    def diffusion_exponents(self) -> np.ndarray:
        return monomial_exponents(self.dim, self.diffusion_degree)

    def drift(self, z) -> np.ndarray:
        return design_matrix(z, self.drift_exponents) @ self.drift_coeffs.T

    def diffusion(self, z) -> np.ndarray:
        return design_matrix(z, self.diffusion_exponents) @ self.diff_coeffs.T

    def diffusion_magnitude(self, z) -> np.ndarray:
        return np.abs(self.diffusion(z))

    def divergence(self, z) -> np.ndarray:
        """Sum over components of d mu_k / d z_k."""
        z = np.atleast_2d(z)
        out = np.zeros(z.shape[0])
        for k in range(self.dim):
            out += _derivative_design(z, self.drift_exponents, k) @ self.drift_coeffs[k]
        return out

    def translated(self, shift) -> "LatentSde":
        """Model whose coefficients describe ``mu(z - shift)`` and ``eta(z - shift)``."""
        shift = np.broadcast_to(np.asarray(shift, dtype=float), (self.dim,))
        return replace(
            self,
            drift_coeffs=_translate(self.drift_coeffs, self.drift_exponents, shift),
            diff_coeffs=_translate(self.diff_coeffs, self.diffusion_exponents, shift),
        )

    def to_dict(self) -> dict:
        return {
            "dimension": self.dim,
            "drift_degree": self.drift_degree,
            "diffusion_degree": self.diffusion_degree,
            "drift_coeffs": self.drift_coeffs.tolist(),
            "diffusion_coeffs": self.diff_coeffs.tolist(),
            "diffusion_magnitude_convention": "eta enters only through eta**2",
            "diagnostics": {
                "train_loss": self.train_loss,
                "test_loss": self.test_loss,
                "iterations": self.iterations,
                "converged": self.converged,
            },
            "rescale": None if self.transform is None else self.transform.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatentSde":
        diag = d.get("diagnostics", {})
        return cls(
            np.asarray(d["drift_coeffs"], dtype=float),
            np.asarray(d["diffusion_coeffs"], dtype=float),
            int(d["drift_degree"]),
            int(d["diffusion_degree"]),
            diag.get("train_loss"),
            diag.get("test_loss"),
            int(diag.get("iterations", 0)),
            bool(diag.get("converged", True)),
            None if d.get("rescale") is None else RescaleTransform.from_dict(d["rescale"]),
        )


def _translate(coeffs, exponents, shift):
    index = {tuple(e): i for i, e in enumerate(exponents)}
    out = np.zeros_like(coeffs)
    for i, e in enumerate(exponents):
        # prod_k (z_k - s_k)^e_k expanded binomially
        for f in np.ndindex(*(np.asarray(e) + 1)):
            w = 1.0
            for k, (ek, fk) in enumerate(zip(e, f)):
                w *= math.comb(int(ek), int(fk)) * (-shift[k]) ** (int(ek) - int(fk))
            out[:, index[tuple(int(v) for v in f)]] += coeffs[:, i] * w
    return out


def _components(sde: LatentSde, z, z_next, dt):
    z = np.atleast_2d(z)
    z_next = np.atleast_2d(z_next)
    r = z_next - z - dt * sde.drift(z)
    eta = sde.diffusion(z)
    return r, eta, eta**2


def nll_loss(sde: LatentSde, pair, dt: float) -> float:
    """Negative log-likelihood (times 2) of one snapshot pair, summed over components."""
    z, z_next = pair
    return float(mean_nll(sde, np.atleast_2d(z), np.atleast_2d(z_next), dt))


def mean_nll(sde: LatentSde, z, z_next, dt: float) -> float:
    r, _, s = _components(sde, z, z_next, dt)
    if np.any(s < DIFFUSION_FLOOR):
        raise DiffusionFloorError(
            f"eta**2 = {s.min():.3g} below the floor {DIFFUSION_FLOOR:g}"
        )
    per = r**2 / (dt * s) + np.log(dt * s) + LOG_2PI
    return float(np.mean(per.sum(axis=1)))


def nll_gradient(sde: LatentSde, z, z_next, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`mean_nll` with respect to drift and diffusion coefficients."""
    z = np.atleast_2d(z)
    r, eta, s = _components(sde, z, z_next, dt)
    Fm = design_matrix(z, sde.drift_exponents)
    Fe = design_matrix(z, sde.diffusion_exponents)
    M = z.shape[0]
    g_mu = (-2.0 * r / s).T @ Fm / M
    g_eta = ((1.0 / s - r**2 / (dt * s**2)) * 2.0 * eta).T @ Fe / M
    return g_mu, g_eta


@dataclass
class FitSettings:
    max_iter: int = 50000
    tol: float = 1e-8
    window: int = 50
    max_halvings: int = 60
    freeze_diffusion: bool = False
    seed: int = 0


def _safe_loss(sde, z, z_next, dt):
    try:
        value = mean_nll(sde, z, z_next, dt)
    except DiffusionFloorError:
        return math.inf
    return value if math.isfinite(value) else math.inf


def _fisher_direction(sde, z, dt, g_mu, g_eta, freeze_diffusion):
    """Descent direction preconditioned by the per-block Fisher information."""
    Fm = design_matrix(z, sde.drift_exponents)
    Fe = design_matrix(z, sde.diffusion_exponents)
    s = sde.diffusion(z) ** 2
    M = z.shape[0]
    d_mu = np.empty_like(g_mu)
    d_eta = np.zeros_like(g_eta)
    for k in range(sde.dim):
        w = 1.0 / s[:, k]
        H = 2.0 * dt * (Fm * w[:, None]).T @ Fm / M
        d_mu[k] = -_solve_psd(H, g_mu[k])
        if not freeze_diffusion:
            H = 4.0 * (Fe * w[:, None]).T @ Fe / M
            d_eta[k] = -_solve_psd(H, g_eta[k])
    return d_mu, d_eta


def _solve_psd(H, g):
    ridge = 1e-12 * max(np.trace(H) / len(H), 1e-300)
    try:
        return np.linalg.solve(H + ridge * np.eye(len(H)), g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(H, g, rcond=None)[0]


def initial_model(z, z_next, dt, drift_degree=3, diffusion_degree=0, diffusion=None) -> LatentSde:
    """Zero drift; diffusion constant term matched to the increment variance."""
    z = np.atleast_2d(z)
    dim = z.shape[1]
    mu = np.zeros((dim, len(monomial_exponents(dim, drift_degree))))
    if diffusion is not None:
        eta = np.atleast_2d(np.asarray(diffusion, dtype=float))
    else:
        eta = np.zeros((dim, len(monomial_exponents(dim, diffusion_degree))))
        inc = (np.atleast_2d(z_next) - z) / math.sqrt(dt)
        eta[:, 0] = np.sqrt(np.maximum(inc.var(axis=0), 10 * DIFFUSION_FLOOR))
    return LatentSde(mu, eta, drift_degree, diffusion_degree)


def fit(
    snapshots: SnapshotSet,
    drift_degree: int = 3,
    diffusion_degree: int = 0,
    settings: Optional[FitSettings] = None,
    diffusion: Optional[np.ndarray] = None,
) -> LatentSde:
    """Minimize the mean loss over the training split.

    `diffusion` overrides the initial diffusion coefficients; combined with
    ``settings.freeze_diffusion`` only the drift is optimized, which reduces
    the problem to weighted least squares.  A model that hits the iteration
    cap is returned with ``converged=False``.
    """
    settings = settings or FitSettings()
    z, z_next = snapshots.train()
    n_coef = len(monomial_exponents(snapshots.dim, drift_degree))
    if not settings.freeze_diffusion:
        n_coef += len(monomial_exponents(snapshots.dim, diffusion_degree))
    if z.shape[0] < n_coef:
        raise ValueError(f"{z.shape[0]} training pairs for {n_coef} coefficients per component")
    dt = snapshots.dt
    sde = initial_model(z, z_next, dt, drift_degree, diffusion_degree, diffusion)
    loss = _safe_loss(sde, z, z_next, dt)
    if not math.isfinite(loss):
        raise DiffusionFloorError("initial diffusion violates the floor")
    history = [loss]
    converged = False
    it = 0
    for it in range(1, settings.max_iter + 1):
        g_mu, g_eta = nll_gradient(sde, z, z_next, dt)
        d_mu, d_eta = _fisher_direction(sde, z, dt, g_mu, g_eta, settings.freeze_diffusion)
        step = 1.0
        accepted = False
        for _ in range(settings.max_halvings):
            trial = replace(
                sde,
                drift_coeffs=sde.drift_coeffs + step * d_mu,
                diff_coeffs=sde.diff_coeffs + step * d_eta,
            )
            trial_loss = _safe_loss(trial, z, z_next, dt)
            if trial_loss <= loss:
                accepted = True
                break
            step *= 0.5
        if accepted:
            sde, loss = trial, trial_loss
        history.append(loss)
        if len(history) > settings.window and history[-settings.window - 1] - loss < settings.tol:
            converged = True
            break
        if not accepted:
            # no step of any size decreases the loss: stationary to machine precision
            converged = True
            break
    if not converged:
        log.warning("fit stopped at the iteration cap (%d) before converging", settings.max_iter)
    test_loss = None
    if snapshots.test_index.size:
        zt, zt_next = snapshots.test()
        test_loss = _safe_loss(sde, zt, zt_next, dt)
    return replace(
        sde,
        train_loss=float(loss),
        test_loss=None if test_loss is None else float(test_loss),
        iterations=it,
        converged=converged,
        transform=snapshots.transform,
    )


def weighted_least_squares_drift(z, z_next, dt, sde: LatentSde) -> np.ndarray:
    """Closed-form drift for fixed diffusion (the optimum of the drift subproblem)."""
    z = np.atleast_2d(z)
    F = design_matrix(z, sde.drift_exponents)
    target = (np.atleast_2d(z_next) - z) / dt
    s = sde.diffusion(z) ** 2
    out = np.empty((sde.dim, F.shape[1]))
    for k in range(sde.dim):
        w = np.sqrt(1.0 / s[:, k])
        out[k] = np.linalg.lstsq(F * w[:, None], target[:, k] * w, rcond=None)[0]
    return out


def simulate(
    sde: LatentSde,
    z0,
    steps: int,
    dt: float,
    seed: int = 0,
    guard: float = 1e6,
) -> np.ndarray:
    """Euler-Maruyama path with `steps` rows; row 0 is `z0`."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    z = np.array(z0, dtype=float).reshape(-1)
    if z.size != sde.dim:
        raise ValueError(f"z0 has {z.size} components, model has {sde.dim}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((max(steps - 1, 0), sde.dim)) * math.sqrt(dt)
    out = np.empty((steps, sde.dim))
    if steps == 0:
        return out
    out[0] = z
    if sde.dim == 1:
        _simulate_1d(sde, out, noise, dt, guard)
        return out
    em, ee = sde.drift_exponents, sde.diffusion_exponents
    mu, eta = sde.drift_coeffs, sde.diff_coeffs
    for k in range(1, steps):
        fm = np.prod(z ** em, axis=1)
        fe = np.prod(z ** ee, axis=1)
        z = z + (mu @ fm) * dt + (eta @ fe) * noise[k - 1]
        if not np.all(np.abs(z) <= guard):
            raise TrajectoryEscapeError(k, guard)
        out[k] = z
    return out


def _horner(c, x):
    acc = 0.0
    for a in reversed(c):
        acc = acc * x + a
    return acc


def _simulate_1d(sde, out, noise, dt, guard):
    mu = [float(c) for c in sde.drift_coeffs[0]]
    eta = [float(c) for c in sde.diff_coeffs[0]]
    dW = noise[:, 0].tolist()
    z = float(out[0, 0])
    col = out[:, 0]
    for k in range(1, out.shape[0]):
        z = z + _horner(mu, z) * dt + _horner(eta, z) * dW[k - 1]
        if not abs(z) <= guard:
            raise TrajectoryEscapeError(k, guard)
        col[k] = z


@dataclass
class DensityReport:
    edges: list
    predicted: list
    true: list
    l1_distance: list
    predicted_modes: list
    true_modes: list
    n_test: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def max_l1(self) -> float:
        return max(self.l1_distance)

    def to_dict(self) -> dict:
        return {
            "n_test": self.n_test,
            "bins": len(self.predicted[0]) if self.predicted else 0,
            "l1_distance": self.l1_distance,
            "predicted_modes": self.predicted_modes,
            "true_modes": self.true_modes,
            "edges": self.edges,
            "predicted_histogram": self.predicted,
            "true_histogram": self.true,
        }


def count_modes(mass: np.ndarray, prominence: float = 0.1) -> int:
    """Number of local maxima of a lightly smoothed histogram.

    A 3-bin moving average removes single-bin sampling noise; peaks must
    stand out by `prominence` times the largest smoothed value.
    """
    mass = np.asarray(mass, dtype=float)
    smooth = np.convolve(np.pad(mass, 1, mode="edge"), np.ones(3) / 3.0, mode="valid")
    padded = np.concatenate([[0.0], smooth, [0.0]])
    peaks, _ = find_peaks(padded, prominence=prominence * smooth.max())
    return int(len(peaks))


def validate_density(
    sde: LatentSde, snapshots: SnapshotSet, seed: int = 0, bins: int = 30
) -> DensityReport:
    """Compare one-step predicted and observed ``z_next`` on the test split.

    One prediction ``z + dt*mu(z) + sqrt(dt)*|eta(z)|*xi`` is drawn per test
    pair; both samples are binned on `bins` uniform bins over their pooled
    range and compared by the L1 distance of the bin probabilities.
    """
    z, z_next = snapshots.test()
    if z.shape[0] == 0:
        raise ValueError("test split is empty")
    dt = snapshots.dt
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal(z.shape)
    pred = z + dt * sde.drift(z) + math.sqrt(dt) * np.abs(sde.diffusion(z)) * xi
    report = DensityReport([], [], [], [], [], [], n_test=z.shape[0])
    for k in range(z.shape[1]):
        lo = min(pred[:, k].min(), z_next[:, k].min())
        hi = max(pred[:, k].max(), z_next[:, k].max())
        if hi == lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, bins + 1)
        hp = np.histogram(pred[:, k], edges)[0] / z.shape[0]
        ht = np.histogram(z_next[:, k], edges)[0] / z.shape[0]
        report.edges.append(edges.tolist())
        report.predicted.append(hp.tolist())
        report.true.append(ht.tolist())
        report.l1_distance.append(float(np.abs(hp - ht).sum()))
        report.predicted_modes.append(count_modes(hp))
        report.true_modes.append(count_modes(ht))
    return report


def equilibria(sde: LatentSde, component: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Real zeros of a 1-d drift polynomial and whether each is stable."""
    if sde.dim != 1:
        raise ValueError("equilibria are only computed for 1-d models")
    c = sde.drift_coeffs[component]
    roots = np.roots(c[::-1])
    real = np.sort(roots[np.abs(roots.imag) < 1e-9].real)
    slope = np.polynomial.polynomial.polyval(real, np.polynomial.polynomial.polyder(c))
    return real, slope < 0
