"""Ground-truth latent dynamics lifted to high-dimensional observations.

Used as a stand-in for recorded data and as the source of oracles for the
test-suite: a latent SDE is integrated with Euler-Maruyama, embedded into
``n`` ambient dimensions by a seeded random orthogonal map (optionally
followed by a smooth nonlinearity) and perturbed by observation noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .indicators import SampEnParams, SampEnResult
from .ingest import TimeSeriesMatrix
from .sde import LatentSde, monomial_exponents, simulate

LIFTS = ("random-orthogonal-linear", "componentwise-nonlinear")


@dataclass(frozen=True)
class SyntheticSpec:
    """Latent model, lift and sampling of a synthetic dataset.

    `drift` holds ascending monomial coefficients per latent component
    (``dim x n_basis``); the default ``[0, 1, 0, -1]`` is the double well
    ``mu(z) = z - z^3``.  `noise_level` is the observation noise standard
    deviation as a fraction of each channel's range.
    """

    drift: tuple = (0.0, 1.0, 0.0, -1.0)
    diffusion: float = 0.5
    latent_dim: int = 1
    ambient_dim: int = 20
    lift: str = "random-orthogonal-linear"
    noise_level: float = 0.01
    seed: int = 0
    length: int = 1500
    dt: float = 0.0625
    z0: Optional[tuple] = None

    def __post_init__(self):
        if self.ambient_dim < self.latent_dim:
            raise ValueError("ambient dimension must be >= latent dimension")
        if self.lift not in LIFTS:
            raise ValueError(f"unknown lift {self.lift!r}")
        if self.length < 3:
            raise ValueError("length must be >= 3")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        self.model()

    def model(self) -> LatentSde:
        coeffs = np.atleast_2d(np.asarray(self.drift, dtype=float))
        if coeffs.shape[0] == 1 and self.latent_dim > 1:
            coeffs = np.repeat(coeffs, self.latent_dim, axis=0)
        n_basis = coeffs.shape[1]
        degree = next(
            (D for D in range(0, 12) if len(monomial_exponents(self.latent_dim, D)) == n_basis),
            None,
        )
        if degree is None:
            raise ValueError(f"{n_basis} drift coefficients do not form a full monomial basis")
        eta = np.full((self.latent_dim, 1), float(self.diffusion))
        return LatentSde(coeffs, eta, degree, 0)

    def to_dict(self) -> dict:
        return {
            "drift": np.asarray(self.drift, dtype=float).tolist(),
            "diffusion": self.diffusion,
            "latent_dim": self.latent_dim,
            "ambient_dim": self.ambient_dim,
            "lift": self.lift,
            "noise_level": self.noise_level,
            "seed": self.seed,
            "length": self.length,
            "dt": self.dt,
            "z0": None if self.z0 is None else list(self.z0),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        kw = dict(d)
        drift = np.asarray(kw.pop("drift", cls.drift), dtype=float)
        kw["drift"] = tuple(map(tuple, drift)) if drift.ndim == 2 else tuple(drift)
        if kw.get("z0") is not None:
            kw["z0"] = tuple(np.atleast_1d(kw["z0"]).tolist())
        return cls(**kw)


def _streams(seed: int):
    latent, lift, noise = np.random.SeedSequence(seed).spawn(3)
    return latent, lift, noise


def orthogonal_injection(latent_dim: int, ambient_dim: int, seed) -> np.ndarray:
    """``latent_dim x ambient_dim`` matrix with orthonormal rows."""
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((ambient_dim, latent_dim)))
    q = q * np.sign(np.diag(r))[None, :]
    return q.T


def lift(latent: np.ndarray, spec: SyntheticSpec, seed) -> np.ndarray:
    """Noise-free observation of a latent path."""
    Q = orthogonal_injection(spec.latent_dim, spec.ambient_dim, seed)
    x = latent @ Q
    if spec.lift == "componentwise-nonlinear":
        s = math.sqrt(spec.ambient_dim)
        x = np.tanh(s * x) / s
    return x


def _observe(latent, spec, lift_seed, noise_seed):
    clean = lift(latent, spec, lift_seed)
    if spec.noise_level > 0:
        span = np.ptp(clean, axis=0)
        rng = np.random.default_rng(noise_seed)
        clean = clean + rng.standard_normal(clean.shape) * (spec.noise_level * span)
    return clean


def _start(spec: SyntheticSpec) -> np.ndarray:
    if spec.z0 is not None:
        return np.asarray(spec.z0, dtype=float).reshape(spec.latent_dim)
    return np.zeros(spec.latent_dim)


def generate(spec: SyntheticSpec) -> tuple[TimeSeriesMatrix, TimeSeriesMatrix]:
    """Latent truth and lifted observations, both with time step ``spec.dt``."""
    s_latent, s_lift, s_noise = _streams(spec.seed)
    z = simulate(spec.model(), _start(spec), spec.length, spec.dt, seed=s_latent)
    x = _observe(z, spec, s_lift, s_noise)
    return TimeSeriesMatrix(z, spec.dt, "synthetic"), TimeSeriesMatrix(x, spec.dt, "synthetic")


@dataclass(frozen=True)
class ForcedTransition:
    latent: TimeSeriesMatrix
    observed: TimeSeriesMatrix
    t_star: int
    pre: LatentSde
    post: LatentSde
    info: dict = field(default_factory=dict)


def transition_spec(**overrides) -> SyntheticSpec:
    """Single well at -0.75 (``mu(z) = -(z + 0.75)``) with small noise.

    Pairs with :func:`forced_transition` to move the well to +0.75.
    """
    base = dict(drift=(-0.75, -1.0), diffusion=0.15, z0=(-0.75,))
    base.update(overrides)
    return SyntheticSpec(**base)


def forced_transition(
    spec: SyntheticSpec,
    t_star: int,
    shift: float = 1.5,
    diffusion_gain: float = 1.5,
) -> ForcedTransition:
    """Path whose drift landscape is translated by `shift` at index `t_star`.

    From `t_star` on the drift is ``mu(z - shift)`` (the stable states move by
    `shift`) and the diffusion is multiplied by `diffusion_gain`.
    """
    if not 0 < t_star < spec.length:
        raise ValueError(f"t_star must lie in (0, {spec.length}), got {t_star}")
    s_latent, s_lift, s_noise = _streams(spec.seed)
    pre_seed, post_seed = s_latent.spawn(2)
    pre = spec.model()
    post = pre.translated(shift)
    post = replace(post, diff_coeffs=post.diff_coeffs * diffusion_gain)
    first = simulate(pre, _start(spec), t_star, spec.dt, seed=pre_seed)
    # the post segment starts from the last pre-transition state
    second = simulate(post, first[-1], spec.length - t_star + 1, spec.dt, seed=post_seed)
    z = np.vstack([first, second[1:]])
    x = _observe(z, spec, s_lift, s_noise)
    return ForcedTransition(
        TimeSeriesMatrix(z, spec.dt, "synthetic"),
        TimeSeriesMatrix(x, spec.dt, "synthetic"),
        int(t_star),
        pre,
        post,
        {"shift": shift, "diffusion_gain": diffusion_gain},
    )


def sample_pairs(
    model: LatentSde,
    n_pairs: int,
    dt: float,
    spread: float = 2.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Independent one-step Euler-Maruyama transitions from N(0, spread^2) starts."""
    rng = np.random.default_rng(seed)
    z = rng.normal(0.0, spread, (n_pairs, model.dim))
    dW = rng.standard_normal(z.shape) * math.sqrt(dt)
    return z, z + dt * model.drift(z) + model.diffusion(z) * dW


def sampen_bruteforce(window, params: SampEnParams) -> SampEnResult:
    """Sample entropy by exhaustive enumeration of template pairs.

    Independent reference for :func:`latentwarn.indicators.sample_entropy`;
    O(n^2) in the number of templates.
    """
    w = np.asarray(window, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    l, m, p, q, r = params.l, params.m, params.p, params.q, params.r
    if w.shape[0] < l:
        raise ValueError(f"window has {w.shape[0]} points, need l={l}")
    cols = [[float(v) for v in w[:l, a]] for a in range(w.shape[1])]
    sigmas = [float(np.std(c)) for c in cols]
    if any(s == 0 for s in sigmas):
        return SampEnResult(math.nan, 0, 0, "zero-std")
    # templates (channel, k) with 1-based positions k*q+1 .. k*q+m+p
    keys = []
    k = 1
    while k * q + m + p <= l:
        keys.append(k)
        k += 1
    if not keys:
        return SampEnResult(math.nan, 0, 0, "no-templates")
    templates = [(a, k) for a in range(len(cols)) for k in keys]
    a_count = b_count = 0
    for u in range(len(templates)):
        alpha, i = templates[u]
        for v in range(u + 1, len(templates)):
            beta, j = templates[v]
            lim = r * max(sigmas[alpha], sigmas[beta])
            dist = 0.0
            close_m = None
            for s in range(1, m + p + 1):
                dist = max(dist, abs(cols[alpha][i * q + s - 1] - cols[beta][j * q + s - 1]))
                if s == m:
                    close_m = dist < lim
                    if not close_m:
                        break
            if close_m:
                b_count += 1
                if dist < lim:
                    a_count += 1
    if b_count == 0:
        return SampEnResult(math.nan, a_count, 0, "no-m-matches")
    if a_count == 0:
        return SampEnResult(math.nan, 0, b_count, "infinite")
    return SampEnResult(math.log(b_count) - math.log(a_count), a_count, b_count)
