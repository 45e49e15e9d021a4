"""Early-warning indicators computed on latent trajectories.

* Onsager-Machlup ratio: action of the most recent window divided by the
  action of the preceding, 0.9-times shorter window.
* Multichannel sample entropy with Chebyshev matching.
* Transition probability from region A to region B.
* Sliding standard deviation, used as the baseline.

Undefined values are NaN throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.signal import find_peaks
from scipy.spatial.distance import cdist

from .sde import LatentSde, simulate

KINDS = ("OM-ratio", "sample-entropy", "transition-probability", "std-baseline")


@dataclass(frozen=True)
class IndicatorSeries:
    times: np.ndarray
    values: np.ndarray
    kind: str
    params: dict = field(default_factory=dict)
    flags: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown indicator kind {self.kind!r}")
        times = np.asarray(self.times, dtype=int)
        values = np.asarray(self.values, dtype=float)
        if times.shape != values.shape:
            raise ValueError("times and values differ in length")
        if times.size > 1 and np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        if np.any(np.isinf(values)):
            raise ValueError("indicator values must be finite or NaN")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "params", dict(self.params))

    def __len__(self):
        return self.values.size

    @property
    def all_nan(self) -> bool:
        return bool(np.all(np.isnan(self.values)))


def _as_2d(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return z[:, None] if z.ndim == 1 else z


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


# --- Onsager-Machlup -----------------------------------------------------


def om_integrand(z, sde: LatentSde, dt: float) -> np.ndarray:
    """Pointwise ``|zdot - mu|^2 / eta^2 + div mu``; NaN at the two end samples.

    ``zdot`` is the central difference with step `dt`.
    """
    z = _as_2d(z)
    out = np.full(z.shape[0], np.nan)
    if z.shape[0] < 3:
        return out
    inner = z[1:-1]
    zdot = (z[2:] - z[:-2]) / (2.0 * dt)
    resid = zdot - sde.drift(inner)
    s = sde.diffusion(inner) ** 2
    out[1:-1] = np.sum(resid**2 / s, axis=1) + sde.divergence(inner)
    return out


def om_functional(z, sde: LatentSde, t: int, l: int, dt: float) -> float:
    """Onsager-Machlup action over the window of `l` samples ending at index `t`.

    The integral is a Riemann sum over the window samples; each needs one
    neighbour on both sides for the central difference.
    """
    z = _as_2d(z)
    start = t - l + 1
    if l < 1 or start < 1 or t > z.shape[0] - 2:
        raise IndexError(
            f"window [{start}, {t}] does not fit in 1..{z.shape[0] - 2} (series of {z.shape[0]})"
        )
    seg = z[start - 1 : t + 2]
    return 0.5 * dt * float(np.sum(om_integrand(seg, sde, dt)[1:-1]))


def om_ratio_series(z, sde: LatentSde, l: int = 300, dt: float = 0.0625, stride: int = 1) -> IndicatorSeries:
    """``OM(l, t) / OM(l', t - l')`` with ``l' = round(0.9 l)`` for each admissible `t`."""
    z = _as_2d(z)
    if l < 10:
        raise ValueError(f"window length must be >= 10, got {l}")
    l2 = round_half_up(0.9 * l)
    n = z.shape[0]
    first = max(l, 2 * l2)
    last = n - 2
    if first > last:
        raise ValueError(f"series of {n} points is too short for window {l}")
    f = om_integrand(z, sde, dt)
    csum = np.concatenate([[0.0], np.cumsum(np.nan_to_num(f))])

    def window(t, length):
        return 0.5 * dt * (csum[t + 1] - csum[t - length + 1])

    times = np.arange(first, last + 1, stride)
    num = window(times, l)
    den = window(times - l2, l2)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.where(np.abs(den) < 1e-12, np.nan, num / den)
    params = {"l": l, "denominator_length": l2, "dt": dt, "stride": stride}
    return IndicatorSeries(times, vals, "OM-ratio", params)


# --- sample entropy --------------------------------------------------------


@dataclass(frozen=True)
class SampEnParams:
    m: int = 5
    p: int = 10
    q: int = 1
    r: float = 2.0
    l: int = 300

    def __post_init__(self):
        for name in ("m", "p", "q", "l"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not self.r > 0:
            raise ValueError("r must be positive")
        if self.l < self.m + self.p + self.q:
            raise ValueError(f"need l >= m + p + q, got l={self.l}")

    def to_dict(self) -> dict:
        return {"m": self.m, "p": self.p, "q": self.q, "r": self.r, "l": self.l}


@dataclass(frozen=True)
class SampEnResult:
    value: float
    a_count: int
    b_count: int
    flag: Optional[str] = None


def template_starts(l: int, m: int, p: int, q: int) -> np.ndarray:
    """0-based start indices ``k q`` of the templates, ``k = 1..n_z`` with ``k q + m + p <= l``."""
    n_z = (l - m - p) // q
    return q * np.arange(1, n_z + 1)


def sample_entropy_counts(window, params: SampEnParams) -> SampEnResult:
    """Sample entropy of a window (rows = time, columns = channels) with its match counts."""
    w = _as_2d(window)
    l = params.l
    if w.shape[0] < l:
        raise ValueError(f"window has {w.shape[0]} points, need l={l}")
    w = w[:l]
    m, p = params.m, params.p
    sigma = w.std(axis=0)
    if np.any(sigma == 0):
        return SampEnResult(math.nan, 0, 0, "zero-std")
    starts = template_starts(l, m, p, params.q)
    if starts.size == 0:
        return SampEnResult(math.nan, 0, 0, "no-templates")
    d = w.shape[1]
    idx = starts[:, None] + np.arange(m + p)[None, :]
    # rows ordered channel-major: (channel 0, k=1..n_z), (channel 1, ...), ...
    T = np.concatenate([w[idx, a] for a in range(d)], axis=0)
    thr = np.repeat(params.r * sigma, starts.size)
    # unordered pairs only: strict upper triangle
    iu = np.triu_indices(T.shape[0], k=1)
    dm = cdist(T[:, :m], T[:, :m], "chebyshev")[iu]
    dfull = np.maximum(dm, cdist(T[:, m:], T[:, m:], "chebyshev")[iu]) if p else dm
    lim = np.maximum(thr[:, None], thr[None, :])[iu]
    b_count = int(np.count_nonzero(dm < lim))
    a_count = int(np.count_nonzero(dfull < lim))
    return _entropy_from_counts(a_count, b_count)


def _entropy_from_counts(a_count: int, b_count: int) -> SampEnResult:
    if b_count == 0:
        return SampEnResult(math.nan, a_count, b_count, "no-m-matches")
    if a_count == 0:
        return SampEnResult(math.nan, a_count, b_count, "infinite")
    return SampEnResult(-math.log(a_count / b_count), a_count, b_count)


def sample_entropy(window, params: SampEnParams) -> float:
    return sample_entropy_counts(window, params).value


def sample_entropy_series(z, params: SampEnParams, stride: int = 1) -> IndicatorSeries:
    """Sample entropy over sliding windows of `params.l` samples ending at each `t`."""
    z = _as_2d(z)
    l = params.l
    if z.shape[0] < l:
        raise ValueError(f"series of {z.shape[0]} points shorter than window {l}")
    times = np.arange(l - 1, z.shape[0], stride)
    vals = np.empty(times.size)
    flags = []
    for i, t in enumerate(times):
        res = sample_entropy_counts(z[t - l + 1 : t + 1], params)
        vals[i] = res.value
        if res.flag == "infinite":
            flags.append(int(t))
    return IndicatorSeries(times, vals, "sample-entropy", {**params.to_dict(), "stride": stride},
                           tuple(("infinite", t) for t in flags))


# --- transition probability -----------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned product of intervals; each bound may be open or closed."""

    lower: tuple
    upper: tuple
    closed_lower: bool = False
    closed_upper: bool = True

    def contains(self, z) -> np.ndarray:
        z = _as_2d(z)
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        above = z >= lo if self.closed_lower else z > lo
        below = z <= hi if self.closed_upper else z < hi
        return np.all(above & below, axis=1)

    def to_dict(self):
        return {
            "lower": [float(v) for v in self.lower],
            "upper": [float(v) for v in self.upper],
            "closed_lower": self.closed_lower,
            "closed_upper": self.closed_upper,
        }


@dataclass(frozen=True)
class RegionSpec:
    """Regions A and B; ``b=None`` means B is the complement of A."""

    a: Box
    b: Optional[Box] = None

    @classmethod
    def split(cls, point: float, dim: int = 1) -> "RegionSpec":
        """``A = (-inf, point]`` and ``B = (point, inf)`` along every axis."""
        inf = math.inf
        a = Box((-inf,) * dim, (point,) * dim, closed_lower=False, closed_upper=True)
        b = Box((point,) * dim, (inf,) * dim, closed_lower=False, closed_upper=False)
        return cls(a, b)

    def in_a(self, z) -> np.ndarray:
        return self.a.contains(z)

    def in_b(self, z) -> np.ndarray:
        if self.b is None:
            return ~self.a.contains(z)
        return self.b.contains(z)

    def to_dict(self):
        return {"A": self.a.to_dict(), "B": None if self.b is None else self.b.to_dict()}


def transition_probability_series(
    z,
    regions: RegionSpec,
    ensemble_size: int = 100,
    *,
    sde: Optional[LatentSde] = None,
    dt: Optional[float] = None,
    seed: int = 0,
) -> IndicatorSeries:
    """``TP(t) = <I_A(z(0)) I_B(z(t))> / <I_A(z(0))>`` for lags ``t = 0..N-E``.

    The ensemble consists of the first `ensemble_size` observed points used as
    time origins.  When `sde` is given, each origin instead starts one
    simulated path of the fitted model (seeded) and lag `t` is read off that path.
    """
    z = _as_2d(z)
    E = int(ensemble_size)
    n = z.shape[0]
    if E < 1 or n < E:
        raise ValueError(f"need at least {E} points, got {n}")
    origins_in_a = regions.in_a(z[:E])
    if not origins_in_a.any():
        raise ValueError("no ensemble origin lies in region A")
    lags = np.arange(0, n - E + 1)
    params = {"ensemble_size": E, "regions": regions.to_dict(), "mode": "observed"}
    if sde is None:
        in_b = regions.in_b(z)
        hits = np.zeros(lags.size)
        for i in np.nonzero(origins_in_a)[0]:
            hits += in_b[i + lags]
    else:
        if dt is None:
            raise ValueError("Monte Carlo mode needs dt")
        ss = np.random.SeedSequence(seed)
        hits = np.zeros(lags.size)
        for i, child in zip(np.nonzero(origins_in_a)[0], ss.spawn(int(origins_in_a.sum()))):
            path = simulate(sde, z[i], lags.size, dt, seed=child)
            hits += regions.in_b(path)
        params.update(mode="monte-carlo", seed=seed, dt=dt)
    vals = hits / origins_in_a.sum()
    return IndicatorSeries(lags, vals, "transition-probability", params)


def warning_point(series: IndicatorSeries, threshold: float = 0.5) -> Optional[int]:
    """Position of the first value >= threshold, NaN skipped; None if never crossed."""
    vals = series.values
    hit = np.nonzero(~np.isnan(vals) & (vals >= threshold))[0]
    return int(hit[0]) if hit.size else None


def warning_time(series: IndicatorSeries, threshold: float = 0.5) -> Optional[int]:
    i = warning_point(series, threshold)
    return None if i is None else int(series.times[i])


# --- baseline ---------------------------------------------------------------


def std_baseline(z, l: int, stride: int = 1) -> IndicatorSeries:
    """Sliding population standard deviation, averaged over components."""
    z = _as_2d(z)
    if not 1 <= l <= z.shape[0]:
        raise ValueError(f"window {l} does not fit a series of {z.shape[0]}")
    windows = np.lib.stride_tricks.sliding_window_view(z, l, axis=0)[::stride]
    vals = windows.std(axis=2).mean(axis=1)
    times = np.arange(l - 1, z.shape[0], stride)
    return IndicatorSeries(times, vals, "std-baseline", {"l": l, "stride": stride})


def local_maxima(values: Sequence[float], prominence: float = 0.0) -> np.ndarray:
    """Indices of local maxima; NaN entries never qualify."""
    vals = np.asarray(values, dtype=float)
    finite = ~np.isnan(vals)
    if not finite.any():
        return np.array([], dtype=int)
    filled = np.where(finite, vals, np.nanmin(vals) - 1.0)
    peaks, _ = find_peaks(filled, prominence=prominence if prominence > 0 else None)
    return peaks[finite[peaks]]
