"""Loading and preprocessing of multichannel recordings.

Recordings are stored row = time sample, column = channel.  The
preprocessing chain is per-channel min-max rescaling followed by
block-average subsampling, which fixes the time step of the resulting
series to ``block / sample_rate``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

ORIGINS = ("raw-preprocessed", "latent-embedding", "synthetic")


class ParseError(ValueError):
    """Raised when a CSV file cannot be read as a numeric matrix."""


@dataclass(frozen=True)
class RawRecording:
    """Raw samples as recorded, before any preprocessing."""

    samples: np.ndarray
    sample_rate: float
    channel_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        samples = np.array(self.samples, dtype=float)
        if samples.ndim == 1:
            samples = samples[:, None]
        if samples.ndim != 2 or samples.shape[0] < 2 or samples.shape[1] < 1:
            raise ValueError(
                f"recording needs at least 2 rows and 1 column, got shape {samples.shape}"
            )
        _check_finite(samples, self.channel_names)
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.channel_names is not None:
            names = tuple(str(c) for c in self.channel_names)
            if len(names) != samples.shape[1]:
                raise ValueError(
                    f"{len(names)} channel names for {samples.shape[1]} columns"
                )
            object.__setattr__(self, "channel_names", names)
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True)
class TimeSeriesMatrix:
    """Uniformly sampled series, rows = time points, columns = dimensions."""

    data: np.ndarray
    dt: float
    origin: str = "raw-preprocessed"
    channel_names: Optional[tuple[str, ...]] = field(default=None, compare=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2:
            raise ValueError(f"data must be a matrix, got {data.ndim} dimensions")
        if data.shape[0] < 3:
            raise ValueError(f"need at least 3 time points, got {data.shape[0]}")
        _check_finite(data, self.channel_names)
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.origin not in ORIGINS:
            raise ValueError(f"origin must be one of {ORIGINS}, got {self.origin!r}")
        if self.channel_names is not None:
            object.__setattr__(
                self, "channel_names", tuple(str(c) for c in self.channel_names)
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_points(self) -> int:
        return self.data.shape[0]

    @property
    def n_dims(self) -> int:
        return self.data.shape[1]


def _check_finite(values: np.ndarray, names: Optional[Sequence[str]]) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        col = int(np.nonzero(bad.any(axis=0))[0][0])
        row = int(np.nonzero(bad[:, col])[0][0])
        label = names[col] if names is not None and col < len(names) else f"#{col}"
        raise ValueError(f"non-finite value in channel {label} at row {row}")


def rescale_channels(rec: RawRecording, lo: float = -0.5, hi: float = 0.5) -> RawRecording:
    """Map every channel affinely so that its minimum goes to `lo` and its maximum to `hi`.

    Constant channels are mapped to the midpoint ``(lo + hi) / 2``.
    """
    if not hi > lo:
        raise ValueError(f"need hi > lo, got lo={lo}, hi={hi}")
    x = rec.samples
    cmin = x.min(axis=0)
    cmax = x.max(axis=0)
    span = cmax - cmin
    flat = span == 0
    out = np.empty_like(x)
    # Channels already spanning [lo, hi] are left bit-for-bit unchanged (the map is
    # the identity there), which makes the operation exactly idempotent.
    done = (cmin == lo) & (cmax == hi)
    live = ~flat & ~done
    out[:, done] = x[:, done]
    # divide first: (x - min) / span lies in [0, 1] even for subnormal spans
    out[:, live] = lo + (x[:, live] - cmin[live]) / span[live] * (hi - lo)
    for j in np.nonzero(live)[0]:
        out[x[:, j] == cmin[j], j] = lo
        out[x[:, j] == cmax[j], j] = hi
    out[:, flat] = 0.5 * (lo + hi)
    return RawRecording(out, rec.sample_rate, rec.channel_names)


def block_means(samples: np.ndarray, block: int) -> np.ndarray:
    """Means of consecutive `block`-row blocks; a trailing partial block is dropped."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    block = int(block)
    if block < 1:
        raise ValueError(f"block must be >= 1, got {block}")
    n = samples.shape[0]
    if block > n:
        raise ValueError(f"block {block} exceeds the {n} available rows")
    n_out = n // block
    kept = samples[: n_out * block]
    if block == 1:
        return kept.copy()
    return kept.reshape(n_out, block, samples.shape[1]).mean(axis=1)


def block_subsample(rec: RawRecording, block: int) -> TimeSeriesMatrix:
    """Block-average a recording; the time step becomes ``block / sample_rate``."""
    data = block_means(rec.samples, block)
    return TimeSeriesMatrix(data, int(block) / rec.sample_rate, "raw-preprocessed", rec.channel_names)


def preprocess(
    rec: RawRecording, block: int = 16, lo: float = -0.5, hi: float = 0.5, rescale: bool = True
) -> TimeSeriesMatrix:
    """Rescale (optional) then block-subsample."""
    if rescale:
        rec = rescale_channels(rec, lo, hi)
    return block_subsample(rec, block)


def _parse_float(cell: str, row: int, col: int) -> float:
    text = cell.strip()
    try:
        return float(text)
    except ValueError:
        raise ParseError(f"non-numeric cell {cell!r} at row {row}, column {col}") from None


def _looks_numeric(cells: Sequence[str]) -> bool:
    try:
        for c in cells:
            float(c.strip())
    except ValueError:
        return False
    return True


def read_matrix(path, transpose: bool = False) -> tuple[np.ndarray, Optional[tuple[str, ...]]]:
    """Read a numeric CSV; a first row that does not parse as numbers is taken as header.

    Row indices in error messages are 0-based file lines.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: file is empty")
    header = None
    start = 0
    if not _looks_numeric(rows[0]):
        header = tuple(c.strip() for c in rows[0])
        start = 1
    width = len(rows[start]) if start < len(rows) else len(header or ())
    values = []
    for i in range(start, len(rows)):
        r = rows[i]
        if len(r) != width:
            raise ParseError(f"{path}: row {i} has {len(r)} columns, expected {width}")
        values.append([_parse_float(c, i, j) for j, c in enumerate(r)])
    if header is not None and len(header) != width:
        raise ParseError(f"{path}: header has {len(header)} names for {width} columns")
    data = np.array(values, dtype=float).reshape(len(values), width)
    if transpose:
        if header is not None:
            raise ParseError(f"{path}: a header row cannot be combined with transpose")
        data = data.T
    return data, header


def load_csv(path, sample_rate: float = 1.0, transpose: bool = False) -> RawRecording:
    """Load a recording from CSV (rows = time unless `transpose`)."""
    data, header = read_matrix(path, transpose=transpose)
    return RawRecording(data, sample_rate, header)


def write_matrix(data: np.ndarray, path, header: Optional[Sequence[str]] = None) -> None:
    """Write a matrix as CSV with 15 significant digits; NaN is written as ``NaN``."""
    data = np.asarray(data, dtype=float)
    if data.ndim == 1:
        data = data[:, None]
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if header is not None:
            fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v: float) -> str:
    if np.isnan(v):
        return "NaN"
    return f"{v:.15g}"


def save_csv(ts: TimeSeriesMatrix, path) -> None:
    write_matrix(ts.data, path, ts.channel_names)


def load_series(path, dt: float, origin: str = "raw-preprocessed") -> TimeSeriesMatrix:
    data, header = read_matrix(path)
    return TimeSeriesMatrix(data, dt, origin, header)
