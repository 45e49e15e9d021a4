"""Early-warning analysis of high-dimensional time series.

Observations are embedded with a (directed) diffusion map, the embedded
coordinates are modelled by a polynomial latent SDE, and sliding-window
indicators flag approaching transitions between meta-stable states.
"""

from . import diffusion, indicators, ingest, sde, synthetic
from .diffusion import DiffusionEmbedding, KernelConfig, diffusion_map, extend
from .indicators import IndicatorSeries, RegionSpec, SampEnParams
from .ingest import RawRecording, TimeSeriesMatrix
from .sde import LatentSde, fit, make_snapshots, simulate

__all__ = [
    "diffusion",
    "indicators",
    "ingest",
    "sde",
    "synthetic",
    "DiffusionEmbedding",
    "KernelConfig",
    "diffusion_map",
    "extend",
    "IndicatorSeries",
    "RegionSpec",
    "SampEnParams",
    "RawRecording",
    "TimeSeriesMatrix",
    "LatentSde",
    "fit",
    "make_snapshots",
    "simulate",
]

__version__ = "0.1.0"
