"""Perceptual-conditioned long-horizon video prediction on a synthetic world.

The package couples a joint rectified-flow denoiser over stacked RGB, depth,
flow (and optionally segmentation) latent channels with a modality-split
memory bank and a group-wise staircase noise schedule, so frames stream out
of a fixed-size window indefinitely.  A billiard-ball renderer with exact
depth, flow, and segmentation ground truth makes every stage checkable.
"""

from .config import RunConfig, config_from_dict, load_config
from .errors import (
    ConfigurationError,
    DataError,
    FormatError,
    HorizoncastError,
    NumericError,
    StateError,
)

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "config_from_dict",
    "load_config",
    "HorizoncastError",
    "ConfigurationError",
    "DataError",
    "FormatError",
    "NumericError",
    "StateError",
    "__version__",
]
