"""Desk-scale GAN training with an adaptive forward-diffusion chain.

Submodules: ``tensor`` (numpy autodiff and seeded streams), ``diffusion``,
``nets``, ``losses``, ``metrics``, ``data``, ``trainer``, ``config`` and
``cli``.
"""

from diffgan.errors import (
    ArgumentError,
    CheckpointError,
    ConfigError,
    DatasetError,
    DiffGanError,
    DimensionError,
    NumericError,
)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError",
    "CheckpointError",
    "ConfigError",
    "DatasetError",
    "DiffGanError",
    "DimensionError",
    "NumericError",
    "__version__",
]
