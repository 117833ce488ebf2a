"""Text-to-video generation by extending a text-to-image diffusion stack with pseudo-3D layers."""
from pseudo3d.errors import (
    ConfigurationError,
    InvalidArgumentError,
    InvalidShapeError,
    InvalidStateError,
    Pseudo3DError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "InvalidArgumentError",
    "InvalidShapeError",
    "InvalidStateError",
    "Pseudo3DError",
    "__version__",
]
