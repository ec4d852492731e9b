"""nightstereo: low-light stereo perception on synthetic driving sequences."""

__version__ = "0.1.0"
