"""Speaker-conditioned phrase break prediction, desk scale."""

__version__ = "0.1.0"
