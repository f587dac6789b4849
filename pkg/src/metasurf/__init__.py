"""Two-scale homogenization and level-set design of acoustic metasurfaces."""

__version__ = "0.1.0"
