"""Seven-day daily admission forecasting by ward and clinical complexity."""

__version__ = "0.1.0"
