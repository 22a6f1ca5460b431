"""Multi-task text localization and script clustering at desk scale."""

__version__ = "0.1.0"
