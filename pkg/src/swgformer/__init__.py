"""SwG-former sound event localization and detection, numpy edition."""

__version__ = "0.1.0"
