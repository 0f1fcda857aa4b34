"""Digital twin of a ferrule-top Casimir force experiment."""

__version__ = "0.1.0"
