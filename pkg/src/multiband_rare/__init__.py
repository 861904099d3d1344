"""Multi-band Rydberg atomic receiver: quantum response, transfer chain and resource allocation."""

__version__ = "0.1.0"
