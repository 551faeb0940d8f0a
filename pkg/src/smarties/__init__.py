"""Sensor-agnostic masked autoencoder for multi-band remote sensing imagery."""

__version__ = "0.1.0"
