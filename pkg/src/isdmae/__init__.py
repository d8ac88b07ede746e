"""Dual intensity/spatial masked autoencoder pretraining for CT images, on numpy."""

__version__ = "0.1.0"
