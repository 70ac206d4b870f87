"""Drone + mobile charger scheduling with a hybrid-action latent policy."""

__version__ = "0.1.0"
