"""Federated split GAN training with a logical-time device simulator."""

__version__ = "0.1.0"
