"""Synthetic labeled 3D echocardiography at desk scale."""

__version__ = "0.1.0"
