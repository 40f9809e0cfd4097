"""Multi-task semi-supervised adversarial autoencoding for speech emotion recognition."""

__version__ = "0.1.0"
