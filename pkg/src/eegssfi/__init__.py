"""EEG spatio-spectral feature images and a from-scratch CNN for task classification."""

__version__ = "0.1.0"
