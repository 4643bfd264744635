"""Few-shot hand-gesture recognition from windowed sEMG signals.

A dependency-light numpy implementation: a small reverse-mode autodiff
engine, temporal-convolution + attention meta-learner, sEMG preprocessing,
episodic N-way k-shot sampling and training.
"""

__version__ = "0.1.0"
