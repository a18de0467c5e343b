"""Two-stage target speaker extraction on log-mel spectrograms.

A soft mask removes interference, then a rectified-flow transformer adds back
the spectral detail the mask cannot restore, usually in one Euler step.
Everything runs on numpy with a small built-in reverse-mode autodiff.
"""

__version__ = "0.1.0"
