"""quakesynth: desk-scale elastic wave surrogate pipeline.

Reference FD simulation, a multiple-input Fourier neural operator,
diffusion-based trace enhancement, and seismogram goodness-of-fit metrics.
"""

__version__ = "0.1.0"
