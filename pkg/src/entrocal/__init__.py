"""entrocal: entropic calibration of discrete-time local-volatility models.

The package calibrates a Markov chain (an Euler scheme of a diffusion on a
log-price grid) to vanilla option prices by minimizing relative entropy to a
reference chain, subject to soft price and martingale constraints. The dual
problem is solved by coordinate-ascent sweeps over block potentials, with
optional Anderson acceleration and a coarse-to-fine ladder in time.
"""

__version__ = "0.1.0"
