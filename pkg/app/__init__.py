"""
pksflow: multi-species Patlak-Keller-Segel chemotaxis coupled to Navier-Stokes
near Poiseuille flow in the channel T x (-1, 1).

The package contains the Fourier-Chebyshev grid, elliptic solvers, the IMEX
integrator, norm diagnostics, the linearized-operator analysis and the
command-line harness that drives them.
"""

from .config import ExperimentConfig
