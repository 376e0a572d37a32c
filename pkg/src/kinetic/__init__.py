"""
Non-cutoff Boltzmann collision operator toolkit: kernels, lattices,
collision quadratures, functional-inequality checks and the cutoff
Picard solver.
"""

__version__ = "0.1.0"
