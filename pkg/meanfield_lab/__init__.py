"""
meanfield-lab - particle, kinetic and hydrodynamic simulations of
interacting agent systems, with optimal-transport convergence checks.
"""

__version__ = "1.0.0"
