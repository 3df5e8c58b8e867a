"""KAM-style diagonalization of quasi-periodic lattice operators with a hierarchical hull.

Modules: torus_model (dynamics and hull), lattice_algebra (banded matrices and
weighted norms), kam_engine (the induction), spectral_lab (exact oracle and
Monte Carlo statistics), derivative_lab (finite-difference probes), cli.
"""

__version__ = "0.1.0"
