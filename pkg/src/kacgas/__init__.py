"""Boundary-driven Kawasaki lattice gas with a reflected Kac interaction.

Submodules: ``kernel`` (interaction and energy), ``microdyn`` (particle
simulation), ``observables``, ``pde`` (hydrodynamic equation), ``ldp``
(rate functional) and ``cli``.
"""

__version__ = "0.1.0"
