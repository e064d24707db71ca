"""Deterministic discrete-velocity solver for a thermostated kinetic model
with a linear deformation force.

Subpackage layout:

* ``grid``      -- velocity grid, quadrature, field (de)serialization
* ``linalg3``   -- dense 3x3 helpers (exponentials, bound probes)
* ``collision`` -- bilinear collision operator and collision frequency
* ``linop``     -- linearized collision operator and spectral probes
* ``steady``    -- steady-state solver (expansion + penalized remainder)
* ``dynamics``  -- time-dependent solver and decay diagnostics
* ``cli``       -- command-line entry point
"""

__version__ = "0.1.0"
