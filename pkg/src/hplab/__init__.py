"""High-order finite elements for Helmholtz scattering with perfectly matched layers.

Modules
-------
mesh         polar meshes fitted to the obstacle, interface and layer circles
elements     Lagrange bases, quadrature and curved element maps
pml          radial complex-stretching profiles and their coefficients
forms        sesquilinear forms, assembly, data kinds and error norms
solver       banded/sparse LU solvers and Hermitian eigen/norm estimators
reference    Bessel/Hankel functions, Mie series and manufactured fields
rotational   exact Fourier-in-angle solver for rotationally symmetric meshes
verify       smoothing operator, elliptic projection and measured constants
experiments  convergence, pollution, threshold and PML-width studies
cli          command-line entry point
"""

__version__ = "0.1.0"
