"""Geodesic X-ray transform of symmetric tensor fields of order 0, 1 and 2.

Set ``GEOXRAY_THREADS`` before the first import to cap the BLAS thread count.
"""

import os as _os

_threads = _os.environ.get("GEOXRAY_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from .manifold import (BUILTIN_MANIFOLDS, BoundaryNormalFrame, CollarError, MetricChart,  # noqa: E402
                       boundary_frame, builtin_chart, christoffel, euclidean_disc, flat_torus_example2,
                       hyperbolic_disc, sphere_cap, conjugate_strip_example1)
from .geodesics import (GeodesicPath, PhasePoint, conjugate_points, exp_map, is_simple, jacobi,  # noqa: E402
                        trace)
from .fields import AnalyticField, DofSpace, Grid, OneForm, SymmetricTensorField, sample_field  # noqa: E402
from .family import (CoverageReport, GeodesicFamily, build_chart, completeness_check, cosphere_grid,  # noqa: E402
                     fan_family, torus_family, wall_family)
from .transform import (RayData, TransformMatrix, adjoint_apply, assemble, htilde2_norm,  # noqa: E402
                        kernel_normal, normal_apply, xray)
from .decomposition import (Decomposition, boundary_normalize, decompose, divergence,  # noqa: E402
                            solve_dirichlet, sym_diff)
from .symbols import ellipticity_check, ellipticity_scan, principal_symbol  # noqa: E402
from .analysis import (injectivity_probe, random_solenoidal, reconstruct, solenoidal_basis,  # noqa: E402
                       stability_constant)

__all__ = [name for name in dir() if not name.startswith("_")]
