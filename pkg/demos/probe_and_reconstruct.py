"""Probe s-injectivity on the flat disc and reconstruct a solenoidal field.

Run with ``python3 demos/probe_and_reconstruct.py``.
"""

import numpy as np

from geoxray import assemble, euclidean_disc, fan_family, injectivity_probe, reconstruct, solenoidal_basis
from geoxray.fields import Grid


def main():
    disc = euclidean_disc()
    fam = fan_family(disc)
    grid = Grid.over(disc, 16)
    A = assemble(fam, grid, 2, layout="spline")
    basis = solenoidal_basis(disc, grid)
    rep = injectivity_probe(A, basis)
    print(rep.summary())

    rng = np.random.default_rng(0)
    f = basis.B @ rng.standard_normal(basis.dim)
    for noise in (0.0, 0.01):
        r = reconstruct(A, A.matrix @ f, truth=f, noise=noise, rng=np.random.default_rng(1))
        print(f"noise {noise:.2f}: {r.iterations} CG iterations, relative error {r.rel_error:.3e}")


if __name__ == "__main__":
    main()
