"""Compare ellipticity of the normal operator for a complete and a gapped family.

Run with ``python3 demos/symbol_scan.py``.
"""

from geoxray import ellipticity_scan, euclidean_disc, fan_family, wall_family
from geoxray.family import cosphere_grid


def main():
    disc = euclidean_disc()
    gapped_disc = euclidean_disc(outer=1.6, box=1.65)
    for name, chart, fam in (("fan", disc, fan_family(disc)), ("wall", gapped_disc, wall_family(gapped_disc))):
        X, XI = cosphere_grid(chart, 12, 12)
        scan = ellipticity_scan(chart, fam, X, XI, dist_tol=0.1)
        print(f"{name:5s} elliptic fraction {scan.fraction_elliptic:.3f}, "
              f"agreement with coverage {scan.agreement:.3f}")


if __name__ == "__main__":
    main()
