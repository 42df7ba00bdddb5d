"""Volume convergence of the FE isocontour of an exact sphere SDF (r = 0.5 in [-1, 1]^3).

    python scripts/sphere_convergence.py [--levels 4,8,16,32,64,128] [--sdf]

With ``--sdf`` the density-encoded sphere is also pushed through the SDF
construction and the grid volume of the raw and smoothed fields is reported.
"""
import argparse

from simpsdf import cases, geometry, rbf, sdf
from simpsdf.validation import convergence_order, sphere_convergence


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--levels", default="4,8,16,32,64,128")
    ap.add_argument("--sdf", action="store_true")
    a = ap.parse_args()
    levels = [int(v) for v in a.levels.split(",")]
    r = sphere_convergence(levels)
    print("   N        h      volume    rel.err")
    for n, h, v, e in zip(r["levels"], r["h"], r["volumes"], r["relative_errors"]):
        print(f"{n:4d}  {h:.5f}  {v:.8f}  {e:.3e}")
    print(f"fitted order p = {r['order']:.4f}")

    if a.sdf:
        exact = cases.sphere_volume()
        hs, raw_err, smooth_err = [], [], []
        for n in [n for n in levels if n <= 32]:
            mesh, rho = cases.sphere_density(n)
            f = sdf.build_sdf(mesh, rho, 0.5)
            s = rbf.smooth_sdf(f, refine=2)
            hs.append(f.grid.spacing)
            raw_err.append(abs(geometry.grid_isocontour_volume(f) - exact) / exact)
            smooth_err.append(abs(s.info["volume_smoothed"] - exact) / exact)
            print(f"N={n:3d}  SDF grid volume error {raw_err[-1]:.3e}  smoothed {smooth_err[-1]:.3e}")
        if len(hs) > 1:
            print(f"SDF order {convergence_order(hs, raw_err):.3f}, smoothed {convergence_order(hs, smooth_err):.3f}")


if __name__ == "__main__":
    main()
