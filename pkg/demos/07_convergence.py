"""Refinement toward the homogenized limit.

The question behind the whole package: does the resolved pore-scale solution
approach the upscaled one as the microstructure period shrinks?  The converge
mode answers it end to end — solve the cell problems, run the macroscopic
model once, then rerun the pore-scale model at a sequence of periods and
measure the L2 distance over the pore space.  This drives the same entry
point as `perihom converge --config ... --out ...` and leaves the CSV/manifest
artifacts behind for inspection.
"""

import csv
import pathlib
import tempfile

from perihom.harness import load_config, run

CONFIG = """
mode = "converge"

[geometry]
shape = "disc"
radius = 0.25
resolution = 16

[coefficients]
kappa = 1.0
d = [1.0]

[solver]
dt = 2e-3
t_end = 2e-2
macro_n = 64
epsilons = [0.5, 0.25, 0.125]

[initial]
theta = {profile = "cosine", amp = 1.0}
u = [{profile = "cosine", amp = 0.5}]
"""

out_dir = pathlib.Path(__file__).parent / "out" / "converge"
cfg_path = pathlib.Path(tempfile.mkdtemp()) / "converge.toml"
cfg_path.write_text(CONFIG)

run(load_config(cfg_path, mode="converge", out_dir=out_dir))

with open(out_dir / "converge.csv", newline="") as f:
    rows = list(csv.DictReader(f))

print("periods   grid     e(eps) = |theta_eps - theta_0| + sum_i |u_eps - u_0|"
      "   e(2 eps)/e(eps)")
for r in rows:
    ratio = f"{float(r['ratio']):.2f}" if r["ratio"] else "  - "
    print(f"  {r['ell']:>3}x{r['ell']:<4} {r['grid']:>4}^2   "
          f"{float(r['error']):.6f}{'':34s}{ratio}")

print(f"\nhalving the period shrinks the distance every time; artifacts in "
      f"{out_dir}/")
