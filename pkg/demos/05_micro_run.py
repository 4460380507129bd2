"""A pore-scale run on a perforated domain.

Heat and two colloid species diffuse through the pore space between a 4x4
array of grains while monomers pair up, both species deposit onto the grain
surfaces, and the surfaces leak heat (Robin boundary).  The Soret/Dufour
couplings make the two subsystems feed each other, so every implicit step
iterates heat and colloid solves to a fixed point.  The diagnostics below
show the invariants worth watching: the temperature range staying inside the
initial bounds, heat dissipating through the leaky boundary, and each species'
bulk+surface budget responding only to mergers.
"""

import numpy as np

from perihom.cell_solver import CellCoefficients
from perihom.geometry import Disc, build_unit_cell, tile_domain
from perihom.kinetics import CoagulationKernel, DepositionParams
from perihom.micro_solver import MicroRunConfig, simulate_micro
from perihom.mollifier import build_kernel

cell = build_unit_cell(Disc((0.5, 0.5), 0.25), resolution=16,
                       robin_fraction=0.5)
dom = tile_domain(cell, 0.25)
coeffs = CellCoefficients.from_constants(16, kappa=1.0, tau=0.2,
                                         d=[1.0, 0.6], dufour=[0.2, 0.2])

c = (np.arange(dom.n) + 0.5) * dom.h
x, y = np.meshgrid(c, c, indexing="ij")
bump = lambda amp, kx: amp * (0.5 + 0.5 * np.cos(kx * np.pi * x) * np.cos(np.pi * y))

cfg = MicroRunConfig(
    domain=dom, coefficients=coeffs,
    kernel=CoagulationKernel(beta=0.5 * np.ones((2, 2)), M=10.0),
    deposition=DepositionParams(a=np.array([0.5, 0.5]),
                                b=np.array([1.0, 1.0])),
    g0=0.5, mollifier=build_kernel(4 * dom.h, dom.h),
    dt=2e-3, t_end=0.1,
    theta0=np.where(dom.mask, bump(1.0, 1), 0.0),
    u0=np.stack([np.where(dom.mask, bump(1.0, 1), 0.0),
                 np.where(dom.mask, bump(0.5, 2), 0.0)]))

out = simulate_micro(cfg)
print(f"grid {dom.n}^2, {int(np.count_nonzero(dom.mask))} pore cells, "
      f"{dom.n_faces} surface faces, {cfg.n_steps} steps of dt={cfg.dt}")
print(f"bound violations recorded: {len(out.violations)}\n")

print("   t      theta in          fp  contr.   heat      pair mass 1/2")
for row in out.diagnostics[::10]:
    print(f"  {row['t']:.3f}  [{row['theta_min']:.4f}, {row['theta_max']:.4f}]"
          f"  {row['fp_iterations']:2d}  {row['contraction_factor']:.4f} "
          f"{row['heat_total']:.5f}   {row['pair_mass_1']:.5f} "
          f"{row['pair_mass_2']:.5f}")

heat = [row["heat_total"] for row in out.diagnostics]
total = [row["mass_total"] for row in out.diagnostics]
print(f"\nheat monotone under Robin leakage: "
      f"{all(b <= a for a, b in zip(heat, heat[1:]))}")
print(f"monomer-equivalent mass change {total[-1] - total[0]:+.5f} "
      f"(oversize mergers only; deposition moves mass, never loses it)")
