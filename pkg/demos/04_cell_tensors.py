"""Cell problems and effective tensors.

Solving the periodic corrector problems on one reference cell turns an
oscillating microstructure into constant effective coefficients.  Two classic
configurations have closed-form or well-known answers and make good oracles:
a layered conductivity (harmonic mean across the layers, arithmetic mean along
them) and a dilute insulating disc (Maxwell's estimate).  The full tensor
report at the end shows every upscaled coefficient the macro solver consumes.
"""

import math

import numpy as np

from perihom.cell_solver import (
    CellCoefficients,
    assemble_tensors,
    solve_cell_problems,
    tensors_report_text,
)
from perihom.geometry import Disc, build_unit_cell
from perihom.kinetics import DepositionParams

res = 128
plain = build_unit_cell(None, resolution=res)
centers = (np.arange(res) + 0.5) / res

print("=== layered conductivity 1 + a sin(2 pi y1) ===")
print("   a     K11      harmonic    K22      arithmetic")
for a in (0.0, 0.2, 0.4, 0.6, 0.8):
    kappa = 1.0 + a * np.sin(2 * np.pi * centers)[:, None] * np.ones((1, res))
    coeffs = CellCoefficients(kappa=kappa, tau=np.zeros((res, res)),
                              d=np.ones((1, res, res)),
                              dufour=np.zeros((1, res, res)))
    t = assemble_tensors(solve_cell_problems(plain, coeffs), coeffs, plain)
    print(f"  {a:.1f}   {t.K[0, 0]:.5f}  {math.sqrt(1 - a * a):.5f}     "
          f"{t.K[1, 1]:.5f}  1.00000")

print("\n=== insulating disc, volume fraction f ===")
print("   f      K11 (flux form)   Maxwell (1-f)/(1+f)")
for f in (0.02, 0.05, 0.10, 0.20):
    cell = build_unit_cell(Disc((0.5, 0.5), math.sqrt(f / math.pi)), res)
    coeffs = CellCoefficients.from_constants(res, kappa=1.0, tau=0.0,
                                             d=[1.0], dufour=[0.0])
    t = assemble_tensors(solve_cell_problems(cell, coeffs), coeffs, cell)
    print(f"  {f:.2f}     {t.K[0, 0]:.4f}          {(1 - f) / (1 + f):.4f}")

# A fully featured cell: disc grain, Soret/Dufour couplings, two species with
# different mobilities, deposition rates, and a leaky (Robin) boundary.
cell = build_unit_cell(Disc((0.5, 0.5), 0.25), resolution=64,
                       robin_fraction=0.5)
coeffs = CellCoefficients.from_constants(64, kappa=1.0, tau=0.3,
                                         d=[1.0, 0.5], dufour=[0.15, 0.1])
dep = DepositionParams(a=np.array([0.8, 0.4]), b=np.array([1.5, 1.0]))
tensors = assemble_tensors(solve_cell_problems(cell, coeffs), coeffs, cell,
                           deposition=dep, g0=0.7)
print("\n=== full tensor report (disc cell, coupled, leaky) ===")
print(tensors_report_text(tensors))
