"""Compactly supported smoothing kernel and the mollified gradient.

The kernel is the classical bump J(s) ∝ exp(δ²/(|s|² − δ²)) for |s| < δ and 0
outside (the exponent is evaluated in units of δ, which keeps the profile
identical for every δ; in raw length units the exponent is ~ -1/δ² and every
weight underflows to zero at desk scale).  Weights are sampled at grid
offsets and renormalized to sum to exactly 1, so constants are reproduced
bitwise.

The mollified gradient is the gradient of the convolved field: smooth first,
then apply centered differences (one-sided where a neighbor is missing).
Near the outer boundary and the grain interfaces the convolution weights are
renormalized over the covered pore cells, which preserves constants and
positivity.  Smoothing uses the deviation form

    s_i = f_i + Σ_o w_o m_o (f_o - f_i) / Σ_o w_o m_o

which is algebraically the renormalized convolution but evaluates to exactly
f_i for constant fields.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, SolverError


@dataclass(frozen=True)
class MollifierSpec:
    """Discrete kernel: smoothing radius, grid spacing, and the normalized
    weight stencil (a (2r+1) x (2r+1) array centered at index r)."""

    delta: float
    grid_spacing: float
    weights: np.ndarray
    normalization: float  # raw stencil total before renormalization

    @property
    def radius(self):
        return self.weights.shape[0] // 2


def build_kernel(delta, grid_spacing):
    """Sample and normalize the bump kernel on grid offsets.

    delta must be at least two grid spacings, otherwise the stencil
    degenerates to a point mass and mollification does nothing.
    """
    h = float(grid_spacing)
    delta = float(delta)
    if h <= 0.0:
        raise ConfigError(f"grid spacing must be positive, got {grid_spacing}")
    if delta < 2.0 * h:
        raise ConfigError(
            f"mollifier radius delta={delta} must be >= 2 grid spacings (h={h})")

    r = int(math.ceil(delta / h)) - 1
    offs = np.arange(-r, r + 1) * h
    dx, dy = np.meshgrid(offs, offs, indexing="ij")
    s2 = (dx**2 + dy**2) / delta**2  # |s/δ|²
    weights = np.zeros_like(s2)
    inside = s2 < 1.0
    weights[inside] = np.exp(1.0 / (s2[inside] - 1.0))
    total = float(weights.sum())
    weights /= total
    return MollifierSpec(delta, h, weights, total)


def _offsets(spec):
    """Nonzero stencil entries in a fixed row-major order."""
    r = spec.radius
    di, dj = np.nonzero(spec.weights)
    return [(int(a) - r, int(b) - r, float(spec.weights[a, b]))
            for a, b in zip(di, dj)]


def smooth(field, spec, mask=None):
    """Mask-renormalized convolution of a pore field with the kernel.

    Returns the smoothed field on pore cells (zero elsewhere).  Constants
    are reproduced exactly; see the module docstring for the deviation form.
    """
    field = np.asarray(field, dtype=float)
    if mask is None:
        mask = np.ones(field.shape, dtype=bool)
    nx, ny = field.shape
    r = spec.radius

    mpad = np.zeros((nx + 2 * r, ny + 2 * r))
    mpad[r:r + nx, r:r + ny] = mask
    fpad = np.zeros_like(mpad)
    fpad[r:r + nx, r:r + ny] = np.where(mask, field, 0.0)

    dev = np.zeros((nx, ny))
    den = np.zeros((nx, ny))
    centered = np.where(mask, field, 0.0)
    for di, dj, w in _offsets(spec):
        ms = mpad[r + di:r + di + nx, r + dj:r + dj + ny]
        fs = fpad[r + di:r + di + nx, r + dj:r + dj + ny]
        dev += w * (fs - centered * ms)
        den += w * ms

    if not (den[mask] > 0.0).all():
        raise SolverError("mollifier stencil found no covered pore cells; "
                          "the pore space is not connected at this scale")
    out = np.zeros((nx, ny))
    out[mask] = centered[mask] + dev[mask] / den[mask]
    return out


def mollified_gradient(field, spec, mask=None):
    """Gradient of the smoothed field: centered differences on pore cells,
    one-sided where a pore neighbor is missing, zero where isolated."""
    field = np.asarray(field, dtype=float)
    if mask is None:
        mask = np.ones(field.shape, dtype=bool)
    s = smooth(field, spec, mask)
    h = spec.grid_spacing

    spad = np.pad(s, 1)
    mpad = np.pad(mask, 1)
    c = spad[1:-1, 1:-1]

    out = []
    for axis in (0, 1):
        lo = np.roll(spad, 1, axis=axis)[1:-1, 1:-1]
        hi = np.roll(spad, -1, axis=axis)[1:-1, 1:-1]
        has_lo = np.roll(mpad, 1, axis=axis)[1:-1, 1:-1]
        has_hi = np.roll(mpad, -1, axis=axis)[1:-1, 1:-1]
        g = np.where(
            has_lo & has_hi, (hi - lo) / (2.0 * h),
            np.where(has_hi, (hi - c) / h,
                     np.where(has_lo, (c - lo) / h, 0.0)))
        out.append(np.where(mask, g, 0.0))
    return out[0], out[1]


def dump_kernel_csv(spec, path):
    """Write the stencil as CSV rows (x offset cells, y offset cells, weight)."""
    r = spec.radius
    lines = ["dx_cells,dy_cells,weight"]
    for di, dj, w in _offsets(spec):
        lines.append(f"{di},{dj},{w!r}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
