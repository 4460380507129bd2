"""Mollifier tests: kernel construction, mask-renormalized smoothing, and the
mollified gradient.

Oracles: a symmetric normalized kernel reproduces constants exactly and
affine fields exactly in the interior, so the mollified gradient of x is
(1, 0) there; linearity follows from the formula.  The L2-boundedness of the
operator must be insensitive to the perforation period epsilon.
"""

import math

import numpy as np
import pytest

from perihom.errors import ConfigError
from perihom.geometry import Disc, build_unit_cell, tile_domain
from perihom.mollifier import build_kernel, mollified_gradient, smooth


def cell_centers(n):
    c = (np.arange(n) + 0.5) / n
    return np.meshgrid(c, c, indexing="ij")


def test_kernel_weights_normalized_and_supported():
    spec = build_kernel(4.0 / 64, 1.0 / 64)
    assert abs(spec.weights.sum() - 1.0) < 1e-12
    assert (spec.weights >= 0.0).all()
    r = spec.radius
    # Zero outside the open disc |s| < delta.
    for di in range(-r, r + 1):
        for dj in range(-r, r + 1):
            if (di * di + dj * dj) >= 16:
                assert spec.weights[r + di, r + dj] == 0.0


def test_kernel_radial_profile_monotone_and_positive():
    spec = build_kernel(4.0 / 64, 1.0 / 64)
    r = spec.radius
    w0 = spec.weights[r, r]
    w2 = spec.weights[r + 2, r]
    assert w0 > w2 > 0.0


def test_kernel_symmetry_exact():
    spec = build_kernel(4.0 / 128, 1.0 / 128)
    r = spec.radius
    assert spec.weights[r + 2, r] == spec.weights[r, r + 2]
    assert spec.weights[r + 2, r] == spec.weights[r - 2, r]
    assert np.array_equal(spec.weights, spec.weights[::-1, :])
    assert np.array_equal(spec.weights, spec.weights.T)


def test_kernel_rejects_degenerate_radius():
    with pytest.raises(ConfigError):
        build_kernel(1.5 / 64, 1.0 / 64)


def test_constant_field_has_exactly_zero_gradient():
    cell = build_unit_cell(Disc((0.5, 0.5), 0.25), resolution=32)
    dom = tile_domain(cell, 0.25)
    spec = build_kernel(4.0 * dom.h, dom.h)
    field = np.where(dom.mask, 0.7319, 0.0)
    gx, gy = mollified_gradient(field, spec, dom.mask)
    assert np.all(gx == 0.0)
    assert np.all(gy == 0.0)


def test_constant_field_smooths_to_itself():
    n = 48
    mask = np.ones((n, n), dtype=bool)
    mask[10:20, 15:30] = False
    spec = build_kernel(4.0 / n, 1.0 / n)
    field = np.where(mask, 2.5, 0.0)
    s = smooth(field, spec, mask)
    assert np.all(s[mask] == 2.5)


def test_affine_field_gradient_interior():
    n = 256
    spec = build_kernel(4.0 / n, 1.0 / n)
    x, y = cell_centers(n)
    field = x
    gx, gy = mollified_gradient(field, spec)
    pad = int(math.ceil(4.0)) + 2  # stay a kernel radius plus a cell inside
    inner = (slice(pad, n - pad), slice(pad, n - pad))
    assert np.max(np.abs(gx[inner] - 1.0)) < 1e-6
    assert np.max(np.abs(gy[inner])) < 1e-6


def test_linearity():
    rng = np.random.default_rng(7)
    n = 64
    mask = np.ones((n, n), dtype=bool)
    mask[20:30, 20:30] = False
    spec = build_kernel(4.0 / n, 1.0 / n)
    f = rng.normal(size=(n, n)) * mask
    g = rng.normal(size=(n, n)) * mask
    a, b = 1.7, -0.4
    gxc, gyc = mollified_gradient(a * f + b * g, spec, mask)
    gxf, gyf = mollified_gradient(f, spec, mask)
    gxg, gyg = mollified_gradient(g, spec, mask)
    assert np.allclose(gxc, a * gxf + b * gxg, rtol=0, atol=1e-12)
    assert np.allclose(gyc, a * gyf + b * gyg, rtol=0, atol=1e-12)


def test_doubling_delta_does_not_sharpen():
    rng = np.random.default_rng(3)
    n = 128
    f = rng.normal(size=(n, n))
    g_small = mollified_gradient(f, build_kernel(4.0 / n, 1.0 / n))
    g_large = mollified_gradient(f, build_kernel(8.0 / n, 1.0 / n))
    sup_small = max(np.abs(g_small[0]).max(), np.abs(g_small[1]).max())
    sup_large = max(np.abs(g_large[0]).max(), np.abs(g_large[1]).max())
    assert sup_large <= sup_small


def test_operator_norm_insensitive_to_epsilon():
    # The L2 -> L2 bound of the mollified gradient depends on delta but not
    # on the perforation period.  Hold the domain grid and delta fixed and
    # vary only the tiling period (same disc, sampled per-cell so that both
    # tilings land on the same 128^2 grid).
    delta = 1.0 / 8.0
    sups = []
    for res, eps in ((32, 0.25), (16, 0.125)):
        cell = build_unit_cell(Disc((0.5, 0.5), 0.25), resolution=res)
        dom = tile_domain(cell, eps)
        assert dom.n == 128
        spec = build_kernel(delta, dom.h)
        h2 = dom.h**2
        rng = np.random.default_rng(11)
        best = 0.0
        for _ in range(10):
            f = rng.normal(size=dom.mask.shape) * dom.mask
            gx, gy = mollified_gradient(f, spec, dom.mask)
            num = math.sqrt(((gx**2 + gy**2) * dom.mask).sum() * h2)
            den = math.sqrt((f**2).sum() * h2)
            best = max(best, num / den)
        sups.append(best)
    assert abs(sups[0] - sups[1]) / max(sups) < 0.2


def test_gradient_of_mean_zero_noise_is_damped():
    # Smoothing before differencing must reduce the gradient magnitude of
    # grid-scale noise far below raw differencing.
    rng = np.random.default_rng(5)
    n = 128
    f = rng.normal(size=(n, n))
    spec = build_kernel(6.0 / n, 1.0 / n)
    gx, _ = mollified_gradient(f, spec)
    raw = (np.roll(f, -1, 0) - np.roll(f, 1, 0)) * n / 2.0
    assert np.abs(gx).max() < 0.2 * np.abs(raw).max()


def test_kernel_csv_dump(tmp_path):
    from perihom.mollifier import dump_kernel_csv

    spec = build_kernel(4.0 / 32, 1.0 / 32)
    path = tmp_path / "kernel.csv"
    dump_kernel_csv(spec, path)
    rows = np.loadtxt(path, delimiter=",", skiprows=1)
    assert abs(rows[:, 2].sum() - 1.0) < 1e-12
