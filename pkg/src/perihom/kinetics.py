"""Smoluchowski aggregation rates, their Lipschitz truncation, and the
surface-deposition exchange law.

Species index i (1-based) means "aggregate of i monomers", so the mass
weight of species i is i.  Binary coagulation with a symmetric kernel
beta_ij gives

    R_i(s) = 1/2 sum_{k+j=i} beta_kj s_k s_j - sum_{j<=N} beta_ij s_i s_j,

and the resolved monomer mass sum_i i R_i equals
-1/2 sum_{i+j>N} (i+j) beta_ij s_i s_j <= 0: mass only leaves through
aggregates larger than the resolved range.  The truncated variant evaluates
R at concentrations clipped to [0, M], which makes it globally Lipschitz.

Deposition exchanges bulk and surface mass at rates a_i (attach) and b_i
(detach); the step here integrates v' = a u - b v exactly for u frozen over
the step, and exchange_phi returns the factor that makes the matching bulk
flux conserve the pair discretely.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class CoagulationKernel:
    """Symmetric nonnegative rate matrix plus the truncation threshold."""

    beta: np.ndarray
    M: float

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        object.__setattr__(self, "beta", beta)
        if beta.ndim != 2 or beta.shape[0] != beta.shape[1]:
            raise ConfigError(f"beta must be square, got shape {beta.shape}")
        if beta.shape[0] < 2:
            raise ConfigError("at least 2 species are required")
        if not np.array_equal(beta, beta.T):
            raise ConfigError("beta must be exactly symmetric")
        if (beta < 0).any():
            raise ConfigError("beta entries must be nonnegative")
        if not self.M > 0:
            raise ConfigError(f"truncation threshold must be positive, got {self.M}")

    @property
    def n_species(self):
        return self.beta.shape[0]


@dataclass(frozen=True)
class DepositionParams:
    """Attachment/detachment rates per species (nonnegative; zero disables)."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        b = np.asarray(self.b, dtype=float)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if a.shape != b.shape or a.ndim != 1:
            raise ConfigError("deposition rates a and b must be equal-length vectors")
        if (a < 0).any() or (b < 0).any():
            raise ConfigError("deposition rates must be nonnegative")

    @property
    def n_species(self):
        return self.a.shape[0]


def kernel_from_preset(name, n_species, c, M):
    """Named kernel families: constant, sum_thirds c(i^1/3 + j^1/3), and
    brownian c(i^1/3 + j^1/3)(i^-1/3 + j^-1/3)."""
    i = np.arange(1, n_species + 1, dtype=float)
    ci = np.cbrt(i)
    if name == "constant":
        beta = np.full((n_species, n_species), float(c))
    elif name == "sum_thirds":
        beta = c * (ci[:, None] + ci[None, :])
    elif name == "brownian":
        beta = c * (ci[:, None] + ci[None, :]) * (1.0 / ci[:, None] + 1.0 / ci[None, :])
    else:
        raise ConfigError(f"unknown kernel preset {name!r}")
    return CoagulationKernel(beta=beta, M=M)


def rates(s, kernel):
    """Aggregation rates for a state s of shape (N,) or (N, ...griddims)."""
    s = np.asarray(s, dtype=float)
    beta = kernel.beta
    n = kernel.n_species
    loss = s * np.einsum("ij,j...->i...", beta, s)
    gain = np.zeros_like(s)
    for i in range(1, n):  # species i+1 formed from pairs (a+1) + (i-a)
        acc = np.zeros_like(s[0])
        for a in range(i):
            acc = acc + beta[a, i - 1 - a] * s[a] * s[i - 1 - a]
        gain[i] = 0.5 * acc
    return gain - loss


def clip_state(s, M):
    """The truncation sigma_M: clip componentwise to [0, M]."""
    return np.clip(np.asarray(s, dtype=float), 0.0, M)


def truncated_rates(s, kernel):
    """Rates evaluated at the clipped state (globally Lipschitz)."""
    return rates(clip_state(s, kernel.M), kernel)


def loss_gain_split(s, kernel):
    """(gain, loss_multiplier) with rates = gain - loss_multiplier * s,
    both evaluated at the clipped state; used for semi-implicit stepping."""
    sc = clip_state(s, kernel.M)
    beta = kernel.beta
    n = kernel.n_species
    loss_mult = np.einsum("ij,j...->i...", beta, sc)
    gain = np.zeros_like(sc)
    for i in range(1, n):
        acc = np.zeros_like(sc[0])
        for a in range(i):
            acc = acc + beta[a, i - 1 - a] * sc[a] * sc[i - 1 - a]
        gain[i] = 0.5 * acc
    return gain, loss_mult


def monomer_mass_rate(s, kernel):
    """sum_i i * R_i(s): the resolved monomer-mass production rate."""
    r = rates(s, kernel)
    weights = np.arange(1, kernel.n_species + 1, dtype=float)
    return float(np.tensordot(weights, r, axes=(0, 0)).sum()) if r.ndim > 1 \
        else float(weights @ r)


def deposition_rhs(u_trace, v, i, params):
    """dv_i/dt = a_i u - b_i v for the surface mass of species i."""
    return params.a[i] * u_trace - params.b[i] * v


def exchange_phi(b, dt):
    """(1 - e^{-b dt}) / (b dt), the averaging factor of the exact step;
    equals 1 at b = 0 and makes the bulk exchange flux phi*(a u - b v)
    transfer exactly the mass the surface gains."""
    x = b * dt
    if np.isscalar(x):
        return 1.0 if x == 0.0 else float(-np.expm1(-x) / x)
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    nz = x != 0.0
    out[nz] = -np.expm1(-x[nz]) / x[nz]
    return out


def deposition_step(u_trace, v, a, b, dt):
    """Advance v' = a u - b v by dt with u frozen (exact integrating factor):
    v+ = v e^{-b dt} + (a u / b)(1 - e^{-b dt})."""
    phi = exchange_phi(b, dt)
    return v + dt * phi * (a * u_trace - b * v)


def auto_threshold(beta, u0_max, v0_max, deposition, t_end):
    """Default truncation threshold from the initial data.

    Builds per-species bounds M_i = max(initial bulk, detach-balanced surface
    load, pairwise production from smaller species over the horizon) and
    returns 2 (T+1) max_i M_i, large enough that clipping never activates in
    healthy runs (activations are still counted and reported).
    """
    beta = np.asarray(beta, dtype=float)
    n = beta.shape[0]
    u0_max = np.asarray(u0_max, dtype=float)
    v0_max = np.asarray(v0_max, dtype=float)
    horizon = t_end + 1.0
    m = np.zeros(n)
    for i in range(n):
        bound = u0_max[i]
        if deposition is not None and deposition.a[i] > 0:
            bound = max(bound, deposition.b[i] * v0_max[i] / deposition.a[i])
        prod = 0.0
        for a in range(i):
            prod += beta[a, i - 1 - a] * m[a] * m[i - 1 - a]
        m[i] = max(bound, 0.5 * prod * horizon)
    return max(2.0 * horizon * m.max(), 1.0)
