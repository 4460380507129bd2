"""Periodic cell problems and effective transport tensors.

Two corrector families live on the unit cell: temperature correctors
theta_bar^j solving div(kappa (e_j + grad theta_bar^j)) = 0 in the pore Y1
with no-flux on the grain boundary and periodicity across the cell faces,
and per-species colloid correctors u_bar_i^j with d_i in place of kappa.
Effective tensors are pore integrals of coefficient times corrected
gradients:

    K[j,k]   = int_Y1 kappa   (delta_jk + d theta_bar^k / d y_j)
    T_i[j,k] = int_Y1 tau_i   (delta_jk + d theta_bar^j / d y_k)
    D_i[j,k] = int_Y1 d_i     (delta_jk + d u_bar_i^j / d y_k)
    F_i[j,k] = int_Y1 delta_i (delta_jk + d u_bar_i^j / d y_k)

K carries the derivative on its row; the advective tensors T, D, F carry
the corrector label on the row, which is the orientation the upscaled
equations consume.  Boundary exchange reduces to surface means
A_i = a_i |Gamma| / |Y1|, B_i = b_i |Gamma| / |Y1| and the Robin sink
g_robin = g0 |Gamma_R| / |Y1|.  Stored tensors are plain pore integrals
("flux form"); dividing by the pore area |Y1| gives the normalized
coefficients of the limit equations, exposed as *_normalized properties.

Discretization: bilinear elements on the pore cells of the mask grid with
periodic node identification.  The singular pure-Neumann system is solved
by Jacobi-preconditioned conjugate gradients after a rank-one shift along
the pore-volume weight vector; the constant gauge is fixed afterwards by
subtracting the weighted mean, so correctors have exactly zero pore
average.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import LinearOperator, cg

from .errors import ConfigError, InvariantViolation, SolverError
from .geometry import pore_connected

log = logging.getLogger(__name__)

# Bilinear element on a square of side h, local nodes (0,0),(1,0),(1,1),(0,1):
# stiffness is h-independent; gradient integrals int_e dphi/dx scale with h.
_STIFF = np.array([[4.0, -1.0, -2.0, -1.0],
                   [-1.0, 4.0, -1.0, -2.0],
                   [-2.0, -1.0, 4.0, -1.0],
                   [-1.0, -2.0, -1.0, 4.0]]) / 6.0
_BX = np.array([-1.0, 1.0, 1.0, -1.0]) / 2.0
_BY = np.array([-1.0, -1.0, 1.0, 1.0]) / 2.0


@dataclass
class CellCoefficients:
    """Transport coefficients sampled at cell centers of the unit cell.

    kappa and tau may be shared scalars fields; d and dufour carry one field
    per species.  tau given as a single field is broadcast across species at
    tensor assembly (the heat equation uses one Soret field per species but
    configurations typically share it).
    """

    kappa: np.ndarray
    tau: np.ndarray
    d: np.ndarray
    dufour: np.ndarray

    def __post_init__(self):
        self.kappa = np.asarray(self.kappa, dtype=float)
        self.tau = np.asarray(self.tau, dtype=float)
        self.d = np.asarray(self.d, dtype=float)
        self.dufour = np.asarray(self.dufour, dtype=float)
        if self.kappa.ndim != 2 or self.kappa.shape[0] != self.kappa.shape[1]:
            raise ConfigError(f"kappa must be square 2-D, got {self.kappa.shape}")
        res = self.kappa.shape[0]
        if self.d.ndim != 3 or self.d.shape[1:] != (res, res):
            raise ConfigError(
                f"d must have shape (n_species, {res}, {res}), got {self.d.shape}")
        n = self.d.shape[0]
        if self.dufour.shape != self.d.shape:
            raise ConfigError(
                f"dufour must match d {self.d.shape}, got {self.dufour.shape}")
        if self.tau.shape not in ((res, res), (n, res, res)):
            raise ConfigError(
                f"tau must be ({res}, {res}) or ({n}, {res}, {res}), "
                f"got {self.tau.shape}")
        for name, arr in (("kappa", self.kappa), ("tau", self.tau),
                          ("d", self.d), ("dufour", self.dufour)):
            if not np.isfinite(arr).all():
                raise ConfigError(f"{name} contains non-finite values")
        if self.kappa.min() <= 0.0:
            raise ConfigError(f"kappa must be positive, min = {self.kappa.min()}")
        if self.d.min() <= 0.0:
            raise ConfigError(f"d must be positive, min = {self.d.min()}")

    @property
    def resolution(self):
        return self.kappa.shape[0]

    @property
    def n_species(self):
        return self.d.shape[0]

    def tau_per_species(self):
        """tau broadcast to one field per species."""
        if self.tau.ndim == 3:
            return self.tau
        return np.broadcast_to(self.tau, (self.n_species,) + self.tau.shape)

    @classmethod
    def from_constants(cls, resolution, kappa, tau, d, dufour):
        """Constant-coefficient fields; d and dufour are per-species lists."""
        shape = (resolution, resolution)
        return cls(kappa=np.full(shape, float(kappa)),
                   tau=np.full(shape, float(tau)),
                   d=np.stack([np.full(shape, float(v)) for v in d]),
                   dufour=np.stack([np.full(shape, float(v)) for v in dufour]))


@dataclass
class Correctors:
    """Zero-pore-mean corrector fields on the periodic node grid.

    theta_bar[j] and u_bar[i, j] are nodal fields of shape (res, res); node
    (p, q) sits at (p h, q h) and wraps periodically.  Values on nodes not
    touching any pore cell are zero.  Residuals are relative linear-solve
    residuals per problem.
    """

    theta_bar: np.ndarray
    u_bar: np.ndarray
    theta_residual: np.ndarray = field(default_factory=lambda: np.zeros(2))
    u_residual: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))


@dataclass
class EffectiveTensors:
    """Flux-form effective tensors (pore integrals) plus boundary means.

    K is symmetrized with the dropped asymmetry recorded; T, D, F are kept
    exactly as assembled.  K0 and D0 are the normalized coefficient means
    (1/|Y1|) int coeff; A, B, g_robin are already normalized by |Y1|.
    """

    K: np.ndarray
    K0: float
    K_asymmetry: float
    T: np.ndarray
    D: np.ndarray
    D0: np.ndarray
    F: np.ndarray
    A: np.ndarray
    B: np.ndarray
    g_robin: float
    pore_area: float
    perimeter: float
    robin_perimeter: float

    @property
    def n_species(self):
        return self.D.shape[0]

    @property
    def K_normalized(self):
        return self.K / self.pore_area

    @property
    def T_normalized(self):
        return self.T / self.pore_area

    @property
    def D_normalized(self):
        return self.D / self.pore_area

    @property
    def F_normalized(self):
        return self.F / self.pore_area


def _element_nodes(mask):
    """Periodic node ids (4 corners) for every pore cell, shape (ne, 4)."""
    res = mask.shape[0]
    ex, ey = np.nonzero(mask)
    xp = (ex + 1) % res
    yp = (ey + 1) % res
    n00 = ex * res + ey
    n10 = xp * res + ey
    n11 = xp * res + yp
    n01 = ex * res + yp
    return np.stack([n00, n10, n11, n01], axis=1)


class _PeriodicNeumannSystem:
    """Assembled cell problem for one scalar coefficient field."""

    def __init__(self, coeff, cell):
        coeff = np.asarray(coeff, dtype=float)
        mask = cell.pore_mask
        res = cell.resolution
        if coeff.shape != mask.shape:
            raise ConfigError(
                f"coefficient shape {coeff.shape} != cell grid {mask.shape}")
        if not pore_connected(mask, periodic=True):
            raise SolverError(
                "pore space is not connected across the periodic cell; "
                "the corrector problem is ill-posed")

        self.res = res
        self.h = cell.h
        self.elem_nodes = _element_nodes(mask)
        self.ce = coeff[mask]
        ne = self.elem_nodes.shape[0]

        data = (self.ce[:, None, None] * _STIFF[None]).ravel()
        rows = np.broadcast_to(self.elem_nodes[:, :, None], (ne, 4, 4)).ravel()
        cols = np.broadcast_to(self.elem_nodes[:, None, :], (ne, 4, 4)).ravel()
        full = coo_matrix((data, (rows, cols)), shape=(res**2, res**2)).tocsr()

        self.active = np.unique(self.elem_nodes)
        self.A = full[self.active][:, self.active]

        h2 = 1.0 / (res * res)
        w_full = np.bincount(self.elem_nodes.ravel(),
                             weights=np.full(4 * ne, h2 / 4.0),
                             minlength=res**2)
        self.w = w_full[self.active]

        diag = self.A.diagonal()
        self.shift = float(diag.mean())
        self.wn = self.w / np.linalg.norm(self.w)
        self.precon_diag = diag + self.shift * self.wn**2

    def _rhs(self, direction):
        bvec = (_BX if direction == 0 else _BY) * self.h
        contrib = -(self.ce[:, None] * bvec[None, :])
        b_full = np.bincount(self.elem_nodes.ravel(), weights=contrib.ravel(),
                             minlength=self.res**2)
        return b_full[self.active]

    def solve(self, direction, rtol=1e-10, maxiter=None):
        """Corrector for unit slope e_direction, as a full (res, res) field."""
        if direction not in (0, 1):
            raise ConfigError(f"direction must be 0 or 1, got {direction}")
        b = self._rhs(direction)
        n = self.A.shape[0]
        if maxiter is None:
            maxiter = max(2000, 60 * self.res)

        def matvec(x):
            return self.A @ x + self.shift * self.wn * (self.wn @ x)

        op = LinearOperator((n, n), matvec=matvec, dtype=float)
        pre = LinearOperator((n, n), matvec=lambda x: x / self.precon_diag,
                             dtype=float)
        x, info = cg(op, b, rtol=rtol, atol=0.0, maxiter=maxiter, M=pre)
        if info != 0:
            res_norm = np.linalg.norm(b - matvec(x))
            raise SolverError(
                f"cell-problem CG failed (info={info}) after {maxiter} "
                f"iterations; residual {res_norm:.3e} vs rhs {np.linalg.norm(b):.3e}")

        # Fix the constant gauge: exactly zero pore-volume-weighted mean.
        x = x - (self.w @ x) / self.w.sum()
        b_norm = np.linalg.norm(b)
        rel = 0.0 if b_norm == 0.0 else float(np.linalg.norm(b - matvec(x)) / b_norm)

        out = np.zeros(self.res**2)
        out[self.active] = x
        return out.reshape(self.res, self.res), rel


def solve_corrector(coeff, cell, direction, rtol=1e-10, maxiter=None):
    """Solve one cell problem; returns the nodal corrector field."""
    system = _PeriodicNeumannSystem(coeff, cell)
    field_, _ = system.solve(direction, rtol=rtol, maxiter=maxiter)
    return field_


def solve_cell_problems(cell, coeffs, rtol=1e-10, maxiter=None):
    """Solve both temperature and all per-species colloid cell problems."""
    res = cell.resolution
    if coeffs.resolution != res:
        raise ConfigError(
            f"coefficient resolution {coeffs.resolution} != cell {res}")
    n = coeffs.n_species

    theta_bar = np.zeros((2, res, res))
    theta_res = np.zeros(2)
    heat = _PeriodicNeumannSystem(coeffs.kappa, cell)
    for j in (0, 1):
        theta_bar[j], theta_res[j] = heat.solve(j, rtol=rtol, maxiter=maxiter)

    u_bar = np.zeros((n, 2, res, res))
    u_res = np.zeros((n, 2))
    for i in range(n):
        colloid = _PeriodicNeumannSystem(coeffs.d[i], cell)
        for j in (0, 1):
            u_bar[i, j], u_res[i, j] = colloid.solve(j, rtol=rtol,
                                                     maxiter=maxiter)
    return Correctors(theta_bar=theta_bar, u_bar=u_bar,
                      theta_residual=theta_res, u_residual=u_res)


def _gradient_integrals(field_, elem_nodes, h):
    """Per-element integrals (int_e df/dx, int_e df/dy) of a nodal field."""
    fe = field_.ravel()[elem_nodes]
    return fe @ (_BX * h), fe @ (_BY * h)


def assemble_tensors(correctors, coeffs, cell, deposition=None, g0=0.0,
                     asym_tol=1e-8):
    """Quadrature of corrected gradients into the effective tensors.

    deposition supplies the per-species attach/detach rates a_i, b_i for the
    boundary means; g0 is the Robin leakage coefficient.
    """
    mask = cell.pore_mask
    res = cell.resolution
    h = cell.h
    h2 = 1.0 / (res * res)
    elem_nodes = _element_nodes(mask)
    n = coeffs.n_species

    kappa_e = coeffs.kappa[mask]
    tau_e = coeffs.tau_per_species()[:, mask]
    d_e = coeffs.d[:, mask]
    dufour_e = coeffs.dufour[:, mask]

    theta_grads = [_gradient_integrals(correctors.theta_bar[j], elem_nodes, h)
                   for j in (0, 1)]

    K_raw = np.zeros((2, 2))
    base_kappa = float(kappa_e.sum() * h2)
    for k in (0, 1):
        gx, gy = theta_grads[k]
        K_raw[0, k] = float(kappa_e @ gx)
        K_raw[1, k] = float(kappa_e @ gy)
        K_raw[k, k] += base_kappa
    asym = float(np.abs(K_raw - K_raw.T).max())
    K = 0.5 * (K_raw + K_raw.T)
    if asym > asym_tol * max(np.abs(K).max(), 1.0):
        log.warning("effective heat tensor asymmetry %.3e exceeds %.1e of scale",
                    asym, asym_tol)

    T = np.zeros((n, 2, 2))
    for i in range(n):
        base = float(tau_e[i].sum() * h2)
        for j in (0, 1):
            gx, gy = theta_grads[j]
            T[i, j, 0] = float(tau_e[i] @ gx)
            T[i, j, 1] = float(tau_e[i] @ gy)
            T[i, j, j] += base

    D = np.zeros((n, 2, 2))
    F = np.zeros((n, 2, 2))
    D0 = np.zeros(n)
    for i in range(n):
        base_d = float(d_e[i].sum() * h2)
        base_f = float(dufour_e[i].sum() * h2)
        D0[i] = base_d / cell.pore_area
        for j in (0, 1):
            gx, gy = _gradient_integrals(correctors.u_bar[i, j], elem_nodes, h)
            D[i, j, 0] = float(d_e[i] @ gx)
            D[i, j, 1] = float(d_e[i] @ gy)
            F[i, j, 0] = float(dufour_e[i] @ gx)
            F[i, j, 1] = float(dufour_e[i] @ gy)
            D[i, j, j] += base_d
            F[i, j, j] += base_f

    evals = np.linalg.eigvalsh(K)
    if evals.min() <= 0.0:
        raise InvariantViolation(
            f"effective heat tensor is not positive definite: eigenvalues {evals}")

    if deposition is not None:
        if deposition.a.shape[0] != n:
            raise ConfigError(
                f"deposition species count {deposition.a.shape[0]} != {n}")
        A = deposition.a * cell.perimeter / cell.pore_area
        B = deposition.b * cell.perimeter / cell.pore_area
    else:
        A = np.zeros(n)
        B = np.zeros(n)

    return EffectiveTensors(
        K=K, K0=base_kappa / cell.pore_area, K_asymmetry=asym,
        T=T, D=D, D0=D0, F=F, A=A, B=B,
        g_robin=g0 * cell.robin_perimeter / cell.pore_area,
        pore_area=cell.pore_area, perimeter=cell.perimeter,
        robin_perimeter=cell.robin_perimeter)


def homogeneous_tensors(kappa=1.0, d=(1.0,), tau=0.0, dufour=0.0,
                        a=None, b=None, boundary_ratio=0.0, robin_ratio=0.0,
                        g0=0.0):
    """Effective tensors of an unperforated medium (identity-scaled).

    Useful for macro-only runs and equivalence tests: pore_area = 1, every
    matrix is coefficient * identity, and the exchange scalars reduce to
    a_i * boundary_ratio with boundary_ratio = |Gamma|/|Y1|.  tau and dufour
    accept a scalar (shared) or one value per species.
    """
    n = len(d)
    tau = np.broadcast_to(np.asarray(tau, dtype=float), (n,))
    dufour = np.broadcast_to(np.asarray(dufour, dtype=float), (n,))
    a = np.zeros(n) if a is None else np.asarray(a, dtype=float)
    b = np.zeros(n) if b is None else np.asarray(b, dtype=float)
    if a.shape != (n,) or b.shape != (n,):
        raise ConfigError(f"a and b must have {n} entries")
    eye = np.eye(2)
    return EffectiveTensors(
        K=float(kappa) * eye, K0=float(kappa), K_asymmetry=0.0,
        T=np.stack([t * eye for t in tau]),
        D=np.stack([float(di) * eye for di in d]),
        D0=np.asarray(d, dtype=float),
        F=np.stack([f * eye for f in dufour]),
        A=a * boundary_ratio, B=b * boundary_ratio,
        g_robin=g0 * robin_ratio, pore_area=1.0,
        perimeter=boundary_ratio, robin_perimeter=robin_ratio)


def tensors_csv_rows(t):
    """Flatten the tensors to (name, species, row, col, value) rows.

    Scalar rows leave unused index columns empty; species is empty for the
    shared heat tensor.  The row order is fixed so output files diff cleanly.
    """
    rows = []

    def mat(name, species, m):
        for j in (0, 1):
            for k in (0, 1):
                rows.append((name, species, j, k, float(m[j, k])))

    mat("K", "", t.K)
    mat("K_normalized", "", t.K_normalized)
    rows.append(("K0", "", "", "", float(t.K0)))
    rows.append(("K_asymmetry", "", "", "", float(t.K_asymmetry)))
    for i in range(t.n_species):
        mat("T", i, t.T[i])
        mat("T_normalized", i, t.T_normalized[i])
        mat("D", i, t.D[i])
        mat("D_normalized", i, t.D_normalized[i])
        mat("F", i, t.F[i])
        mat("F_normalized", i, t.F_normalized[i])
        rows.append(("D0", i, "", "", float(t.D0[i])))
        rows.append(("A", i, "", "", float(t.A[i])))
        rows.append(("B", i, "", "", float(t.B[i])))
    rows.append(("g_robin", "", "", "", float(t.g_robin)))
    rows.append(("pore_area", "", "", "", float(t.pore_area)))
    rows.append(("perimeter", "", "", "", float(t.perimeter)))
    rows.append(("robin_perimeter", "", "", "", float(t.robin_perimeter)))
    return rows


def tensors_report_text(t):
    """Human-readable tensor report for logs and the CLI."""
    lines = ["effective tensors (flux form; divide by pore_area for "
             "normalized coefficients)",
             f"  pore_area       {t.pore_area:.12g}",
             f"  perimeter       {t.perimeter:.12g}",
             f"  robin_perimeter {t.robin_perimeter:.12g}",
             f"  K0              {t.K0:.12g}",
             f"  K   [[{t.K[0, 0]:.12g}, {t.K[0, 1]:.12g}],"
             f" [{t.K[1, 0]:.12g}, {t.K[1, 1]:.12g}]]"
             f"  (asymmetry {t.K_asymmetry:.3e})"]
    for i in range(t.n_species):
        lines.append(f"  species {i + 1}:")
        lines.append(f"    D {t.D[i].tolist()}  D0 {t.D0[i]:.12g}")
        lines.append(f"    T {t.T[i].tolist()}")
        lines.append(f"    F {t.F[i].tolist()}")
        lines.append(f"    A {t.A[i]:.12g}  B {t.B[i]:.12g}")
    lines.append(f"  g_robin         {t.g_robin:.12g}")
    return "\n".join(lines)
