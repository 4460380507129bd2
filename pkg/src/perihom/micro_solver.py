"""Microscopic thermo-diffusion solver on the perforated domain.

The resolved system couples a temperature field theta, N colloid
concentrations u_i on the pore space, and N deposited-mass fields v_i on the
grain-boundary faces:

    dt theta = div(kappa^eps grad theta) + sum_i tau_i^eps grad^d u_i . grad theta
    dt u_i   = div(d_i^eps grad u_i) + delta_i^eps grad^d theta . grad u_i + R_i^M(u)
    dt v_i   = a_i u_i - b_i v_i                      (on grain faces)

with no-flux outer walls, Robin heat leakage -kappa grad theta . nu =
eps g0 theta on the Robin portion of the grain boundary, and colloid
attachment flux -J . nu = eps (a_i u_i - b_i v_i) on all grain faces.
Coefficients oscillate with the tiling period: kappa^eps(x) = kappa(x/eps).

Discretization: cell-centered conservative finite volumes (5-point, harmonic
face coefficients) on the masked grid; backward Euler in time with cross
terms supplied by the partner field of a Picard (fixed-point) outer loop,
mirroring the alternating-solve map whose contraction on small steps is the
convergence theory for this scheme.  Advection uses centered differences (the
mollified velocity fields are smooth), falling back to one-sided stencils
along the staircase boundary.  The aggregation source is split
semi-implicitly: the loss part enters the matrix through a lagged multiplier,
the gain part is explicit; both are evaluated at the clipped lagged state, so
positivity is unconditional.  The surface ODE advances by an exact
integrating-factor step with the fresh u trace frozen over the step, and the
matching flux in the u equation carries the averaging factor
phi = (1 - e^{-b dt})/(b dt), which makes the colloid+deposit pair mass
conserve to rounding.

Linear systems are solved by sparse LU, so "solved to 1e-10" holds with
margin; factorizations are cached whenever the matrix is step-invariant
(no advection coupling and no reaction for that equation).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, csc_matrix, diags, identity
from scipy.sparse.linalg import splu

from .errors import ConfigError, InvariantViolation, SolverError
from .kinetics import clip_state, deposition_step, exchange_phi, loss_gain_split
from .mollifier import mollified_gradient

BOUND_TOL = 1e-8  # slack on positivity/maximum-principle audits


@dataclass
class FieldState:
    """Unknowns at one time level: theta and u on the pore grid (zero on
    grain cells), v on grain-boundary faces in domain face order."""

    t: float
    theta: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def copy(self):
        return FieldState(self.t, self.theta.copy(), self.u.copy(),
                          self.v.copy())


@dataclass
class MicroRunConfig:
    """Full description of one microscopic run.

    theta0/u0 are full-grid arrays (values on grain cells are zeroed); v0 is
    per-face, defaulting to zero.  mollifier is required whenever tau or any
    dufour coefficient is nonzero.  *_max_bound override the audited upper
    bounds (theta defaults to max theta0, u to M(T_end+1) when a kernel is
    present, v is unchecked unless given).
    """

    domain: object
    coefficients: object
    kernel: object = None
    deposition: object = None
    g0: float = 0.0
    mollifier: object = None
    dt: float = 1e-3
    t_end: float = 1e-2
    fp_tol: float = 1e-8
    fp_max: int = 50
    theta0: np.ndarray = None
    u0: np.ndarray = None
    v0: np.ndarray = None
    snap_every: int = 0
    strict: bool = False
    theta_max_bound: float = None
    u_max_bound: float = None
    v_max_bound: float = None

    def __post_init__(self):
        dom = self.domain
        n = dom.n
        n_sp = self.coefficients.n_species
        if self.coefficients.resolution != dom.cell.resolution:
            raise ConfigError(
                f"coefficient resolution {self.coefficients.resolution} != "
                f"cell resolution {dom.cell.resolution}")
        if not self.dt > 0.0:
            raise ConfigError(f"dt must be positive, got {self.dt}")
        if not self.t_end > 0.0:
            raise ConfigError(f"t_end must be positive, got {self.t_end}")
        n_steps = round(self.t_end / self.dt)
        if n_steps < 1 or abs(n_steps * self.dt - self.t_end) > 1e-9 * self.t_end:
            raise ConfigError(
                f"t_end = {self.t_end} is not an integer multiple of dt = {self.dt}")
        if not self.fp_tol > 0.0:
            raise ConfigError(f"fp_tol must be positive, got {self.fp_tol}")
        if self.fp_max < 1:
            raise ConfigError(f"fp_max must be >= 1, got {self.fp_max}")
        if self.g0 < 0.0:
            raise ConfigError(f"g0 must be nonnegative, got {self.g0}")

        if self.theta0 is None:
            self.theta0 = np.zeros((n, n))
        if self.u0 is None:
            self.u0 = np.zeros((n_sp, n, n))
        self.theta0 = np.asarray(self.theta0, dtype=float)
        self.u0 = np.asarray(self.u0, dtype=float)
        if self.theta0.shape != (n, n):
            raise ConfigError(f"theta0 must have shape {(n, n)}, "
                              f"got {self.theta0.shape}")
        if self.u0.shape != (n_sp, n, n):
            raise ConfigError(f"u0 must have shape {(n_sp, n, n)}, "
                              f"got {self.u0.shape}")
        if self.v0 is None:
            self.v0 = np.zeros((n_sp, dom.n_faces))
        self.v0 = np.asarray(self.v0, dtype=float)
        if self.v0.shape != (n_sp, dom.n_faces):
            raise ConfigError(f"v0 must have shape {(n_sp, dom.n_faces)}, "
                              f"got {self.v0.shape}")
        for name, arr in (("theta0", self.theta0), ("u0", self.u0),
                          ("v0", self.v0)):
            if not np.isfinite(arr).all():
                raise ConfigError(f"{name} contains non-finite values")
        self.theta0 = np.where(dom.mask, self.theta0, 0.0)
        self.u0 = np.where(dom.mask[None], self.u0, 0.0)
        if self.theta0.min() < 0.0 or self.u0.min() < 0.0 \
                or (self.v0.size and self.v0.min() < 0.0):
            raise ConfigError("initial data must be nonnegative")

        if self.kernel is not None and self.kernel.n_species != n_sp:
            raise ConfigError(
                f"kernel species count {self.kernel.n_species} != {n_sp}")
        if self.deposition is not None and self.deposition.a.shape[0] != n_sp:
            raise ConfigError(
                f"deposition species count {self.deposition.a.shape[0]} != {n_sp}")

        coupled = bool(np.abs(self.coefficients.tau).max() > 0.0
                       or np.abs(self.coefficients.dufour).max() > 0.0)
        if coupled and self.mollifier is None:
            raise ConfigError(
                "tau or dufour coupling is nonzero but no mollifier was given")
        if self.mollifier is not None and \
                abs(self.mollifier.grid_spacing - dom.h) > 1e-12 * dom.h:
            raise ConfigError(
                f"mollifier grid spacing {self.mollifier.grid_spacing} != "
                f"domain spacing {dom.h}")

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))


@dataclass
class MicroResult:
    """Trajectory summary: final state, snapshot states, per-step diagnostic
    rows (dicts in a fixed key order), and any recorded bound violations."""

    config: MicroRunConfig
    final_state: FieldState
    snapshots: list
    diagnostics: list
    violations: list


class MicroSimulator:
    """Assembled operators and stepping logic for one configuration."""

    def __init__(self, config):
        self.cfg = config
        dom = config.domain
        self.dom = dom
        self.mask = dom.mask
        self.n = dom.n
        self.h = dom.h
        self.dt = config.dt
        n = self.n

        self.ids = -np.ones((n, n), dtype=np.int64)
        self.n_pore = int(self.mask.sum())
        self.ids[self.mask] = np.arange(self.n_pore)

        ell = dom.ell
        coeff = config.coefficients
        self.n_species = coeff.n_species
        self.kappa_eps = np.tile(coeff.kappa, (ell, ell))
        self.tau_eps = np.stack(
            [np.tile(t, (ell, ell)) for t in coeff.tau_per_species()])
        self.d_eps = np.stack([np.tile(d, (ell, ell)) for d in coeff.d])
        self.dufour_eps = np.stack(
            [np.tile(g, (ell, ell)) for g in coeff.dufour])

        # Grain-boundary face bookkeeping: adjacent pore cell per face, the
        # shared face measure, and the per-cell scatter weights eps*|f|/h^2.
        h2 = self.h * self.h
        eps = dom.epsilon
        self.face_measure = self.h * dom.face_scale
        fc = dom.face_cell
        if dom.n_faces:
            self.face_cell_flat = fc[:, 0] * n + fc[:, 1]
            self.face_cell_id = self.ids[fc[:, 0], fc[:, 1]]
        else:
            self.face_cell_flat = np.zeros(0, dtype=np.int64)
            self.face_cell_id = np.zeros(0, dtype=np.int64)
        self.face_weight = eps * self.face_measure / h2

        robin_diag = np.zeros(self.n_pore)
        if dom.n_faces and config.g0 > 0.0:
            np.add.at(robin_diag, self.face_cell_id[dom.face_is_robin],
                      config.g0 * self.face_weight)
        exch_cell_sum = np.zeros(self.n_pore)
        if dom.n_faces:
            np.add.at(exch_cell_sum, self.face_cell_id, self.face_weight)

        eye = identity(self.n_pore, format="csr")
        dt = self.dt
        self.A_theta_base = (eye + dt * self._diffusion_matrix(self.kappa_eps)
                             + dt * diags(robin_diag)).tocsr()

        dep = config.deposition
        self.phi = np.ones(self.n_species)
        self.A_u_base = []
        for i in range(self.n_species):
            A = eye + dt * self._diffusion_matrix(self.d_eps[i])
            if dep is not None:
                self.phi[i] = exchange_phi(float(dep.b[i]), dt)
                A = A + dt * diags(dep.a[i] * self.phi[i] * exch_cell_sum)
            self.A_u_base.append(A.tocsr())

        kern = config.kernel
        self.reaction_on = kern is not None and bool(kern.beta.any())
        self.theta_static = not self.tau_eps.any()
        self.u_static = [not (self.dufour_eps[i].any() or self.reaction_on)
                         for i in range(self.n_species)]
        self.decoupled = self.theta_static and not self.dufour_eps.any()

        self._lu_theta = splu(self.A_theta_base.tocsc()) if self.theta_static \
            else None
        self._lu_u = [splu(self.A_u_base[i].tocsc()) if self.u_static[i]
                      else None for i in range(self.n_species)]
        # When the reaction is the only step-dependent term, the matrix update
        # touches the diagonal alone: cache the CSC skeleton and the positions
        # of the diagonal entries so each step only rewrites the data vector.
        self._u_csc = []
        self._u_diag_pos = []
        for i in range(self.n_species):
            if self.u_static[i] or self.dufour_eps[i].any():
                self._u_csc.append(None)
                self._u_diag_pos.append(None)
                continue
            csc = self.A_u_base[i].tocsc()
            csc.sort_indices()
            starts, ends = csc.indptr[:-1], csc.indptr[1:]
            pos = np.fromiter(
                (s + np.searchsorted(csc.indices[s:e], j)
                 for j, (s, e) in enumerate(zip(starts, ends))),
                dtype=np.int64, count=self.n_pore)
            self._u_csc.append(csc)
            self._u_diag_pos.append(pos)
        self._last_truncations = 0

        self.theta_bound = config.theta_max_bound
        if self.theta_bound is None:
            self.theta_bound = float(config.theta0[self.mask].max()) \
                if self.n_pore else 0.0
        self.u_bound = config.u_max_bound
        if self.u_bound is None and kern is not None:
            self.u_bound = kern.M * (config.t_end + 1.0)
        self.v_bound = config.v_max_bound

    # -- operator assembly -------------------------------------------------

    def _diffusion_matrix(self, coeff):
        """SPD operator -div(coeff grad .) / h^2 with harmonic face means and
        no-flux closure (boundary and grain faces simply absent)."""
        h2 = self.h * self.h
        rows, cols, data = [], [], []
        for axis in (0, 1):
            if axis == 0:
                both = self.mask[:-1, :] & self.mask[1:, :]
                ka, kb = coeff[:-1, :][both], coeff[1:, :][both]
                ia, ib = self.ids[:-1, :][both], self.ids[1:, :][both]
            else:
                both = self.mask[:, :-1] & self.mask[:, 1:]
                ka, kb = coeff[:, :-1][both], coeff[:, 1:][both]
                ia, ib = self.ids[:, :-1][both], self.ids[:, 1:][both]
            t = 2.0 * ka * kb / (ka + kb) / h2
            rows += [ia, ib, ia, ib]
            cols += [ia, ib, ib, ia]
            data += [t, t, -t, -t]
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        data = np.concatenate(data)
        m = coo_matrix((data, (rows, cols)),
                       shape=(self.n_pore, self.n_pore))
        return m.tocsr()

    def _advection_matrix(self, wx, wy):
        """(w . grad f) at pore cells: centered where both neighbors are pore
        cells, one-sided along the staircase, zero where isolated."""
        n = self.n
        h = self.h
        idpad = -np.ones((n + 2, n + 2), dtype=np.int64)
        idpad[1:-1, 1:-1] = self.ids
        rows, cols, data = [], [], []
        for axis, w in ((0, wx), (1, wy)):
            if axis == 0:
                lo, hi = idpad[:-2, 1:-1], idpad[2:, 1:-1]
            else:
                lo, hi = idpad[1:-1, :-2], idpad[1:-1, 2:]
            has_lo, has_hi = lo >= 0, hi >= 0
            cen = self.mask & has_lo & has_hi
            fwd = self.mask & has_hi & ~has_lo
            bwd = self.mask & has_lo & ~has_hi
            c = self.ids
            rows += [c[cen], c[cen], c[fwd], c[fwd], c[bwd], c[bwd]]
            cols += [hi[cen], lo[cen], hi[fwd], c[fwd], c[bwd], lo[bwd]]
            data += [w[cen] / (2 * h), -w[cen] / (2 * h),
                     w[fwd] / h, -w[fwd] / h,
                     w[bwd] / h, -w[bwd] / h]
        m = coo_matrix((np.concatenate(data),
                        (np.concatenate(rows), np.concatenate(cols))),
                       shape=(self.n_pore, self.n_pore))
        return m.tocsr()

    # -- single solves -----------------------------------------------------

    def step_P1(self, state, frozen_u):
        """Backward-Euler heat solve with the colloid fields frozen."""
        b = state.theta[self.mask]
        if self.theta_static:
            x = self._lu_theta.solve(b)
        else:
            wx = np.zeros((self.n, self.n))
            wy = np.zeros((self.n, self.n))
            for i in range(self.n_species):
                if not self.tau_eps[i].any():
                    continue
                gx, gy = mollified_gradient(frozen_u[i], self.cfg.mollifier,
                                            self.mask)
                wx += self.tau_eps[i] * gx
                wy += self.tau_eps[i] * gy
            A = self.A_theta_base - self.dt * self._advection_matrix(wx, wy)
            x = splu(A.tocsc()).solve(b)
        out = np.zeros((self.n, self.n))
        out[self.mask] = x
        return out

    def step_P2(self, state, frozen_theta, frozen_u=None):
        """Backward-Euler colloid solves (one per species) with temperature
        frozen, followed by the exact surface-ODE update."""
        if frozen_u is None:
            frozen_u = state.u
        dep = self.cfg.deposition
        kern = self.cfg.kernel
        dt = self.dt

        gain = loss_mult = None
        self._last_truncations = 0
        if self.reaction_on:
            gain, loss_mult = loss_gain_split(frozen_u, kern)
            clipped = clip_state(frozen_u, kern.M)
            self._last_truncations = int(np.count_nonzero(clipped != frozen_u))

        gtx = gty = None
        if self.dufour_eps.any():
            gtx, gty = mollified_gradient(frozen_theta, self.cfg.mollifier,
                                          self.mask)

        u_new = np.zeros_like(state.u)
        for i in range(self.n_species):
            rhs = state.u[i][self.mask].copy()
            if dep is not None and self.dom.n_faces:
                flux = dt * self.phi[i] * dep.b[i] * self.face_weight * state.v[i]
                rhs += np.bincount(self.face_cell_id, weights=flux,
                                   minlength=self.n_pore)
            if gain is not None:
                rhs += dt * gain[i][self.mask]

            if self.u_static[i]:
                x = self._lu_u[i].solve(rhs)
            elif self._u_csc[i] is not None:
                tpl = self._u_csc[i]
                data = tpl.data.copy()
                data[self._u_diag_pos[i]] += dt * loss_mult[i][self.mask]
                A = csc_matrix((data, tpl.indices, tpl.indptr),
                               shape=tpl.shape, copy=False)
                x = splu(A).solve(rhs)
            else:
                A = self.A_u_base[i]
                if loss_mult is not None:
                    A = A + dt * diags(loss_mult[i][self.mask])
                A = A - dt * self._advection_matrix(
                    self.dufour_eps[i] * gtx, self.dufour_eps[i] * gty)
                x = splu(A.tocsc()).solve(rhs)
            u_new[i][self.mask] = x

        if dep is not None and self.dom.n_faces:
            v_new = np.empty_like(state.v)
            for i in range(self.n_species):
                trace = u_new[i].reshape(-1)[self.face_cell_flat]
                v_new[i] = deposition_step(trace, state.v[i],
                                           float(dep.a[i]), float(dep.b[i]), dt)
        else:
            v_new = state.v.copy()
        return u_new, v_new

    # -- outer loop ----------------------------------------------------------

    def _l2(self, full_field):
        return float(np.sqrt((full_field[self.mask] ** 2).sum()) * self.h)

    def fixed_point_step(self, state):
        """One time step of the alternating P1/P2 fixed-point map."""
        if self.decoupled:
            theta_new = self.step_P1(state, state.u)
            u_new, v_new = self.step_P2(state, state.theta, state.u)
            stats = {"iterations": 1, "contraction_factor": 0.0,
                     "truncations": self._last_truncations}
        else:
            theta_k = state.theta
            u_k = state.u
            inc_prev = None
            factor = 0.0
            iterations = None
            inc = np.inf
            for k in range(1, self.cfg.fp_max + 1):
                theta_new = self.step_P1(state, u_k)
                u_new, v_new = self.step_P2(state, theta_k, u_k)
                inc = self._l2(theta_new - theta_k) + sum(
                    self._l2(u_new[i] - u_k[i])
                    for i in range(self.n_species))
                if inc_prev is not None and inc_prev > 0.0:
                    factor = max(factor, inc / inc_prev)
                theta_k, u_k = theta_new, u_new
                if inc < self.cfg.fp_tol:
                    iterations = k
                    break
                inc_prev = inc
            if iterations is None:
                raise SolverError(
                    f"fixed-point loop did not reach tol {self.cfg.fp_tol:.1e} "
                    f"in {self.cfg.fp_max} iterations (last increment "
                    f"{inc:.3e}); reduce dt")
            stats = {"iterations": iterations, "contraction_factor": factor,
                     "truncations": self._last_truncations}
        new_state = FieldState(state.t + self.dt, theta_new, u_new, v_new)
        return new_state, stats

    # -- diagnostics and audits ---------------------------------------------

    def _diag_row(self, state, step, stats, grad_cum):
        h2 = self.h * self.h
        eps = self.dom.epsilon
        theta_p = state.theta[self.mask]
        row = {
            "step": step,
            "t": state.t,
            "fp_iterations": stats["iterations"],
            "contraction_factor": stats["contraction_factor"],
            "truncation_activations": stats["truncations"],
            "theta_min": float(theta_p.min()) if self.n_pore else 0.0,
            "theta_max": float(theta_p.max()) if self.n_pore else 0.0,
            "u_min": float(state.u[:, self.mask].min()) if self.n_pore else 0.0,
            "u_max": float(state.u[:, self.mask].max()) if self.n_pore else 0.0,
            "v_min": float(state.v.min()) if state.v.size else 0.0,
            "v_max": float(state.v.max()) if state.v.size else 0.0,
            "heat_total": float(theta_p.sum() * h2),
            "energy_theta": float((theta_p ** 2).sum() * h2 + grad_cum),
        }
        mass_total = 0.0
        for i in range(self.n_species):
            pair = float(state.u[i][self.mask].sum() * h2
                         + eps * self.face_measure * state.v[i].sum())
            row[f"pair_mass_{i + 1}"] = pair
            mass_total += (i + 1) * pair
        row["mass_total"] = mass_total
        return row

    def _grad_sq(self, theta):
        """Sum of squared face differences: the discrete int |grad theta|^2."""
        total = 0.0
        for axis in (0, 1):
            if axis == 0:
                both = self.mask[:-1, :] & self.mask[1:, :]
                d = (theta[1:, :] - theta[:-1, :])[both]
            else:
                both = self.mask[:, :-1] & self.mask[:, 1:]
                d = (theta[:, 1:] - theta[:, :-1])[both]
            total += float((d * d).sum())
        return total

    def _audit(self, state, step, violations):
        def record(fieldname, kind, value, bound):
            violations.append({"step": step, "field": fieldname,
                               "kind": kind, "value": float(value),
                               "bound": float(bound)})
            if self.cfg.strict:
                raise InvariantViolation(
                    f"step {step}: {fieldname} {kind} bound violated "
                    f"({value} vs {bound})")

        theta_p = state.theta[self.mask]
        if self.n_pore:
            if theta_p.min() < -BOUND_TOL:
                record("theta", "lower", theta_p.min(), 0.0)
            if theta_p.max() > self.theta_bound + BOUND_TOL:
                record("theta", "upper", theta_p.max(), self.theta_bound)
            u_p = state.u[:, self.mask]
            if u_p.min() < -BOUND_TOL:
                record("u", "lower", u_p.min(), 0.0)
            if self.u_bound is not None and u_p.max() > self.u_bound + BOUND_TOL:
                record("u", "upper", u_p.max(), self.u_bound)
        if state.v.size:
            if state.v.min() < -BOUND_TOL:
                record("v", "lower", state.v.min(), 0.0)
            if self.v_bound is not None and \
                    state.v.max() > self.v_bound + BOUND_TOL:
                record("v", "upper", state.v.max(), self.v_bound)

    def simulate(self):
        cfg = self.cfg
        state = FieldState(0.0, cfg.theta0.copy(), cfg.u0.copy(),
                           cfg.v0.copy())
        kappa0 = float(self.kappa_eps[self.mask].min()) if self.n_pore else 0.0
        grad_cum = 0.0
        snapshots = [state.copy()] if cfg.snap_every else []
        diagnostics = [self._diag_row(state, 0,
                                      {"iterations": 0,
                                       "contraction_factor": 0.0,
                                       "truncations": 0}, grad_cum)]
        violations = []
        self._audit(state, 0, violations)

        for step in range(1, cfg.n_steps + 1):
            state, stats = self.fixed_point_step(state)
            grad_cum += self.dt * kappa0 * self._grad_sq(state.theta)
            diagnostics.append(self._diag_row(state, step, stats, grad_cum))
            self._audit(state, step, violations)
            if cfg.snap_every and step % cfg.snap_every == 0:
                snapshots.append(state.copy())
        if cfg.snap_every and snapshots[-1].t != state.t:
            snapshots.append(state.copy())
        return MicroResult(config=cfg, final_state=state, snapshots=snapshots,
                           diagnostics=diagnostics, violations=violations)


def step_P1(state, frozen_u, config):
    """One heat solve with frozen colloids (builds operators afresh; reuse a
    MicroSimulator when stepping repeatedly)."""
    return MicroSimulator(config).step_P1(state, frozen_u)


def step_P2(state, frozen_theta, config):
    """One colloid/deposit solve with frozen temperature."""
    return MicroSimulator(config).step_P2(state, frozen_theta)


def fixed_point_step(state, config):
    """One full time step; returns (new_state, stats)."""
    return MicroSimulator(config).fixed_point_step(state)


def simulate_micro(config):
    """Advance from t=0 to t_end; returns a MicroResult."""
    return MicroSimulator(config).simulate()
