"""Upscaled thermo-diffusion solver on the homogeneous unit square.

Once the oscillatory perforated problem is replaced by its effective limit,
the unknowns live on the full domain: a temperature theta, N colloid
concentrations u_i, and N deposited-mass densities v_i (the former surface
fields, now volumetric):

    dt theta = div(K grad theta) + sum_i w^T_i . grad theta - G theta
    dt u_i   = div(D_i grad u_i) + w^F_i . grad u_i
               - phi-weighted (A_i u_i - B_i v_i) + R_i^M(u)
    dt v_i   = a_i u_i - b_i v_i                            (pointwise)

with no-flux outer walls.  K, D_i and the drift tensors T_i, F_i come from
the cell problems (per unit pore volume); the surface kinetics enters through
the averaged exchange coefficients A_i = a_i |Gamma|/|Y1|, B_i = b_i
|Gamma|/|Y1| and the Robin sink G = g0 |Gamma_R|/|Y1|.  The drift velocities
are contracted tensor-gradient products of the mollified partner fields,
w^T_k = sum_i sum_j T_i[j,k] (grad^d u_i)_j and w^F_k = sum_j F_i[j,k]
(grad^d theta)_j, matching the resolved model's thermophoresis and
concentration-driven heat drift.

Discretization: bilinear (Q1) finite elements on an n x n grid of square
cells with lumped mass, which keeps the diffusion operator symmetric for any
symmetric tensor -- off-diagonal entries enter through the exact mixed
element integrals (a 9-point stencil) -- and backward Euler in time with the
same alternating Picard loop as the resolved solver.  The v equation advances
by the exact integrating factor with the fresh u frozen, and the matching u
sink carries phi_i = (1 - e^{-b_i dt})/(b_i dt), so each colloid+deposit pair
mass (weighted by |Gamma|/|Y1|) is conserved by the exchange to rounding.
An optional heat_source(x, y, t) enters the theta equation; it exists for
verification against manufactured solutions.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix, csc_matrix, diags
from scipy.sparse.linalg import splu

from .errors import ConfigError, InvariantViolation, SolverError
from .kinetics import clip_state, deposition_step, exchange_phi, loss_gain_split
from .mollifier import mollified_gradient

BOUND_TOL = 1e-8  # slack on positivity/maximum-principle audits

# Q1 element integrals on a square (h-independent in 2D).  Local node order:
# 0=(0,0), 1=(h,0), 2=(h,h), 3=(0,h) with the first coordinate along axis 0.
# _SXX/_SYY are int dxphi_i dxphi_j and the y-y analogue; the mixed integral
# int dxphi_i dyphi_j separates exactly into outer(_BX, _BY), where h*_BX is
# the element integral of dxphi.
_SXX = np.array([[2.0, -2.0, -1.0, 1.0],
                 [-2.0, 2.0, 1.0, -1.0],
                 [-1.0, 1.0, 2.0, -2.0],
                 [1.0, -1.0, -2.0, 2.0]]) / 6.0
_SYY = np.array([[2.0, 1.0, -1.0, -2.0],
                 [1.0, 2.0, -2.0, -1.0],
                 [-1.0, -2.0, 2.0, 1.0],
                 [-2.0, -1.0, 1.0, 2.0]]) / 6.0
_BX = np.array([-1.0, 1.0, 1.0, -1.0]) / 2.0
_BY = np.array([-1.0, -1.0, 1.0, 1.0]) / 2.0


def element_stiffness(tensor):
    """4x4 element matrix of -div(tensor grad .) for a constant 2x2 tensor."""
    k = 0.5 * (tensor + tensor.T)
    cross = np.outer(_BX, _BY)
    return k[0, 0] * _SXX + k[1, 1] * _SYY + k[0, 1] * (cross + cross.T)


@dataclass
class MacroState:
    """Unknowns at one time level, all nodal on the (n+1)^2 grid."""

    t: float
    theta: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def copy(self):
        return MacroState(self.t, self.theta.copy(), self.u.copy(),
                          self.v.copy())


@dataclass
class MacroRunConfig:
    """Full description of one upscaled run.

    n is the number of grid cells per side; all fields are nodal arrays on
    the (n+1) x (n+1) vertex grid.  tensors supplies K/D/T/F per unit pore
    volume plus the averaged exchange and Robin coefficients; deposition
    carries the pointwise attach/detach rates a_i, b_i for the v equation and
    must be consistent with tensors.A/B (same rates scaled by the
    interface-to-pore ratio).  mollifier is required whenever a T or F drift
    tensor is nonzero.  heat_source, if given, is a callable f(x, y, t)
    evaluated on node coordinate arrays at the new time level.
    """

    tensors: object
    n: int
    kernel: object = None
    deposition: object = None
    mollifier: object = None
    dt: float = 1e-3
    t_end: float = 1e-2
    fp_tol: float = 1e-8
    fp_max: int = 50
    theta0: np.ndarray = None
    u0: np.ndarray = None
    v0: np.ndarray = None
    heat_source: object = None
    snap_every: int = 0
    strict: bool = False
    theta_max_bound: float = None
    u_max_bound: float = None
    v_max_bound: float = None

    def __post_init__(self):
        t = self.tensors
        n_sp = t.n_species
        if int(self.n) != self.n or self.n < 2:
            raise ConfigError(f"n must be an integer >= 2, got {self.n}")
        self.n = int(self.n)
        m = self.n + 1
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
        if t.g_robin < 0.0:
            raise ConfigError(f"g_robin must be nonnegative, got {t.g_robin}")
        for name, mat in [("K", t.K_normalized)] + \
                [(f"D[{i}]", t.D_normalized[i]) for i in range(n_sp)]:
            sym = 0.5 * (mat + mat.T)
            if not np.isfinite(sym).all() or np.linalg.eigvalsh(sym).min() <= 0.0:
                raise ConfigError(
                    f"effective tensor {name} is not positive definite")

        if self.theta0 is None:
            self.theta0 = np.zeros((m, m))
        if self.u0 is None:
            self.u0 = np.zeros((n_sp, m, m))
        if self.v0 is None:
            self.v0 = np.zeros((n_sp, m, m))
        self.theta0 = np.asarray(self.theta0, dtype=float)
        self.u0 = np.asarray(self.u0, dtype=float)
        self.v0 = np.asarray(self.v0, dtype=float)
        if self.theta0.shape != (m, m):
            raise ConfigError(f"theta0 must have shape {(m, m)}, "
                              f"got {self.theta0.shape}")
        if self.u0.shape != (n_sp, m, m):
            raise ConfigError(f"u0 must have shape {(n_sp, m, m)}, "
                              f"got {self.u0.shape}")
        if self.v0.shape != (n_sp, m, m):
            raise ConfigError(f"v0 must have shape {(n_sp, m, m)}, "
                              f"got {self.v0.shape}")
        for name, arr in (("theta0", self.theta0), ("u0", self.u0),
                          ("v0", self.v0)):
            if not np.isfinite(arr).all():
                raise ConfigError(f"{name} contains non-finite values")
        if self.theta0.min() < 0.0 or self.u0.min() < 0.0 \
                or self.v0.min() < 0.0:
            raise ConfigError("initial data must be nonnegative")

        if self.kernel is not None and self.kernel.n_species != n_sp:
            raise ConfigError(
                f"kernel species count {self.kernel.n_species} != {n_sp}")
        if self.deposition is None:
            if np.abs(t.A).max() > 0.0 or np.abs(t.B).max() > 0.0:
                raise ConfigError(
                    "exchange tensors A/B are nonzero but no deposition "
                    "rates were given for the deposit equation")
        else:
            if self.deposition.a.shape[0] != n_sp:
                raise ConfigError(
                    f"deposition species count {self.deposition.a.shape[0]} "
                    f"!= {n_sp}")
            ratio = t.perimeter / t.pore_area
            for name, avg, rate in (("A", t.A, self.deposition.a),
                                    ("B", t.B, self.deposition.b)):
                scale = np.maximum(np.abs(avg), np.abs(rate * ratio)) + 1.0
                if (np.abs(avg - rate * ratio) > 1e-9 * scale).any():
                    raise ConfigError(
                        f"exchange tensor {name} does not equal the "
                        f"deposition rate scaled by |Gamma|/|Y1| = {ratio}; "
                        "the pair-mass budget would not close")

        drifting = bool(np.abs(t.T).max() > 0.0 or np.abs(t.F).max() > 0.0)
        if drifting and self.mollifier is None:
            raise ConfigError(
                "drift tensors T or F are nonzero but no mollifier was given")
        h = 1.0 / self.n
        if self.mollifier is not None and \
                abs(self.mollifier.grid_spacing - h) > 1e-12 * h:
            raise ConfigError(
                f"mollifier grid spacing {self.mollifier.grid_spacing} != "
                f"node spacing {h}")
        if self.heat_source is not None and not callable(self.heat_source):
            raise ConfigError("heat_source must be callable f(x, y, t)")

    @property
    def n_steps(self):
        return int(round(self.t_end / self.dt))


@dataclass
class MacroResult:
    """Trajectory summary: final state, snapshot states, per-step diagnostic
    rows (dicts in a fixed key order), and any recorded bound violations."""

    config: MacroRunConfig
    final_state: MacroState
    snapshots: list
    diagnostics: list
    violations: list


class MacroSimulator:
    """Assembled operators and stepping logic for one configuration."""

    def __init__(self, config):
        self.cfg = config
        t = config.tensors
        self.n = config.n
        self.m = config.n + 1
        self.h = 1.0 / config.n
        self.dt = config.dt
        self.n_nodes = self.m * self.m
        self.n_species = t.n_species

        xs = np.linspace(0.0, 1.0, self.m)
        self.node_x, self.node_y = np.meshgrid(xs, xs, indexing="ij")

        # Element connectivity in the local order of the element matrices.
        i, j = np.meshgrid(np.arange(self.n), np.arange(self.n),
                           indexing="ij")
        base = (i * self.m + j).ravel()
        self.elem_nodes = np.column_stack(
            [base, base + self.m, base + self.m + 1, base + 1])
        self.lumped_mass = 0.25 * self.h * self.h * np.bincount(
            self.elem_nodes.ravel(), minlength=self.n_nodes)

        self.K = t.K_normalized
        self.D = t.D_normalized
        self.T = t.T_normalized
        self.F = t.F_normalized
        self.A = t.A
        self.B = t.B
        self.g_robin = t.g_robin
        self.pair_weight = t.perimeter / t.pore_area

        self.stiff_theta = self._assemble_stiffness(self.K)
        self.stiff_u = [self._assemble_stiffness(self.D[i])
                        for i in range(self.n_species)]

        dep = config.deposition
        dt = self.dt
        w = self.lumped_mass
        self.A_theta_base = (diags(w * (1.0 + dt * self.g_robin))
                             + dt * self.stiff_theta).tocsr()
        self.phi = np.ones(self.n_species)
        self.A_u_base = []
        for i in range(self.n_species):
            diag = np.full(self.n_nodes, 1.0)
            if dep is not None:
                self.phi[i] = exchange_phi(float(dep.b[i]), dt)
                diag += dt * self.phi[i] * self.A[i]
            self.A_u_base.append(
                (diags(w * diag) + dt * self.stiff_u[i]).tocsr())

        kern = config.kernel
        self.reaction_on = kern is not None and bool(kern.beta.any())
        self.theta_static = not self.T.any()
        self.u_static = [not (self.F[i].any() or self.reaction_on)
                         for i in range(self.n_species)]
        self.decoupled = not (self.T.any() or self.F.any())

        self._lu_theta = splu(self.A_theta_base.tocsc()) if self.theta_static \
            else None
        self._lu_u = [splu(self.A_u_base[i].tocsc()) if self.u_static[i]
                      else None for i in range(self.n_species)]
        # Reaction-only u systems change on the diagonal alone: cache the CSC
        # skeleton and the diagonal entry positions, rewrite data per step.
        self._u_csc = []
        self._u_diag_pos = []
        for i in range(self.n_species):
            if self.u_static[i] or self.F[i].any():
                self._u_csc.append(None)
                self._u_diag_pos.append(None)
                continue
            csc = self.A_u_base[i].tocsc()
            csc.sort_indices()
            starts, ends = csc.indptr[:-1], csc.indptr[1:]
            pos = np.fromiter(
                (s + np.searchsorted(csc.indices[s:e], j)
                 for j, (s, e) in enumerate(zip(starts, ends))),
                dtype=np.int64, count=self.n_nodes)
            self._u_csc.append(csc)
            self._u_diag_pos.append(pos)
        self._last_truncations = 0

        self.theta_bound = config.theta_max_bound
        if self.theta_bound is None:
            self.theta_bound = float(config.theta0.max())
        self.u_bound = config.u_max_bound
        if self.u_bound is None and kern is not None:
            self.u_bound = kern.M * (config.t_end + 1.0)
        self.v_bound = config.v_max_bound

    # -- operator assembly -------------------------------------------------

    def _assemble_stiffness(self, tensor):
        """Global stiffness of -div(tensor grad .), exact integrals of the
        constant-tensor bilinear form (symmetric by construction)."""
        el = element_stiffness(np.asarray(tensor, dtype=float))
        ne = self.elem_nodes.shape[0]
        rows = np.broadcast_to(self.elem_nodes[:, :, None], (ne, 4, 4))
        cols = np.broadcast_to(self.elem_nodes[:, None, :], (ne, 4, 4))
        data = np.broadcast_to(el, (ne, 4, 4))
        m = coo_matrix((data.ravel(), (rows.ravel(), cols.ravel())),
                       shape=(self.n_nodes, self.n_nodes))
        return m.tocsr()

    def _advection_matrix(self, wx, wy):
        """(w . grad f) at nodes: centered in the interior, one-sided on the
        outer walls."""
        m = self.m
        h = self.h
        ids = np.arange(self.n_nodes).reshape(m, m)
        idpad = -np.ones((m + 2, m + 2), dtype=np.int64)
        idpad[1:-1, 1:-1] = ids
        rows, cols, data = [], [], []
        for axis, w in ((0, wx), (1, wy)):
            if axis == 0:
                lo, hi = idpad[:-2, 1:-1], idpad[2:, 1:-1]
            else:
                lo, hi = idpad[1:-1, :-2], idpad[1:-1, 2:]
            has_lo, has_hi = lo >= 0, hi >= 0
            cen = has_lo & has_hi
            fwd = has_hi & ~has_lo
            bwd = has_lo & ~has_hi
            c = ids
            rows += [c[cen], c[cen], c[fwd], c[fwd], c[bwd], c[bwd]]
            cols += [hi[cen], lo[cen], hi[fwd], c[fwd], c[bwd], lo[bwd]]
            data += [w[cen] / (2 * h), -w[cen] / (2 * h),
                     w[fwd] / h, -w[fwd] / h,
                     w[bwd] / h, -w[bwd] / h]
        mat = coo_matrix((np.concatenate(data),
                          (np.concatenate(rows), np.concatenate(cols))),
                         shape=(self.n_nodes, self.n_nodes))
        return mat.tocsr()

    def _drift_velocity(self, tensor, gx, gy):
        """Contract a 2x2 drift tensor with a gradient: w_k = sum_j t[j,k] g_j."""
        return (tensor[0, 0] * gx + tensor[1, 0] * gy,
                tensor[0, 1] * gx + tensor[1, 1] * gy)

    # -- single solves -----------------------------------------------------

    def step_P1(self, state, frozen_u):
        """Backward-Euler heat solve with the colloid fields frozen."""
        w = self.lumped_mass
        rhs = w * state.theta.ravel()
        if self.cfg.heat_source is not None:
            f = self.cfg.heat_source(self.node_x, self.node_y,
                                     state.t + self.dt)
            rhs = rhs + self.dt * w * np.asarray(f, dtype=float).ravel()
        if self.theta_static:
            x = self._lu_theta.solve(rhs)
        else:
            wx = np.zeros((self.m, self.m))
            wy = np.zeros((self.m, self.m))
            for i in range(self.n_species):
                if not self.T[i].any():
                    continue
                gx, gy = mollified_gradient(frozen_u[i], self.cfg.mollifier)
                vx, vy = self._drift_velocity(self.T[i], gx, gy)
                wx += vx
                wy += vy
            A = self.A_theta_base - self.dt * diags(w) \
                @ self._advection_matrix(wx, wy)
            x = splu(A.tocsc()).solve(rhs)
        return x.reshape(self.m, self.m)

    def step_P2(self, state, frozen_theta, frozen_u=None):
        """Backward-Euler colloid solves (one per species) with temperature
        frozen, followed by the exact deposit update."""
        if frozen_u is None:
            frozen_u = state.u
        dep = self.cfg.deposition
        kern = self.cfg.kernel
        dt = self.dt
        w = self.lumped_mass

        gain = loss_mult = None
        self._last_truncations = 0
        if self.reaction_on:
            gain, loss_mult = loss_gain_split(frozen_u, kern)
            clipped = clip_state(frozen_u, kern.M)
            self._last_truncations = int(np.count_nonzero(clipped != frozen_u))

        gtx = gty = None
        if self.F.any():
            gtx, gty = mollified_gradient(frozen_theta, self.cfg.mollifier)

        u_new = np.empty_like(state.u)
        for i in range(self.n_species):
            rhs = state.u[i].ravel().copy()
            if dep is not None:
                rhs += dt * self.phi[i] * self.B[i] * state.v[i].ravel()
            if gain is not None:
                rhs += dt * gain[i].ravel()
            rhs *= w

            if self.u_static[i]:
                x = self._lu_u[i].solve(rhs)
            elif self._u_csc[i] is not None:
                tpl = self._u_csc[i]
                data = tpl.data.copy()
                data[self._u_diag_pos[i]] += dt * w * loss_mult[i].ravel()
                A = csc_matrix((data, tpl.indices, tpl.indptr),
                               shape=tpl.shape, copy=False)
                x = splu(A).solve(rhs)
            else:
                A = self.A_u_base[i]
                if loss_mult is not None:
                    A = A + dt * diags(w * loss_mult[i].ravel())
                vx, vy = self._drift_velocity(self.F[i], gtx, gty)
                A = A - dt * diags(w) @ self._advection_matrix(vx, vy)
                x = splu(A.tocsc()).solve(rhs)
            u_new[i] = x.reshape(self.m, self.m)

        if dep is not None:
            v_new = np.empty_like(state.v)
            for i in range(self.n_species):
                v_new[i] = deposition_step(u_new[i], state.v[i],
                                           float(dep.a[i]), float(dep.b[i]),
                                           dt)
        else:
            v_new = state.v.copy()
        return u_new, v_new

    # -- outer loop ----------------------------------------------------------

    def _l2(self, field_values):
        return float(np.sqrt((self.lumped_mass
                              * field_values.ravel() ** 2).sum()))

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
        new_state = MacroState(state.t + self.dt, theta_new, u_new, v_new)
        return new_state, stats

    # -- diagnostics and audits ---------------------------------------------

    def _diag_row(self, state, step, stats, grad_cum):
        w = self.lumped_mass
        th = state.theta.ravel()
        row = {
            "step": step,
            "t": state.t,
            "fp_iterations": stats["iterations"],
            "contraction_factor": stats["contraction_factor"],
            "truncation_activations": stats["truncations"],
            "theta_min": float(state.theta.min()),
            "theta_max": float(state.theta.max()),
            "u_min": float(state.u.min()),
            "u_max": float(state.u.max()),
            "v_min": float(state.v.min()),
            "v_max": float(state.v.max()),
            "heat_total": float((w * th).sum()),
            "energy_theta": float((w * th * th).sum() + grad_cum),
        }
        mass_total = 0.0
        for i in range(self.n_species):
            pair = float((w * state.u[i].ravel()).sum()
                         + self.pair_weight * (w * state.v[i].ravel()).sum())
            row[f"pair_mass_{i + 1}"] = pair
            mass_total += (i + 1) * pair
        row["mass_total"] = mass_total
        return row

    def _audit(self, state, step, violations):
        def record(fieldname, kind, value, bound):
            violations.append({"step": step, "field": fieldname,
                               "kind": kind, "value": float(value),
                               "bound": float(bound)})
            if self.cfg.strict:
                raise InvariantViolation(
                    f"step {step}: {fieldname} {kind} bound violated "
                    f"({value} vs {bound})")

        if state.theta.min() < -BOUND_TOL:
            record("theta", "lower", state.theta.min(), 0.0)
        if state.theta.max() > self.theta_bound + BOUND_TOL:
            record("theta", "upper", state.theta.max(), self.theta_bound)
        if state.u.min() < -BOUND_TOL:
            record("u", "lower", state.u.min(), 0.0)
        if self.u_bound is not None and state.u.max() > self.u_bound + BOUND_TOL:
            record("u", "upper", state.u.max(), self.u_bound)
        if state.v.min() < -BOUND_TOL:
            record("v", "lower", state.v.min(), 0.0)
        if self.v_bound is not None and \
                state.v.max() > self.v_bound + BOUND_TOL:
            record("v", "upper", state.v.max(), self.v_bound)

    def simulate(self):
        cfg = self.cfg
        state = MacroState(0.0, cfg.theta0.copy(), cfg.u0.copy(),
                           cfg.v0.copy())
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
            th = state.theta.ravel()
            grad_cum += self.dt * float(th @ (self.stiff_theta @ th))
            diagnostics.append(self._diag_row(state, step, stats, grad_cum))
            self._audit(state, step, violations)
            if cfg.snap_every and step % cfg.snap_every == 0:
                snapshots.append(state.copy())
        if cfg.snap_every and snapshots[-1].t != state.t:
            snapshots.append(state.copy())
        return MacroResult(config=cfg, final_state=state, snapshots=snapshots,
                           diagnostics=diagnostics, violations=violations)


def step_macro(state, tensors, config):
    """One full time step under the given effective tensors; returns the new
    state (builds operators afresh; reuse a MacroSimulator when stepping
    repeatedly)."""
    cfg = dataclasses.replace(config, tensors=tensors)
    new_state, _ = MacroSimulator(cfg).fixed_point_step(state)
    return new_state


def simulate_macro(config):
    """Advance from t=0 to t_end; returns a MacroResult."""
    return MacroSimulator(config).simulate()
