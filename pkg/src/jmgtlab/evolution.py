"""Time integration of the linear and semilinear first-order systems.

The stiff coupling of the third time derivative with the damped Laplacian
rules out explicit schemes; everything here is an implicit theta scheme
(trapezoidal by default) on the mass form

    Mb Phi' = S Phi + Mb G(t) [+ Mb F(Phi)],

with the quadratic term treated explicitly (one optional corrector pass
restores second order).  Factorizations of (Mb - theta dt S) are cached and
reused across steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as la
import scipy.sparse.linalg as spla

from . import diagnostics
from .assembly import (BlockOperator, assemble_core, build_generator_u,
                       h_norm_sq_state, solve_neumann_map)
from .errors import ConfigurationError, IntegratorError
from .geometry import GAMMA1


@dataclass
class StateVector:
    """Nodal coefficient triple (u, u_t, u_tt) at one time instant."""

    t: float
    u: np.ndarray
    ut: np.ndarray
    utt: np.ndarray
    nonlinear: bool = False

    def pack(self):
        return np.concatenate([self.u, self.ut, self.utt])

    @staticmethod
    def unpack(t, vec, nonlinear=False):
        n = vec.size // 3
        return StateVector(t, vec[:n].copy(), vec[n:2 * n].copy(),
                           vec[2 * n:].copy(), nonlinear)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.ut))
                    and np.all(np.isfinite(self.utt)))


@dataclass
class CompatibilityReport:
    r0: float
    r1: float
    r0_rel: float
    r1_rel: float
    warn_tol: float = 1e-8

    @property
    def compatible(self):
        return max(self.r0_rel, self.r1_rel) <= self.warn_tol


def _restricted_dual_norm(rho, mass, nodes):
    """L2(Gamma) norm of the residual density represented by the dual vector
    rho on the given boundary nodes: sqrt(rho^T Mb^{-1} rho) restricted."""
    if len(nodes) == 0:
        return 0.0
    sub = mass[np.ix_(nodes, nodes)].toarray()
    r = rho[nodes]
    return float(np.sqrt(max(r @ np.linalg.solve(sub, r), 0.0)))


def check_compatibility(state0, ops, params):
    """Weak-form residuals of the initial boundary compatibility conditions,
    measured in the facet-mass (boundary L2) norm per boundary part."""
    rho = ops.K @ state0.u + ops.B1 @ state0.ut
    g0 = ops.partition.nodes_of(0)
    g1 = ops.partition.nodes_of(1)
    r0 = _restricted_dual_norm(rho, ops.Mb0, g0)
    r1 = _restricted_dual_norm(rho, ops.Mb1, g1)
    scale = float(np.sqrt(state0.u @ (ops.K @ state0.u)
                          + state0.ut @ (ops.K @ state0.ut)
                          + state0.ut @ (ops.B1 @ state0.ut))) or 1.0
    return CompatibilityReport(r0, r1, r0 / scale, r1 / scale)


def apply_nonlinearity(state, params):
    """Block vector F(Phi): third block (2k/tau)(u_t*u_t + u*u_tt) nodewise."""
    if not state.is_finite():
        raise IntegratorError("state is not finite", time=state.t)
    n = state.u.size
    out = np.zeros(3 * n)
    out[2 * n:] = (2.0 * params.k / params.tau) * (state.ut * state.ut
                                                   + state.u * state.utt)
    return out


@dataclass
class DegeneracyFlag:
    flagged: bool
    min_coeff: float
    reason: str = ""


def detect_degeneracy(state, params, margin=None, h1_ceiling=None, ops=None):
    """Flag loss of positivity of the leading coefficient alpha - 2k u, or an
    exploding higher norm.  The flag is data; callers decide to halt."""
    if margin is None:
        margin = 0.05 * float(np.min(params.alpha))
    mc = float(np.min(params.alpha - 2.0 * params.k * state.u))
    if mc <= margin:
        return DegeneracyFlag(True, mc, "leading coefficient near sign change")
    if h1_ceiling is not None and ops is not None:
        h1 = diagnostics.h1_norm_sq_state(ops, params, state.u, state.ut, state.utt)
        if h1 > h1_ceiling:
            return DegeneracyFlag(True, mc, "higher norm above ceiling")
    return DegeneracyFlag(False, mc)


class ThetaIntegrator:
    """One-step implicit theta scheme on a BlockOperator in mass form."""

    def __init__(self, gen: BlockOperator, dt, theta=0.5):
        if not 0.5 <= theta <= 1.0:
            raise ConfigurationError(
                f"theta must lie in [0.5, 1] for unconditional stability, got {theta}")
        if dt <= 0:
            raise ConfigurationError(f"dt must be positive, got {dt}")
        self.gen = gen
        self.dt = float(dt)
        self.theta = float(theta)
        self._lhs = spla.splu((gen.Mb - theta * dt * gen.S).tocsc())
        self._rhs = (gen.Mb + (1.0 - theta) * dt * gen.S).tocsr()

    def step(self, phi, dual_extra=None):
        """Advance one step; dual_extra is a Mb-weighted source (length 3N)."""
        rhs = self._rhs @ phi
        if dual_extra is not None:
            rhs = rhs + self.dt * dual_extra
        try:
            out = self._lhs.solve(rhs)
        except Exception as exc:  # pragma: no cover - factorization is cached
            raise IntegratorError(f"linear solve failed: {exc}") from exc
        return out


def _integrator_for(gen, dt, theta):
    cache = getattr(gen, "_theta_cache", None)
    if cache is None:
        cache = gen._theta_cache = {}
    key = (float(dt), float(theta))
    if key not in cache:
        cache[key] = ThetaIntegrator(gen, dt, theta)
    return cache[key]


def _scheme_theta(scheme, theta):
    if scheme == "trapezoidal":
        return 0.5
    if scheme == "theta":
        return 0.5 if theta is None else float(theta)
    raise ConfigurationError(f"unknown scheme {scheme!r}")


def _forcing_dual(ops, params, t):
    """Mb-weighted forcing block (0, 0, M f(t)) or None."""
    if params.forcing is None:
        return None
    f = params.forcing(ops.mesh.nodes, t)
    f = np.asarray(f, dtype=float) * np.ones(ops.n)
    out = np.zeros(3 * ops.n)
    out[2 * ops.n:] = ops.M @ f
    return out


def step_linear(state, dt, gen, ops=None, params=None, scheme="trapezoidal",
                theta=None):
    """One implicit theta step of the linear system."""
    th = _scheme_theta(scheme, theta)
    integ = _integrator_for(gen, dt, th)
    dual = None
    if params is not None and params.forcing is not None and ops is not None:
        f0 = _forcing_dual(ops, params, state.t)
        f1 = _forcing_dual(ops, params, state.t + dt)
        dual = th * f1 + (1.0 - th) * f0
    out = integ.step(state.pack(), dual)
    return StateVector.unpack(state.t + dt, out, state.nonlinear)


def step_nonlinear(state, dt, gen, ops, params, scheme="trapezoidal",
                   theta=None, corrector=True):
    """IMEX theta step: linear part implicit, quadratic term explicit with an
    optional single corrector pass (order 2 with the corrector)."""
    th = _scheme_theta(scheme, theta)
    integ = _integrator_for(gen, dt, th)
    base = None
    if params.forcing is not None:
        f0 = _forcing_dual(ops, params, state.t)
        f1 = _forcing_dual(ops, params, state.t + dt)
        base = th * f1 + (1.0 - th) * f0

    def mb_weighted(st):
        # Mb-weighted image of F: third block tau*M * (2k/tau)(...) = 2k M(...)
        fw = apply_nonlinearity(st, params)
        out = np.zeros_like(fw)
        out[2 * ops.n:] = params.tau * (ops.M @ fw[2 * ops.n:])
        return out

    dual0 = mb_weighted(state)
    rhs_extra = dual0 if base is None else dual0 + base
    pred = StateVector.unpack(state.t + dt, integ.step(state.pack(), rhs_extra),
                              True)
    if not corrector:
        if not pred.is_finite():
            raise IntegratorError("NaN state after step", time=state.t + dt)
        return pred
    dual1 = mb_weighted(pred)
    mixed = 0.5 * (dual0 + dual1)
    rhs_extra = mixed if base is None else mixed + base
    out = StateVector.unpack(state.t + dt, integ.step(state.pack(), rhs_extra),
                             True)
    if not out.is_finite():
        raise IntegratorError("NaN state after step", time=state.t + dt)
    return out


# ---------------------------------------------------------------------------
# initial data library
# ---------------------------------------------------------------------------

def lowest_modes(ops, count):
    """Smallest generalized eigenpairs of (K, M); columns are K-orthogonal."""
    n = ops.n
    if n <= 1500:
        vals, vecs = la.eigh(ops.K.toarray(), ops.M.toarray())
        return vals[:count], vecs[:, :count]
    vals, vecs = spla.eigsh(ops.K, k=count, M=ops.M, sigma=0.0)
    order = np.argsort(vals)
    return vals[order], vecs[:, order]


def make_initial_data(ops, params, shape="lowmode", mode=1, seed=0,
                      compatible=True, h_size=None, h1_size=None):
    """Build (u0, u1, u2) initial data with controllable phase-space size.

    lowmode: u1 = low generalized eigenvector of (K, M), u0 its compatible
    harmonic lift through the boundary map, u2 = 0.  random: seeded nodal
    noise (optionally compatibilized the same way).  rightmost: real part of
    the slowest-decaying eigenvector of the full generator, the state that
    realizes the semigroup decay rate (generally violates the boundary
    compatibility, which is warned about, not fatal).
    """
    n = ops.n
    if shape == "zero":
        u0 = np.zeros(n); u1 = np.zeros(n); u2 = np.zeros(n)
    elif shape == "rightmost":
        vec = rightmost_mode(ops, params)
        u0, u1, u2 = vec[:n], vec[n:2 * n], vec[2 * n:]
    elif shape == "lowmode":
        _, vecs = lowest_modes(ops, max(int(mode), 1))
        u1 = vecs[:, int(mode) - 1]
        u1 = u1 / np.sqrt(u1 @ (ops.M @ u1))
        u0 = ops.K_solve(-(ops.B1 @ u1)) if compatible else 0.1 * u1
        u2 = np.zeros(n)
    elif shape == "random":
        rng = np.random.default_rng(seed)
        u1 = rng.standard_normal(n)
        u2 = rng.standard_normal(n)
        u0 = ops.K_solve(-(ops.B1 @ u1)) if compatible else rng.standard_normal(n)
    else:
        raise ConfigurationError(f"unknown initial data shape {shape!r}")

    state = StateVector(0.0, u0, u1, u2)
    if h_size is not None:
        cur = np.sqrt(h_norm_sq_state(ops, params, u0, u1, u2))
        if cur == 0 and h_size != 0:
            raise ConfigurationError("cannot rescale zero initial data")
        s = h_size / cur if cur > 0 else 0.0
        state = StateVector(0.0, s * u0, s * u1, s * u2)
    elif h1_size is not None:
        cur = np.sqrt(diagnostics.h1_norm_sq_state(ops, params, u0, u1, u2))
        if cur == 0 and h1_size != 0:
            raise ConfigurationError("cannot rescale zero initial data")
        s = h1_size / cur if cur > 0 else 0.0
        state = StateVector(0.0, s * u0, s * u1, s * u2)
    return state


def compatible_lift(ops, u1):
    """u0 with Delta u0 = 0 (discretely), Robin on GAMMA0 and normal trace
    matched to -kappa1*u1 on GAMMA1, via the boundary-source elliptic solve."""
    return ops.K_solve(-(ops.B1 @ u1))


def rightmost_mode(ops, params):
    """Real part of the slowest-decaying generator eigenvector, normalized in
    the phase-space norm.  Dense eigensolve; desk-scale sizes only."""
    gen = build_generator_u(ops, params)
    A = gen.dense()
    vals, vecs = la.eig(A)
    v = np.real(vecs[:, int(np.argmax(vals.real))])
    nrm = np.sqrt(h_norm_sq_state(ops, params, v[:ops.n], v[ops.n:2 * ops.n],
                                  v[2 * ops.n:]))
    return v / nrm


# ---------------------------------------------------------------------------
# scenarios and trajectories
# ---------------------------------------------------------------------------

@dataclass
class Scenario:
    mesh: object
    partition: object
    params: object
    initial: StateVector
    T: float
    dt: float
    scheme: str = "trapezoidal"
    theta: Optional[float] = None
    stride: int = 1
    store_states: bool = False
    nonlinear: bool = False
    corrector: bool = True
    degeneracy_margin: Optional[float] = None
    h1_ceiling_factor: float = 10.0
    label: str = "run"
    ops: object = None
    experiment: Optional[str] = None
    experiment_options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.T < 0 or self.dt <= 0:
            raise ConfigurationError(
                f"need T >= 0 and dt > 0, got T={self.T}, dt={self.dt}")
        if self.T > 0 and self.dt > self.T:
            raise ConfigurationError(f"dt={self.dt} exceeds T={self.T}")
        if self.ops is None:
            self.ops = assemble_core(self.mesh, self.partition, self.params)

    def generator(self):
        if not hasattr(self, "_gen"):
            self._gen = build_generator_u(self.ops, self.params)
        return self._gen


@dataclass
class Trajectory:
    times: np.ndarray
    reports: list
    states: Optional[list]
    scenario: Scenario
    degenerate: bool = False
    degeneracy: Optional[DegeneracyFlag] = None
    stats: dict = field(default_factory=dict)

    def series(self, name):
        return self.times, np.array([getattr(r, name) for r in self.reports])

    @property
    def stored(self):
        return self.states is not None


def integrate(scenario: Scenario) -> Trajectory:
    """Run the scenario to T, sampling energies every `stride` steps.

    Deterministic for a fixed scenario.  Degeneracy (nonlinear mode) halts
    integration gracefully with the flag set; NaN raises IntegratorError.
    """
    ops, params = scenario.ops, scenario.params
    state = StateVector(0.0, scenario.initial.u.copy(),
                        scenario.initial.ut.copy(), scenario.initial.utt.copy(),
                        scenario.nonlinear)
    gen = scenario.generator()
    times, reports, states = [], [], ([] if scenario.store_states else None)

    h1_ceiling = None
    if scenario.nonlinear:
        h1_0 = diagnostics.h1_norm_sq_state(ops, params, state.u, state.ut,
                                            state.utt)
        h1_ceiling = scenario.h1_ceiling_factor ** 2 * max(h1_0, 1e-300)

    def sample(st):
        times.append(st.t)
        reports.append(diagnostics.compute_energies(st, params, ops))
        if states is not None:
            states.append(StateVector(st.t, st.u.copy(), st.ut.copy(),
                                      st.utt.copy(), st.nonlinear))

    sample(state)
    if scenario.T == 0:
        return Trajectory(np.array(times), reports, states, scenario)

    n_steps = max(1, int(round(scenario.T / scenario.dt)))
    dt = scenario.T / n_steps
    trajectory = Trajectory(np.empty(0), reports, states, scenario)
    for istep in range(1, n_steps + 1):
        try:
            if scenario.nonlinear:
                state = step_nonlinear(state, dt, gen, ops, params,
                                       scenario.scheme, scenario.theta,
                                       scenario.corrector)
            else:
                state = step_linear(state, dt, gen, ops, params,
                                    scenario.scheme, scenario.theta)
        except IntegratorError as exc:
            exc.step = istep
            exc.time = istep * dt
            raise
        state.t = istep * dt  # avoid drift from repeated addition
        if scenario.nonlinear:
            flag = detect_degeneracy(state, params, scenario.degeneracy_margin,
                                     h1_ceiling, ops)
            if flag.flagged:
                sample(state)
                trajectory.degenerate = True
                trajectory.degeneracy = flag
                break
        if istep % scenario.stride == 0 or istep == n_steps:
            sample(state)
    trajectory.times = np.array(times)
    trajectory.stats = {"n_steps": n_steps, "dt": dt,
                        "scheme": scenario.scheme,
                        "theta": _scheme_theta(scenario.scheme, scenario.theta)}
    return trajectory
