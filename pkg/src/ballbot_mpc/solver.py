"""Iterative LQR over a generic optimal control problem.

The problem is posed in continuous time and transcribed with fixed-step
RK4 (zero-order-hold inputs).  Constraints attach to contiguous mode
segments of the horizon: equalities enter as quadratic penalties,
inequalities through a twice-differentiable cubic hinge that is exactly
zero once the residual clears its margin.  An optional outer loop regrows
the penalty weights until the worst violation is inside tolerance.

Two interchangeable backends provide rollout, cost, derivatives and the
Riccati sweep: a JAX path (forward-mode AD, jitted, used in production)
and an eager NumPy path with central finite differences (slow; used to
cross-check derivatives and to instrument mode callbacks in tests).

All iteration is plain Python so every accepted step lands in the
solution's iteration log.
"""

from __future__ import annotations

import bisect
import logging
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

_log = logging.getLogger(__name__)


@dataclass
class SolverSettings:
    """Knobs of the iLQR loop.

    Attributes:
        max_iterations: inner-loop cap per penalty round.
        tol_cost: relative cost-decrease threshold that counts as converged.
        backtrack_factor: line-search step shrink per retry, in (0, 1).
        min_step: smallest line-search step tried.
        reg_init: first nonzero Levenberg regularization after a failed
            Riccati factorization (the first attempt runs unregularized).
        reg_growth: multiplier applied on repeated failures.
        reg_max: give up on the iteration beyond this.
        penalty_rounds: outer rounds of penalty growth (1 = single pass).
        penalty_growth: weight multiplier between rounds.
        constraint_tol: worst residual accepted as feasible.
        backend: "ad" (JAX) or "fd" (eager finite differences).
        fd_step: central-difference step for the fd backend.
    """

    max_iterations: int = 40
    tol_cost: float = 1e-7
    backtrack_factor: float = 0.5
    min_step: float = 1e-3
    reg_init: float = 1e-6
    reg_growth: float = 10.0
    reg_max: float = 1e8
    penalty_rounds: int = 1
    penalty_growth: float = 10.0
    constraint_tol: float = 1e-3
    backend: str = "ad"
    fd_step: float = 1e-6

    def validate(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0.0 < self.backtrack_factor < 1.0:
            raise ValueError("backtrack_factor must be in (0, 1)")
        if not 0.0 < self.min_step <= 1.0:
            raise ValueError("min_step must be in (0, 1]")
        if self.tol_cost <= 0.0:
            raise ValueError("tol_cost must be positive")
        if self.penalty_rounds < 1:
            raise ValueError("penalty_rounds must be >= 1")
        if self.penalty_growth <= 1.0:
            raise ValueError("penalty_growth must exceed 1")
        if self.backend not in ("ad", "fd"):
            raise ValueError("backend must be 'ad' or 'fd'")


@dataclass
class Mode:
    """Constraint set active on one contiguous span of the horizon.

    ``eq`` and ``ineq`` are callables (x, u, t, p) -> residual vector;
    equalities are satisfied at zero, inequalities when nonnegative.
    Weights broadcast against the residuals.  ``ineq_margin`` is the hinge
    margin: the inequality penalty is identically zero for residuals at or
    above it.
    """

    eq: object = None
    ineq: object = None
    eq_weight: object = 100.0
    ineq_weight: object = 100.0
    ineq_margin: object = 0.01


@dataclass
class OcpDefinition:
    """Continuous-time optimal control problem on a fixed node grid.

    ``dynamics(x, u, t) -> xdot``; ``stage_cost(x, u, t, p) -> scalar``
    (integrated against dt); ``terminal_cost(x, p) -> scalar``.  ``p`` is
    the per-node parameter vector (references, contact flags, ...) of
    length ``param_dim``; stage nodes use rows 0..N-1, the terminal cost
    row N.  Mode ``k`` of ``modes`` is active between ``switch_times[k-1]``
    and ``switch_times[k]`` (relative to the horizon start); constraints
    are evaluated at stage nodes only.
    """

    state_dim: int
    input_dim: int
    horizon: float
    node_count: int
    dynamics: object
    stage_cost: object
    terminal_cost: object = None
    modes: list = field(default_factory=lambda: [Mode()])
    switch_times: tuple = ()
    param_dim: int = 0

    def __post_init__(self) -> None:
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        if self.horizon <= 0.0:
            raise ValueError("horizon must be positive")
        if len(self.switch_times) != len(self.modes) - 1:
            raise ValueError("need exactly len(modes) - 1 switch times")
        if list(self.switch_times) != sorted(self.switch_times):
            raise ValueError("switch_times must be sorted")
        self._backends = {}

    @property
    def dt(self) -> float:
        return self.horizon / self.node_count

    def mode_index(self, node: int) -> int:
        """Mode active at a stage node (segment containing its midpoint)."""
        t_mid = (node + 0.5) * self.dt
        return bisect.bisect_right(list(self.switch_times), t_mid)

    def node_groups(self) -> list:
        """Stage-node indices grouped by mode, in mode order."""
        groups = [[] for _ in self.modes]
        for k in range(self.node_count):
            groups[self.mode_index(k)].append(k)
        return [np.asarray(g, dtype=int) for g in groups]


@dataclass
class TrajectorySolution:
    """Solver output on the node grid, with bookkeeping for logs."""

    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    cost: float
    cost_terms: dict
    iterations: int
    converged: bool
    diverged: bool = False
    max_eq_residual: float = 0.0
    max_ineq_violation: float = 0.0
    node_eq_residuals: np.ndarray = None
    node_ineq_violations: np.ndarray = None
    iteration_log: list = field(default_factory=list)

    def state_at(self, t: float) -> np.ndarray:
        """Linear interpolation between nodes; clamped at the ends."""
        return np.array([np.interp(t, self.times, self.states[:, i])
                         for i in range(self.states.shape[1])])

    def input_at(self, t: float) -> np.ndarray:
        """Zero-order hold over the stage intervals."""
        dt = self.times[1] - self.times[0]
        k = int(np.clip(np.floor((t - self.times[0]) / dt),
                        0, len(self.inputs) - 1))
        return self.inputs[k]


# Penalty kernel --------------------------------------------------------------


def penalty_cost(eq_residual=None, ineq_residual=None, eq_weight=100.0,
                 ineq_weight=100.0, ineq_margin=0.01):
    """Scalar penalty for constraint residuals.

    Equalities contribute weight * residual**2.  Inequalities use a cubic
    hinge with gradient -weight at the constraint boundary and exactly
    zero cost for residuals at or above the margin, so it is twice
    differentiable everywhere and inactive strictly inside the feasible
    set.
    """
    total = 0.0
    if eq_residual is not None:
        r = jnp.asarray(eq_residual)
        total = total + jnp.sum(jnp.asarray(eq_weight) * r ** 2)
    if ineq_residual is not None:
        h = jnp.asarray(ineq_residual)
        margin = jnp.asarray(ineq_margin)
        gap = jnp.maximum(margin - h, 0.0)
        total = total + jnp.sum(
            jnp.asarray(ineq_weight) * gap ** 3 / (3.0 * margin ** 2))
    return total


def penalty_gn_terms(eq_residual, eq_jacobian, ineq_residual, ineq_jacobian,
                     eq_weight=100.0, ineq_weight=100.0, ineq_margin=0.01):
    """Penalty gradient and Gauss-Newton Hessian over the stacked variable.

    Uses the residual Jacobians only, dropping the residual-times-curvature
    term of the exact Hessian.  That term is indefinite whenever residuals
    are large, which forces heavy regularization in the Riccati pass; the
    retained J^T W J part is positive semidefinite by construction.  Any
    argument pair may be (None, None).
    """
    grad = None
    hess = None

    def _accumulate(g, h):
        nonlocal grad, hess
        grad = g if grad is None else grad + g
        hess = h if hess is None else hess + h

    if eq_residual is not None:
        r = jnp.atleast_1d(eq_residual)
        jr = jnp.atleast_2d(eq_jacobian)
        w = jnp.broadcast_to(jnp.asarray(eq_weight), r.shape)
        _accumulate(jr.T @ (2.0 * w * r), jr.T @ (2.0 * w[:, None] * jr))
    if ineq_residual is not None:
        h = jnp.atleast_1d(ineq_residual)
        jh = jnp.atleast_2d(ineq_jacobian)
        w = jnp.broadcast_to(jnp.asarray(ineq_weight), h.shape)
        m = jnp.asarray(ineq_margin)
        gap = jnp.maximum(m - h, 0.0)
        slope = -w * gap ** 2 / m ** 2
        curve = 2.0 * w * gap / m ** 2
        _accumulate(jh.T @ slope, jh.T @ (curve[:, None] * jh))
    return grad, hess


def _rk4(dynamics, x, u, t, dt):
    k1 = dynamics(x, u, t)
    k2 = dynamics(x + 0.5 * dt * k1, u, t + 0.5 * dt)
    k3 = dynamics(x + 0.5 * dt * k2, u, t + 0.5 * dt)
    k4 = dynamics(x + dt * k3, u, t + dt)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def discrete_step(ocp: OcpDefinition, x, u, t):
    """One RK4 step of the transcribed dynamics."""
    return _rk4(ocp.dynamics, jnp.asarray(x), jnp.asarray(u), t, ocp.dt)


def _stage_terms(ocp: OcpDefinition, mode: Mode, x, u, t, p, pscale):
    """(task, eq penalty, ineq penalty) integrands at one node."""
    task = ocp.stage_cost(x, u, t, p)
    # Tie the penalty terms to the traced cost so they batch under vmap
    # even when a mode carries no constraints.
    pen_eq = 0.0 * task
    pen_ineq = 0.0 * task
    if mode.eq is not None:
        pen_eq = pen_eq + penalty_cost(
            eq_residual=mode.eq(x, u, t, p),
            eq_weight=jnp.asarray(mode.eq_weight) * pscale)
    if mode.ineq is not None:
        pen_ineq = pen_ineq + penalty_cost(
            ineq_residual=mode.ineq(x, u, t, p),
            ineq_weight=jnp.asarray(mode.ineq_weight) * pscale,
            ineq_margin=mode.ineq_margin)
    return task, pen_eq, pen_ineq


# JAX backend -----------------------------------------------------------------


class _JaxBackend:
    """Jitted rollout/cost/derivative kernels for one OCP."""

    def __init__(self, ocp: OcpDefinition):
        self.ocp = ocp
        self.groups = ocp.node_groups()
        dt = ocp.dt
        n = ocp.node_count
        nx, nu = ocp.state_dim, ocp.input_dim

        def step(x, u, t):
            return _rk4(ocp.dynamics, x, u, t, dt)

        def rollout(x0, inputs, t0):
            def body(x, ku):
                k, u = ku
                xn = step(x, u, t0 + k * dt)
                return xn, xn
            _, xs = jax.lax.scan(body, x0, (jnp.arange(n), inputs))
            return jnp.concatenate([x0[None, :], xs], axis=0)

        def terminal(x, p):
            if ocp.terminal_cost is None:
                return 0.0
            return ocp.terminal_cost(x, p)

        def total_cost(states, inputs, t0, params, pscale):
            task = terminal(states[n], params[n])
            pen_eq = 0.0
            pen_ineq = 0.0
            for mode, idx in zip(ocp.modes, self.groups):
                if len(idx) == 0:
                    continue
                fn = lambda x, u, t, p, m=mode: _stage_terms(
                    ocp, m, x, u, t, p, pscale)
                terms = jax.vmap(fn)(states[idx], inputs[idx],
                                     t0 + idx * dt, params[idx])
                # Task costs integrate over the horizon; penalties are
                # per-node conditions and stay grid-independent.
                task = task + dt * jnp.sum(terms[0])
                pen_eq = pen_eq + jnp.sum(terms[1])
                pen_ineq = pen_ineq + jnp.sum(terms[2])
            total = task + pen_eq + pen_ineq
            return total, jnp.array([task, pen_eq, pen_ineq])

        def linearize(states, inputs, t0, params, pscale):
            a = jnp.zeros((n, nx, nx))
            b = jnp.zeros((n, nx, nu))
            lx = jnp.zeros((n, nx))
            lu = jnp.zeros((n, nu))
            lxx = jnp.zeros((n, nx, nx))
            luu = jnp.zeros((n, nu, nu))
            lux = jnp.zeros((n, nu, nx))
            step_z = lambda z, t: step(z[:nx], z[nx:], t)
            for mode, idx in zip(ocp.modes, self.groups):
                if len(idx) == 0:
                    continue
                task_z = lambda z, t, p: dt * ocp.stage_cost(
                    z[:nx], z[nx:], t, p)
                jac = jax.vmap(jax.jacfwd(step_z))
                grad = jax.vmap(jax.jacfwd(task_z))
                hess = jax.vmap(jax.jacfwd(jax.jacfwd(task_z)))
                zs = jnp.concatenate([states[idx], inputs[idx]], axis=1)
                ts = t0 + idx * dt
                jz = jac(zs, ts)
                gz = grad(zs, ts, params[idx])
                hz = hess(zs, ts, params[idx])
                if mode.eq is not None or mode.ineq is not None:
                    def pen_terms(z, t, p, m=mode):
                        r = jr = h = jh = None
                        if m.eq is not None:
                            eq_z = lambda zz: m.eq(zz[:nx], zz[nx:], t, p)
                            r, jr = eq_z(z), jax.jacfwd(eq_z)(z)
                        if m.ineq is not None:
                            in_z = lambda zz: m.ineq(zz[:nx], zz[nx:], t, p)
                            h, jh = in_z(z), jax.jacfwd(in_z)(z)
                        return penalty_gn_terms(
                            r, jr, h, jh,
                            eq_weight=jnp.asarray(m.eq_weight) * pscale,
                            ineq_weight=jnp.asarray(m.ineq_weight) * pscale,
                            ineq_margin=m.ineq_margin)
                    pg, ph = jax.vmap(pen_terms)(zs, ts, params[idx])
                    gz = gz + pg
                    hz = hz + ph
                a = a.at[idx].set(jz[:, :, :nx])
                b = b.at[idx].set(jz[:, :, nx:])
                lx = lx.at[idx].set(gz[:, :nx])
                lu = lu.at[idx].set(gz[:, nx:])
                lxx = lxx.at[idx].set(hz[:, :nx, :nx])
                luu = luu.at[idx].set(hz[:, nx:, nx:])
                lux = lux.at[idx].set(hz[:, nx:, :nx])
            term = lambda x, p: terminal(x, p)
            phix = jax.jacfwd(term)(states[n], params[n])
            phixx = jax.jacfwd(jax.jacfwd(term))(states[n], params[n])
            return a, b, lx, lu, lxx, luu, lux, phix, phixx

        def backward(a, b, lx, lu, lxx, luu, lux, phix, phixx, reg):
            def body(carry, node):
                vx, vxx = carry
                ak, bk = node[0], node[1]
                qx = node[2] + ak.T @ vx
                qu = node[3] + bk.T @ vx
                qxx = node[4] + ak.T @ vxx @ ak
                quu = node[5] + bk.T @ vxx @ bk + reg * jnp.eye(nu)
                qux = node[6] + bk.T @ vxx @ ak
                chol = jnp.linalg.cholesky(quu)
                kff = -jax.scipy.linalg.cho_solve((chol, True), qu)
                kfb = -jax.scipy.linalg.cho_solve((chol, True), qux)
                vx_new = qx + kfb.T @ quu @ kff + kfb.T @ qu + qux.T @ kff
                vxx_new = qxx + kfb.T @ quu @ kfb + kfb.T @ qux + qux.T @ kfb
                vxx_new = 0.5 * (vxx_new + vxx_new.T)
                dv = kff @ qu + 0.5 * kff @ quu @ kff
                return (vx_new, vxx_new), (kfb, kff, dv)
            nodes = (a[::-1], b[::-1], lx[::-1], lu[::-1], lxx[::-1],
                     luu[::-1], lux[::-1])
            (_, _), (kfb, kff, dv) = jax.lax.scan(
                body, (phix, phixx), nodes)
            kfb, kff = kfb[::-1], kff[::-1]
            ok = jnp.all(jnp.isfinite(kfb)) & jnp.all(jnp.isfinite(kff))
            return kfb, kff, jnp.sum(dv), ok

        def forward(x0, states, inputs, kfb, kff, alpha, t0):
            def body(x, packed):
                k, xbar, ubar, kfb_k, kff_k = packed
                u = ubar + alpha * kff_k + kfb_k @ (x - xbar)
                xn = step(x, u, t0 + k * dt)
                return xn, (xn, u)
            _, (xs, us) = jax.lax.scan(
                body, x0,
                (jnp.arange(n), states[:n], inputs, kfb, kff))
            return jnp.concatenate([x0[None, :], xs], axis=0), us

        def residuals(states, inputs, t0, params):
            eq_nodes = jnp.zeros(n)
            ineq_nodes = jnp.zeros(n)
            for mode, idx in zip(ocp.modes, self.groups):
                if len(idx) == 0:
                    continue
                ts = t0 + idx * dt
                if mode.eq is not None:
                    fn = jax.vmap(lambda x, u, t, p, m=mode: jnp.max(
                        jnp.abs(m.eq(x, u, t, p))))
                    eq_nodes = eq_nodes.at[idx].set(
                        fn(states[idx], inputs[idx], ts, params[idx]))
                if mode.ineq is not None:
                    fn = jax.vmap(lambda x, u, t, p, m=mode: jnp.maximum(
                        -jnp.min(m.ineq(x, u, t, p)), 0.0))
                    ineq_nodes = ineq_nodes.at[idx].set(
                        fn(states[idx], inputs[idx], ts, params[idx]))
            return eq_nodes, ineq_nodes

        self.rollout = jax.jit(rollout)
        self.cost = jax.jit(total_cost)
        self.linearize = jax.jit(linearize)
        self.backward = jax.jit(backward)
        self.forward = jax.jit(forward)
        self.residuals = jax.jit(residuals)


# FD backend ------------------------------------------------------------------


class _FdBackend:
    """Eager NumPy backend with central finite differences.

    Orders of magnitude slower than the JAX path; intended for derivative
    cross-checks and for tests that need mode callbacks to run eagerly.
    """

    def __init__(self, ocp: OcpDefinition, fd_step: float):
        self.ocp = ocp
        self.eps = fd_step
        # Differencing a differenced gradient amplifies rounding; the
        # outer step is the usual sqrt tradeoff.
        self.hess_eps = fd_step ** 0.5
        self.groups = ocp.node_groups()

    def _step(self, x, u, t):
        return np.asarray(discrete_step(self.ocp, x, u, t))

    def _task_cost(self, x, u, t, p):
        return self.ocp.dt * float(self.ocp.stage_cost(
            jnp.asarray(x), jnp.asarray(u), t, jnp.asarray(p)))

    def rollout(self, x0, inputs, t0):
        n = self.ocp.node_count
        xs = np.zeros((n + 1, self.ocp.state_dim))
        xs[0] = np.asarray(x0)
        for k in range(n):
            xs[k + 1] = self._step(xs[k], inputs[k], t0 + k * self.ocp.dt)
        return xs

    def cost(self, states, inputs, t0, params, pscale):
        n = self.ocp.node_count
        dt = self.ocp.dt
        task = pen_eq = pen_ineq = 0.0
        for k in range(n):
            mode = self.ocp.modes[self.ocp.mode_index(k)]
            a, b, c = _stage_terms(self.ocp, mode, jnp.asarray(states[k]),
                                   jnp.asarray(inputs[k]), t0 + k * dt,
                                   jnp.asarray(params[k]), pscale)
            task += dt * float(a)
            pen_eq += float(b)
            pen_ineq += float(c)
        if self.ocp.terminal_cost is not None:
            task += float(self.ocp.terminal_cost(jnp.asarray(states[n]),
                                                 jnp.asarray(params[n])))
        total = task + pen_eq + pen_ineq
        return total, np.array([task, pen_eq, pen_ineq])

    def _fd_grad(self, fn, z):
        g = np.zeros(len(z))
        for i in range(len(z)):
            dz = np.zeros(len(z))
            dz[i] = self.eps
            g[i] = (fn(z + dz) - fn(z - dz)) / (2 * self.eps)
        return g

    def _fd_jac(self, fn, z):
        cols = []
        for i in range(len(z)):
            dz = np.zeros(len(z))
            dz[i] = self.eps
            cols.append((fn(z + dz) - fn(z - dz)) / (2 * self.eps))
        return np.stack(cols, axis=1)

    def linearize(self, states, inputs, t0, params, pscale):
        ocp = self.ocp
        n, nx, nu = ocp.node_count, ocp.state_dim, ocp.input_dim
        dt = ocp.dt
        a = np.zeros((n, nx, nx))
        b = np.zeros((n, nx, nu))
        lx = np.zeros((n, nx))
        lu = np.zeros((n, nu))
        lxx = np.zeros((n, nx, nx))
        luu = np.zeros((n, nu, nu))
        lux = np.zeros((n, nu, nx))
        for k in range(n):
            t = t0 + k * dt
            z0 = np.concatenate([states[k], inputs[k]])
            step_z = lambda z: self._step(z[:nx], z[nx:], t)
            for i in range(nx + nu):
                dz = np.zeros(nx + nu)
                dz[i] = self.eps
                col = (step_z(z0 + dz) - step_z(z0 - dz)) / (2 * self.eps)
                if i < nx:
                    a[k][:, i] = col
                else:
                    b[k][:, i - nx] = col
            cost_z = lambda z: self._task_cost(z[:nx], z[nx:], t, params[k])
            g = self._fd_grad(cost_z, z0)
            hess = np.zeros((nx + nu, nx + nu))
            for i in range(nx + nu):
                dz = np.zeros(nx + nu)
                dz[i] = self.hess_eps
                gp = self._fd_grad(cost_z, z0 + dz)
                gm = self._fd_grad(cost_z, z0 - dz)
                hess[i] = (gp - gm) / (2 * self.hess_eps)
            hess = 0.5 * (hess + hess.T)
            mode = ocp.modes[ocp.mode_index(k)]
            if mode.eq is not None or mode.ineq is not None:
                r = jr = h = jh = None
                if mode.eq is not None:
                    eq_z = lambda z: np.atleast_1d(np.asarray(
                        mode.eq(jnp.asarray(z[:nx]), jnp.asarray(z[nx:]),
                                t, jnp.asarray(params[k]))))
                    r, jr = eq_z(z0), self._fd_jac(eq_z, z0)
                if mode.ineq is not None:
                    in_z = lambda z: np.atleast_1d(np.asarray(
                        mode.ineq(jnp.asarray(z[:nx]), jnp.asarray(z[nx:]),
                                  t, jnp.asarray(params[k]))))
                    h, jh = in_z(z0), self._fd_jac(in_z, z0)
                pg, ph = penalty_gn_terms(
                    r, jr, h, jh,
                    eq_weight=np.asarray(mode.eq_weight) * pscale,
                    ineq_weight=np.asarray(mode.ineq_weight) * pscale,
                    ineq_margin=mode.ineq_margin)
                g = g + np.asarray(pg)
                hess = hess + np.asarray(ph)
            lx[k], lu[k] = g[:nx], g[nx:]
            lxx[k] = hess[:nx, :nx]
            luu[k] = hess[nx:, nx:]
            lux[k] = hess[nx:, :nx]
        if ocp.terminal_cost is not None:
            term = lambda z: float(ocp.terminal_cost(jnp.asarray(z),
                                                     jnp.asarray(params[n])))
            phix = self._fd_grad(term, np.asarray(states[n]))
            phixx = np.zeros((nx, nx))
            for i in range(nx):
                dz = np.zeros(nx)
                dz[i] = self.hess_eps
                phixx[i] = (self._fd_grad(term, states[n] + dz)
                            - self._fd_grad(term, states[n] - dz)) \
                    / (2 * self.hess_eps)
            phixx = 0.5 * (phixx + phixx.T)
        else:
            phix = np.zeros(nx)
            phixx = np.zeros((nx, nx))
        return a, b, lx, lu, lxx, luu, lux, phix, phixx

    def backward(self, a, b, lx, lu, lxx, luu, lux, phix, phixx, reg):
        n, nx, nu = self.ocp.node_count, self.ocp.state_dim, \
            self.ocp.input_dim
        kfb = np.zeros((n, nu, nx))
        kff = np.zeros((n, nu))
        vx, vxx = np.asarray(phix), np.asarray(phixx)
        dv = 0.0
        for k in reversed(range(n)):
            qx = lx[k] + a[k].T @ vx
            qu = lu[k] + b[k].T @ vx
            qxx = lxx[k] + a[k].T @ vxx @ a[k]
            quu = luu[k] + b[k].T @ vxx @ b[k] + reg * np.eye(nu)
            qux = lux[k] + b[k].T @ vxx @ a[k]
            try:
                chol = np.linalg.cholesky(quu)
            except np.linalg.LinAlgError:
                return kfb, kff, 0.0, False
            solve = lambda rhs: np.linalg.solve(
                chol.T, np.linalg.solve(chol, rhs))
            kff[k] = -solve(qu)
            kfb[k] = -solve(qux)
            vx = qx + kfb[k].T @ quu @ kff[k] + kfb[k].T @ qu \
                + qux.T @ kff[k]
            vxx = qxx + kfb[k].T @ quu @ kfb[k] + kfb[k].T @ qux \
                + qux.T @ kfb[k]
            vxx = 0.5 * (vxx + vxx.T)
            dv += kff[k] @ qu + 0.5 * kff[k] @ quu @ kff[k]
        if not (np.all(np.isfinite(kfb)) and np.all(np.isfinite(kff))):
            return kfb, kff, 0.0, False
        return kfb, kff, dv, True

    def forward(self, x0, states, inputs, kfb, kff, alpha, t0):
        n = self.ocp.node_count
        dt = self.ocp.dt
        xs = np.zeros_like(np.asarray(states))
        us = np.zeros_like(np.asarray(inputs))
        xs[0] = x0
        for k in range(n):
            us[k] = inputs[k] + alpha * kff[k] \
                + kfb[k] @ (xs[k] - states[k])
            xs[k + 1] = self._step(xs[k], us[k], t0 + k * dt)
        return xs, us

    def residuals(self, states, inputs, t0, params):
        n = self.ocp.node_count
        dt = self.ocp.dt
        eq_nodes = np.zeros(n)
        ineq_nodes = np.zeros(n)
        for k in range(n):
            mode = self.ocp.modes[self.ocp.mode_index(k)]
            args = (jnp.asarray(states[k]), jnp.asarray(inputs[k]),
                    t0 + k * dt, jnp.asarray(params[k]))
            if mode.eq is not None:
                eq_nodes[k] = float(jnp.max(jnp.abs(mode.eq(*args))))
            if mode.ineq is not None:
                ineq_nodes[k] = max(0.0, -float(jnp.min(mode.ineq(*args))))
        return eq_nodes, ineq_nodes


def _backend(ocp: OcpDefinition, settings: SolverSettings):
    key = (settings.backend,
           settings.fd_step if settings.backend == "fd" else None)
    if key not in ocp._backends:
        if settings.backend == "ad":
            ocp._backends[key] = _JaxBackend(ocp)
        else:
            ocp._backends[key] = _FdBackend(ocp, settings.fd_step)
    return ocp._backends[key]


# Public operations -----------------------------------------------------------


def rollout(ocp: OcpDefinition, x0, inputs, t0: float = 0.0,
            settings: SolverSettings | None = None) -> np.ndarray:
    """Integrate the input sequence from x0; returns (N+1, nx) states."""
    settings = settings or SolverSettings()
    be = _backend(ocp, settings)
    return np.asarray(be.rollout(jnp.asarray(x0), jnp.asarray(inputs), t0))


def linearize(ocp: OcpDefinition, states, inputs, t0: float = 0.0,
              node_params=None, settings: SolverSettings | None = None,
              penalty_scale: float = 1.0) -> dict:
    """Dynamics Jacobians and augmented-cost derivatives along (states, inputs)."""
    settings = settings or SolverSettings()
    be = _backend(ocp, settings)
    params = _expand_params(ocp, node_params)
    out = be.linearize(jnp.asarray(states), jnp.asarray(inputs), t0,
                       params, penalty_scale)
    keys = ("A", "B", "lx", "lu", "lxx", "luu", "lux", "phix", "phixx")
    return {k: np.asarray(v) for k, v in zip(keys, out)}


def _expand_params(ocp: OcpDefinition, node_params):
    width = max(ocp.param_dim, 1)
    if node_params is None:
        return jnp.zeros((ocp.node_count + 1, width))
    node_params = jnp.asarray(node_params)
    if node_params.shape[0] != ocp.node_count + 1:
        raise ValueError("node_params must have node_count + 1 rows")
    return node_params


def _finite(arr) -> bool:
    return bool(np.all(np.isfinite(np.asarray(arr))))


def solve(ocp: OcpDefinition, x0, settings: SolverSettings | None = None,
          node_params=None, initial_guess=None,
          t0: float = 0.0) -> TrajectorySolution:
    """Run iLQR with penalty rounds; always returns the best iterate seen."""
    settings = settings or SolverSettings()
    settings.validate()
    be = _backend(ocp, settings)
    n = ocp.node_count
    dt = ocp.dt
    params = _expand_params(ocp, node_params)
    t0 = float(t0)

    if initial_guess is None:
        inputs = jnp.zeros((n, ocp.input_dim))
    elif isinstance(initial_guess, TrajectorySolution):
        inputs = jnp.asarray(initial_guess.inputs)
    else:
        inputs = jnp.asarray(initial_guess)
        if inputs.shape != (n, ocp.input_dim):
            raise ValueError("initial guess must be (node_count, input_dim)")

    x0 = jnp.asarray(x0)
    states = be.rollout(x0, inputs, t0)
    diverged = False
    if not _finite(states):
        # A bad warm start can blow up the rollout; retry cold once.
        inputs = jnp.zeros((n, ocp.input_dim))
        states = be.rollout(x0, inputs, t0)
        if not _finite(states):
            diverged = True

    alphas = []
    a = 1.0
    while a >= settings.min_step:
        alphas.append(a)
        a *= settings.backtrack_factor

    log_records = []
    total_iters = 0
    converged = False
    cost_val, terms = (np.inf, np.array([np.inf, 0.0, 0.0]))
    if not diverged:
        cost_val, terms = be.cost(states, inputs, t0, params, 1.0)
        cost_val = float(cost_val)

    pscale = 1.0
    reg = 0.0
    for round_idx in range(settings.penalty_rounds):
        if diverged:
            break
        if round_idx > 0:
            pscale *= settings.penalty_growth
            cost_val, terms = be.cost(states, inputs, t0, params, pscale)
            cost_val = float(cost_val)
            converged = False
        for _ in range(settings.max_iterations):
            total_iters += 1
            derivs = be.linearize(states, inputs, t0, params, pscale)
            # Levenberg damping: raise on any rejected step (singular or
            # overshooting quadratic model), relax after confident steps.
            accepted = False
            exhausted = False
            while not accepted:
                kfb, kff, expected_dv, ok = be.backward(*derivs, reg)
                if bool(ok):
                    for alpha in alphas:
                        xs, us = be.forward(x0, states, inputs, kfb, kff,
                                            alpha, t0)
                        new_cost, new_terms = be.cost(xs, us, t0, params,
                                                      pscale)
                        new_cost = float(new_cost)
                        if np.isfinite(new_cost) and _finite(xs) \
                                and new_cost < cost_val:
                            improvement = cost_val - new_cost
                            states, inputs = xs, us
                            cost_val, terms = new_cost, new_terms
                            accepted = True
                            log_records.append({
                                "iteration": total_iters,
                                "round": round_idx,
                                "cost": cost_val,
                                "step": alpha,
                                "reg": reg,
                            })
                            break
                if accepted:
                    if alpha >= 0.5:
                        reg = 0.0 if reg <= settings.reg_init \
                            else reg / settings.reg_growth
                    elif alpha <= 0.0625:
                        # Timid steps mean the quadratic model overshoots;
                        # tighten the trust region for the next pass.
                        reg = settings.reg_init if reg < settings.reg_init \
                            else min(reg * settings.reg_growth,
                                     settings.reg_max)
                    break
                if bool(ok) and abs(float(expected_dv)) \
                        < settings.tol_cost * (1.0 + abs(cost_val)):
                    # Flat quadratic model with nothing to accept: done.
                    converged = True
                    break
                reg = settings.reg_init if reg < settings.reg_init \
                    else reg * settings.reg_growth
                if reg > settings.reg_max:
                    exhausted = True
                    break
            if converged or exhausted:
                break
            if improvement < settings.tol_cost * (1.0 + abs(cost_val)):
                converged = True
                break
        eq_nodes, ineq_nodes = be.residuals(states, inputs, t0, params)
        worst = max(float(np.max(np.asarray(eq_nodes), initial=0.0)),
                    float(np.max(np.asarray(ineq_nodes), initial=0.0)))
        if worst <= settings.constraint_tol:
            break

    eq_nodes, ineq_nodes = be.residuals(states, inputs, t0, params)
    eq_nodes = np.asarray(eq_nodes)
    ineq_nodes = np.asarray(ineq_nodes)
    max_eq = float(np.max(eq_nodes, initial=0.0))
    max_ineq = float(np.max(ineq_nodes, initial=0.0))
    has_constraints = any(m.eq is not None or m.ineq is not None
                          for m in ocp.modes)
    if has_constraints and max(max_eq, max_ineq) > settings.constraint_tol:
        converged = False
    if diverged:
        converged = False
        states = jnp.zeros((n + 1, ocp.state_dim)).at[:].set(x0)
        _log.warning("solver rollout diverged; returning hold at x0")

    for rec in log_records:
        rec["max_eq"] = max_eq
        rec["max_ineq"] = max_ineq

    return TrajectorySolution(
        times=np.asarray(t0 + dt * np.arange(n + 1)),
        states=np.asarray(states),
        inputs=np.asarray(inputs),
        cost=float(cost_val),
        cost_terms={"task": float(terms[0]), "penalty_eq": float(terms[1]),
                    "penalty_ineq": float(terms[2])},
        iterations=total_iters,
        converged=converged,
        diverged=diverged,
        max_eq_residual=max_eq,
        max_ineq_violation=max_ineq,
        node_eq_residuals=np.asarray(eq_nodes),
        node_ineq_violations=np.asarray(ineq_nodes),
        iteration_log=log_records,
    )
