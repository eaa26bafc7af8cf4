"""Gauss-Newton multiple-shooting trajectory optimisation with torque boxes.

The horizon is split into ``shoot_intervals`` segments.  Every segment is
simulated from its own node state; the dynamics of each control tick are
linearised with batched forward-mode duals, and the resulting linear-quadratic
subproblem (with the node defects as affine terms) is solved by a Riccati
recursion.  Steps are globalised by backtracking on the merit
``cost + mu * sum|defect|``.

Problems sharing a model, parameters and integrator are solved together:
every array carries a leading problem axis and nothing mixes problems, so a
problem's result does not depend on what it is batched with.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import DualScalar
from .dynamics import DIVERGENCE_LIMIT, JointState, StepSpec, Trajectory, _aba, _applied, _body_inertias, forward_dynamics
from .model import RobotModel, SimParams

__all__ = [
    "TrajOptError",
    "LineSearchFailed",
    "InsufficientConvergence",
    "QuadraticCost",
    "TrajOptProblem",
    "ConvergenceReport",
    "StateSampler",
    "solve",
    "solve_batch",
    "collect_dataset",
    "gravity_torque",
    "DEFAULT_WEIGHTS",
]

log = logging.getLogger(__name__)

DEFAULT_WEIGHTS = dict(q_pos=10.0, q_vel=1.0, r=0.01, qf_pos=1000.0, qf_vel=10.0)
DEFAULT_TORQUE_BOUND = 9.0


class TrajOptError(Exception):
    pass


class LineSearchFailed(TrajOptError):
    pass


class InsufficientConvergence(TrajOptError):
    pass


def _vec(x, J):
    a = np.asarray(x, dtype=float)
    return np.full(J, float(a)) if a.ndim == 0 else a.copy()


@dataclass(frozen=True)
class QuadraticCost:
    """Running cost ``(x-g)^T Q (x-g) + u^T R u`` per tick plus the terminal
    ``(x_N-g)^T Qf (x_N-g)``; all weight matrices are diagonal."""

    goal: JointState
    q_pos: np.ndarray
    q_vel: np.ndarray
    r: np.ndarray
    qf_pos: np.ndarray
    qf_vel: np.ndarray

    def __post_init__(self):
        J = len(self.goal.q)
        for name in ("q_pos", "q_vel", "r", "qf_pos", "qf_vel"):
            v = _vec(getattr(self, name), J)
            if v.shape != (J,) or np.any(v < 0):
                raise ValueError(f"cost weight {name} must be {J} non-negative numbers")
            object.__setattr__(self, name, v)
        if np.any(self.qf_pos <= 0):
            raise ValueError("terminal position weights must be positive")

    @classmethod
    def default(cls, goal, **weights) -> "QuadraticCost":
        if not isinstance(goal, JointState):
            goal = JointState.at_rest(goal)
        w = {**DEFAULT_WEIGHTS, **weights}
        return cls(goal, w["q_pos"], w["q_vel"], w["r"], w["qf_pos"], w["qf_vel"])

    @property
    def Q(self):
        return np.concatenate([self.q_pos, self.q_vel])

    @property
    def Qf(self):
        return np.concatenate([self.qf_pos, self.qf_vel])

    @property
    def x_goal(self):
        return np.concatenate([self.goal.q, self.goal.qd])


@dataclass(frozen=True)
class TrajOptProblem:
    model: RobotModel
    params: SimParams
    start: JointState
    cost: QuadraticCost
    horizon: int
    torque_bounds: np.ndarray = None  # (J, 2) lower/upper
    shoot_intervals: int = None
    spec: StepSpec = field(default_factory=StepSpec)

    def __post_init__(self):
        J = self.model.actuated_joint_count
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2 ticks")
        tb = self.torque_bounds
        if tb is None:
            tb = np.tile([-DEFAULT_TORQUE_BOUND, DEFAULT_TORQUE_BOUND], (J, 1))
        tb = np.asarray(tb, dtype=float)
        if tb.ndim == 1:
            tb = np.stack([-tb, tb], axis=1)
        if tb.shape != (J, 2) or np.any(tb[:, 0] > tb[:, 1]):
            raise ValueError("torque_bounds must be J (lower, upper) pairs")
        object.__setattr__(self, "torque_bounds", tb)
        si = self.horizon if self.shoot_intervals is None else int(self.shoot_intervals)
        if si < 1 or self.horizon % si:
            raise ValueError("horizon must be divisible by shoot_intervals")
        object.__setattr__(self, "shoot_intervals", si)
        if len(self.start.q) != J:
            raise ValueError("start state has the wrong dimension")


@dataclass
class ConvergenceReport:
    converged: bool
    iterations: int
    final_cost: float
    max_defect: float
    status: str
    merit_history: list = field(default_factory=list)
    wall_time: float = 0.0


# ---------------------------------------------------------------------------
# batched simulation helpers

def _tick_values(tree, inertia, params, x, u, spec):
    """Advance a batch of states one control tick (float arrays, shape (B,))."""
    J = len(u)
    q, qd = x[:J], x[J:]
    dt = spec.dt
    for _ in range(spec.substeps):
        qdd = _aba(tree, inertia, params.gravity, q, qd, _applied(params, u, qd))
        qd = [qd[j] + qdd[j] * dt for j in range(J)]
        q = [q[j] + qd[j] * dt for j in range(J)]
    return q + qd


def _tick_linearised(tree, inertia, params, X, U, spec):
    """One tick for a batch with Jacobians.  ``X``: (B, 2J), ``U``: (B, J).
    Returns next states (B, 2J), A (B, 2J, 2J), Bu (B, 2J, J)."""
    B, n = X.shape
    J = U.shape[1]
    D = n + J
    seeds = np.eye(D)
    xs = [DualScalar(X[:, i : i + 1], np.broadcast_to(seeds[i], (B, D))) for i in range(n)]
    us = [DualScalar(U[:, j : j + 1], np.broadcast_to(seeds[n + j], (B, D))) for j in range(J)]
    out = _tick_values(tree, inertia, params, xs, us, spec)
    Xn = np.concatenate([o.value for o in out], axis=1)
    jac = np.stack([np.broadcast_to(o.deriv, (B, D)) for o in out], axis=1)
    return Xn, jac[:, :, :n], jac[:, :, n:]


def gravity_torque(model: RobotModel, params: SimParams, q) -> np.ndarray:
    """Commanded torque that holds ``q`` at rest (force gains applied)."""
    J = model.actuated_joint_count
    zero = np.zeros(J)
    p0 = SimParams(params.gravity, params.masses, (0.0,) * J, (1.0,) * J, params.inertias)
    bias_acc = forward_dynamics(model, p0, JointState(q, zero), zero)
    pz = SimParams((0.0, 0.0, 0.0), params.masses, (0.0,) * J, (1.0,) * J, params.inertias)
    Minv = np.column_stack([forward_dynamics(model, pz, JointState(q, zero), e) for e in np.eye(J)])
    tau = -np.linalg.solve(Minv, bias_acc)
    pd = np.array([float(v) for v in params.force_pd])
    return tau / np.where(np.abs(pd) > 1e-9, pd, 1.0)


# ---------------------------------------------------------------------------
# the batched solver

class _Batch:
    """Problems that share model, params, integrator, horizon and layout."""

    def __init__(self, problems):
        p0 = problems[0]
        self.model, self.params, self.spec = p0.model, p0.params, p0.spec
        self.tree = self.model.tree
        self.inertia = _body_inertias(self.tree, self.params)
        self.N = p0.horizon
        self.M = p0.shoot_intervals
        self.L = self.N // self.M
        self.J = self.model.actuated_joint_count
        self.n = 2 * self.J
        self.P = len(problems)
        self.x0 = np.array([np.concatenate([p.start.q, p.start.qd]) for p in problems])
        self.goal = np.array([p.cost.x_goal for p in problems])
        self.Q = np.array([p.cost.Q for p in problems])
        self.Qf = np.array([p.cost.Qf for p in problems])
        self.R = np.array([p.cost.r for p in problems])
        self.lo = np.array([p.torque_bounds[:, 0] for p in problems])
        self.hi = np.array([p.torque_bounds[:, 1] for p in problems])
        # ticks whose successor is a shooting node (the only places a gap may live)
        self.node_gap = np.zeros(self.N, dtype=bool)
        self.node_gap[self.L - 1 : self.N - 1 : self.L] = True

    def tick(self, X, U):
        """Float tick for a batch: ``X`` (B, n), ``U`` (B, J) -> (B, n)."""
        with np.errstate(all="ignore"):
            out = _tick_values(self.tree, self.inertia, self.params,
                               [X[:, i] for i in range(self.n)], [U[:, j] for j in range(self.J)], self.spec)
        return np.stack(out, axis=1)

    def linearise(self, X, U):
        """Linearise every tick of every problem at once (shooting nodes make
        the ticks independent).  Returns ``F`` (P, N, n), ``A``, ``B``."""
        P, N, n, J = X.shape[0], self.N, self.n, self.J
        F, A, Bm = _tick_linearised(self.tree, self.inertia, self.params,
                                    X[:, :N].reshape(P * N, n), U.reshape(P * N, J), self.spec)
        return F.reshape(P, N, n), A.reshape(P, N, n, n), Bm.reshape(P, N, n, J)

    def cost(self, idx, X, U):
        e = X[:, :-1] - self.goal[idx, None, :]
        run = np.einsum("ptn,pn,ptn->p", e, self.Q[idx], e) + np.einsum("ptj,pj,ptj->p", U, self.R[idx], U)
        ef = X[:, -1] - self.goal[idx]
        return run + np.einsum("pn,pn,pn->p", ef, self.Qf[idx], ef)


def _backward(b: _Batch, idx, X, U, A, Bm, gaps):
    """Riccati sweep of the Gauss-Newton subproblem.  Controls whose
    unconstrained step leaves the box are pinned to the bound and the
    remaining ones re-solved (one active-set pass)."""
    P, N, n, J = len(idx), b.N, b.n, b.J
    lo, hi = b.lo[idx], b.hi[idx]
    Q, R, g = b.Q[idx], b.R[idx], b.goal[idx]
    Rm = R[:, :, None] * np.eye(J)
    V = b.Qf[idx][:, :, None] * np.eye(n)
    v = b.Qf[idx] * (X[:, N] - g)
    Ks = np.empty((P, N, J, n))
    ks = np.empty((P, N, J))
    eyeJ = np.eye(J)
    for t in range(N - 1, -1, -1):
        At, Bt, ct = A[:, t], Bm[:, t], gaps[:, t]
        At_T, Bt_T = np.swapaxes(At, 1, 2), np.swapaxes(Bt, 1, 2)
        vv = v + np.einsum("pij,pj->pi", V, ct)
        VA, VB = V @ At, V @ Bt
        Qxx = Q[:, :, None] * np.eye(n) + At_T @ VA
        Quu = Rm + Bt_T @ VB
        Quu = 0.5 * (Quu + np.swapaxes(Quu, 1, 2)) + 1e-10 * eyeJ
        Qux = Bt_T @ VA
        qx = Q * (X[:, t] - g) + np.einsum("pji,pj->pi", At, vv)
        qu = R * U[:, t] + np.einsum("pji,pj->pi", Bt, vv)
        k = -np.linalg.solve(Quu, qu[:, :, None])[:, :, 0]
        target = U[:, t] + k
        clamped = (target < lo) | (target > hi)
        if np.any(clamped):
            dc = np.clip(target, lo, hi) - U[:, t]
            free = ~clamped
            H = np.where(free[:, :, None], Quu * free[:, None, :], eyeJ)
            rhs_k = np.where(free, -qu - np.einsum("pij,pj->pi", Quu * clamped[:, None, :], dc), dc)
            k = np.linalg.solve(H, rhs_k[:, :, None])[:, :, 0]
            K = np.linalg.solve(H, np.where(free[:, :, None], -Qux, 0.0))
        else:
            K = -np.linalg.solve(Quu, Qux)
        Ks[:, t], ks[:, t] = K, k
        KT = np.swapaxes(K, 1, 2)
        V = Qxx + KT @ Quu @ K + KT @ Qux + np.swapaxes(Qux, 1, 2) @ K
        V = 0.5 * (V + np.swapaxes(V, 1, 2))
        v = qx + np.einsum("pij,pj->pi", KT @ Quu, k) + np.einsum("pij,pj->pi", KT, qu) + np.einsum("pji,pj->pi", Qux, k)
    return Ks, ks


def _linear_step(A, Bm, Ks, ks, gaps):
    P, N, n = gaps.shape
    dX = np.zeros((P, N + 1, n))
    dU = np.empty(ks.shape)
    for t in range(N):
        dU[:, t] = np.einsum("pjn,pn->pj", Ks[:, t], dX[:, t]) + ks[:, t]
        dX[:, t + 1] = np.einsum("pij,pj->pi", A[:, t], dX[:, t]) + np.einsum("pij,pj->pi", Bm[:, t], dU[:, t]) + gaps[:, t]
    return dX, dU


def _forward(b: _Batch, idx, X, U, Ks, ks, gaps, alpha):
    """Nonlinear forward pass: feedback on the rolled state, controls
    projected onto the box, gaps shrunk by ``1 - alpha``."""
    P, N = len(idx), b.N
    Xn = np.empty_like(X)
    Un = np.empty_like(U)
    Xn[:, 0] = X[:, 0]
    lo, hi = b.lo[idx], b.hi[idx]
    a = alpha[:, None]
    for t in range(N):
        u = U[:, t] + a * ks[:, t] + np.einsum("pjn,pn->pj", Ks[:, t], Xn[:, t] - X[:, t])
        Un[:, t] = np.clip(u, lo, hi)
        Xn[:, t + 1] = b.tick(Xn[:, t], Un[:, t]) - (1.0 - a) * gaps[:, t]
    return Xn, Un


def _initial_guess(b: _Batch, U):
    """Node states interpolate start to goal; ticks inside a segment are
    rolled out from their node, so gaps sit only at node boundaries."""
    P, N, L, n = b.P, b.N, b.L, b.n
    X = np.empty((P, N + 1, n))
    X[:, 0] = b.x0
    for t in range(N):
        if t % L == L - 1 and t < N - 1:
            s = (t + 1) / N
            X[:, t + 1] = (1 - s) * b.x0 + s * b.goal
        else:
            X[:, t + 1] = b.tick(X[:, t], U[:, t])
    return X


def solve_batch(problems, max_iter: int = 100, rtol: float = 1e-8, defect_tol: float = 1e-6,
                mu: float = 1e4, init_controls=None, interpolate_nodes: bool = True, min_alpha: float = 2.0**-10):
    """Solve problems sharing model, params, spec, horizon and shooting layout.

    The backtracking line search halves the step down to ``min_alpha``.

    Returns a list of ``(Trajectory, ConvergenceReport)``.  Controls are
    always inside the torque box.  The returned trajectory is the rollout of
    the final controls, so it is defect-free; ``max_defect`` reports the node
    mismatch of the final iterate.
    """
    if not problems:
        return []
    t_start = time.perf_counter()
    b = _Batch(problems)
    for p in problems:
        if p.model is not b.model or p.params != b.params or p.spec != b.spec:
            raise ValueError("a batch must share model, params and integrator")
        if p.horizon != b.N or p.shoot_intervals != b.M:
            raise ValueError("a batch must share horizon and shooting layout")
    P, N, n, J = b.P, b.N, b.n, b.J

    if init_controls is None:
        U = np.empty((P, N, J))
        for i, p in enumerate(problems):
            U[i] = np.clip(gravity_torque(b.model, b.params, p.start.q), b.lo[i], b.hi[i])
    else:
        U = np.clip(np.asarray(init_controls, dtype=float).reshape(P, N, J), b.lo[:, None], b.hi[:, None])
    if interpolate_nodes:
        X = _initial_guess(b, U)
    else:
        X = np.empty((P, N + 1, n))
        X[:, 0] = b.x0
        for t in range(N):
            X[:, t + 1] = b.tick(X[:, t], U[:, t])
    if not np.all(np.isfinite(X)):
        bad = np.where(~np.all(np.isfinite(X), axis=(1, 2)))[0]
        raise TrajOptError(f"initial guess diverged for problems {bad.tolist()}")

    mu_p = np.full(P, float(mu))
    prev_def = np.full(P, np.inf)
    all_idx = np.arange(P)
    F, A, Bm = b.linearise(X, U)
    gaps = np.where(b.node_gap[None, :, None], F - X[:, 1:], 0.0)
    cost = b.cost(all_idx, X, U)
    dsum = np.abs(gaps).sum(axis=(1, 2))
    dmax = np.abs(gaps).max(axis=(1, 2))
    phi = cost + mu_p * dsum
    active = np.ones(P, dtype=bool)
    status = np.array(["max_iter"] * P, dtype=object)
    iters = np.zeros(P, dtype=int)
    history = [[float(v)] for v in phi]
    trivial = (cost <= 1e-14) & (dsum == 0)
    active[trivial] = False
    status[trivial] = "converged"
    need_lin = np.zeros(P, dtype=bool)

    for it in range(max_iter):
        idx = np.where(active)[0]
        if len(idx) == 0:
            break
        relin = idx[need_lin[idx]]
        if len(relin):
            F[relin], A[relin], Bm[relin] = b.linearise(X[relin], U[relin])
            gaps[relin] = np.where(b.node_gap[None, :, None], F[relin] - X[relin, 1:], 0.0)
            need_lin[relin] = False
        Xa, Ua, Aa, Ba, ga = X[idx], U[idx], A[idx], Bm[idx], gaps[idx]
        Ks, ks = _backward(b, idx, Xa, Ua, Aa, Ba, ga)
        dX, dU = _linear_step(Aa, Ba, Ks, ks, ga)
        e = Xa[:, :-1] - b.goal[idx, None]
        gdir = 2 * (
            np.einsum("ptn,pn,ptn->p", e, b.Q[idx], dX[:, :-1])
            + np.einsum("ptj,pj,ptj->p", Ua, b.R[idx], dU)
            + np.einsum("pn,pn,pn->p", Xa[:, -1] - b.goal[idx], b.Qf[idx], dX[:, -1])
        )
        dphi = gdir - mu_p[idx] * dsum[idx]
        alpha = np.ones(len(idx))
        accepted = np.zeros(len(idx), dtype=bool)
        pending = dphi < 0
        new_X, new_U = Xa.copy(), Ua.copy()
        new_cost, new_d, new_phi = cost[idx].copy(), dsum[idx].copy(), phi[idx].copy()
        while np.any(pending):
            sub = np.where(pending)[0]
            a = alpha[sub]
            Xt, Ut = _forward(b, idx[sub], Xa[sub], Ua[sub], Ks[sub], ks[sub], ga[sub], a)
            c = b.cost(idx[sub], Xt, Ut)
            d = (1.0 - a) * dsum[idx[sub]]
            ph = c + mu_p[idx[sub]] * d
            ph = np.where(np.all(np.isfinite(Xt), axis=(1, 2)), ph, np.inf)
            ok = ph <= phi[idx[sub]] + 1e-4 * a * dphi[sub]
            acc = sub[ok]
            new_X[acc], new_U[acc] = Xt[ok], Ut[ok]
            new_cost[acc], new_d[acc], new_phi[acc] = c[ok], d[ok], ph[ok]
            accepted[acc] = True
            pending[acc] = False
            rej = sub[~ok]
            alpha[rej] *= 0.5
            pending[rej[alpha[rej] < min_alpha]] = False
        for j_, p_ in enumerate(idx):
            iters[p_] = it + 1
            maxdef = dmax[p_]
            if not accepted[j_]:
                # no admissible step: stationary if the model predicts no gain
                small = abs(dphi[j_]) <= max(rtol * phi[p_], 1e-14)
                status[p_] = "converged" if small and maxdef < defect_tol else "line_search_failed"
                active[p_] = False
                continue
            old = phi[p_]
            X[p_], U[p_] = new_X[j_], new_U[j_]
            cost[p_], dsum[p_], phi[p_] = new_cost[j_], new_d[j_], new_phi[j_]
            need_lin[p_] = True
            history[p_].append(float(phi[p_]))
            maxdef *= 1.0 - alpha[j_]
            dmax[p_] = maxdef
            if maxdef < defect_tol and (old - phi[p_] <= rtol * old or phi[p_] <= 1e-14):
                status[p_] = "converged"
                active[p_] = False
            elif maxdef > defect_tol and maxdef > 0.9 * prev_def[p_]:
                # defects stalled: weigh them more
                mu_p[p_] *= 2.0
                phi[p_] = cost[p_] + mu_p[p_] * dsum[p_]
            prev_def[p_] = maxdef

    results = []
    Xr = _replay(b, U)
    final = b.cost(all_idx, Xr, U)
    blown = ~np.all(np.abs(Xr) <= DIVERGENCE_LIMIT, axis=(1, 2))
    status[blown] = "diverged"
    wall = time.perf_counter() - t_start
    times = np.arange(N + 1) * b.spec.control_period
    for i in range(P):
        traj = Trajectory(times, Xr[i, :, :J].copy(), Xr[i, :, J:].copy(), U[i].copy(), b.goal[i, :J].copy())
        rep = ConvergenceReport(
            converged=status[i] == "converged",
            iterations=int(iters[i]),
            final_cost=float(final[i]),
            max_defect=float(dmax[i]),
            status=str(status[i]),
            merit_history=history[i],
            wall_time=wall,
        )
        results.append((traj, rep))
    return results


def _replay(b: _Batch, U):
    """Roll the final controls of every problem out from its start state."""
    X = np.empty((b.P, b.N + 1, b.n))
    X[:, 0] = b.x0
    for t in range(b.N):
        X[:, t + 1] = b.tick(X[:, t], U[:, t])
    return X


def solve(problem: TrajOptProblem, **kw):
    """Solve one problem; returns ``(Trajectory, ConvergenceReport)``."""
    return solve_batch([problem], **kw)[0]


# ---------------------------------------------------------------------------
# dataset collection

@dataclass(frozen=True)
class StateSampler:
    """Uniform joint-space box; starts and goals are drawn at rest."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        lo, hi = np.asarray(self.low, dtype=float), np.asarray(self.high, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1 or np.any(lo > hi):
            raise ValueError("sampler needs matching low <= high vectors")
        object.__setattr__(self, "low", lo)
        object.__setattr__(self, "high", hi)

    @classmethod
    def around(cls, centre, half_width) -> "StateSampler":
        c = np.asarray(centre, dtype=float)
        return cls(c - half_width, c + half_width)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.low + (self.high - self.low) * rng.random(len(self.low))


def _attempt_problem(template: TrajOptProblem, sampler: StateSampler, seed: int, attempt: int):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(attempt)]))
    start = sampler.sample(rng)
    goal = sampler.sample(rng)
    c = template.cost
    cost = QuadraticCost(JointState.at_rest(goal), c.q_pos, c.q_vel, c.r, c.qf_pos, c.qf_vel)
    return replace(template, start=JointState.at_rest(start), cost=cost)


def _solve_chunk(args):
    template, sampler, seed, attempts, solver_kw = args
    problems = [_attempt_problem(template, sampler, seed, a) for a in attempts]
    try:
        return solve_batch(problems, **solver_kw)
    except Exception:
        # isolate the offending problem(s)
        out = []
        for pr in problems:
            try:
                out.append(solve_batch([pr], **solver_kw)[0])
            except Exception as exc:  # diverged or singular: counts as non-converged
                log.debug("attempt failed: %s", exc)
                out.append(None)
        return out


def collect_dataset(model: RobotModel, params: SimParams, K: int, sampler: StateSampler, horizon: int,
                    seed: int, *, spec: StepSpec | None = None, torque_bounds=None, shoot_intervals=None,
                    weights: dict | None = None, workers: int = 1, chunk_size: int = 50,
                    reports: list | None = None, **solver_kw) -> list[Trajectory]:
    """Solve ``K`` randomised reach problems and return the converged ones.

    Attempt ``i`` draws its start and goal from a generator seeded by
    ``(seed, i)``.  Non-converged attempts are replaced by fresh ones, up to
    ``3 * K`` attempts in total.  Attempts are grouped into fixed chunks by
    index, so the result does not depend on ``workers``.
    """
    if K < 1:
        raise ValueError("K must be at least 1")
    if len(sampler.low) != model.actuated_joint_count:
        raise ValueError("sampler dimension does not match the model")
    spec = spec or StepSpec()
    q0 = 0.5 * (sampler.low + sampler.high)
    template = TrajOptProblem(model, params, JointState.at_rest(q0), QuadraticCost.default(q0, **(weights or {})),
                              horizon, torque_bounds, shoot_intervals, spec)
    budget = 3 * K
    done: dict[int, tuple] = {}
    next_attempt = 0
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        while len(done) < K and next_attempt < budget:
            need = min(K - len(done), budget - next_attempt)
            attempts = list(range(next_attempt, next_attempt + need))
            next_attempt += need
            chunks = [attempts[i : i + chunk_size] for i in range(0, len(attempts), chunk_size)]
            jobs = [(template, sampler, seed, ch, solver_kw) for ch in chunks]
            outs = pool.map(_solve_chunk, jobs) if pool else map(_solve_chunk, jobs)
            for ch, out in zip(chunks, outs):
                for a, res in zip(ch, out):
                    if reports is not None:
                        reports.append((a, None if res is None else res[1]))
                    if res is not None and res[1].converged:
                        done[a] = res
            log.info("collected %d/%d after %d attempts", len(done), K, next_attempt)
    finally:
        if pool:
            pool.shutdown()
    if len(done) < K:
        raise InsufficientConvergence(f"only {len(done)} of {K} trajectories converged in {budget} attempts")
    return [done[a][0] for a in sorted(done)[:K]]
