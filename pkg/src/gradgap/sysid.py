"""System identification: fit simulator parameters to observed rollouts.

The objective compares simulated joint positions against observations that
were linearly upsampled to the simulator time step, plus a quadratic pull
towards the initial parameters::

    R(p) = sum_n sum_j (q_nj - qhat_nj)^2 + sum_p alpha_p (p - p_init)^2

Optimisers work in normalised coordinates ``z = (p - p_init) / scale`` with
``scale = |p_init|`` (1 where ``p_init`` is zero), so every coordinate is
dimensionless.  Points where the simulation blows up count as infinitely bad.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .autodiff import DualScalar, NumericDomainError, Tape, TapeFull, TapeVar, grad, record
from .dynamics import CONTROL_RATE, Diverged, SingularInertia, StepSpec, simulate
from .model import RobotModel, SimParams, flatten, param_groups, unflatten

__all__ = [
    "SysIdError",
    "ImmediateDivergence",
    "LineSearchFailed",
    "OutOfBounds",
    "SingularNormalEquations",
    "EmptyRollout",
    "ResourceLimit",
    "ObservedRollout",
    "SysIdWindow",
    "RegularizerSpec",
    "Residual",
    "Budget",
    "OptimReport",
    "BasinHopReport",
    "Objective",
    "SysIdObjective",
    "FunctionObjective",
    "QuadraticObjective",
    "RosenbrockObjective",
    "upsample_linear",
    "residual",
    "lbfgs",
    "levenberg_marquardt",
    "optimize_unbounded",
    "optimize_bounded",
    "default_bounds",
    "param_scale",
    "basin_hop",
    "basin_hop_objective",
    "estimate_tape_bytes",
]

log = logging.getLogger(__name__)

_BAD_SIM = (Diverged, SingularInertia, NumericDomainError, FloatingPointError, OverflowError, ZeroDivisionError)
BYTES_PER_TAPE_NODE = 200


class SysIdError(Exception):
    pass


class ImmediateDivergence(SysIdError):
    pass


class LineSearchFailed(SysIdError):
    pass


class OutOfBounds(SysIdError, ValueError):
    pass


class SingularNormalEquations(SysIdError):
    pass


class EmptyRollout(SysIdError, ValueError):
    pass


class ResourceLimit(SysIdError):
    pass


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class ObservedRollout:
    """Joint states sampled at the control rate and the commands between them."""

    sample_times: np.ndarray
    q_obs: np.ndarray
    qd_obs: np.ndarray
    u_cmd: np.ndarray
    source: str = "virtual-rig"

    def __post_init__(self):
        t = np.asarray(self.sample_times, dtype=float)
        q = np.atleast_2d(np.asarray(self.q_obs, dtype=float))
        qd = np.atleast_2d(np.asarray(self.qd_obs, dtype=float))
        u = np.asarray(self.u_cmd, dtype=float).reshape(-1, q.shape[1]) if len(q) else np.zeros((0, 0))
        if len(q) == 0:
            raise EmptyRollout("rollout has no samples")
        if q.shape != qd.shape or len(t) != len(q) or len(u) + 1 != len(q):
            raise ValueError("rollout needs |q| = |qd| = |t| = |u| + 1")
        if self.source not in ("virtual-rig", "file"):
            raise ValueError("source must be 'virtual-rig' or 'file'")
        if len(t) > 1 and not np.allclose(np.diff(t), 1.0 / CONTROL_RATE, rtol=0, atol=1e-9):
            raise ValueError("samples must be spaced uniformly at the control rate")
        for name, v in (("sample_times", t), ("q_obs", q), ("qd_obs", qd), ("u_cmd", u)):
            object.__setattr__(self, name, v)

    @property
    def J(self) -> int:
        return self.q_obs.shape[1]

    @property
    def period(self) -> float:
        return 1.0 / CONTROL_RATE

    @property
    def ticks(self) -> int:
        return len(self.u_cmd)

    @classmethod
    def from_trajectory(cls, traj, source: str = "virtual-rig") -> "ObservedRollout":
        return cls(traj.times, traj.q, traj.qd, traj.u, source)


@dataclass(frozen=True)
class SysIdWindow:
    start_index: int = 0
    duration: float = 0.2

    def __post_init__(self):
        if self.start_index < 0 or self.duration < 0:
            raise ValueError("window start and duration must be non-negative")

    def ticks(self, period: float = 1.0 / CONTROL_RATE) -> int:
        n = self.duration / period
        if abs(n - round(n)) > 1e-9:
            raise ValueError("window duration must be a whole number of control periods")
        return int(round(n))

    def check(self, obs: ObservedRollout) -> None:
        if self.start_index + self.ticks(obs.period) > obs.ticks:
            raise ValueError(
                f"window [{self.start_index}, +{self.duration} s] does not fit a rollout of {obs.ticks} ticks"
            )


@dataclass(frozen=True)
class RegularizerSpec:
    alpha: np.ndarray
    anchor: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.alpha, dtype=float)
        p = np.asarray(self.anchor, dtype=float)
        if a.shape != p.shape or a.ndim != 1:
            raise ValueError("alpha and anchor must be flat vectors of equal length")
        if np.any(a < 0):
            raise ValueError("alpha must be non-negative")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "anchor", p)

    @classmethod
    def zero(cls, p_init: SimParams) -> "RegularizerSpec":
        x = flatten(p_init)
        return cls(np.zeros_like(x), x)

    @classmethod
    def scaled(cls, p_init: SimParams, gain: float = 1e-3) -> "RegularizerSpec":
        """``alpha_p = gain / scale_p**2``: a scale-free pull towards ``p_init``."""
        x = flatten(p_init)
        return cls(gain / param_scale(x) ** 2, x)


def param_scale(x) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=float))
    return np.where(x > 1e-9, x, 1.0)


def upsample_linear(obs: ObservedRollout, dt: float, start_index: int = 0, ticks: int | None = None):
    """Piecewise-linear interpolation of ``q_obs`` at simulator time steps.

    Returns ``(times, q)`` covering samples ``start_index .. start_index +
    ticks``.  When ``dt`` divides the sample period the knots are hit
    exactly.
    """
    if len(obs.q_obs) == 0:
        raise EmptyRollout("rollout has no samples")
    if ticks is None:
        ticks = obs.ticks - start_index
    if start_index < 0 or start_index + ticks > obs.ticks:
        raise ValueError("requested span lies outside the rollout")
    q = obs.q_obs[start_index : start_index + ticks + 1]
    t0 = obs.sample_times[start_index]
    ratio = obs.period / dt
    k = int(round(ratio))
    if abs(ratio - k) < 1e-9 and k >= 1:
        frac = np.arange(k) / k
        if ticks == 0:
            dense = q[:1].copy()
        else:
            lo, hi = q[:-1], q[1:]
            dense = (lo[:, None, :] * (1 - frac)[None, :, None] + hi[:, None, :] * frac[None, :, None]).reshape(-1, obs.J)
            dense = np.vstack([dense, q[-1:]])
        times = t0 + np.arange(len(dense)) * dt
        return times, dense
    t_end = obs.sample_times[start_index + ticks]
    n = int(math.floor((t_end - t0) / dt + 1e-9))
    times = t0 + np.arange(n + 1) * dt
    ts = obs.sample_times[start_index : start_index + ticks + 1]
    dense = np.column_stack([np.interp(times, ts, q[:, j]) for j in range(obs.J)])
    return times, dense


# ---------------------------------------------------------------------------
# residual


@dataclass
class Residual:
    """Scalar residual and the stacked least-squares terms (data then
    regulariser).  A diverged simulation gives ``value = inf`` and
    ``terms = None`` with the reason in ``diagnostic``."""

    value: float
    terms: np.ndarray | None
    diagnostic: str | None = None

    def __iter__(self):
        return iter((self.value, self.terms))


class _WindowData:
    def __init__(self, model: RobotModel, window: SysIdWindow, obs: ObservedRollout, spec: StepSpec):
        if obs.J != model.actuated_joint_count:
            raise ValueError("rollout joint count does not match the model")
        if abs(spec.control_period - obs.period) > 1e-12:
            raise ValueError("integrator control period must match the observation rate")
        window.check(obs)
        n = window.ticks(obs.period)
        s = window.start_index
        self.q0 = [float(v) for v in obs.q_obs[s]]
        self.qd0 = [float(v) for v in obs.qd_obs[s]]
        self.controls = [[float(v) for v in row] for row in obs.u_cmd[s : s + n]]
        _, self.targets = upsample_linear(obs, spec.dt, s, n)
        self.spec = spec
        self.model = model


def _data_terms(data: _WindowData, p: SimParams):
    _, _, dense = simulate(data.model, p, data.q0, data.qd0, data.controls, data.spec, dense=True)
    out = []
    for qk, tk in zip(dense, data.targets):
        out.extend(qk[j] - tk[j] for j in range(len(tk)))
    return out


def _reg_terms(reg: RegularizerSpec, pflat):
    w = np.sqrt(reg.alpha)
    return [w[i] * (pflat[i] - reg.anchor[i]) for i in range(len(w))]


def residual(model: RobotModel, p: SimParams, window: SysIdWindow, obs: ObservedRollout,
             reg: RegularizerSpec, spec: StepSpec = StepSpec()) -> Residual:
    """Evaluate the identification residual at ``p``."""
    data = _WindowData(model, window, obs, spec)
    pflat = flatten(p)
    if len(reg.alpha) != len(pflat):
        raise ValueError("regulariser length does not match the parameter vector")
    if not np.all(np.isfinite(pflat)):
        raise ValueError("parameters must be finite")
    try:
        with np.errstate(over="raise", invalid="raise"):
            terms = np.array([float(v) for v in _data_terms(data, p) + _reg_terms(reg, pflat)])
    except _BAD_SIM as exc:
        log.debug("residual: simulation failed: %s", exc)
        return Residual(math.inf, None, f"{type(exc).__name__}: {exc}")
    return Residual(float(terms @ terms), terms)


# ---------------------------------------------------------------------------
# objectives


class Objective:
    """Least-squares objective ``f(x) = |r(x)|^2`` in solver coordinates.

    Subclasses supply :meth:`residuals` and :meth:`jacobian`; ``None`` marks
    an infeasible point.
    """

    n: int

    def residuals(self, x):
        raise NotImplementedError

    def jacobian(self, x):
        raise NotImplementedError

    def value(self, x) -> float:
        r = self.residuals(x)
        return math.inf if r is None else float(r @ r)

    def value_and_grad(self, x):
        r, Jm = self.jacobian(x)
        if r is None:
            return math.inf, None
        return float(r @ r), 2.0 * Jm.T @ r


class FunctionObjective(Objective):
    def __init__(self, n, residual_fn, jacobian_fn):
        self.n = n
        self._r, self._j = residual_fn, jacobian_fn

    def residuals(self, x):
        return np.asarray(self._r(np.asarray(x, float)), dtype=float)

    def jacobian(self, x):
        x = np.asarray(x, float)
        return self.residuals(x), np.atleast_2d(np.asarray(self._j(x), dtype=float))


class QuadraticObjective(Objective):
    """``f(x) = (x - x*)^T H (x - x*)`` for a symmetric positive definite ``H``."""

    def __init__(self, H, x_star):
        self.H = np.asarray(H, float)
        self.x_star = np.asarray(x_star, float)
        self.n = len(self.x_star)
        self.L = np.linalg.cholesky(self.H).T

    def residuals(self, x):
        return self.L @ (np.asarray(x, float) - self.x_star)

    def jacobian(self, x):
        return self.residuals(x), self.L.copy()


class RosenbrockObjective(Objective):
    """``100 (x2 - x1^2)^2 + (1 - x1)^2`` as two residuals."""

    n = 2

    def residuals(self, x):
        return np.array([10.0 * (x[1] - x[0] ** 2), 1.0 - x[0]])

    def jacobian(self, x):
        return self.residuals(x), np.array([[-20.0 * x[0], 10.0], [-1.0, 0.0]])


class SysIdObjective(Objective):
    """The identification residual in normalised coordinates around
    ``reg.anchor``."""

    def __init__(self, model, window, obs, reg, spec: StepSpec = StepSpec(), max_tape_nodes: int | None = None):
        self.model = model
        self.data = _WindowData(model, window, obs, spec)
        self.reg = reg
        self.center = reg.anchor.copy()
        self.scale = param_scale(self.center)
        self.n = len(self.center)
        if self.n != model.n_params:
            raise ValueError("regulariser length does not match the model")
        self.max_tape_nodes = max_tape_nodes
        self.evaluations = 0

    def to_params(self, x) -> SimParams:
        return unflatten(self.model, self.center + self.scale * np.asarray(x, float))

    def from_params(self, p: SimParams) -> np.ndarray:
        return (flatten(p) - self.center) / self.scale

    def _terms(self, pvals):
        return _data_terms(self.data, unflatten(self.model, pvals)) + _reg_terms(self.reg, pvals)

    def residuals(self, x):
        self.evaluations += 1
        pflat = self.center + self.scale * np.asarray(x, float)
        try:
            with np.errstate(over="raise", invalid="raise"):
                return np.array([float(v) for v in self._terms(list(pflat))])
        except _BAD_SIM:
            return None

    def jacobian(self, x):
        """Forward mode: one dual pass carrying all parameter directions."""
        self.evaluations += 1
        pflat = self.center + self.scale * np.asarray(x, float)
        eye = np.eye(self.n) * self.scale
        duals = [DualScalar(float(v), eye[i]) for i, v in enumerate(pflat)]
        try:
            with np.errstate(over="raise", invalid="raise"):
                terms = self._terms(duals)
        except _BAD_SIM:
            return None, None
        r = np.empty(len(terms))
        Jm = np.zeros((len(terms), self.n))
        for i, t in enumerate(terms):
            if isinstance(t, DualScalar):
                r[i] = t.value
                Jm[i] = t.deriv
            else:
                r[i] = t
        return r, Jm

    def value_and_grad(self, x):
        """Reverse mode: one taped rollout and a single backward sweep."""
        self.evaluations += 1
        pflat = self.center + self.scale * np.asarray(x, float)
        tape = Tape(self.max_tape_nodes) if self.max_tape_nodes else Tape()
        leaves = [record(tape, v) for v in pflat]
        try:
            with np.errstate(over="raise", invalid="raise"):
                terms = self._terms(leaves)
                total = 0.0
                for t in terms:
                    total = total + t * t
        except _BAD_SIM:
            return math.inf, None
        f = float(total.value if isinstance(total, TapeVar) else total)
        if not math.isfinite(f):
            return math.inf, None
        g = np.array(grad(tape, total, leaves)) * self.scale
        return f, g


def estimate_tape_bytes(model: RobotModel, window: SysIdWindow, spec: StepSpec = StepSpec()) -> int:
    """Tape memory for one gradient over ``window``, measured by taping a
    single substep and scaling."""
    from .dynamics import _body_inertias, _substep
    from .model import default_params

    J = model.actuated_joint_count
    tape = Tape()
    pv = unflatten(model, [record(tape, v) for v in flatten(default_params(model))])
    tree = model.tree
    inertia = _body_inertias(tree, pv)
    q = [record(tape, 0.1) for _ in range(J)]
    qd = [record(tape, 0.1) for _ in range(J)]
    mark = tape.mark()
    _substep(tree, inertia, pv, q, qd, [0.0] * J, spec.dt)
    per_substep = tape.mark() - mark
    n_sub = window.ticks() * spec.substeps
    return int((per_substep * n_sub + mark) * BYTES_PER_TAPE_NODE)


# ---------------------------------------------------------------------------
# solvers


@dataclass(frozen=True)
class Budget:
    max_iter: int = 100
    wall_clock: float | None = None  # seconds

    def __post_init__(self):
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")


@dataclass
class OptimReport:
    status: str
    iterations: int
    f_initial: float
    f_final: float
    trace: list = field(default_factory=list)  # objective after every accepted step
    evaluations: int = 0
    wall_time: float = 0.0

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def flagged(self) -> bool:
        return self.status in ("line_search_failed", "lambda_exhausted")


def _cubic_min(a_lo, f_lo, g_lo, a_hi, f_hi, g_hi):
    d1 = g_lo + g_hi - 3.0 * (f_lo - f_hi) / (a_lo - a_hi)
    disc = d1 * d1 - g_lo * g_hi
    if disc < 0 or not math.isfinite(disc):
        return None
    d2 = math.copysign(math.sqrt(disc), a_hi - a_lo)
    den = g_hi - g_lo + 2.0 * d2
    if den == 0:
        return None
    return a_hi - (a_hi - a_lo) * (g_hi + d2 - d1) / den


def _strong_wolfe(obj, x, f0, g0, d, a0, c1=1e-4, c2=0.9, max_eval=30):
    """Line search returning ``(alpha, f, g)`` satisfying the strong Wolfe
    conditions, or the best sufficient-decrease point found, or ``None``."""
    dphi0 = float(g0 @ d)
    evals = [0]

    def phi(a):
        evals[0] += 1
        f, g = obj.value_and_grad(x + a * d)
        if not math.isfinite(f):
            return math.inf, None, math.nan
        return f, g, float(g @ d)

    best = None

    def note(a, f, g):
        nonlocal best
        if math.isfinite(f) and f <= f0 + c1 * a * dphi0 and f < f0 and (best is None or f < best[1]):
            best = (a, f, g)

    def zoom(lo, hi):
        while evals[0] < max_eval:
            a_lo, f_lo, dp_lo = lo
            a_hi, f_hi, dp_hi = hi
            a = None
            if math.isfinite(f_hi) and math.isfinite(dp_hi):
                a = _cubic_min(a_lo, f_lo, dp_lo, a_hi, f_hi, dp_hi)
            span = a_hi - a_lo
            lo_b, hi_b = sorted((a_lo + 0.1 * span, a_hi - 0.1 * span))
            if a is None or not (lo_b <= a <= hi_b):
                a = a_lo + 0.5 * span
            f, g, dp = phi(a)
            note(a, f, g)
            if not math.isfinite(f) or f > f0 + c1 * a * dphi0 or f >= f_lo:
                hi = (a, f, dp)
            else:
                if abs(dp) <= -c2 * dphi0:
                    return a, f, g
                if dp * (a_hi - a_lo) >= 0:
                    hi = lo
                lo = (a, f, dp)
            if abs(hi[0] - lo[0]) < 1e-16 * max(1.0, abs(lo[0])):
                break
        return None

    prev = (0.0, f0, dphi0)
    a = a0
    first = True
    while evals[0] < max_eval:
        f, g, dp = phi(a)
        note(a, f, g)
        if not math.isfinite(f):
            # overshot into an unstable region: pull back
            a = prev[0] + 0.5 * (a - prev[0])
            continue
        if f > f0 + c1 * a * dphi0 or (not first and f >= prev[1]):
            res = zoom(prev, (a, f, dp))
            break
        if abs(dp) <= -c2 * dphi0:
            res = (a, f, g)
            break
        if dp >= 0:
            res = zoom((a, f, dp), prev)
            break
        prev = (a, f, dp)
        a *= 2.0
        first = False
    else:
        res = None
    if res is None:
        res = best
    return res, evals[0]


def lbfgs(obj: Objective, x0, budget: Budget = Budget(), memory: int = 10, gtol: float = 1e-12,
          ftol: float = 1e-12, f_target: float = 0.0, c1: float = 1e-4, c2: float = 0.9):
    """Limited-memory BFGS with a strong-Wolfe line search.

    Stops on a tiny gradient, a relative decrease below ``ftol``, an
    objective at or below ``f_target``, the iteration or wall-clock budget, or
    a failed line search (best point so far is returned and flagged).
    """
    t0 = time.perf_counter()
    x = np.array(x0, dtype=float)
    f, g = obj.value_and_grad(x)
    if not math.isfinite(f):
        raise ImmediateDivergence("objective is not finite at the starting point")
    f_init = f
    trace = [f]
    S, Y = [], []
    status = "max_iter"
    evals = 1
    it = 0
    for it in range(1, budget.max_iter + 1):
        if np.max(np.abs(g)) <= gtol or f <= f_target:
            status = "converged"
            it -= 1
            break
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(S), reversed(Y)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            alphas.append((rho, a))
            q -= a * y
        if S:
            q *= (S[-1] @ Y[-1]) / (Y[-1] @ Y[-1])
        else:
            q /= max(1.0, np.max(np.abs(g)))
        for (s, y), (rho, a) in zip(zip(S, Y), reversed(alphas)):
            q += s * (a - rho * (y @ q))
        d = -q
        if not g @ d < 0:
            S.clear()
            Y.clear()
            d = -g / max(1.0, np.max(np.abs(g)))
        res, n_ev = _strong_wolfe(obj, x, f, g, d, 1.0, c1, c2)
        evals += n_ev
        if res is None:
            status = "line_search_failed"
            it -= 1
            break
        a, f_new, g_new = res
        s, y = a * d, g_new - g
        if s @ y > 1e-16 * (s @ s) ** 0.5 * (y @ y) ** 0.5 and s @ y > 0:
            S.append(s)
            Y.append(y)
            if len(S) > memory:
                S.pop(0)
                Y.pop(0)
        decrease = f - f_new
        x, f, g = x + s, f_new, g_new
        trace.append(f)
        if decrease <= ftol * abs(f + decrease) or f <= f_target:
            status = "converged"
            break
        if budget.wall_clock is not None and time.perf_counter() - t0 > budget.wall_clock:
            status = "time_budget"
            break
    else:
        it = budget.max_iter
    rep = OptimReport(status, it, f_init, f, trace, evals, time.perf_counter() - t0)
    return x, rep


def _bounded_step(A, g, D, lam, free, x, lo, hi):
    """Damped Gauss-Newton step on the free variables.  A variable whose
    step would cross a bound is fixed on it and the rest are re-solved."""
    n = len(x)
    free = free.copy()
    step = np.zeros(n)
    M = A + lam * np.diag(D)
    for _ in range(n):
        fixed = ~free
        rhs = -(g[free] + M[np.ix_(free, fixed)] @ step[fixed])
        step[free] = np.linalg.solve(M[np.ix_(free, free)], rhs)
        if not np.all(np.isfinite(step)):
            raise np.linalg.LinAlgError("non-finite step")
        xt = x + step
        hit = free & ((xt < lo) | (xt > hi))
        if not hit.any():
            break
        step[hit] = np.clip(xt[hit], lo[hit], hi[hit]) - x[hit]
        free &= ~hit
        if not free.any():
            break
    return step


def levenberg_marquardt(obj: Objective, x0, lower=None, upper=None, budget: Budget = Budget(),
                        lam0: float = 1e-3, ftol: float = 1e-14, gtol: float = 1e-14, xtol: float = 1e-15,
                        f_target: float = 0.0):
    """Bounded Levenberg-Marquardt with projected trial steps.

    Variables sitting on a bound whose gradient points outwards are held
    fixed; a trial step that crosses a bound fixes that variable on it and
    re-solves for the others.

    Damping uses the Marquardt diagonal (clamped to ``[1e-6, 1e32]``);
    ``lambda`` is multiplied by 10 after a rejected step and divided by 10
    after an accepted one.  If ``lambda`` exceeds 1e12 the best point so far
    is returned with status ``lambda_exhausted``.
    """
    t0 = time.perf_counter()
    x = np.array(x0, dtype=float)
    n = len(x)
    lo = np.full(n, -np.inf) if lower is None else np.asarray(lower, float)
    hi = np.full(n, np.inf) if upper is None else np.asarray(upper, float)
    if np.any(lo > hi):
        raise ValueError("lower bounds exceed upper bounds")
    if np.any(x < lo) or np.any(x > hi):
        raise OutOfBounds("starting point lies outside the bounds")
    r, Jm = obj.jacobian(x)
    if r is None:
        raise ImmediateDivergence("residual is not finite at the starting point")
    f = float(r @ r)
    f_init = f
    trace = [f]
    lam = lam0
    status = "max_iter"
    evals = 1
    it = 0
    for it in range(1, budget.max_iter + 1):
        A = Jm.T @ Jm
        gvec = Jm.T @ r
        # variables pinned at a bound with the gradient pushing outwards
        pinned = ((x <= lo) & (gvec > 0)) | ((x >= hi) & (gvec < 0)) | (lo == hi)
        free = ~pinned
        pg = np.where(pinned, 0.0, gvec)
        if np.max(np.abs(pg), initial=0.0) <= gtol * max(f, 1e-300) or f <= f_target:
            status = "converged"
            it -= 1
            break
        D = np.clip(np.diag(A), 1e-6, 1e32)
        accepted = False
        while True:
            try:
                step = _bounded_step(A, gvec, D, lam, free, x, lo, hi)
            except np.linalg.LinAlgError:
                lam *= 10.0
                if lam > 1e12:
                    status = "lambda_exhausted"
                    break
                continue
            xt = np.clip(x + step, lo, hi)
            if np.linalg.norm(xt - x) <= xtol * (np.linalg.norm(x) + xtol):
                status = "converged"
                break
            rt = obj.residuals(xt)
            evals += 1
            ft = math.inf if rt is None else float(rt @ rt)
            if ft < f:
                accepted = True
                lam = max(lam / 10.0, 1e-15)
                break
            lam *= 10.0
            if lam > 1e12:
                status = "lambda_exhausted"
                break
        if not accepted:
            it -= 1
            break
        decrease = f - ft
        x, f = xt, ft
        trace.append(f)
        if decrease <= ftol * max(f_init, 1e-300) or f <= f_target:
            status = "converged"
            break
        if budget.wall_clock is not None and time.perf_counter() - t0 > budget.wall_clock:
            status = "time_budget"
            break
        r, Jm = obj.jacobian(x)
        evals += 1
        if r is None:  # cannot happen for an accepted point, kept as a guard
            status = "lambda_exhausted"
            break
    else:
        it = budget.max_iter
    rep = OptimReport(status, it, f_init, f, trace, evals, time.perf_counter() - t0)
    return x, rep


def default_bounds(model: RobotModel, p_init: SimParams):
    """±20 % around gravity, masses and inertias; damping in [0, 18];
    force gains in [-1.5, 1.5]."""
    x = flatten(p_init)
    lo, hi = np.empty_like(x), np.empty_like(x)
    groups = param_groups(model)
    for name in ("gravity", "masses", "inertias"):
        s = groups[name]
        a, b = 0.8 * x[s], 1.2 * x[s]
        lo[s], hi[s] = np.minimum(a, b), np.maximum(a, b)
    lo[groups["damping"]], hi[groups["damping"]] = 0.0, 18.0
    lo[groups["force_pd"]], hi[groups["force_pd"]] = -1.5, 1.5
    return lo, hi


def optimize_unbounded(model, p0: SimParams, window: SysIdWindow, obs: ObservedRollout, reg: RegularizerSpec,
                       budget: Budget = Budget(), spec: StepSpec = StepSpec(), **kw):
    """L-BFGS on the scalar residual with taped reverse-mode gradients."""
    obj = SysIdObjective(model, window, obs, reg, spec)
    x, rep = lbfgs(obj, obj.from_params(p0), budget, **kw)
    return obj.to_params(x), rep


def optimize_bounded(model, p0: SimParams, bounds, window: SysIdWindow, obs: ObservedRollout,
                     reg: RegularizerSpec, budget: Budget = Budget(), spec: StepSpec = StepSpec(), **kw):
    """Levenberg-Marquardt with ``bounds = (lower, upper)`` flat vectors."""
    obj = SysIdObjective(model, window, obs, reg, spec)
    lo, hi = (np.asarray(b, float) for b in bounds)
    x0 = flatten(p0)
    if np.any(x0 < lo - 1e-12) or np.any(x0 > hi + 1e-12):
        raise OutOfBounds("initial parameters lie outside the bounds")
    x, rep = levenberg_marquardt(obj, obj.from_params(p0), (lo - obj.center) / obj.scale,
                                 (hi - obj.center) / obj.scale, budget, **kw)
    return obj.to_params(x), rep


# ---------------------------------------------------------------------------
# basin hopping


@dataclass
class BasinHopReport:
    best_f: float
    best_worker: int
    traces: list  # per worker: list of dicts, one per local solve
    wall_time: float
    overrun: float  # seconds past the wall-clock limit (0 if none)
    statuses: list

    @property
    def per_worker_best(self) -> list[float]:
        return [min((e["f"] for e in tr), default=math.inf) for tr in self.traces]


def _local_solve(obj, x, solver, lo, hi, budget):
    if solver == "unbounded":
        return lbfgs(obj, x, budget)
    return levenberg_marquardt(obj, x, lo, hi, budget)


def _hop_worker(args):
    obj, x_center, solver, lo, hi, rlo, rhi, hop_scale, hops, budget, deadline, seed, w = args
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(w)]))
    if w == 0:
        start = np.array(x_center, float)
    else:
        start = rlo + (rhi - rlo) * rng.random(len(x_center))
    trace = []
    best_x, best_f = None, math.inf
    for h in range(hops + 1):
        if h > 0:
            if time.time() >= deadline:
                break
            if best_x is None:
                start = rlo + (rhi - rlo) * rng.random(len(x_center))
            else:
                start = best_x + hop_scale * rng.standard_normal(len(best_x))
            if solver == "bounded":
                start = np.clip(start, lo, hi)
        try:
            x, rep = _local_solve(obj, start, solver, lo, hi, budget)
            f, status = rep.f_final, rep.status
        except (ImmediateDivergence, OutOfBounds) as exc:
            x, f, status = start, math.inf, type(exc).__name__
        accepted = f < best_f
        if accepted:
            best_x, best_f = x, f
        trace.append({"hop": h, "f": f, "accepted": bool(accepted), "best": best_f, "status": status,
                      "time": time.time()})
    return best_x, best_f, trace


def basin_hop_objective(obj: Objective, x_center, solver: str = "unbounded", workers: int = 1,
                        wall_clock: float = math.inf, hop_scale=0.1, seed: int = 0, ranges=None,
                        bounds=None, hops: int = 10, budget: Budget = Budget()):
    """Parallel basin hopping on any :class:`Objective` (solver coordinates).

    Worker 0 starts at ``x_center``; the others start uniformly inside
    ``ranges``.  Each worker alternates a local solve with a Gaussian hop from
    its best point, keeping the hop only if it improves.  The wall clock (in
    seconds) is checked between local solves, so the run may overrun.
    Returns ``(x_best, BasinHopReport)``.
    """
    if workers < 1:
        raise ValueError("workers must be at least 1")
    if solver not in ("unbounded", "bounded"):
        raise ValueError("solver must be 'unbounded' or 'bounded'")
    n = len(x_center)
    x_center = np.asarray(x_center, float)
    lo = np.full(n, -np.inf) if bounds is None else np.asarray(bounds[0], float)
    hi = np.full(n, np.inf) if bounds is None else np.asarray(bounds[1], float)
    if ranges is None:
        if bounds is None or not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            ranges = (x_center - np.abs(hop_scale), x_center + np.abs(hop_scale))
        else:
            ranges = (lo, hi)
    rlo, rhi = (np.broadcast_to(np.asarray(r, float), (n,)) for r in ranges)
    hop_scale = np.broadcast_to(np.asarray(hop_scale, float), (n,))
    t0 = time.time()
    deadline = t0 + wall_clock
    jobs = [(obj, x_center, solver, lo, hi, rlo, rhi, hop_scale, hops, budget, deadline, seed, w) for w in range(workers)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            outs = list(pool.map(_hop_worker, jobs))
    else:
        outs = [_hop_worker(jobs[0])]
    t1 = time.time()
    best_w = min(range(workers), key=lambda w: (outs[w][1], w))
    traces = []
    for _, _, tr in outs:
        for e in tr:
            e["time"] = e["time"] - t0
        traces.append(tr)
    statuses = [[e["status"] for e in tr] for tr in traces]
    rep = BasinHopReport(outs[best_w][1], best_w, traces, t1 - t0, max(0.0, t1 - deadline), statuses)
    x_best = outs[best_w][0]
    if x_best is None:
        raise ImmediateDivergence("no worker found a finite residual")
    return x_best, rep


def _available_ram() -> int:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return 4 << 30


def basin_hop(model: RobotModel, p_center: SimParams, window: SysIdWindow, obs: ObservedRollout,
              reg: RegularizerSpec, solver: str = "unbounded", workers: int = 1, wall_clock: float = 600.0,
              hop_scale=None, seed: int = 0, ranges=None, bounds=None, hops: int = 10,
              budget: Budget = Budget(), spec: StepSpec = StepSpec(), ram_budget: int | None = None):
    """Basin hopping on the identification residual.

    ``hop_scale``, ``ranges`` and ``bounds`` are in parameter units (flat
    vectors).  ``hop_scale`` defaults to 5 % of each parameter's scale;
    ``ranges`` defaults to ``bounds`` or to ``default_bounds``.  Worker count
    is refused if the estimated tape memory exceeds ``ram_budget`` bytes
    (default: half the currently available RAM).
    """
    obj = SysIdObjective(model, window, obs, reg, spec)
    if solver == "unbounded":
        need = estimate_tape_bytes(model, window, spec) * workers
        limit = ram_budget if ram_budget is not None else _available_ram() // 2
        if need > limit:
            raise ResourceLimit(
                f"{workers} workers need about {need / 2**20:.0f} MiB of tape, budget is {limit / 2**20:.0f} MiB"
            )
    c, s = obj.center, obj.scale
    if bounds is not None:
        bounds = ((np.asarray(bounds[0], float) - c) / s, (np.asarray(bounds[1], float) - c) / s)
    if ranges is None:
        ranges = default_bounds(model, p_center) if bounds is None else None
    if ranges is not None:
        ranges = ((np.asarray(ranges[0], float) - c) / s, (np.asarray(ranges[1], float) - c) / s)
    hs = 0.05 if hop_scale is None else np.asarray(hop_scale, float) / s
    x, rep = basin_hop_objective(obj, obj.from_params(p_center), solver, workers, wall_clock, hs, seed,
                                 ranges, bounds, hops, budget)
    return obj.to_params(x), rep
