"""Finite-difference checks of the analytic derivatives.

Relative error per entry is ``|a - fd| / max(|a|, |fd|, floor)`` where the
floor is ``1e-6`` times the largest analytic entry of the same suite, so
entries that are exactly zero are compared on the suite's own scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DualScalar
from .dynamics import JointState, StepSpec, forward_dynamics
from .model import RobotModel, SimParams, flatten, param_groups, unflatten
from .sysid import ObservedRollout, RegularizerSpec, SysIdObjective, SysIdWindow, param_scale

__all__ = ["GradCheck", "relative_errors", "residual_gradient_check", "dynamics_gradient_check", "random_window"]


@dataclass
class GradCheck:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    groups: dict  # name -> max relative error

    @property
    def max_error(self) -> float:
        return float(np.max(self.rel_error)) if len(self.rel_error) else 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_error <= tol


def relative_errors(a, fd, floor_frac: float = 1e-6) -> np.ndarray:
    a, fd = np.asarray(a, float), np.asarray(fd, float)
    floor = floor_frac * max(np.max(np.abs(a), initial=0.0), 1e-300)
    return np.abs(a - fd) / np.maximum(np.maximum(np.abs(a), np.abs(fd)), floor)


def _group_max(model, err):
    return {name: float(np.max(err[s], initial=0.0)) for name, s in param_groups(model).items()}


def residual_gradient_check(model: RobotModel, p: SimParams, window: SysIdWindow, obs: ObservedRollout,
                            reg: RegularizerSpec, spec: StepSpec = StepSpec(), h_rel: float = 1e-5,
                            grad_fn=None) -> GradCheck:
    """Taped gradient of the residual against central differences with step
    ``h_rel * |p_i|`` (``h_rel`` where ``p_i = 0``).  ``grad_fn(objective, x)`` can replace the
    analytic gradient (used to exercise the check itself)."""
    if window.duration <= 0:
        raise ValueError("a zero-duration window has no data to check")
    obj = SysIdObjective(model, window, obs, reg, spec)
    x = obj.from_params(p)
    f, g = obj.value_and_grad(x) if grad_fn is None else (None, grad_fn(obj, x))
    if g is None:
        raise ValueError("the residual is not finite at these parameters")
    pflat = flatten(p)
    scale = param_scale(pflat)
    g_p = np.asarray(g) / obj.scale  # back to parameter units
    fd = np.empty(len(pflat))
    for i in range(len(pflat)):
        h = h_rel * scale[i]
        up, dn = pflat.copy(), pflat.copy()
        up[i] += h
        dn[i] -= h
        fu = obj.value(obj.from_params(unflatten(model, up)))
        fdn = obj.value(obj.from_params(unflatten(model, dn)))
        fd[i] = (fu - fdn) / (2 * h)
    err = relative_errors(g_p, fd)
    return GradCheck(g_p, fd, err, _group_max(model, err))


def dynamics_gradient_check(model: RobotModel, p: SimParams, state: JointState, tau, h_rel: float = 1e-6) -> GradCheck:
    """Forward-mode derivatives of the joint accelerations w.r.t. every
    parameter against central differences.  Errors are grouped by parameter
    group (max over the J accelerations)."""
    pflat = flatten(p)
    scale = param_scale(pflat)
    n = len(pflat)
    eye = np.eye(n)
    duals = unflatten(model, [DualScalar(float(v), eye[i]) for i, v in enumerate(pflat)])
    qdd = forward_dynamics(model, duals, (list(state.q), list(state.qd)), list(tau))
    A = np.array([np.broadcast_to(np.asarray(a.deriv if isinstance(a, DualScalar) else 0.0), (n,)) for a in qdd])
    fd = np.empty_like(A)
    for i in range(n):
        h = h_rel * scale[i]
        up, dn = pflat.copy(), pflat.copy()
        up[i] += h
        dn[i] -= h
        a_up = forward_dynamics(model, unflatten(model, up), state, tau)
        a_dn = forward_dynamics(model, unflatten(model, dn), state, tau)
        fd[:, i] = (a_up - a_dn) / (2 * h)
    err = relative_errors(A, fd)
    col = err.max(axis=0)
    return GradCheck(A, fd, col, _group_max(model, col))


def random_window(model: RobotModel, hidden: SimParams, seed: int, spec: StepSpec = StepSpec(),
                  duration: float = 0.2, start=None, torque_scale: float = 2.0):
    """A noiseless rollout of random piecewise-constant torques on ``hidden``
    parameters, returned as an observation covering ``duration``."""
    from .dynamics import CONTROL_RATE, rollout

    rng = np.random.default_rng(seed)
    J = model.actuated_joint_count
    n = int(round(duration * CONTROL_RATE))
    q0 = np.zeros(J) if start is None else np.asarray(start, float)
    q0 = q0 + rng.uniform(-0.2, 0.2, J)
    from .trajopt import gravity_torque

    hold = gravity_torque(model, hidden, q0)
    U = hold + torque_scale * rng.uniform(-1, 1, (n, J))
    tr = rollout(model, hidden, JointState(q0, np.zeros(J)), U, spec)
    return ObservedRollout.from_trajectory(tr), SysIdWindow(0, n / CONTROL_RATE)
