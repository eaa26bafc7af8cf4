import math

import numpy as np
import pytest

from gradgap.dynamics import (
    Diverged,
    JointState,
    StepSpec,
    forward_dynamics,
    forward_kinematics,
    kinetic_energy,
    potential_energy,
    rollout,
    step,
)
from gradgap.model import SimParams, default_params

G0 = 9.81
# two-link constants as written in TWO_LINK_URDF
M1, A1, I1, L1 = 1.3, 0.2, 0.031, 0.5
M2, A2, I2 = 0.7, 0.15, 0.012


def lagrangian_two_link(q, qd, tau, damping=(0.0, 0.0), pd=(1.0, 1.0)):
    """Closed-form planar two-link dynamics, joints about y, gravity -z."""
    c2, s2 = math.cos(q[1]), math.sin(q[1])
    c1, c12 = math.cos(q[0]), math.cos(q[0] + q[1])
    M = np.array([
        [I1 + I2 + M1 * A1**2 + M2 * (L1**2 + A2**2 + 2 * L1 * A2 * c2), I2 + M2 * (A2**2 + L1 * A2 * c2)],
        [I2 + M2 * (A2**2 + L1 * A2 * c2), I2 + M2 * A2**2],
    ])
    h = M2 * L1 * A2 * s2
    C = np.array([-h * (2 * qd[0] * qd[1] + qd[1] ** 2), h * qd[0] ** 2])
    G = np.array([G0 * (-M1 * A1 * c1 - M2 * (L1 * c1 + A2 * c12)), G0 * (-M2 * A2 * c12)])
    applied = np.asarray(pd) * tau - np.asarray(damping) * qd
    return np.linalg.solve(M, applied - C - G)


def test_aba_matches_lagrangian_oracle_on_a_few_states(two_link, rng):
    p = default_params(two_link)
    for _ in range(50):
        q, qd, tau = rng.uniform(-math.pi, math.pi, 2), rng.uniform(-3, 3, 2), rng.uniform(-5, 5, 2)
        a = forward_dynamics(two_link, p, JointState(q, qd), tau)
        assert np.allclose(a, lagrangian_two_link(q, qd, tau), rtol=0, atol=1e-8)


def test_damping_and_force_gain_enter_as_applied_torque(two_link, rng):
    p0 = default_params(two_link)
    p = SimParams(p0.gravity, p0.masses, (0.4, 1.7), (0.8, 1.2), p0.inertias)
    q, qd, tau = rng.uniform(-2, 2, 2), rng.uniform(-2, 2, 2), rng.uniform(-4, 4, 2)
    a = forward_dynamics(two_link, p, JointState(q, qd), tau)
    assert np.allclose(a, lagrangian_two_link(q, qd, tau, (0.4, 1.7), (0.8, 1.2)), atol=1e-10)


def test_batched_arrays_match_scalar_evaluation(two_link, rng):
    p = default_params(two_link)
    Q, QD, T = rng.uniform(-2, 2, (3, 2, 16))
    batch = forward_dynamics(two_link, p, (list(Q), list(QD)), list(T))
    for k in range(16):
        one = forward_dynamics(two_link, p, JointState(Q[:, k], QD[:, k]), T[:, k])
        assert np.allclose([b[k] for b in batch], one, atol=1e-13)


# independent homogeneous-transform forward kinematics

def _rpy(r, p, y):
    cr, sr, cp, sp, cy, sy = math.cos(r), math.sin(r), math.cos(p), math.sin(p), math.cos(y), math.sin(y)
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def _axis_angle(axis, th):
    k = np.asarray(axis, float)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(th) * K + (1 - math.cos(th)) * K @ K


def fk_chain(model, q):
    T = np.eye(4)
    qi = iter(q)
    for j in model.joints:
        A = np.eye(4)
        A[:3, :3] = _rpy(*j.origin_rpy)
        A[:3, 3] = j.origin_xyz
        T = T @ A
        if j.actuated:
            B = np.eye(4)
            B[:3, :3] = _axis_angle(j.axis, next(qi))
            T = T @ B
    return T[:3, 3]


def test_forward_kinematics_matches_transform_chain(desk, rng):
    for _ in range(100):
        q = rng.uniform(-math.pi, math.pi, 6)
        assert np.allclose(forward_kinematics(desk, q), fk_chain(desk, q), atol=1e-12)


def test_candle_pose_points_straight_up(desk):
    p = forward_kinematics(desk, [0, math.pi, math.pi, 0, 0, 0])
    assert abs(p[0]) < 1e-12 and abs(p[1]) < 1e-12
    heights = [fk_chain(desk, q)[2] for q in np.random.default_rng(0).uniform(-3.2, 3.2, (500, 6))]
    assert p[2] >= max(heights) - 1e-12


def test_power_balance(desk, rng):
    """d(T + V)/dt equals the power of the applied torques."""
    p0 = default_params(desk)
    p = SimParams(p0.gravity, p0.masses, tuple(rng.uniform(0, 2, 6)), tuple(rng.uniform(0.7, 1.3, 6)), p0.inertias)
    for _ in range(10):
        q, qd, tau = rng.uniform(-2, 2, 6), rng.uniform(-1, 1, 6), rng.uniform(-3, 3, 6)
        qdd = forward_dynamics(desk, p, JointState(q, qd), tau)

        def energy(h):
            s = JointState(q + h * qd, qd + h * qdd)
            return kinetic_energy(desk, p, s) + potential_energy(desk, p, s.q)

        h = 1e-6
        dE = (energy(h) - energy(-h)) / (2 * h)
        power = qd @ (np.array(p.force_pd) * tau - np.array(p.damping) * qd)
        assert dE == pytest.approx(power, rel=1e-5, abs=1e-7)


def test_kinetic_energy_is_half_qd_m_qd(two_link, rng):
    p = default_params(two_link)
    q, qd = rng.uniform(-2, 2, 2), rng.uniform(-2, 2, 2)
    c2 = math.cos(q[1])
    M = np.array([
        [I1 + I2 + M1 * A1**2 + M2 * (L1**2 + A2**2 + 2 * L1 * A2 * c2), I2 + M2 * (A2**2 + L1 * A2 * c2)],
        [I2 + M2 * (A2**2 + L1 * A2 * c2), I2 + M2 * A2**2],
    ])
    assert kinetic_energy(two_link, p, JointState(q, qd)) == pytest.approx(0.5 * qd @ M @ qd, rel=1e-12)


def test_step_is_semi_implicit_euler(pendulum):
    p = default_params(pendulum)
    spec = StepSpec(1e-3, 40)
    q, qd = np.array([0.3]), np.array([-0.2])
    u = np.array([0.5])
    s = step(pendulum, p, JointState(q, qd), u, spec)
    for _ in range(40):
        qd = qd + forward_dynamics(pendulum, p, JointState(q, qd), u) * 1e-3
        q = q + qd * 1e-3
    assert np.allclose(s.q, q, atol=1e-15) and np.allclose(s.qd, qd, atol=1e-15)


def test_rollout_shapes_and_times(desk):
    p = default_params(desk)
    tr = rollout(desk, p, JointState.at_rest([0, 3.14, 3.14, 0, 0, 0]), np.zeros((5, 6)), StepSpec())
    assert tr.q.shape == (6, 6) and tr.u.shape == (5, 6)
    assert np.allclose(np.diff(tr.times), 0.04)


def test_zero_gravity_rest_state_stays_put(desk):
    p0 = default_params(desk)
    p = SimParams((0.0, 0.0, 0.0), p0.masses, p0.damping, p0.force_pd, p0.inertias)
    q0 = np.array([0.1, 2.0, 2.5, -0.3, 0.4, 0.2])
    tr = rollout(desk, p, JointState.at_rest(q0), np.zeros((10, 6)), StepSpec())
    assert np.array_equal(tr.q[-1], q0) and np.all(tr.qd == 0)


def test_divergence_is_reported(pendulum):
    p0 = default_params(pendulum)
    p = SimParams(p0.gravity, p0.masses, p0.damping, (1e9,), p0.inertias)
    with pytest.raises(Diverged):
        rollout(pendulum, p, JointState.at_rest([0.0]), np.full((5, 1), 1e9), StepSpec())


def test_step_spec_validation():
    with pytest.raises(ValueError):
        StepSpec(0.0, 1)
    with pytest.raises(ValueError):
        StepSpec(1e-3, 0)
    with pytest.raises(ValueError, match="25"):
        StepSpec(1e-3, 10).check_rate()
    assert StepSpec.for_rate(8).control_period == pytest.approx(0.04)
