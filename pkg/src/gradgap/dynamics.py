"""Contact-free articulated dynamics for serial revolute chains.

Everything here is written against generic scalars: plain floats, numpy
arrays (a batch of independent evaluations), :class:`~gradgap.autodiff.DualScalar`
or :class:`~gradgap.autodiff.TapeVar`.  Vectors are tuples of scalars and 3x3
matrices are row-major 9-tuples.

Spatial quantities use angular-first Plücker coordinates.  Each moving body
frame is the joint frame rotated so the joint axis is the local z axis, which
makes the per-step joint rotation cheap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import cos, sin, value_of
from .model import RobotModel, SimParams, rpy_to_matrix

__all__ = [
    "DynamicsError",
    "SingularInertia",
    "Diverged",
    "JointState",
    "StepSpec",
    "Trajectory",
    "compile_tree",
    "forward_dynamics",
    "step",
    "rollout",
    "simulate",
    "forward_kinematics",
    "kinetic_energy",
    "potential_energy",
    "DIVERGENCE_LIMIT",
    "CONTROL_RATE",
]

DIVERGENCE_LIMIT = 1e6
CONTROL_RATE = 25.0
_SNAP = 1e-14


class DynamicsError(Exception):
    pass


class SingularInertia(DynamicsError):
    pass


class Diverged(DynamicsError):
    def __init__(self, message, tick=None):
        super().__init__(message if tick is None else f"{message} (tick {tick})")
        self.tick = tick


@dataclass(frozen=True)
class JointState:
    q: np.ndarray
    qd: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "qd", np.asarray(self.qd, dtype=float))
        if self.q.shape != self.qd.shape:
            raise ValueError("q and qd must have the same shape")
        if not (np.all(np.isfinite(self.q)) and np.all(np.isfinite(self.qd))):
            raise ValueError("joint state must be finite")

    @classmethod
    def at_rest(cls, q):
        q = np.asarray(q, dtype=float)
        return cls(q, np.zeros_like(q))


@dataclass(frozen=True)
class StepSpec:
    """Integrator settings.  ``dt * substeps`` is one control period."""

    dt: float = 1e-3
    substeps: int = 40

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def control_period(self) -> float:
        return self.dt * self.substeps

    def check_rate(self, rate: float = CONTROL_RATE) -> None:
        if abs(self.control_period * rate - 1.0) > 1e-9:
            raise ValueError(f"dt*substeps = {self.control_period} s does not match a {rate} Hz control rate")

    @classmethod
    def for_rate(cls, substeps: int, rate: float = CONTROL_RATE) -> "StepSpec":
        return cls(1.0 / (rate * substeps), substeps)


@dataclass(frozen=True)
class Trajectory:
    """States ``X`` (``q``, ``qd``: ``(N+1, J)``) and controls ``U`` (``(N, J)``)
    sampled once per control tick.  ``goal`` is the target configuration when
    the trajectory came from an optimiser."""

    times: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    u: np.ndarray
    goal: np.ndarray | None = None

    def __post_init__(self):
        if len(self.q) != len(self.u) + 1 or len(self.qd) != len(self.q) or len(self.times) != len(self.q):
            raise ValueError("trajectory needs |X| = |U| + 1 and one time per state")

    def __len__(self):
        return len(self.q)

    @property
    def states(self) -> list[JointState]:
        return [JointState(q, qd) for q, qd in zip(self.q, self.qd)]


# ---------------------------------------------------------------------------
# constant-matrix helpers

def _snap(x):
    for ref in (0.0, 1.0, -1.0):
        if abs(x - ref) < _SNAP:
            return ref
    return float(x)


def _rows(M):
    """Sparse rows of a constant 3x3 matrix: ``((col, coef), ...)`` per row."""
    return tuple(tuple((k, _snap(M[i][k])) for k in range(3) if _snap(M[i][k]) != 0.0) for i in range(3))


_ZERO = 0.0


def _lin(terms, v):
    acc = None
    for k, c in terms:
        if c == 0.0:
            continue
        x = v[k]
        if c == 1.0:
            acc = x if acc is None else acc + x
        elif c == -1.0:
            acc = -x if acc is None else acc - x
        else:
            acc = x * c if acc is None else acc + x * c
    return _ZERO if acc is None else acc


def _cmv(rows, v):
    return (_lin(rows[0], v), _lin(rows[1], v), _lin(rows[2], v))


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def _cross_const(w, r):
    """``w x r`` for a constant ``r``."""
    r0, r1, r2 = r
    return (
        _lin(((1, r2), (2, -r1)), w),
        _lin(((2, r0), (0, -r2)), w),
        _lin(((0, r1), (1, -r0)), w),
    )


def _align_z_to(axis):
    """Constant rotation taking the local z axis onto ``axis``."""
    a = np.asarray(axis, dtype=float)
    z = np.array([0.0, 0.0, 1.0])
    c = float(np.dot(z, a))
    if c > 1 - 1e-12:
        return np.eye(3)
    if c < -1 + 1e-12:
        return np.diag([1.0, -1.0, -1.0])
    k = np.cross(z, a)
    s = np.linalg.norm(k)
    k = k / s
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    R = np.eye(3) + s * K + (1 - c) * K @ K
    return np.vectorize(_snap)(R)


@dataclass(frozen=True)
class _Body:
    parent: int
    M0: np.ndarray  # orientation of the (aligned) joint frame in parent-body coords
    r0: tuple  # joint frame origin in parent-body coords
    rows: tuple  # sparse rows of M0
    rows_t: tuple  # sparse rows of M0^T
    rx_rows: tuple  # sparse rows of skew(r0)
    rx_cols: tuple
    has_r: bool
    links: tuple  # ((link index, R (link->body incl. inertial rotation), com in body coords), ...)


@dataclass(frozen=True)
class _Tree:
    bodies: tuple
    ee_body: int
    ee_pos: tuple  # distal link origin in ee_body coords (world coords when ee_body == -1)
    fixed_links: tuple  # links rigidly attached to the world


def compile_tree(model: RobotModel) -> _Tree:
    R_cur, t_cur, b = np.eye(3), np.zeros(3), -1
    bodies: list[_Body] = []
    attached: dict[int, list] = {-1: []}

    def attach(link_index, body, R_link, t_link):
        link = model.links[link_index]
        R = R_link @ rpy_to_matrix(link.com_rpy)
        com = t_link + R_link @ np.asarray(link.com)
        attached.setdefault(body, []).append((link_index, R, tuple(float(x) for x in com)))

    attach(0, -1, R_cur, t_cur)
    for ji, joint in enumerate(model.joints):
        R_o = rpy_to_matrix(joint.origin_rpy)
        R_j = R_cur @ R_o
        t_j = t_cur + R_cur @ np.asarray(joint.origin_xyz)
        if joint.kind == "fixed":
            R_cur, t_cur = R_j, t_j
        else:
            R_al = _align_z_to(joint.axis)
            M0 = np.vectorize(_snap)(R_j @ R_al)
            r0 = tuple(_snap(x) for x in t_j)
            rx = np.array([[0, -r0[2], r0[1]], [r0[2], 0, -r0[0]], [-r0[1], r0[0], 0]])
            bodies.append(
                _Body(
                    parent=b,
                    M0=M0,
                    r0=r0,
                    rows=_rows(M0),
                    rows_t=_rows(M0.T),
                    rx_rows=_rows(rx),
                    rx_cols=_rows(rx.T),
                    has_r=any(x != 0.0 for x in r0),
                    links=(),
                )
            )
            b = len(bodies) - 1
            R_cur, t_cur = R_al.T, np.zeros(3)
        attach(ji + 1, b, R_cur, t_cur)
    bodies = [
        _Body(**{**bd.__dict__, "links": tuple(attached.get(i, ()))}) for i, bd in enumerate(bodies)
    ]
    return _Tree(
        bodies=tuple(bodies),
        ee_body=b,
        ee_pos=tuple(float(x) for x in t_cur),
        fixed_links=tuple(attached[-1]),
    )


# ---------------------------------------------------------------------------
# rigid-body inertia of each moving body, generic in the parameters

def _body_inertias(tree: _Tree, params: SimParams):
    """Per body: ``(m, h, Ibar)`` about the body origin in body coords, with
    ``h = m * com`` and ``Ibar`` a symmetric 9-tuple."""
    out = []
    for body in tree.bodies:
        m = None
        h = [None, None, None]
        I6 = [None] * 6  # xx xy xz yy yz zz
        for li, R, c in body.links:
            ml = params.masses[li]
            d = params.inertias[li]
            m = ml if m is None else m + ml
            for k in range(3):
                if c[k] != 0.0:
                    t = ml * c[k]
                    h[k] = t if h[k] is None else h[k] + t
            cc = c[0] * c[0] + c[1] * c[1] + c[2] * c[2]
            for n, (i, j) in enumerate(((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))):
                terms = tuple((k, _snap(R[i][k] * R[j][k])) for k in range(3))
                terms = tuple(t for t in terms if t[1] != 0.0)
                val = _lin(terms, d) if terms else None
                coef = (cc if i == j else 0.0) - c[i] * c[j]
                if coef != 0.0:
                    t = ml * coef
                    val = t if val is None else val + t
                if val is not None:
                    I6[n] = val if I6[n] is None else I6[n] + val
        z = 0.0
        m = z if m is None else m
        h = tuple(z if x is None else x for x in h)
        a00, a01, a02, a11, a12, a22 = (z if x is None else x for x in I6)
        out.append((m, h, (a00, a01, a02, a01, a11, a12, a02, a12, a22)))
    return out


# ---------------------------------------------------------------------------
# articulated body algorithm

def _rotz_sym(A, c, s, cc, ss, cs, cs2, c2s2):
    """R_z A R_z^T for symmetric ``A``."""
    a00, a01, a02, _, a11, a12, _, _, a22 = A
    s00 = cc * a00 - cs2 * a01 + ss * a11
    s11 = ss * a00 + cs2 * a01 + cc * a11
    s01 = cs * (a00 - a11) + c2s2 * a01
    s02 = c * a02 - s * a12
    s12 = s * a02 + c * a12
    return (s00, s01, s02, s01, s11, s12, s02, s12, a22)


def _rotz_gen(B, c, s):
    """R_z B R_z^T for general ``B``."""
    b00, b01, b02, b10, b11, b12, b20, b21, b22 = B
    t00, t01, t02 = c * b00 - s * b10, c * b01 - s * b11, c * b02 - s * b12
    t10, t11, t12 = s * b00 + c * b10, s * b01 + c * b11, s * b02 + c * b12
    return (
        c * t00 - s * t01,
        s * t00 + c * t01,
        t02,
        c * t10 - s * t11,
        s * t10 + c * t11,
        t12,
        c * b20 - s * b21,
        s * b20 + c * b21,
        b22,
    )


def _crot_gen(rows, X):
    """M X M^T for constant ``M`` (given by sparse rows) and general ``X``."""
    cols = ((X[0], X[3], X[6]), (X[1], X[4], X[7]), (X[2], X[5], X[8]))
    T = [_lin(rows[i], cols[j]) for i in range(3) for j in range(3)]  # M X, row-major
    Trows = ((T[0], T[1], T[2]), (T[3], T[4], T[5]), (T[6], T[7], T[8]))
    return tuple(_lin(rows[j], Trows[i]) for i in range(3) for j in range(3))


def _crot_sym(rows, X):
    cols = ((X[0], X[3], X[6]), (X[1], X[4], X[7]), (X[2], X[5], X[8]))
    T = [_lin(rows[i], cols[j]) for i in range(3) for j in range(3)]
    Trows = ((T[0], T[1], T[2]), (T[3], T[4], T[5]), (T[6], T[7], T[8]))
    s00 = _lin(rows[0], Trows[0])
    s01 = _lin(rows[1], Trows[0])
    s02 = _lin(rows[2], Trows[0])
    s11 = _lin(rows[1], Trows[1])
    s12 = _lin(rows[2], Trows[1])
    s22 = _lin(rows[2], Trows[2])
    return (s00, s01, s02, s01, s11, s12, s02, s12, s22)


def _translate(A, B, C, body):
    """Shift an articulated inertia (blocks in parent orientation) from the
    child origin to the parent origin."""
    rxr, rxc = body.rx_rows, body.rx_cols
    Ccols = ((C[0], C[3], C[6]), (C[1], C[4], C[7]), (C[2], C[5], C[8]))
    Q = [_lin(rxr[i], Ccols[j]) for i in range(3) for j in range(3)]  # rx C
    Bn = tuple(B[k] + Q[k] if Q[k] is not _ZERO else B[k] for k in range(9))
    Bn_rows = ((Bn[0], Bn[1], Bn[2]), (Bn[3], Bn[4], Bn[5]), (Bn[6], Bn[7], Bn[8]))
    B_rows = ((B[0], B[1], B[2]), (B[3], B[4], B[5]), (B[6], B[7], B[8]))
    An = {}
    for i, j in ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)):
        # A - Bn rx + rx B^T
        v = A[3 * i + j]
        t = _lin(rxc[j], Bn_rows[i])
        if t is not _ZERO:
            v = v - t
        t = _lin(rxr[i], B_rows[j])
        if t is not _ZERO:
            v = v + t
        An[i, j] = v
    a = (An[0, 0], An[0, 1], An[0, 2], An[0, 1], An[1, 1], An[1, 2], An[0, 2], An[1, 2], An[2, 2])
    return a, Bn


def _check_pivot(D, i):
    v = value_of(D)
    if isinstance(v, np.ndarray):
        if np.any(np.abs(v) < 1e-12):
            raise SingularInertia(f"articulated inertia pivot of joint {i} below 1e-12")
    elif abs(v) < 1e-12:
        raise SingularInertia(f"articulated inertia pivot of joint {i} is {v!r} (< 1e-12)")


def _aba(tree: _Tree, inertia, gravity, q, qd, tau):
    """Joint accelerations for applied joint torques ``tau``."""
    bodies = tree.bodies
    n = len(bodies)
    trig = []
    vel = []
    cvec = []
    IA = []
    pA = []
    zero3 = (0.0, 0.0, 0.0)
    # outward pass
    for i, body in enumerate(bodies):
        c = cos(q[i])
        s = sin(q[i])
        trig.append(c)
        trig.append(s)
        if body.parent < 0:
            w = zero3
            v = zero3
        else:
            wp, vp = vel[body.parent]
            wj = _cmv(body.rows_t, wp)
            if body.has_r:
                vj = _cmv(body.rows_t, (vp[0] + (t := _cross_const(wp, body.r0))[0], vp[1] + t[1], vp[2] + t[2]))
            else:
                vj = _cmv(body.rows_t, vp)
            w = (c * wj[0] + s * wj[1], c * wj[1] - s * wj[0], wj[2])
            v = (c * vj[0] + s * vj[1], c * vj[1] - s * vj[0], vj[2])
        qdi = qd[i]
        w = (w[0], w[1], w[2] + qdi)
        vel.append((w, v))
        cvec.append((qdi * w[1], -(qdi * w[0]), qdi * v[1], -(qdi * v[0])))
        m, h, Ib = inertia[i]
        # momentum: L = Ibar w + h x v, P = m v - h x w
        hxv = _cross(h, v)
        hxw = _cross(h, w)
        L = (
            Ib[0] * w[0] + Ib[1] * w[1] + Ib[2] * w[2] + hxv[0],
            Ib[3] * w[0] + Ib[4] * w[1] + Ib[5] * w[2] + hxv[1],
            Ib[6] * w[0] + Ib[7] * w[1] + Ib[8] * w[2] + hxv[2],
        )
        P = (m * v[0] - hxw[0], m * v[1] - hxw[1], m * v[2] - hxw[2])
        wxL = _cross(w, L)
        vxP = _cross(v, P)
        wxP = _cross(w, P)
        pA.append([wxL[0] + vxP[0], wxL[1] + vxP[1], wxL[2] + vxP[2], wxP[0], wxP[1], wxP[2]])
        h0, h1, h2 = h
        B = (0.0, -h2, h1, h2, 0.0, -h0, -h1, h0, 0.0)
        C = (m, 0.0, 0.0, 0.0, m, 0.0, 0.0, 0.0, m)
        IA.append([Ib, B, C])

    # inward pass
    Us = [None] * n
    Ds = [None] * n
    us = [None] * n
    for i in range(n - 1, -1, -1):
        body = bodies[i]
        A, B, C = IA[i]
        p = pA[i]
        U = (A[2], A[5], A[8], B[6], B[7], B[8])
        D = A[8]
        _check_pivot(D, i)
        u = tau[i] - p[2]
        Us[i], Ds[i], us[i] = U, D, u
        if body.parent < 0:
            continue
        invD = 1.0 / D
        W = (U[0] * invD, U[1] * invD, U[2] * invD, U[3] * invD, U[4] * invD, U[5] * invD)
        # Ia = IA - U U^T / D
        a00 = A[0] - W[0] * U[0]
        a01 = A[1] - W[0] * U[1]
        a02 = A[2] - W[0] * U[2]
        a11 = A[4] - W[1] * U[1]
        a12 = A[5] - W[1] * U[2]
        a22 = A[8] - W[2] * U[2]
        Aa = (a00, a01, a02, a01, a11, a12, a02, a12, a22)
        Ba = tuple(B[3 * r + k] - W[r] * U[3 + k] for r in range(3) for k in range(3))
        c00 = C[0] - W[3] * U[3]
        c01 = C[1] - W[3] * U[4]
        c02 = C[2] - W[3] * U[5]
        c11 = C[4] - W[4] * U[4]
        c12 = C[5] - W[4] * U[5]
        c22 = C[8] - W[5] * U[5]
        Ca = (c00, c01, c02, c01, c11, c12, c02, c12, c22)
        # pa = pA + Ia c + U u / D ; c = (cw0, cw1, 0, cv0, cv1, 0)
        cw0, cw1, cv0, cv1 = cvec[i]
        uD = u * invD
        pa = []
        for r in range(3):
            pa.append(p[r] + Aa[3 * r] * cw0 + Aa[3 * r + 1] * cw1 + Ba[3 * r] * cv0 + Ba[3 * r + 1] * cv1 + U[r] * uD)
        for r in range(3):
            # (B^T cw + C cv)_r
            pa.append(p[3 + r] + Ba[r] * cw0 + Ba[3 + r] * cw1 + Ca[3 * r] * cv0 + Ca[3 * r + 1] * cv1 + U[3 + r] * uD)
        # express in aligned joint coordinates (undo the joint rotation)
        c, s = trig[2 * i], trig[2 * i + 1]
        cc, ss, cs = c * c, s * s, c * s
        cs2, c2s2 = cs + cs, cc - ss
        Aa = _rotz_sym(Aa, c, s, cc, ss, cs, cs2, c2s2)
        Ca = _rotz_sym(Ca, c, s, cc, ss, cs, cs2, c2s2)
        Ba = _rotz_gen(Ba, c, s)
        n_ = (c * pa[0] - s * pa[1], s * pa[0] + c * pa[1], pa[2])
        f_ = (c * pa[3] - s * pa[4], s * pa[3] + c * pa[4], pa[5])
        # then into parent-body orientation
        rows = body.rows
        Aa = _crot_sym(rows, Aa)
        Ca = _crot_sym(rows, Ca)
        Ba = _crot_gen(rows, Ba)
        n_ = _cmv(rows, n_)
        f_ = _cmv(rows, f_)
        if body.has_r:
            Aa, Ba = _translate(Aa, Ba, Ca, body)
            rf = _rxf(body.r0, f_)
            n_ = (n_[0] + rf[0], n_[1] + rf[1], n_[2] + rf[2])
        Ap, Bp, Cp = IA[body.parent]
        IA[body.parent] = [
            _add9_sym(Ap, Aa),
            tuple(Bp[k] + Ba[k] for k in range(9)),
            _add9_sym(Cp, Ca),
        ]
        pp = pA[body.parent]
        pA[body.parent] = [pp[0] + n_[0], pp[1] + n_[1], pp[2] + n_[2], pp[3] + f_[0], pp[4] + f_[1], pp[5] + f_[2]]

    # outward pass: accelerations
    g0, g1, g2 = gravity
    acc = []
    qdd = []
    for i, body in enumerate(bodies):
        if body.parent < 0:
            # base acceleration -g stands in for gravity
            aw = zero3
            av = _cmv(body.rows_t, (-g0, -g1, -g2))
        else:
            ap_w, ap_v = acc[body.parent]
            aw = _cmv(body.rows_t, ap_w)
            if body.has_r:
                t = _cross_const(ap_w, body.r0)
                av = _cmv(body.rows_t, (ap_v[0] + t[0], ap_v[1] + t[1], ap_v[2] + t[2]))
            else:
                av = _cmv(body.rows_t, ap_v)
        c, s = trig[2 * i], trig[2 * i + 1]
        cw0, cw1, cv0, cv1 = cvec[i]
        aw = (c * aw[0] + s * aw[1] + cw0, c * aw[1] - s * aw[0] + cw1, aw[2])
        av = (c * av[0] + s * av[1] + cv0, c * av[1] - s * av[0] + cv1, av[2])
        U = Us[i]
        Ua = U[0] * aw[0] + U[1] * aw[1] + U[2] * aw[2] + U[3] * av[0] + U[4] * av[1] + U[5] * av[2]
        qddi = (us[i] - Ua) / Ds[i]
        qdd.append(qddi)
        acc.append(((aw[0], aw[1], aw[2] + qddi), av))
    return qdd


def _rxf(r, f):
    """``r x f`` for a constant ``r``."""
    r0, r1, r2 = r
    return (
        _lin(((2, r1), (1, -r2)), f),
        _lin(((0, r2), (2, -r0)), f),
        _lin(((1, r0), (0, -r1)), f),
    )


def _add9_sym(X, Y):
    x00 = X[0] + Y[0]
    x01 = X[1] + Y[1]
    x02 = X[2] + Y[2]
    x11 = X[4] + Y[4]
    x12 = X[5] + Y[5]
    x22 = X[8] + Y[8]
    return (x00, x01, x02, x01, x11, x12, x02, x12, x22)


# ---------------------------------------------------------------------------
# public API

def _as_list(x):
    if isinstance(x, np.ndarray) and x.ndim == 1:
        return [float(v) for v in x]
    return list(x)


def _applied(params, tau_cmd, qd):
    return [params.force_pd[j] * tau_cmd[j] - params.damping[j] * qd[j] for j in range(len(qd))]


def forward_dynamics(model: RobotModel, params: SimParams, state, tau_cmd):
    """Joint accelerations for commanded torques.

    The applied torque is ``force_pd * tau_cmd - damping * qd``.  ``state`` is a
    :class:`JointState` or a ``(q, qd)`` pair of scalar sequences; the result
    is a numpy array for float input and a list of scalars otherwise.
    """
    q, qd = (state.q, state.qd) if isinstance(state, JointState) else state
    floats = isinstance(q, np.ndarray) and q.ndim == 1 and q.dtype.kind == "f"
    q, qd, tau_cmd = _as_list(q), _as_list(qd), _as_list(tau_cmd)
    tree = model.tree
    qdd = _aba(tree, _body_inertias(tree, params), params.gravity, q, qd, _applied(params, tau_cmd, qd))
    if floats and all(isinstance(v, float) for v in qdd):
        return np.array(qdd)
    return qdd


def _check_finite(q, qd, tick):
    for x in (*q, *qd):
        v = value_of(x)
        if isinstance(v, np.ndarray):
            if not np.all(np.abs(v) <= DIVERGENCE_LIMIT):
                raise Diverged("state left the finite range |x| <= 1e6", tick)
        elif not abs(v) <= DIVERGENCE_LIMIT:
            raise Diverged(f"state value {v!r} left the finite range |x| <= 1e6", tick)


def _substep(tree, inertia, params, q, qd, tau_cmd, dt):
    qdd = _aba(tree, inertia, params.gravity, q, qd, _applied(params, tau_cmd, qd))
    qd = [qd[j] + qdd[j] * dt for j in range(len(qd))]
    q = [q[j] + qd[j] * dt for j in range(len(q))]
    return q, qd


def step(model: RobotModel, params: SimParams, state, tau_cmd, spec: StepSpec):
    """Advance one control tick: ``spec.substeps`` semi-implicit Euler steps
    with ``tau_cmd`` held."""
    as_state = isinstance(state, JointState)
    q, qd = (state.q, state.qd) if as_state else state
    q, qd, tau_cmd = _as_list(q), _as_list(qd), _as_list(tau_cmd)
    tree = model.tree
    inertia = _body_inertias(tree, params)
    for _ in range(spec.substeps):
        q, qd = _substep(tree, inertia, params, q, qd, tau_cmd, spec.dt)
        _check_finite(q, qd, None)
    if as_state:
        return JointState(np.array(q, dtype=float), np.array(qd, dtype=float))
    return q, qd


def simulate(model, params, q0, qd0, controls, spec: StepSpec, dense: bool = False, tree=None):
    """Generic rollout core.

    Returns ``(qs, qds, dense_q)`` where ``qs``/``qds`` hold one state per tick
    (``len(controls) + 1`` entries, each a list of J scalars) and ``dense_q``
    holds ``q`` after every substep (including the initial state) when
    ``dense`` is set.
    """
    tree = tree or model.tree
    inertia = _body_inertias(tree, params)
    q, qd = list(q0), list(qd0)
    qs, qds = [q], [qd]
    dense_q = [q] if dense else None
    dt = spec.dt
    for t, u in enumerate(controls):
        u = list(u)
        for _ in range(spec.substeps):
            q, qd = _substep(tree, inertia, params, q, qd, u, dt)
            _check_finite(q, qd, t)
            if dense:
                dense_q.append(q)
        qs.append(q)
        qds.append(qd)
    return qs, qds, dense_q


def rollout(model: RobotModel, params: SimParams, initial: JointState, controls, spec: StepSpec, t0: float = 0.0) -> Trajectory:
    """Float rollout sampled at control ticks (``len(controls) + 1`` states)."""
    controls = np.asarray(controls, dtype=float)
    if controls.ndim != 2 or len(controls) == 0:
        raise ValueError("controls must be a non-empty (N, J) array")
    qs, qds, _ = simulate(model, params, _as_list(initial.q), _as_list(initial.qd), controls, spec)
    n = len(controls)
    return Trajectory(
        times=t0 + np.arange(n + 1) * spec.control_period,
        q=np.array(qs, dtype=float),
        qd=np.array(qds, dtype=float),
        u=controls.copy(),
    )


def forward_kinematics(model: RobotModel, q):
    """World position of the distal link origin."""
    tree = model.tree
    q = _as_list(q)
    pos = tree.ee_pos
    b = tree.ee_body
    while b >= 0:
        body = tree.bodies[b]
        c, s = cos(q[b]), sin(q[b])
        p = (c * pos[0] - s * pos[1], s * pos[0] + c * pos[1], pos[2])
        p = _cmv(body.rows, p)
        pos = (p[0] + body.r0[0], p[1] + body.r0[1], p[2] + body.r0[2])
        b = body.parent
    if all(isinstance(v, float) for v in pos):
        return np.array(pos)
    return pos


def _body_poses(model, q):
    """World rotation (3x3 ndarray) and origin of each moving body, floats only."""
    tree = model.tree
    poses = []
    for i, body in enumerate(tree.bodies):
        c, s = math.cos(q[i]), math.sin(q[i])
        Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        if body.parent < 0:
            Rp, pp = np.eye(3), np.zeros(3)
        else:
            Rp, pp = poses[body.parent]
        poses.append((Rp @ body.M0 @ Rz, pp + Rp @ np.asarray(body.r0)))
    return poses


def kinetic_energy(model: RobotModel, params: SimParams, state: JointState) -> float:
    """Sum of ½ v^T I v over moving bodies (floats)."""
    tree = model.tree
    inertia = _body_inertias(tree, params)
    poses = _body_poses(model, state.q)
    # world-frame spatial velocity of each body at its own origin
    total = 0.0
    omegas, vels = [], []
    for i, body in enumerate(tree.bodies):
        R, p = poses[i]
        axis = R[:, 2]
        if body.parent < 0:
            w, v = np.zeros(3), np.zeros(3)
        else:
            wp, vp = omegas[body.parent], vels[body.parent]
            w, v = wp, vp + np.cross(wp, p - poses[body.parent][1])
        w = w + axis * state.qd[i]
        omegas.append(w)
        vels.append(v)
        m, h, Ib = inertia[i]
        m = float(m)
        hb = np.array([float(x) for x in h])
        Ib = np.array([float(x) for x in Ib]).reshape(3, 3)
        wb, vb = R.T @ w, R.T @ v
        total += 0.5 * (wb @ Ib @ wb + m * vb @ vb + 2.0 * vb @ np.cross(wb, hb))
    return float(total)


def potential_energy(model: RobotModel, params: SimParams, q) -> float:
    """``-sum m g.com`` over moving bodies (floats)."""
    tree = model.tree
    inertia = _body_inertias(tree, params)
    g = np.array([float(x) for x in params.gravity])
    total = 0.0
    for (R, p), (m, h, _) in zip(_body_poses(model, q), inertia):
        total -= float(g @ (float(m) * p + R @ np.array([float(x) for x in h])))
    return total
