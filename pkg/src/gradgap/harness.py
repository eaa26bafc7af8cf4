"""Sim2sim reality-gap loop: a virtual rig with hidden parameters, policy
rollouts on it, error metrics and the four-step iteration.

Each iteration collects optimal trajectories with the current simulator
parameters, regresses a policy on them, runs that policy on the rig and fits
the parameters to the recorded rollout.  The fitted parameters seed the next
iteration.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import policy as pol
from .dynamics import (
    DIVERGENCE_LIMIT,
    Diverged,
    JointState,
    SingularInertia,
    StepSpec,
    Trajectory,
    forward_kinematics,
    rollout,
    step,
)
from .model import LengthMismatch, RobotModel, SimParams, default_params, flatten, param_groups, unflatten
from .sysid import (
    Budget,
    ObservedRollout,
    RegularizerSpec,
    SysIdWindow,
    basin_hop,
    default_bounds,
    residual,
)
from .trajopt import DEFAULT_WEIGHTS, StateSampler, collect_dataset

__all__ = [
    "HarnessError",
    "RigDiverged",
    "FormatError",
    "CANDLE",
    "GapSpec",
    "make_gap",
    "VirtualRig",
    "rig_rollout",
    "replay",
    "task_space_error",
    "full_rollout_residual",
    "PipelineConfig",
    "PipelineState",
    "IterationReport",
    "run_iteration",
    "save_rollout",
    "load_rollout",
    "rollout_csv",
    "write_report",
    "dataset_csv",
    "save_dataset",
    "load_dataset",
    "save_params",
    "load_params",
]

log = logging.getLogger(__name__)

CANDLE = (0.0, 3.14, 3.14, 0.0, 0.0, 0.0)


class HarnessError(Exception):
    pass


class RigDiverged(HarnessError):
    pass


class FormatError(HarnessError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


def _seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# the virtual rig


@dataclass(frozen=True)
class GapSpec:
    """Hidden parameters: masses and inertias scaled by factors drawn from
    ``mass_factor``, damping drawn from ``damping`` (N·m·s/rad), force gains
    from ``force_pd``; gravity is exact."""

    mass_factor: tuple = (0.8, 1.25)
    damping: tuple = (0.0, 15.0)
    force_pd: tuple = (0.7, 1.3)


def make_gap(model: RobotModel, nominal: SimParams, gap: GapSpec = GapSpec(), seed: int = 0) -> SimParams:
    rng = np.random.default_rng(_seed(seed, 7))
    g = param_groups(model)
    x = flatten(nominal)
    x[g["masses"]] *= rng.uniform(*gap.mass_factor, size=model.link_count)
    x[g["inertias"]] *= rng.uniform(*gap.mass_factor, size=3 * model.link_count)
    x[g["damping"]] = rng.uniform(*gap.damping, size=model.actuated_joint_count)
    x[g["force_pd"]] = rng.uniform(*gap.force_pd, size=model.actuated_joint_count)
    return unflatten(model, x)


class VirtualRig:
    """Stand-in for the physical arm.

    The hidden parameters only drive :meth:`apply`; callers interact through
    :meth:`observe` and :meth:`apply`.  Commands are clamped to
    ``torque_clamp`` before integration.
    """

    def __init__(self, model: RobotModel, hidden_params: SimParams, spec: StepSpec = StepSpec(),
                 noise_std=(0.0, 0.0), torque_clamp=None, state_box=None, velocity_limit: float = 20.0,
                 seed: int = 0, start=None):
        J = model.actuated_joint_count
        self.model = model
        self._hidden = hidden_params
        self.spec = spec
        self.noise_std = tuple(float(v) for v in noise_std)
        if torque_clamp is None:
            lim = model.effort_limits
            torque_clamp = np.stack([-lim, lim], axis=1)
        tc = np.asarray(torque_clamp, dtype=float)
        self.torque_clamp = np.stack([-tc, tc], axis=1) if tc.ndim == 1 else tc
        self.start = np.asarray(CANDLE[:J] if start is None else start, dtype=float)
        if state_box is None:
            state_box = np.stack([self.start - math.pi, self.start + math.pi], axis=1)
        self.state_box = np.asarray(state_box, dtype=float)
        self.velocity_limit = float(velocity_limit)
        self.seed = seed
        self.reset()

    def reset(self, q=None, qd=None) -> None:
        J = self.model.actuated_joint_count
        self._q = np.array(self.start if q is None else q, dtype=float)
        self._qd = np.zeros(J) if qd is None else np.array(qd, dtype=float)
        self._rng = np.random.default_rng(_seed(self.seed, 11))
        self.ticks = 0

    @property
    def sample_rate(self) -> float:
        return 1.0 / self.spec.control_period

    def observe(self):
        sq, sqd = self.noise_std
        q, qd = self._q.copy(), self._qd.copy()
        if sq > 0:
            q += sq * self._rng.standard_normal(len(q))
        if sqd > 0:
            qd += sqd * self._rng.standard_normal(len(qd))
        return q, qd

    def clamp(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.torque_clamp[:, 0], self.torque_clamp[:, 1])

    def apply(self, u) -> np.ndarray:
        """Clamp, integrate one control period and return the applied command."""
        u = self.clamp(u)
        try:
            s = step(self.model, self._hidden, JointState(self._q, self._qd), u, self.spec)
        except (Diverged, SingularInertia, ValueError) as exc:
            raise RigDiverged(f"rig dynamics blew up at tick {self.ticks}: {exc}") from exc
        self._q, self._qd = s.q, s.qd
        self.ticks += 1
        return u

    def in_box(self) -> bool:
        q = self._q
        return bool(np.all(q >= self.state_box[:, 0]) and np.all(q <= self.state_box[:, 1])
                    and np.all(np.abs(self._qd) <= self.velocity_limit))

    def reveal_params(self) -> SimParams:
        """Ground truth, for final evaluation reports only."""
        return self._hidden


def rig_rollout(rig: VirtualRig, policy, goal, duration: float) -> ObservedRollout:
    """Run ``policy`` on the rig from its current state for ``duration`` s.

    Stops early (setting ``rig.truncated``) if the state leaves the safety
    box.  ``policy`` is a :class:`~gradgap.policy.PolicyNet` or any callable
    ``(q, qd, goal) -> u``.
    """
    n = int(round(duration / rig.spec.control_period))
    if n < 1:
        raise ValueError("duration must cover at least one control period")
    goal = np.asarray(goal, dtype=float)
    act = (lambda q, qd, g: pol.predict(policy, (q, qd), g)) if isinstance(policy, pol.PolicyNet) else policy
    qs, qds, us = [], [], []
    rig.truncated = False
    for _ in range(n):
        q, qd = rig.observe()
        qs.append(q)
        qds.append(qd)
        us.append(rig.apply(act(q, qd, goal)))
        if not rig.in_box():
            rig.truncated = True
            break
    q, qd = rig.observe()
    qs.append(q)
    qds.append(qd)
    T = rig.spec.control_period
    return ObservedRollout(np.arange(len(qs)) * T, np.array(qs), np.array(qds), np.array(us), "virtual-rig")


# ---------------------------------------------------------------------------
# metrics


def replay(model: RobotModel, params: SimParams, obs: ObservedRollout, spec: StepSpec = StepSpec()):
    """Open-loop simulation of the recorded commands from the first observed
    state; ``None`` if the simulation diverges."""
    try:
        return rollout(model, params, JointState(obs.q_obs[0], obs.qd_obs[0]), obs.u_cmd, spec)
    except (Diverged, SingularInertia):
        return None


def task_space_error(model: RobotModel, obs: ObservedRollout, sim_traj: Trajectory) -> float:
    """Sum over samples of the end-effector distance (m)."""
    if sim_traj is None:
        return math.inf
    if len(sim_traj.q) != len(obs.q_obs):
        raise LengthMismatch(f"{len(obs.q_obs)} observed samples vs {len(sim_traj.q)} simulated")
    return float(sum(np.linalg.norm(forward_kinematics(model, a) - forward_kinematics(model, b))
                     for a, b in zip(obs.q_obs, sim_traj.q)))


def full_rollout_residual(model: RobotModel, params: SimParams, obs: ObservedRollout,
                          spec: StepSpec = StepSpec()) -> float:
    """Data term of the identification residual over the whole rollout."""
    w = SysIdWindow(0, obs.ticks * obs.period)
    return residual(model, params, w, obs, RegularizerSpec.zero(params), spec).value


# ---------------------------------------------------------------------------
# pipeline


@dataclass(frozen=True)
class PipelineConfig:
    """Everything one run depends on.  Units: s, rad, rad/s, N·m."""

    seed: int = 0
    spec: StepSpec = StepSpec()
    # trajectory collection
    K: int = 450
    horizon: int = 25
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    torque_bound: float = 9.0
    shoot_intervals: int | None = None
    sample_half_width: float = 0.3
    collect_workers: int = 1
    trajopt_max_iter: int = 100
    # policy
    train: pol.TrainConfig = pol.TrainConfig()
    # rig
    gap: GapSpec = GapSpec()
    gap_seed: int = 0
    noise_q: float = 0.0
    noise_qd: float = 0.0
    rollout_duration: float = 6.0
    goal_offset: tuple = (0.2, -0.2, 0.2, 0.2, -0.2, 0.2)
    start: tuple | None = None
    # sysid
    window_start: int = 0
    window_duration: float = 0.2
    alpha_gain: float = 1e-3
    solver: str = "unbounded"
    sysid_workers: int = 1
    wall_clock: float = 600.0
    hops: int = 2
    hop_scale: float = 0.05
    sysid_max_iter: int = 100

    def torque_bounds(self, model: RobotModel) -> np.ndarray:
        lim = np.minimum(self.torque_bound, model.effort_limits)
        return np.stack([-lim, lim], axis=1)

    def start_pose(self, model: RobotModel) -> np.ndarray:
        J = model.actuated_joint_count
        return np.asarray(self.start if self.start is not None else CANDLE[:J], dtype=float)

    def goal(self, model: RobotModel) -> np.ndarray:
        J = model.actuated_joint_count
        return self.start_pose(model) + np.asarray(self.goal_offset[:J], dtype=float)


@dataclass
class PipelineState:
    model: RobotModel
    p_init: SimParams
    p: SimParams
    rig: VirtualRig
    iteration: int = 0
    reports: list = field(default_factory=list)

    @classmethod
    def create(cls, model: RobotModel, config: PipelineConfig, p_init: SimParams | None = None) -> "PipelineState":
        p_init = p_init or default_params(model)
        hidden = make_gap(model, p_init, config.gap, config.gap_seed)
        rig = VirtualRig(model, hidden, config.spec, (config.noise_q, config.noise_qd), seed=config.seed,
                         start=config.start_pose(model))
        return cls(model, p_init, p_init, rig)


@dataclass
class IterationReport:
    iteration: int
    K: int
    train_loss: float
    rollout: ObservedRollout
    truncated: bool
    residual_before: float
    residual_after: float
    full_residual_before: float
    full_residual_after: float
    euclid_before: float
    euclid_after: float
    sysid_status: str
    flagged: bool
    params_before: SimParams
    params_after: SimParams
    timings: dict = field(default_factory=dict)
    overrun: float = 0.0

    def summary_row(self) -> dict:
        """Deterministic numbers only (no timings)."""
        return {
            "iteration": self.iteration,
            "K": self.K,
            "train_loss": self.train_loss,
            "samples": len(self.rollout.q_obs),
            "truncated": int(self.truncated),
            "residual_before": self.residual_before,
            "residual_after": self.residual_after,
            "full_residual_before": self.full_residual_before,
            "full_residual_after": self.full_residual_after,
            "euclid_before": self.euclid_before,
            "euclid_after": self.euclid_after,
            "flagged": int(self.flagged),
        }


def run_iteration(state: PipelineState, config: PipelineConfig) -> IterationReport:
    """Collect, train, roll out on the rig, identify; advances ``state``."""
    model, spec = state.model, config.spec
    i = state.iteration
    J = model.actuated_joint_count
    timings = {}
    p_before = state.p

    t = time.perf_counter()
    centre = config.start_pose(model)
    sampler = StateSampler.around(centre, config.sample_half_width)
    dataset = collect_dataset(
        model, state.p, config.K, sampler, config.horizon, _seed(config.seed, i, 1), spec=spec,
        torque_bounds=config.torque_bounds(model), shoot_intervals=config.shoot_intervals,
        weights=config.weights, workers=config.collect_workers, max_iter=config.trajopt_max_iter,
    )
    timings["collect"] = time.perf_counter() - t

    t = time.perf_counter()
    tc = replace(config.train, seed=_seed(config.seed, i, 2))
    result = pol.train(pol.init(J, _seed(config.seed, i, 3)), dataset, tc)
    timings["train"] = time.perf_counter() - t

    t = time.perf_counter()
    state.rig.reset(centre)
    obs = rig_rollout(state.rig, result.net, config.goal(model), config.rollout_duration)
    truncated = state.rig.truncated
    timings["rollout"] = time.perf_counter() - t

    t = time.perf_counter()
    duration = min(config.window_duration, (obs.ticks - config.window_start) * obs.period)
    window = SysIdWindow(config.window_start, round(duration / obs.period) * obs.period)
    reg = RegularizerSpec.scaled(state.p, config.alpha_gain)
    r_before = residual(model, state.p, window, obs, reg, spec).value
    flagged, status, overrun = False, "ok", 0.0
    p_after = state.p
    r_after = r_before
    if window.duration < config.window_duration - 1e-9:
        flagged, status = True, "rollout_too_short"
    else:
        try:
            bounds = default_bounds(model, state.p) if config.solver == "bounded" else None
            p_new, hop = basin_hop(
                model, state.p, window, obs, reg, config.solver, config.sysid_workers, config.wall_clock,
                hop_scale=config.hop_scale * np.abs(np.where(flatten(state.p) == 0, 1.0, flatten(state.p))),
                seed=_seed(config.seed, i, 4), bounds=bounds, hops=config.hops,
                budget=Budget(config.sysid_max_iter), spec=spec,
            )
            overrun = hop.overrun
            r_new = residual(model, p_new, window, obs, reg, spec).value
            if r_new <= r_before:
                p_after, r_after = p_new, r_new
            else:
                flagged, status = True, "no_improvement"
        except Exception as exc:  # a failed identification leaves p unchanged
            log.warning("sysid failed in iteration %d: %s", i, exc)
            flagged, status = True, f"failed: {type(exc).__name__}: {exc}"
    timings["sysid"] = time.perf_counter() - t

    full_b = full_rollout_residual(model, p_before, obs, spec)
    full_a = full_rollout_residual(model, p_after, obs, spec)
    eu_b = task_space_error(model, obs, replay(model, p_before, obs, spec))
    eu_a = task_space_error(model, obs, replay(model, p_after, obs, spec))

    report = IterationReport(
        i + 1, len(dataset), float(result.final_loss), obs, bool(truncated), float(r_before), float(r_after),
        float(full_b), float(full_a), float(eu_b), float(eu_a), status, flagged, p_before, p_after, timings,
        overrun,
    )
    state.p = p_after
    state.iteration += 1
    state.reports.append(report)
    return report


# ---------------------------------------------------------------------------
# files


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def rollout_csv(obs: ObservedRollout) -> str:
    J = obs.J
    header = ["t"] + [f"q{j}" for j in range(J)] + [f"qd{j}" for j in range(J)] + [f"u{j}" for j in range(J)]
    lines = [",".join(header)]
    for n in range(len(obs.q_obs)):
        row = [_fmt(obs.sample_times[n])] + [_fmt(v) for v in obs.q_obs[n]] + [_fmt(v) for v in obs.qd_obs[n]]
        row += [_fmt(v) for v in obs.u_cmd[n]] if n < obs.ticks else [""] * J
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def save_rollout(obs: ObservedRollout, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(rollout_csv(obs))


def load_rollout(path) -> ObservedRollout:
    """Parse the rollout CSV; errors carry the offending line number."""
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError("empty file", 1)
    header = [h.strip() for h in rows[0]]
    J = sum(1 for h in header if h[:1] == "q" and h[1:].isdigit())
    if J == 0:
        raise FormatError("missing column 'q0'", 1)
    expected = ["t"] + [f"q{j}" for j in range(J)] + [f"qd{j}" for j in range(J)] + [f"u{j}" for j in range(J)]
    for name in expected:
        if name not in header:
            raise FormatError(f"missing column '{name}'", 1)
    extra = [h for h in header if h not in expected]
    if extra:
        raise FormatError(f"unexpected column '{extra[0]}'", 1)
    idx = {h: header.index(h) for h in expected}
    t, q, qd, u = [], [], [], []
    body = rows[1:]
    if not body:
        raise FormatError("no samples", 2)
    for k, row in enumerate(body):
        line = k + 2
        if len(row) != len(header):
            raise FormatError(f"expected {len(header)} fields, found {len(row)}", line)
        try:
            t.append(float(row[idx["t"]]))
            q.append([float(row[idx[f"q{j}"]]) for j in range(J)])
            qd.append([float(row[idx[f"qd{j}"]]) for j in range(J)])
            last = k == len(body) - 1
            cells = [row[idx[f"u{j}"]] for j in range(J)]
            if last:
                if any(c.strip() for c in cells):
                    raise FormatError("the final row must leave the u columns empty", line)
            else:
                u.append([float(c) for c in cells])
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"bad number: {exc}", line) from exc
    try:
        return ObservedRollout(np.array(t), np.array(q), np.array(qd), np.array(u).reshape(len(u), J), "file")
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_params(model: RobotModel, p: SimParams, path) -> None:
    """One ``name,value`` line per parameter."""
    from .model import param_names

    Path(path).write_text("".join(f"{n},{_fmt(v)}\n" for n, v in zip(param_names(model), flatten(p))),
                          encoding="utf-8")


def load_params(model: RobotModel, path) -> SimParams:
    from .model import param_names

    names = param_names(model)
    vals = {}
    for k, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        name, _, v = line.partition(",")
        if name not in names:
            raise FormatError(f"unknown parameter '{name}'", k)
        try:
            vals[name] = float(v)
        except ValueError as exc:
            raise FormatError(f"bad number {v!r}", k) from exc
    missing = [n for n in names if n not in vals]
    if missing:
        raise FormatError(f"missing parameter '{missing[0]}'")
    return unflatten(model, [vals[n] for n in names])


def write_report(report: IterationReport, model: RobotModel, directory, timings: bool = True) -> None:
    """Write ``report.txt``, ``rollout.csv`` and ``params.csv`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_rollout(report.rollout, d / "rollout.csv")
    lines = [f"{k}: {_fmt(v) if isinstance(v, float) else v}" for k, v in report.summary_row().items()]
    lines.append(f"sysid_status: {report.sysid_status}")
    lines.append("rollout_csv: rollout.csv")
    if timings:
        lines += [f"time.{k}_s: {v:.3f}" for k, v in report.timings.items()]
        lines.append(f"time.sysid_overrun_s: {report.overrun:.3f}")
    (d / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    save_params(model, report.params_after, d / "params.csv")


def dataset_csv(dataset) -> str:
    """Trajectories as one CSV: ``traj,t,q*,qd*,goal*,u*`` with the final
    row of each trajectory leaving ``u`` empty."""
    if not dataset:
        raise ValueError("empty dataset")
    J = dataset[0].q.shape[1]
    header = ["traj", "t"] + [f"{n}{j}" for n in ("q", "qd", "goal", "u") for j in range(J)]
    lines = [",".join(header)]
    for k, tr in enumerate(dataset):
        goal = tr.goal if tr.goal is not None else np.full(J, np.nan)
        for n in range(len(tr.q)):
            row = [str(k), _fmt(tr.times[n])] + [_fmt(v) for v in (*tr.q[n], *tr.qd[n], *goal)]
            row += [_fmt(v) for v in tr.u[n]] if n < len(tr.u) else [""] * J
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def save_dataset(dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dataset_csv(dataset))


def load_dataset(path) -> list:
    rows = list(csv.reader(io.StringIO(Path(path).read_text(encoding="utf-8"))))
    if not rows:
        raise FormatError("empty file", 1)
    header = rows[0]
    J = sum(1 for h in header if h[:1] == "q" and h[1:].isdigit())
    expected = ["traj", "t"] + [f"{n}{j}" for n in ("q", "qd", "goal", "u") for j in range(J)]
    if J == 0 or header != expected:
        missing = [h for h in expected if h not in header] or ["q0"]
        raise FormatError(f"header must be {','.join(expected[:3])}...; missing column '{missing[0]}'", 1)
    groups: dict[int, list] = {}
    for k, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise FormatError(f"expected {len(header)} fields, found {len(row)}", k + 2)
        try:
            groups.setdefault(int(row[0]), []).append((k + 2, row))
        except ValueError as exc:
            raise FormatError(f"bad trajectory index: {exc}", k + 2) from exc
    out = []
    for _, items in sorted(groups.items()):
        line, last = items[-1]
        if any(c.strip() for c in last[2 + 3 * J:]):
            raise FormatError("the final row of a trajectory must leave the u columns empty", line)
        try:
            vals = [[float(c) for c in row[1:2 + 3 * J]] for _, row in items]
            u = [[float(c) for c in row[2 + 3 * J:]] for _, row in items[:-1]]
        except ValueError as exc:
            raise FormatError(f"bad number in trajectory ending at line {line}: {exc}") from exc
        A = np.array(vals)
        out.append(Trajectory(A[:, 0], A[:, 1:1 + J], A[:, 1 + J:1 + 2 * J], np.array(u).reshape(len(u), J),
                              A[0, 1 + 2 * J:1 + 3 * J].copy()))
    if not out:
        raise FormatError("no samples", 2)
    return out
