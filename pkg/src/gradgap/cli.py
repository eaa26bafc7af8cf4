"""Command-line front end.

Every run is fully determined by one INI config file (the bundled
``desk.ini`` by default) plus the ``--seed``/``--out``/``--threads``
overrides.  Exit codes: 0 success, 1 component or threshold failure,
2 usage or config error.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import sys
import time
from dataclasses import dataclass, replace
from importlib.resources import files
from pathlib import Path

import numpy as np

from . import __version__
from . import harness as hs
from . import policy as pol
from .checks import dynamics_gradient_check, random_window, residual_gradient_check
from .dynamics import JointState, StepSpec, forward_kinematics
from .model import ModelError, RobotModel, default_params, flatten, load_urdf, parse_urdf
from .sysid import Budget, RegularizerSpec, SysIdWindow, basin_hop, default_bounds, residual
from .trajopt import StateSampler, collect_dataset

log = logging.getLogger(__name__)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
GRADCHECK_TOL = 1e-4


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config schema: section -> key -> (type, default, unit, help)

def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


SCHEMA = {
    "run": {
        "seed": (int, 0, "-", "master seed for every random draw"),
        "out": (str, "gradgap-out", "path", "output directory"),
        "threads": (int, 1, "-", "worker processes for trajectory collection"),
    },
    "model": {
        "urdf": (str, "desk_arm", "path", "URDF file, or 'desk_arm' for the bundled arm"),
    },
    "integrator": {
        "dt": (float, 1e-3, "s", "integration step"),
        "substeps": (int, 40, "-", "integration steps per 25 Hz control period"),
    },
    "trajopt": {
        "K": (int, 450, "-", "trajectories collected per iteration"),
        "horizon": (int, 25, "ticks", "control ticks per trajectory (25 ticks = 1 s)"),
        "shoot_intervals": (int, 0, "-", "shooting intervals (0 = one per tick)"),
        "q_pos": (float, 10.0, "1/rad^2", "running joint-position weight"),
        "q_vel": (float, 1.0, "s^2/rad^2", "running joint-velocity weight"),
        "r": (float, 0.01, "1/(N·m)^2", "torque weight"),
        "qf_pos": (float, 1000.0, "1/rad^2", "terminal joint-position weight"),
        "qf_vel": (float, 10.0, "s^2/rad^2", "terminal joint-velocity weight"),
        "torque_bound": (float, 9.0, "N·m", "symmetric torque bound (capped by URDF effort limits)"),
        "sample_half_width": (float, 0.3, "rad", "start/goal sampling half-width around the start pose"),
        "max_iter": (int, 100, "-", "solver iterations per trajectory"),
    },
    "policy": {
        "epochs": (int, 100, "-", "training epochs"),
        "batch_size": (int, 64, "pairs", "minibatch size"),
        "learning_rate": (float, 1e-3, "-", "Adam step size"),
        "val_fraction": (float, 0.1, "-", "fraction of pairs held out for validation"),
    },
    "sysid": {
        "window_start": (int, 0, "ticks", "first control tick of the identification window"),
        "window_duration": (float, 0.2, "s", "identification window length"),
        "alpha_gain": (float, 1e-3, "-", "regulariser gain (alpha_p = gain / |p|^2)"),
        "solver": (str, "unbounded", "-", "'unbounded' (L-BFGS) or 'bounded' (Levenberg-Marquardt)"),
        "workers": (int, 1, "-", "basin-hopping worker processes"),
        "wall_clock": (float, 600.0, "s", "basin-hopping time limit, checked between local solves"),
        "hops": (int, 2, "-", "hops per worker after the first local solve"),
        "hop_scale": (float, 0.05, "-", "hop size as a fraction of each parameter"),
        "max_iter": (int, 100, "-", "iterations per local solve"),
    },
    "rig": {
        "gap_seed": (int, 0, "-", "seed of the hidden-parameter draw"),
        "mass_factor_min": (float, 0.8, "-", "lower mass/inertia scale factor"),
        "mass_factor_max": (float, 1.25, "-", "upper mass/inertia scale factor"),
        "damping_min": (float, 0.0, "N·m·s/rad", "lower hidden damping"),
        "damping_max": (float, 15.0, "N·m·s/rad", "upper hidden damping"),
        "force_pd_min": (float, 0.7, "-", "lower hidden force gain"),
        "force_pd_max": (float, 1.3, "-", "upper hidden force gain"),
        "noise_q": (float, 0.0, "rad", "position sensor noise std"),
        "noise_qd": (float, 0.0, "rad/s", "velocity sensor noise std"),
        "duration": (float, 6.0, "s", "rollout length"),
        "start": (_floats, hs.CANDLE, "rad", "start pose, J values"),
        "goal_offset": (_floats, (0.2, -0.2, 0.2, 0.2, -0.2, 0.2), "rad", "goal minus start pose, J values"),
    },
    "compare": {
        "wall_clock": (float, 300.0, "s", "time limit given to each solver"),
        "workers": (int, 4, "-", "workers given to each solver"),
        "hops": (int, 10, "-", "hops per worker"),
        "max_iter": (int, 100, "-", "iterations per local solve"),
    },
}
REQUIRED_SECTIONS = ("run", "model")


def schema_help() -> str:
    lines = ["config keys ([section] key: unit, default):"]
    for sec, keys in SCHEMA.items():
        lines.append(f"  [{sec}]")
        for key, (_, default, unit, text) in keys.items():
            d = " ".join(str(v) for v in default) if isinstance(default, tuple) else default
            lines.append(f"    {key} ({unit}, default {d}): {text}")
    return "\n".join(lines)


def bundled_config() -> str:
    return files("gradgap.data").joinpath("desk.ini").read_text(encoding="utf-8")


def parse_config(text: str, source: str = "<config>") -> dict:
    """Typed values for every schema key; unknown sections and keys are errors."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}]")
        for key in cp[sec]:
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key '{key}' in [{sec}]")
    for sec in REQUIRED_SECTIONS:
        if not cp.has_section(sec):
            raise ConfigError(f"{source}: missing required section [{sec}]")
    cfg = {}
    for sec, keys in SCHEMA.items():
        for key, (typ, default, _, _) in keys.items():
            if cp.has_option(sec, key):
                raw = cp.get(sec, key)
                try:
                    cfg[f"{sec}.{key}"] = typ(raw)
                except ValueError as exc:
                    raise ConfigError(f"{source}: bad value for {sec}.{key}: {raw!r}") from exc
            else:
                cfg[f"{sec}.{key}"] = default
    if cfg["sysid.solver"] not in ("unbounded", "bounded"):
        raise ConfigError(f"{source}: sysid.solver must be 'unbounded' or 'bounded'")
    return cfg


@dataclass
class Run:
    cfg: dict
    model: RobotModel
    pipeline: hs.PipelineConfig
    out: Path

    @property
    def spec(self) -> StepSpec:
        return self.pipeline.spec


def load_model(urdf: str, base: Path | None) -> RobotModel:
    if urdf == "desk_arm":
        return parse_urdf(files("gradgap.data").joinpath("desk_arm.urdf").read_text())
    path = Path(urdf)
    if not path.is_absolute() and base is not None:
        path = base / path
    return load_urdf(path)


def pipeline_config(cfg: dict, J: int) -> hs.PipelineConfig:
    g = cfg.get
    try:
        spec = StepSpec(g("integrator.dt"), g("integrator.substeps"))
        spec.check_rate()
        train = pol.TrainConfig(epochs=g("policy.epochs"), batch_size=g("policy.batch_size"),
                                learning_rate=g("policy.learning_rate"), val_fraction=g("policy.val_fraction"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for key in ("rig.start", "rig.goal_offset"):
        if len(g(key)) < J:
            raise ConfigError(f"{key} needs {J} values, got {len(g(key))}")
    if g("sysid.window_duration") < 0:
        raise ConfigError("sysid.window_duration must be non-negative")
    return hs.PipelineConfig(
        seed=g("run.seed"),
        spec=spec,
        K=g("trajopt.K"),
        horizon=g("trajopt.horizon"),
        weights={k: g(f"trajopt.{k}") for k in ("q_pos", "q_vel", "r", "qf_pos", "qf_vel")},
        torque_bound=g("trajopt.torque_bound"),
        shoot_intervals=g("trajopt.shoot_intervals") or None,
        sample_half_width=g("trajopt.sample_half_width"),
        collect_workers=g("run.threads"),
        trajopt_max_iter=g("trajopt.max_iter"),
        train=train,
        gap=hs.GapSpec((g("rig.mass_factor_min"), g("rig.mass_factor_max")),
                       (g("rig.damping_min"), g("rig.damping_max")),
                       (g("rig.force_pd_min"), g("rig.force_pd_max"))),
        gap_seed=g("rig.gap_seed"),
        noise_q=g("rig.noise_q"),
        noise_qd=g("rig.noise_qd"),
        rollout_duration=g("rig.duration"),
        goal_offset=tuple(g("rig.goal_offset")[:J]),
        start=tuple(g("rig.start")[:J]),
        window_start=g("sysid.window_start"),
        window_duration=g("sysid.window_duration"),
        alpha_gain=g("sysid.alpha_gain"),
        solver=g("sysid.solver"),
        sysid_workers=g("sysid.workers"),
        wall_clock=g("sysid.wall_clock"),
        hops=g("sysid.hops"),
        hop_scale=g("sysid.hop_scale"),
        sysid_max_iter=g("sysid.max_iter"),
    )


def load_run(args) -> Run:
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        cfg, base = parse_config(text, str(path)), path.parent
    else:
        cfg, base = parse_config(bundled_config(), "desk.ini"), None
    for flag, key in (("seed", "run.seed"), ("out", "run.out"), ("threads", "run.threads")):
        if getattr(args, flag, None) is not None:
            cfg[key] = getattr(args, flag)
    if cfg["run.threads"] < 1:
        raise ConfigError("run.threads must be at least 1")
    try:
        model = load_model(cfg["model.urdf"], base)
    except (OSError, ModelError) as exc:
        raise ConfigError(f"cannot load model: {exc}") from exc
    return Run(cfg, model, pipeline_config(cfg, model.actuated_joint_count), Path(cfg["run.out"]))


# ---------------------------------------------------------------------------
# artifacts


def _fmt(v) -> str:
    return "" if v is None else format(float(v), ".17g")


def _write_csv(path: Path, header, rows) -> None:
    lines = [",".join(header)] + [",".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_plot_data(model: RobotModel, obs, sims: dict, directory: Path) -> None:
    """``task_space.csv`` (end-effector x/y/z vs t) and ``joints.csv``
    (joint angles vs t) for the observed rollout and each named simulation.
    Diverged simulations leave their columns empty."""
    J = obs.J
    names = ["obs"] + list(sims)
    qs = [obs.q_obs] + [None if s is None else s.q for s in sims.values()]
    fk = [None if q is None else np.array([forward_kinematics(model, r) for r in q]) for q in qs]
    head = ["t"] + [f"{a}_{n}" for n in names for a in "xyz"]
    rows = []
    for i, t in enumerate(obs.sample_times):
        row = [_fmt(t)]
        for P in fk:
            row += [_fmt(None if P is None else v) for v in (P[i] if P is not None else (None,) * 3)]
        rows.append(row)
    _write_csv(directory / "task_space.csv", head, rows)
    head = ["t"] + [f"q{j}_{n}" for n in names for j in range(J)]
    rows = []
    for i, t in enumerate(obs.sample_times):
        row = [_fmt(t)]
        for q in qs:
            row += [_fmt(v) for v in q[i]] if q is not None else [""] * J
        rows.append(row)
    _write_csv(directory / "joints.csv", head, rows)


SUMMARY_KEYS = ["iteration", "K", "train_loss", "samples", "truncated", "residual_before", "residual_after",
                "full_residual_before", "full_residual_after", "euclid_before", "euclid_after", "flagged"]


def summary_csv(reports) -> str:
    lines = [",".join(SUMMARY_KEYS)]
    for r in reports:
        row = r.summary_row()
        lines.append(",".join(str(row[k]) if isinstance(row[k], int) else _fmt(row[k]) for k in SUMMARY_KEYS))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_pipeline(run: Run, args) -> int:
    if args.iterations < 0:
        raise ConfigError("--iterations must be non-negative")
    if args.iterations == 0:
        print("config ok: nothing to run")
        return EXIT_OK
    run.out.mkdir(parents=True, exist_ok=True)
    state = hs.PipelineState.create(run.model, run.pipeline)
    timings = []
    status = EXIT_OK
    for i in range(args.iterations):
        rep = hs.run_iteration(state, run.pipeline)
        d = run.out / f"iter_{i + 1}"
        hs.write_report(rep, run.model, d)
        sims = {"before": hs.replay(run.model, rep.params_before, rep.rollout, run.spec),
                "after": hs.replay(run.model, rep.params_after, rep.rollout, run.spec)}
        write_plot_data(run.model, rep.rollout, sims, d)
        timings.append(rep.timings | {"sysid_overrun": rep.overrun})
        print(f"iteration {rep.iteration}: residual {rep.residual_before:.6g} -> {rep.residual_after:.6g}, "
              f"euclid {rep.euclid_before:.6g} -> {rep.euclid_after:.6g} m, sysid {rep.sysid_status}")
        if rep.flagged:
            print(f"iteration {rep.iteration} flagged: {rep.sysid_status}", file=sys.stderr)
            status = EXIT_FAIL
    (run.out / "summary.csv").write_text(summary_csv(state.reports), encoding="utf-8")
    lines = [f"iteration {k + 1} {name}_s: {v:.3f}" for k, t in enumerate(timings) for name, v in t.items()]
    (run.out / "timings.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return status


def _window(text: str | None, run: Run) -> SysIdWindow:
    if text is None:
        return SysIdWindow(run.pipeline.window_start, run.pipeline.window_duration)
    try:
        start, dur = text.split(",")
        return SysIdWindow(int(start), float(dur))
    except ValueError as exc:
        raise ConfigError(f"--window must be 'start_tick,duration_s', got {text!r}") from exc


def _checked_window(window: SysIdWindow, obs) -> SysIdWindow:
    try:
        n = window.ticks(obs.period)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if window.start_index + n > obs.ticks:
        limit = (obs.ticks - window.start_index) * obs.period
        raise ConfigError(f"window of {window.duration} s from tick {window.start_index} exceeds the rollout; "
                          f"the limit is {max(limit, 0.0):.6g} s ({obs.ticks} ticks in total)")
    if n == 0:
        raise ConfigError("window duration must be positive")
    return window


def _load_rollout(path):
    try:
        return hs.load_rollout(path)
    except (OSError, hs.FormatError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _initial_params(run: Run, args):
    if getattr(args, "params", None):
        try:
            return hs.load_params(run.model, args.params)
        except (OSError, hs.FormatError) as exc:
            raise ConfigError(f"{args.params}: {exc}") from exc
    return default_params(run.model)


def _hop(run: Run, p0, window, obs, reg, solver, workers, wall_clock, hops, max_iter, seed):
    x0 = flatten(p0)
    bounds = default_bounds(run.model, p0) if solver == "bounded" else None
    p, rep = basin_hop(run.model, p0, window, obs, reg, solver, workers, wall_clock,
                       hop_scale=run.pipeline.hop_scale * np.where(x0 == 0, 1.0, np.abs(x0)), seed=seed,
                       bounds=bounds, hops=hops, budget=Budget(max_iter), spec=run.spec)
    return p, rep, residual(run.model, p, window, obs, reg, run.spec).value


def cmd_compare_solvers(run: Run, args) -> int:
    obs = _load_rollout(args.rollout)
    window = _checked_window(_window(args.window, run), obs)
    p0 = _initial_params(run, args)
    c = run.cfg
    seed = hs._seed(run.pipeline.seed, 99)
    reg = RegularizerSpec.zero(p0)  # the comparison uses the data term alone
    out = {}
    for solver in ("unbounded", "bounded"):
        p, rep, r = _hop(run, p0, window, obs, reg, solver, c["compare.workers"], c["compare.wall_clock"],
                         c["compare.hops"], c["compare.max_iter"], seed)
        out[f"residual_{solver}"] = r
        out[f"euclid_{solver}"] = hs.task_space_error(run.model, obs, hs.replay(run.model, p, obs, run.spec))
        out[f"time_{solver}_s"] = rep.wall_time
    run.out.mkdir(parents=True, exist_ok=True)
    keys = ["residual_unbounded", "residual_bounded", "euclid_unbounded", "euclid_bounded"]
    text = "".join(f"{k}: {_fmt(out[k])}\n" for k in keys)
    (run.out / "compare.txt").write_text(text, encoding="utf-8")
    (run.out / "compare_timings.txt").write_text(
        "".join(f"{k}: {out[k]:.3f}\n" for k in ("time_unbounded_s", "time_bounded_s")), encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_collect(run: Run, args) -> int:
    pc = run.pipeline
    p = _initial_params(run, args)
    K = args.K if args.K is not None else pc.K
    sampler = StateSampler.around(pc.start_pose(run.model), pc.sample_half_width)
    t = time.perf_counter()
    data = collect_dataset(run.model, p, K, sampler, pc.horizon, hs._seed(pc.seed, 0, 1), spec=run.spec,
                           torque_bounds=pc.torque_bounds(run.model), shoot_intervals=pc.shoot_intervals,
                           weights=pc.weights, workers=pc.collect_workers, max_iter=pc.trajopt_max_iter)
    run.out.mkdir(parents=True, exist_ok=True)
    hs.save_dataset(data, run.out / "dataset.csv")
    print(f"collected {len(data)} trajectories in {time.perf_counter() - t:.1f} s")
    return EXIT_OK


def cmd_train(run: Run, args) -> int:
    try:
        data = hs.load_dataset(args.dataset)
    except (OSError, hs.FormatError) as exc:
        raise ConfigError(f"{args.dataset}: {exc}") from exc
    J = data[0].q.shape[1]
    if J != run.model.actuated_joint_count:
        raise ConfigError(f"dataset has {J} joints, the model has {run.model.actuated_joint_count}")
    pc = run.pipeline
    res = pol.train(pol.init(J, hs._seed(pc.seed, 0, 3)), data, replace(pc.train, seed=hs._seed(pc.seed, 0, 2)))
    run.out.mkdir(parents=True, exist_ok=True)
    pol.save(res.net, run.out / "policy.json")
    rows = [[str(k + 1), _fmt(v), _fmt(res.val_curve[k]) if k < len(res.val_curve) else ""]
            for k, v in enumerate(res.loss_curve)]
    _write_csv(run.out / "loss.csv", ["epoch", "train_mse", "val_mse"], rows)
    print(f"final training MSE {res.final_loss:.6g} (N·m)^2")
    return EXIT_OK


def _rig(run: Run) -> hs.VirtualRig:
    pc = run.pipeline
    hidden = hs.make_gap(run.model, default_params(run.model), pc.gap, pc.gap_seed)
    return hs.VirtualRig(run.model, hidden, run.spec, (pc.noise_q, pc.noise_qd), seed=pc.seed,
                         start=pc.start_pose(run.model))


def cmd_rollout(run: Run, args) -> int:
    try:
        net = pol.load(args.policy)
    except (OSError, pol.FormatError) as exc:
        raise ConfigError(f"{args.policy}: {exc}") from exc
    if net.J != run.model.actuated_joint_count:
        raise ConfigError(f"policy has {net.J} joints, the model has {run.model.actuated_joint_count}")
    pc = run.pipeline
    rig = _rig(run)
    obs = hs.rig_rollout(rig, net, pc.goal(run.model), pc.rollout_duration)
    run.out.mkdir(parents=True, exist_ok=True)
    hs.save_rollout(obs, run.out / "rollout.csv")
    sim = hs.replay(run.model, default_params(run.model), obs, run.spec)
    write_plot_data(run.model, obs, {"sim": sim}, run.out)
    print(f"{len(obs.q_obs)} samples{' (truncated at the safety box)' if rig.truncated else ''}")
    return EXIT_OK


def cmd_sysid(run: Run, args) -> int:
    obs = _load_rollout(args.rollout)
    window = _checked_window(_window(args.window, run), obs)
    p0 = _initial_params(run, args)
    pc = run.pipeline
    reg = RegularizerSpec.scaled(p0, pc.alpha_gain)
    r0 = residual(run.model, p0, window, obs, reg, run.spec).value
    p, rep, r1 = _hop(run, p0, window, obs, reg, pc.solver, pc.sysid_workers, pc.wall_clock, pc.hops,
                      pc.sysid_max_iter, hs._seed(pc.seed, 0, 4))
    run.out.mkdir(parents=True, exist_ok=True)
    hs.save_params(run.model, p, run.out / "params.csv")
    e0 = hs.task_space_error(run.model, obs, hs.replay(run.model, p0, obs, run.spec))
    e1 = hs.task_space_error(run.model, obs, hs.replay(run.model, p, obs, run.spec))
    text = (f"solver: {pc.solver}\nresidual_before: {_fmt(r0)}\nresidual_after: {_fmt(r1)}\n"
            f"euclid_before: {_fmt(e0)}\neuclid_after: {_fmt(e1)}\n")
    (run.out / "sysid.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return EXIT_OK


def cmd_gradcheck(run: Run, args) -> int:
    pc = run.pipeline
    if pc.window_duration <= 0:
        raise ConfigError("sysid.window_duration is zero: a gradient check needs data")
    p = default_params(run.model)
    hidden = hs.make_gap(run.model, p, pc.gap, pc.gap_seed)
    obs, window = random_window(run.model, hidden, pc.seed, run.spec, pc.window_duration, pc.start_pose(run.model))
    grad_fn = None
    if args.corrupt_param is not None:
        k = args.corrupt_param

        def grad_fn(obj, x):
            g = np.array(obj.value_and_grad(x)[1])
            g[k] = g[k] * 1.01 + 1e-3
            return g

    rng = np.random.default_rng(hs._seed(pc.seed, 5))
    J = run.model.actuated_joint_count
    state = JointState(pc.start_pose(run.model) + rng.uniform(-0.3, 0.3, J), rng.uniform(-1, 1, J))
    tau = rng.uniform(-2, 2, J)
    suites = {
        "dynamics": dynamics_gradient_check(run.model, p, state, tau),
        "residual": residual_gradient_check(run.model, p, window, obs, RegularizerSpec.scaled(p, pc.alpha_gain),
                                            run.spec, grad_fn=grad_fn),
    }
    ok = True
    for name, chk in suites.items():
        for group, err in chk.groups.items():
            good = err <= GRADCHECK_TOL
            ok &= good
            print(f"{name:9s} {group:9s} max rel error {err:.3e} {'ok' if good else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="INI run config (default: bundled desk.ini)")
    common.add_argument("--seed", type=int, help="override [run] seed")
    common.add_argument("--out", help="override [run] out")
    common.add_argument("--threads", type=int, help="override [run] threads")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p = argparse.ArgumentParser(prog="gradgap", description=__doc__, epilog=schema_help(), formatter_class=fmt,
                                parents=[common])
    p.add_argument("--version", action="version", version=f"gradgap {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, text):
        sp = sub.add_parser(name, help=text, description=text, epilog=schema_help(), formatter_class=fmt,
                            parents=[common])
        sp.set_defaults(func=func)
        return sp

    sp = add("pipeline", cmd_pipeline, "run M iterations of collect, train, rig rollout and identification")
    sp.add_argument("--iterations", type=int, default=1, help="iterations M (0 only validates the config)")
    sp = add("compare-solvers", cmd_compare_solvers, "bounded vs unbounded identification under equal budgets")
    sp.add_argument("--rollout", required=True, help="rollout CSV")
    sp.add_argument("--window", help="start_tick,duration_s (default from [sysid])")
    sp.add_argument("--params", help="initial parameters CSV (default: URDF nominal)")
    sp = add("collect", cmd_collect, "collect optimal trajectories into dataset.csv")
    sp.add_argument("--K", type=int, help="override [trajopt] K")
    sp.add_argument("--params", help="simulator parameters CSV (default: URDF nominal)")
    sp = add("train", cmd_train, "train a policy on dataset.csv into policy.json")
    sp.add_argument("--dataset", required=True, help="dataset CSV written by collect")
    sp = add("rollout", cmd_rollout, "run a policy on the virtual rig into rollout.csv")
    sp.add_argument("--policy", required=True, help="policy JSON written by train")
    sp = add("sysid", cmd_sysid, "identify parameters from a rollout CSV")
    sp.add_argument("--rollout", required=True, help="rollout CSV")
    sp.add_argument("--window", help="start_tick,duration_s (default from [sysid])")
    sp.add_argument("--params", help="initial parameters CSV (default: URDF nominal)")
    sp = add("gradcheck", cmd_gradcheck, f"finite-difference gradient suites (fails above {GRADCHECK_TOL:g})")
    sp.add_argument("--corrupt-param", type=int, help="test hook: perturb one analytic partial")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        run = load_run(args)
        return args.func(run, args)
    except ConfigError as exc:
        print(f"gradgap: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # component failure
        log.debug("failure", exc_info=True)
        print(f"gradgap: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
