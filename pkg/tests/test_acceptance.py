"""Acceptance criteria, each run at its stated tolerance.

Every test records one ``criterion N: PASS/FAIL`` line that is echoed in the
terminal summary.  Select them with ``-m acceptance`` or skip them with
``-m "not acceptance"``.
"""

import hashlib
import math
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, PENDULUM_URDF, TWO_LINK_URDF
from test_dynamics import lagrangian_two_link
from test_policy import linear_pairs
from test_sysid import EXACT, pendulum_obs, truth
from test_trajopt import free_bar, riccati_controls

from gradgap import cli
from gradgap import harness as hs
from gradgap import policy as pol
from gradgap.checks import random_window, residual_gradient_check
from gradgap.dynamics import JointState, StepSpec, forward_dynamics
from gradgap.model import default_params, flatten, parse_urdf
from gradgap.sysid import (
    Budget,
    RegularizerSpec,
    SysIdWindow,
    basin_hop,
    default_bounds,
    optimize_bounded,
    optimize_unbounded,
    residual,
)
from gradgap.trajopt import QuadraticCost, StateSampler, TrajOptProblem, collect_dataset, solve

pytestmark = pytest.mark.acceptance

SPEC = StepSpec()
SEEDS = range(5)
# pipeline settings for the five seeded runs: the shipped defaults except a
# smaller dataset and a single local sysid solve, to keep the suite near an hour
PIPELINE = dict(K=50, hops=0, sysid_max_iter=100)


def verdict(n, title, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_gradient_fidelity(desk):
    t = time.perf_counter()
    worst = {}
    p = default_params(desk)
    for seed in range(10):
        hidden = hs.make_gap(desk, p, seed=seed)
        obs, window = random_window(desk, hidden, seed, SPEC, 0.2, start=hs.CANDLE)
        chk = residual_gradient_check(desk, p, window, obs, RegularizerSpec.scaled(p), SPEC)
        assert len(chk.analytic) == 3 + 7 + 2 * 6 + 3 * 7
        worst[seed] = chk.max_error
    elapsed = time.perf_counter() - t
    ok = max(worst.values()) <= 1e-4 and elapsed < 300
    verdict(1, "gradient fidelity", ok,
            f"max rel error {max(worst.values()):.2e} (tol 1e-4) over 10 seeds in {elapsed:.0f} s (limit 300)")


def test_criterion_2_dynamics_oracle():
    model = parse_urdf(TWO_LINK_URDF)
    p = default_params(model)
    rng = np.random.default_rng(2)
    t = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        q, qd, tau = rng.uniform(-math.pi, math.pi, 2), rng.uniform(-5, 5, 2), rng.uniform(-10, 10, 2)
        a = forward_dynamics(model, p, JointState(q, qd), tau)
        worst = max(worst, float(np.max(np.abs(a - lagrangian_two_link(q, qd, tau)))))
    elapsed = time.perf_counter() - t
    verdict(2, "dynamics oracle", worst <= 1e-8 and elapsed < 60,
            f"max abs error {worst:.2e} (tol 1e-8) over 1000 states in {elapsed:.1f} s (limit 60)")


def test_criterion_3_trajectory_optimiser(desk, bar):
    cost = QuadraticCost.default([1.0])
    prob = TrajOptProblem(bar, free_bar(bar), JointState.at_rest([0.0]), cost, 25, [[-100, 100]], spec=SPEC)
    tr, rep = solve(prob)
    U = riccati_controls([0.0, 0.0], np.array([1.0, 0.0]), 25, np.diag([10.0, 1.0]), np.diag([0.01]),
                         np.diag([1000.0, 10.0]))
    riccati = float(np.max(np.abs(tr.u[:, 0] - U)) / np.max(np.abs(U)))

    cfg = hs.PipelineConfig()
    bounds = cfg.torque_bounds(desk)
    workers = min(8, os.cpu_count() or 1)
    t = time.perf_counter()
    data = collect_dataset(desk, default_params(desk), 450, StateSampler.around(cfg.start_pose(desk), 0.3), 25,
                           seed=3, spec=SPEC, torque_bounds=bounds, workers=workers)
    elapsed = time.perf_counter() - t
    inside = all(np.all(d.u >= bounds[:, 0]) and np.all(d.u <= bounds[:, 1]) for d in data)
    ok = rep.converged and riccati <= 1e-3 and inside and len(data) == 450 and elapsed < 600
    verdict(3, "trajectory optimiser", ok,
            f"Riccati rel error {riccati:.1e} (tol 1e-3); torque box respected: {inside}; "
            f"450 trajectories in {elapsed:.0f} s on {workers} worker(s) (limit 600)")


def test_criterion_4_sysid_recovery():
    model = parse_urdf(PENDULUM_URDF)
    p0 = default_params(model)
    obs = pendulum_obs(model, truth(model), spec=EXACT)
    window = SysIdWindow(0, 0.2)
    reg = RegularizerSpec.zero(p0)
    t = time.perf_counter()
    _, ru = optimize_unbounded(model, p0, window, obs, reg, Budget(500), spec=EXACT)
    _, rb = optimize_bounded(model, p0, default_bounds(model, p0), window, obs, reg, Budget(500), spec=EXACT)
    elapsed = time.perf_counter() - t
    ratios = ru.f_final / ru.f_initial, rb.f_final / rb.f_initial
    ok = max(ratios) <= 1e-8 and elapsed < 300
    verdict(4, "sysid recovery", ok,
            f"residual ratio unbounded {ratios[0]:.1e}, bounded {ratios[1]:.1e} (tol 1e-8) in {elapsed:.1f} s")


@pytest.fixture(scope="module")
def seeded_runs(desk):
    """Two pipeline iterations on the default gap for each of five seeds."""
    runs = {}
    for seed in SEEDS:
        cfg = hs.PipelineConfig(seed=seed, gap_seed=seed, **PIPELINE)
        state = hs.PipelineState.create(desk, cfg)
        runs[seed] = [hs.run_iteration(state, cfg) for _ in range(2)]
    return runs


def test_criterion_5_headline_ratio(seeded_runs):
    ratios, decreased, slowest = {}, {}, 0.0
    for seed, (first, _) in seeded_runs.items():
        ratios[seed] = first.full_residual_after / first.full_residual_before
        decreased[seed] = first.euclid_after < first.euclid_before
        slowest = max(slowest, sum(first.timings.values()))
    hits = sum(r <= 1 / 3 for r in ratios.values())
    ok = hits >= 3 and all(decreased.values()) and slowest < 1800
    detail = ", ".join(f"{r:.3f}" for r in ratios.values())
    verdict(5, "one-iteration residual ratio", ok,
            f"full-rollout ratios [{detail}], {hits}/5 at or below 1/3 (need 3); "
            f"task-space error decreased on {sum(decreased.values())}/5; slowest iteration {slowest:.0f} s")


def test_criterion_6_second_iteration(seeded_runs):
    pairs = {s: (a.residual_after, b.residual_after) for s, (a, b) in seeded_runs.items()}
    hits = sum(b < a for a, b in pairs.values())
    detail = ", ".join(f"{a:.3g}->{b:.3g}" for a, b in pairs.values())
    verdict(6, "second-iteration improvement", hits >= 3, f"sysid residual [{detail}], {hits}/5 improved (need 3)")


def test_criterion_7_bounded_vs_unbounded(desk, seeded_runs):
    obs = seeded_runs[0][0].rollout
    p0 = default_params(desk)
    window = SysIdWindow(0, 0.2)
    reg = RegularizerSpec.zero(p0)  # data term only for this comparison
    x0 = flatten(p0)
    hop = 0.05 * np.where(x0 == 0, 1.0, np.abs(x0))
    out = {}
    for solver in ("unbounded", "bounded"):
        bounds = default_bounds(desk, p0) if solver == "bounded" else None
        p, rep = basin_hop(desk, p0, window, obs, reg, solver, workers=1, wall_clock=120.0, hop_scale=hop, seed=7,
                           bounds=bounds, hops=10, budget=Budget(100), spec=SPEC)
        out[solver] = (residual(desk, p, window, obs, reg, SPEC).value, rep.wall_time)
    (ru, tu), (rb, tb) = out["unbounded"], out["bounded"]
    verdict(7, "bounded vs unbounded", ru <= rb,
            f"window residual unbounded {ru:.4g} ({tu:.0f} s), bounded {rb:.4g} ({tb:.0f} s); "
            f"120 s each, 1 worker, same seed")


def _csv_digests(root):
    return {str(f.relative_to(root)): hashlib.sha256(f.read_bytes()).hexdigest() for f in sorted(root.rglob("*.csv"))}


def test_criterion_8_determinism(tmp_path):
    config = tmp_path / "run.ini"
    config.write_text(
        "[run]\nseed = 4\nthreads = 2\nout = out\n[model]\nurdf = desk_arm\n"
        "[trajopt]\nK = 4\nhorizon = 10\n[policy]\nepochs = 5\n"
        "[sysid]\nhops = 1\nmax_iter = 10\n[rig]\nduration = 1.0\n"
    )
    digests = []
    for attempt in range(2):
        out = tmp_path / "out"
        code = cli.main(["pipeline", "--config", str(config), "--out", str(out), "--iterations", "2"])
        assert code == 0
        digests.append(_csv_digests(out))
        out.rename(tmp_path / f"run{attempt}")
    same = digests[0] == digests[1]
    verdict(8, "determinism", same and len(digests[0]) == 2 * 4 + 1,
            f"{len(digests[0])} CSV artifacts, byte-identical across two runs: {same}")


def test_criterion_9_policy_training():
    X, Y = linear_pairs(6, 11250, seed=9)
    t = time.perf_counter()
    res = pol.train(pol.init(6, 0), None, pol.TrainConfig(epochs=100, val_fraction=0.0), pairs=(X, Y))
    elapsed = time.perf_counter() - t
    ok = res.final_loss < 1e-4 and elapsed < 300
    verdict(9, "policy training", ok,
            f"final MSE {res.final_loss:.2e} (tol 1e-4) after 100 epochs over 11250 pairs in {elapsed:.0f} s "
            f"(limit 300)")
