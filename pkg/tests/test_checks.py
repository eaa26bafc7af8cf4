import numpy as np
import pytest

from gradgap.checks import dynamics_gradient_check, random_window, relative_errors, residual_gradient_check
from gradgap.dynamics import JointState, StepSpec
from gradgap.model import default_params, flatten, unflatten
from gradgap.sysid import RegularizerSpec, SysIdWindow

SPEC = StepSpec(1e-3, 40)


def hidden(model):
    x = flatten(default_params(model))
    x[model.link_count + 3 :] *= 1.1
    return unflatten(model, x)


def reg(model):
    return RegularizerSpec.scaled(default_params(model), 0.1)


def test_relative_error_floor():
    err = relative_errors([1.0, 0.0, 2.0], [1.0, 1e-9, 2.0 + 2e-6])
    assert err[0] == 0.0
    assert err[1] == pytest.approx(1e-9 / 2e-6)
    assert err[2] == pytest.approx(2e-6 / (2 + 2e-6), rel=1e-9)


def test_residual_gradient_matches_differences(two_link):
    obs, window = random_window(two_link, hidden(two_link), seed=3, spec=SPEC)
    chk = residual_gradient_check(two_link, default_params(two_link), window, obs, reg(two_link), SPEC)
    assert chk.passed(1e-4), chk.groups
    assert set(chk.groups) == {"gravity", "masses", "damping", "force_pd", "inertias"}


def test_corrupted_partial_is_detected(two_link):
    obs, window = random_window(two_link, hidden(two_link), seed=3, spec=SPEC)

    def bad(obj, x):
        g = obj.value_and_grad(x)[1].copy()
        g[two_link.link_count + 3] *= 1.01  # first damping entry
        return g

    chk = residual_gradient_check(two_link, default_params(two_link), window, obs, reg(two_link), SPEC, grad_fn=bad)
    assert not chk.passed(1e-4)
    assert chk.groups["damping"] > 1e-3
    assert chk.groups["masses"] < 1e-4


def test_zero_window_is_rejected(pendulum):
    obs, _ = random_window(pendulum, hidden(pendulum), seed=0, spec=SPEC)
    with pytest.raises(ValueError, match="zero-duration"):
        residual_gradient_check(pendulum, default_params(pendulum), SysIdWindow(0.0, 0.0), obs, reg(pendulum), SPEC)


@pytest.mark.parametrize("seed", range(3))
def test_dynamics_gradient_matches_differences(two_link, seed):
    rng = np.random.default_rng(seed)
    state = JointState(rng.uniform(-2, 2, 2), rng.uniform(-3, 3, 2))
    chk = dynamics_gradient_check(two_link, hidden(two_link), state, rng.uniform(-2, 2, 2))
    assert chk.passed(1e-6), chk.groups
    assert chk.analytic.shape == (2, len(flatten(default_params(two_link))))


def test_random_window_is_seeded(pendulum):
    a, w = random_window(pendulum, hidden(pendulum), seed=4, spec=SPEC)
    b, _ = random_window(pendulum, hidden(pendulum), seed=4, spec=SPEC)
    assert np.array_equal(a.q_obs, b.q_obs) and w.duration == pytest.approx(0.2)
    assert a.ticks == 5
