import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradreg import FAdamConfig, FAdamState, fadam_step, lr_schedule
from gradreg.fadam import DivergenceError

from oracles import adam_step

# updates needed to reach f < 1e-2 at lr=1e-2, recorded from the first run
ROSENBROCK_FIRST_HIT = 2921


def rosenbrock(p):
    x, y = p
    return (1 - x) ** 2 + 100 * (y - x * x) ** 2


def rosenbrock_grad(p):
    x, y = p
    return np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)])


def run_rosenbrock(cfg, steps):
    p = np.array([-1.2, 1.0])
    state = FAdamState.zeros(2)
    for k in range(steps):
        if rosenbrock(p) < 1e-2:
            return k, p
        p, state = fadam_step(p, rosenbrock_grad(p), state, cfg)
    return None, p


def test_hand_trace():
    cfg = FAdamConfig(lr=1.0, beta2=0.999, rho=0.5, clip=1.0)
    theta, state = fadam_step(np.array([0.0]), np.array([1.0]), FAdamState.zeros(1), cfg)
    assert state.t == 1
    assert state.v[0] == pytest.approx(0.001, abs=1e-15)
    # v_hat = 1, so the natural gradient is 1 / (1 + eps) and m = 0.1 of that
    assert abs(-theta[0] - 0.1 / (1.0 + 1e-8)) < 1e-12
    assert abs(-theta[0] - 0.1) < 1e-8


def test_zero_gradient_coasts():
    cfg = FAdamConfig(lr=0.5)
    state = FAdamState(np.array([0.2, -0.4]), np.array([0.3, 0.1]), 5)
    theta, new = fadam_step(np.array([1.0, 1.0]), np.zeros(2), state, cfg)
    np.testing.assert_allclose(new.m, 0.9 * state.m)
    np.testing.assert_allclose(new.v, 0.999 * state.v)
    np.testing.assert_allclose(theta, 1.0 - 0.5 * new.m)
    theta, _ = fadam_step(np.array([1.0]), np.zeros(1), FAdamState.zeros(1), cfg)
    assert theta[0] == 1.0


def test_quadratic():
    x = np.array([1.0])
    state = FAdamState.zeros(1)
    cfg = FAdamConfig(lr=0.1)
    for step in range(200):
        if abs(x[0]) < 1e-2:
            break
        x, state = fadam_step(x, 2 * x, state, cfg)
    assert abs(x[0]) < 1e-2


def test_rosenbrock_regression():
    hit, p = run_rosenbrock(FAdamConfig(lr=1e-2), 20_000)
    assert hit == ROSENBROCK_FIRST_HIT
    assert rosenbrock(p) < 1e-2


def test_matches_adam_without_momentum():
    # with beta1 = 0 and no clipping the update is Adam's, with eps on the root
    rng = np.random.default_rng(7)
    theta_f = theta_a = rng.standard_normal(5)
    state = FAdamState.zeros(5)
    m = v = np.zeros(5)
    t = 0
    cfg = FAdamConfig(lr=0.05, beta1=0.0, clip=1e12)
    for _ in range(30):
        g = rng.standard_normal(5)
        theta_f, state = fadam_step(theta_f, g, state, cfg)
        theta_a, m, v, t = adam_step(theta_a, g, m, v, t, lr=0.05, b1=0.0)
    np.testing.assert_allclose(theta_f, theta_a, rtol=1e-12, atol=1e-14)


def test_errors():
    cfg = FAdamConfig(lr=0.1)
    with pytest.raises(DivergenceError, match="divergent gradient"):
        fadam_step(np.zeros(2), np.array([1.0, np.inf]), FAdamState.zeros(2), cfg)
    with pytest.raises(ValueError, match="length mismatch"):
        fadam_step(np.zeros(2), np.zeros(3), FAdamState.zeros(2), cfg)


@pytest.mark.parametrize(
    "bad",
    [dict(lr=0), dict(lr=1, beta1=1.0), dict(lr=1, beta2=-0.1), dict(lr=1, eps=0), dict(lr=1, rho=0),
     dict(lr=1, rho=1.5), dict(lr=1, clip=0), dict(lr=1, weight_decay=-1)],
)
def test_config_validation(bad):
    with pytest.raises(ValueError):
        FAdamConfig(**bad)


def test_lr_schedule():
    assert lr_schedule(0, 100, 0.2) == 0.2
    assert lr_schedule(100, 100, 0.2) == 0.0
    assert lr_schedule(50, 100, 1.0) == pytest.approx(0.5**0.9, abs=1e-15)
    assert lr_schedule(50, 100, 1.0) == pytest.approx(0.5359, abs=1e-4)
    with pytest.raises(ValueError):
        lr_schedule(101, 100, 1.0)


@settings(max_examples=50, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    steps=st.integers(1, 20),
    clip=st.floats(0.1, 10),
    wd=st.sampled_from([0.0, 0.01, 0.5]),
    scale=st.floats(1e-3, 1e3),
)
def test_properties(seed, steps, clip, wd, scale):
    rng = np.random.default_rng(seed)
    cfg = FAdamConfig(lr=0.1, clip=clip, weight_decay=wd)
    theta = rng.standard_normal(6)
    state = FAdamState.zeros(6)
    for _ in range(steps):
        g = scale * rng.standard_normal(6)
        a1 = fadam_step(theta, g, state, cfg)
        a2 = fadam_step(theta, g, state, cfg)
        assert np.array_equal(a1[0], a2[0]) and np.array_equal(a1[1].m, a2[1].m)
        new_theta, new_state = a1
        assert (new_state.v >= 0).all()
        assert new_state.t == state.t + 1
        # momentum averages clipped gradients, so its RMS obeys the clip
        assert np.sqrt(np.mean(new_state.m**2)) <= clip * (1 + 1e-12)
        fisher = np.sqrt(new_state.v / (1 - cfg.beta2**new_state.t)) + cfg.eps
        decay = theta / fisher if wd > 0 else 0.0
        step = np.abs(new_theta - theta - (-cfg.lr * wd * decay))
        assert np.sqrt(np.mean(step**2)) <= cfg.lr * clip * (1 + 1e-9)
        theta, state = new_theta, new_state


@settings(max_examples=50, deadline=None)
@given(g=st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), clip=st.floats(0.1, 10))
def test_scalar_step_bound(g, clip):
    cfg = FAdamConfig(lr=0.3, clip=clip, weight_decay=0.0)
    theta, state = np.array([0.5]), FAdamState.zeros(1)
    for gi in g:
        new, state = fadam_step(theta, np.array([gi]), state, cfg)
        assert abs(new[0] - theta[0]) <= cfg.lr * clip * (1 + 1e-12)
        theta = new
