import numpy as np
import pytest

from koopctl.envs import (
    CartPole,
    Pendulum,
    SimulationError,
    make_env,
    wrap_angle,
)

# recorded once from the initial implementation; guards the reset layout
# and the draw order of the seeded generator
CARTPOLE_SEED_42_RESET = np.array(
    [0.0, 0.027395604855596334, 3.1354804975649984, 0.03585979199113824]
)


def test_reset_is_deterministic_per_seed():
    for env in (Pendulum(), CartPole()):
        for seed in (0, 1, 12345):
            assert np.array_equal(env.reset(seed), env.reset(seed))


def test_pendulum_reset_starts_hanging():
    for seed in range(30):
        theta, theta_dot = Pendulum().reset(seed)
        assert np.pi - 0.05 <= abs(theta) <= np.pi
        assert abs(theta_dot) <= 0.05


def test_cartpole_reset_fixture():
    assert np.array_equal(CartPole().reset(42), CARTPOLE_SEED_42_RESET)


def test_cartpole_reset_layout():
    for seed in range(10):
        x, x_dot, theta, theta_dot = CartPole().reset(seed)
        assert x == 0.0
        assert abs(x_dot) <= 0.05 and abs(theta_dot) <= 0.05
        assert np.pi - 0.05 <= abs(theta) <= np.pi


def test_pendulum_down_equilibrium():
    env = Pendulum()
    state = np.array([np.pi, 0.0])
    next_state, reward, done = env.step(state, [0.0])
    assert np.allclose(next_state, [np.pi, 0.0], atol=1e-15)
    assert reward == pytest.approx(0.0, abs=1e-15)
    assert not done


def test_pendulum_upright_equilibrium():
    next_state, reward, done = Pendulum().step(np.array([0.0, 0.0]), [0.0])
    assert np.array_equal(next_state, [0.0, 0.0])
    assert reward == 1.0


def test_pendulum_step_against_hand_integrator():
    # independent semi-implicit Euler, written out longhand
    m = l = 1.0
    g, gain, b, dt = 9.81, 2.0, 0.05, 0.02
    theta, theta_dot, u = np.pi / 2, 0.0, 0.0
    acc = (g / l) * np.sin(theta) + (gain * u - b * theta_dot) / (m * l * l)
    theta_dot_next = theta_dot + dt * acc
    theta_next = theta + dt * theta_dot_next

    got, _, _ = Pendulum().step(np.array([np.pi / 2, 0.0]), [0.0])
    assert abs(got[0] - theta_next) < 1e-12
    assert abs(got[1] - theta_dot_next) < 1e-12


def test_cartpole_step_against_hand_integrator():
    mc, mp, l, g, gain, dt = 1.0, 0.1, 0.5, 9.81, 10.0, 0.02
    x, x_dot, theta, theta_dot = 0.1, -0.2, 2.5, 0.3
    u = 0.5
    force = gain * u
    total = mc + mp
    sin, cos = np.sin(theta), np.cos(theta)
    temp = (force + mp * l * theta_dot**2 * sin) / total
    theta_acc = (g * sin - cos * temp) / (l * (4.0 / 3.0 - mp * cos**2 / total))
    x_acc = temp - mp * l * theta_acc * cos / total
    x_dot_n = x_dot + dt * x_acc
    x_n = x + dt * x_dot_n
    theta_dot_n = theta_dot + dt * theta_acc
    theta_n = theta + dt * theta_dot_n

    got, _, _ = CartPole().step(np.array([x, x_dot, theta, theta_dot]), [u])
    assert np.allclose(got, [x_n, x_dot_n, theta_n, theta_dot_n], atol=1e-12)


def test_step_is_pure_and_bitwise_repeatable():
    for env in (Pendulum(), CartPole()):
        state = env.reset(7)
        a = env.step(state, [0.3])
        b = env.step(state, [0.3])
        assert np.array_equal(a.next_state, b.next_state)
        assert a.reward == b.reward and a.done == b.done


def test_pendulum_energy_drift_small():
    # undamped, unforced; symplectic Euler wobbles within a bounded band
    # over each orbit, so drift is measured on half-trajectory means rather
    # than instantaneous values
    env = Pendulum(damping=0.0)
    scale = env.mass * env.gravity * env.length
    for start in (np.array([2.0, 0.0]), np.array([3.0, 0.5]), np.array([1.0, -1.0])):
        state = start
        energies = [env.energy(state)]
        for _ in range(1000):
            state, _, _ = env.step(state, [0.0])
            energies.append(env.energy(state))
        e = np.array(energies)
        half = len(e) // 2
        drift = abs(e[half:].mean() - e[:half].mean())
        assert drift / scale < 0.01
        assert np.abs(e - e[0]).max() / scale < 0.06  # bounded wobble too


def test_reward_bounds():
    for env in (Pendulum(), CartPole()):
        rng = np.random.default_rng(1)
        state = env.reset(0)
        for _ in range(200):
            state, reward, done = env.step(state, rng.uniform(-1, 1, 1))
            assert 0.0 <= reward <= 1.0
            if done:
                state = env.reset(rng.integers(1 << 30))


def test_reward_is_one_iff_upright():
    # pendulum: r == 1 requires cos(theta) == 1
    _, r_up, _ = Pendulum().step(np.array([0.0, 0.0]), [0.0])
    assert r_up == 1.0
    _, r_off, _ = Pendulum().step(np.array([0.3, 0.0]), [0.0])
    assert r_off < 1.0

    # cartpole: needs upright pole and centred cart
    _, r, _ = CartPole().step(np.array([0.0, 0.0, 0.0, 0.0]), [0.0])
    assert r == 1.0
    _, r_cart_off, _ = CartPole().step(np.array([1.0, 0.0, 0.0, 0.0]), [0.0])
    assert r_cart_off < 1.0


def test_cartpole_track_bound_terminates():
    env = CartPole()
    state = np.array([2.39, 2.0, 0.0, 0.0])
    result = env.step(state, [1.0])
    assert abs(result.next_state[0]) > env.x_limit
    assert result.done


def test_angle_wrapping():
    assert wrap_angle(np.pi) == np.pi
    assert wrap_angle(-np.pi) == np.pi
    assert wrap_angle(3 * np.pi) == np.pi
    assert abs(wrap_angle(2 * np.pi)) < 1e-15
    assert wrap_angle(0.5) == pytest.approx(0.5)
    env = Pendulum()
    state = np.array([np.pi - 0.01, 5.0])  # spinning through the bottom
    for _ in range(50):
        state, _, _ = env.step(state, [0.0])
        assert -np.pi < state[0] <= np.pi


def test_control_is_clipped():
    env = Pendulum()
    state = np.array([1.0, 0.0])
    big = env.step(state, [50.0])
    capped = env.step(state, [1.0])
    assert np.array_equal(big.next_state, capped.next_state)


def test_non_finite_inputs_rejected():
    env = Pendulum()
    with pytest.raises(SimulationError):
        env.step(np.array([np.nan, 0.0]), [0.0])
    with pytest.raises(SimulationError):
        env.step(np.array([0.0, 0.0]), [np.inf])


def test_make_env():
    assert make_env("pendulum").name == "pendulum"
    assert make_env("cartpole").name == "cartpole"
    with pytest.raises(ValueError):
        make_env("cheetah")
