import numpy as np
import pytest
from hypothesis import given, strategies as st

from wasspo import autodiff as ad
from wasspo import envs
from wasspo.policy import make_policy
from wasspo.world_model import (HEAD_GUARD, ReplayBuffer, WorldModel, WorldModelConfig, collect,
                                head_solve, joint_train, train_world_model)


def fixed_features(wm, phi):
    """Replace the body with constant features (contrived linear body)."""
    phi = np.asarray(phi, dtype=float)
    wm.features = lambda s, a, theta=None: phi
    return wm


def random_buffer(env, n_traj=20, horizon=40, seed=0):
    rng = np.random.default_rng(seed)
    buf = ReplayBuffer(100_000, env.state_dim, env.action_dim)
    acts = env.sample_actions(rng, horizon * n_traj).reshape(horizon, n_traj, env.action_dim)
    collect(env, None, buf, env.sample_states(rng, n_traj), horizon, acts)
    return buf


# predict ------------------------------------------------------------------------

def test_zero_head_is_identity_map():
    env = envs.make_env("pendulum")
    wm = WorldModel(env, feature_dim=8, hidden=(8,), rng=np.random.default_rng(0))
    s = env.sample_states(np.random.default_rng(1), 5) * 0.9
    a = env.sample_actions(np.random.default_rng(2), 5)
    np.testing.assert_allclose(wm.predict(s, a), s, atol=1e-15)


def test_contrived_linear_body():
    env = envs.make_env("scalar")
    wm = fixed_features(WorldModel(env, feature_dim=1, hidden=(1,)), [[2.0]])
    wm.W = np.eye(1)
    wm.dt = 0.05
    assert wm.predict(np.array([[1.0]]), np.zeros((1, 1)))[0, 0] == pytest.approx(1.1)


def test_state_jacobian_is_identity_at_zero_head():
    env = envs.make_env("pendulum")
    wm = WorldModel(env, feature_dim=8, hidden=(8,), rng=np.random.default_rng(3))
    tape = ad.Tape()
    s = tape.var([[0.3, -0.2]])
    out = wm.predict(s, np.zeros((1, 1)))
    np.testing.assert_allclose(tape.jacobian(out, [s]), np.eye(2), atol=1e-15)


def test_no_clipping_inside_model():
    env = envs.make_env("pendulum")
    wm = fixed_features(WorldModel(env, feature_dim=1, hidden=(1,)), [[1.0]])
    wm.W = np.array([[0.0, 1000.0]])
    out = wm.predict(np.array([[0.0, 7.9]]), np.zeros((1, 1)))
    assert out[0, 1] > env.params.thetadot_max


# fit_head ---------------------------------------------------------------------

def test_fit_head_zero_targets():
    env = envs.make_env("scalar")
    rng = np.random.default_rng(4)
    wm = WorldModel(env, feature_dim=6, hidden=(6,), rng=rng)
    s = env.sample_states(rng, 20)
    loss = wm.fit_head(s, env.sample_actions(rng, 20), s)
    assert loss == pytest.approx(0.0, abs=1e-20) and np.allclose(wm.W, 0)


def test_fit_head_identity_features():
    env = envs.make_env("scalar")  # dt = 1, so targets are s' - s
    wm = fixed_features(WorldModel(env, feature_dim=1, hidden=(1,), ridge=0.0), np.eye(2))
    s = np.zeros((2, 1))
    s2 = np.array([[0.3], [-0.4]])
    assert wm.fit_head(s, np.zeros((2, 1)), s2) == pytest.approx(0.0, abs=1e-24)
    np.testing.assert_allclose(wm.W, s2, atol=1e-15)


def test_fit_head_scalar_closed_form():
    env = envs.make_env("scalar")
    wm = fixed_features(WorldModel(env, feature_dim=1, hidden=(1,), ridge=4.0), [[2.0]])
    loss = wm.fit_head(np.zeros((1, 1)), np.zeros((1, 1)), np.array([[4.0]]))
    assert wm.W[0, 0] == pytest.approx(1.0) and loss == pytest.approx(4.0)


@given(st.integers(0, 2**32 - 1), st.floats(1e-4, 1.0))
def test_head_solve_normal_equations(seed, lam):
    env = envs.make_env("pendulum")
    rng = np.random.default_rng(seed)
    wm = WorldModel(env, feature_dim=16, hidden=(8,), ridge=lam, rng=rng)
    s, a = env.sample_states(rng, 40), env.sample_actions(rng, 40)
    phi = np.asarray(wm.features(s, a))
    y = wm.targets(s, env.step(s, a))
    w = head_solve(phi, y, lam, dt=1e-12)  # guard inactive
    lhs = (phi.T @ phi + lam * np.eye(phi.shape[1])) @ w
    rhs = phi.T @ y
    assert np.linalg.norm(lhs - rhs) <= 1e-8 * (1 + np.linalg.norm(rhs))


def test_head_guard_refits():
    rng = np.random.default_rng(5)
    phi = rng.normal(size=(50, 4))
    y = 1e6 * rng.normal(size=(50, 2))
    w = head_solve(phi, y, 1e-3, dt=0.05)
    assert np.linalg.norm(w, 2) * 0.05 < HEAD_GUARD


def test_body_gradient_matches_finite_differences():
    env = envs.make_env("pendulum")
    rng = np.random.default_rng(6)
    wm = WorldModel(env, feature_dim=6, hidden=(5,), rng=rng)
    s, a = env.sample_states(rng, 16), env.sample_actions(rng, 16)
    s2 = env.step(s, a)
    wm.fit_head(s, a, s2)
    g = wm.body_gradient(s, a, s2)
    y = wm.targets(s, s2)
    base = wm.body.theta.copy()

    def loss(th):
        phi = np.asarray(wm.features(s, a, th))
        r = phi @ wm.W - y
        return np.mean(np.sum(r * r, axis=-1))

    for k in rng.choice(len(base), 8, replace=False):
        e = np.zeros_like(base)
        e[k] = 1e-6
        fd = (loss(base + e) - loss(base - e)) / 2e-6
        assert g[k] == pytest.approx(fd, rel=1e-5, abs=1e-9)


# training ------------------------------------------------------------------------

def test_recovers_linear_dynamics():
    env = envs.make_env("scalar")
    rng = np.random.default_rng(7)
    n = 2000
    s = rng.uniform(-1, 1, size=(n, 1))
    a = env.sample_actions(rng, n)
    s2 = s + env.dt * 2.0 * s  # s_dot = 2 s
    buf = ReplayBuffer(n, 1, 1)
    buf.add(s, a, s2)
    wm = WorldModel(env, feature_dim=32, hidden=(32,), rng=rng)
    losses = train_world_model(wm, buf, 200, 0.2, 256, rng)
    assert losses[-1] < 1e-4


def test_zero_updates_leave_model_unchanged():
    env = envs.make_env("pendulum")
    wm = WorldModel(env, feature_dim=8, hidden=(8,), rng=np.random.default_rng(8))
    theta, w = wm.body.theta.copy(), wm.W.copy()
    assert train_world_model(wm, random_buffer(env, 2, 5), 0, 0.2, 8, np.random.default_rng(0)) == []
    np.testing.assert_array_equal(wm.body.theta, theta)
    np.testing.assert_array_equal(wm.W, w)


def test_empty_buffer_rejected():
    env = envs.make_env("pendulum")
    wm = WorldModel(env, feature_dim=4, hidden=(4,))
    with pytest.raises(ValueError):
        train_world_model(wm, ReplayBuffer(10, 2, 1), 1, 0.1, 4, np.random.default_rng(0))


def test_loss_trend_and_held_out_error():
    env = envs.make_env("pendulum")
    buf = random_buffer(env, 20, 40, seed=9)
    s, a, s2 = buf.transitions()
    rng = np.random.default_rng(10)
    idx = rng.permutation(len(s))
    cut = int(0.8 * len(s))
    train_buf = ReplayBuffer(len(s), 2, 1)
    train_buf.add(s[idx[:cut]], a[idx[:cut]], s2[idx[:cut]])
    held = (s[idx[cut:]], a[idx[cut:]], s2[idx[cut:]])
    wm = WorldModel(env, feature_dim=64, hidden=(64,), rng=rng)
    losses, errors = [], []
    for _ in range(10):
        losses += train_world_model(wm, train_buf, 20, 0.2, 256, rng)
        errors.append(wm.one_step_error(*held))
    assert np.mean(losses[-10:]) <= np.mean(losses[:10])
    assert np.mean(errors[-5:]) <= np.mean(errors[:5])


def test_imagined_rollout_stays_finite():
    from wasspo.trajopt import rollout

    env = envs.make_env("pendulum")
    rng = np.random.default_rng(11)
    wm = WorldModel(env, feature_dim=16, hidden=(16,), rng=rng)
    train_world_model(wm, random_buffer(env, 5, 20), 10, 0.2, 64, rng)
    assert np.linalg.norm(wm.W, 2) * wm.dt < HEAD_GUARD
    res = rollout(env, make_policy(env, rng=rng), env.sample_states(rng, 4), 80,
                  record=True, step_fn=wm.predict)
    assert np.all(np.isfinite(res.states)) and np.all(np.isfinite(res.gradient()))


def test_replay_buffer_fifo():
    buf = ReplayBuffer(3, 1, 1)
    for k in range(5):
        buf.add([[k]], [[0.0]], [[k + 1.0]])
    s, a, s2 = buf.transitions()
    np.testing.assert_array_equal(s.ravel(), [2, 3, 4])
    with pytest.raises(ValueError):
        buf.add(np.zeros((2, 1)), np.zeros((1, 1)), np.zeros((2, 1)))


# joint training ------------------------------------------------------------------------

def test_zero_outer_iterations_return_initial_policy():
    env = envs.make_env("pendulum")
    cfg = WorldModelConfig(iterations=0, init_trajectories=2, feature_dim=8, wm_hidden=(8,))
    res = joint_train(env, cfg)
    init = make_policy(env, cfg.resolved(env).hidden, np.random.default_rng(0).spawn(3)[0])
    np.testing.assert_array_equal(res.policy.theta, init.theta)
    assert res.policy_history == [] and res.wm_history == []


@pytest.mark.parametrize("oracle", [False, True])
def test_joint_train_smoke(oracle):
    env = envs.make_env("pendulum")
    cfg = WorldModelConfig(iterations=2, horizon=10, wm_updates=3, batch_policy=4, batch_wm=32,
                           feature_dim=8, wm_hidden=(8,), init_trajectories=2, hidden=(8,),
                           oracle=oracle, seed=1)
    a, b = joint_train(env, cfg), joint_train(env, cfg)
    assert len(a.policy_history) == 2
    assert len(a.wm_history) == (0 if oracle else 6)
    assert a.policy.theta.tobytes() == b.policy.theta.tobytes()
