import numpy as np
import pytest

from greenroute.core import TrainingError
from greenroute.neural import DualReplayBuffer, FilmGenerator, GaussianActor, Mlp, \
    ReplayBuffer, SacAgent, SacConfig, film_modulate, goal_distance_reward, \
    gradient_check, her_relabel, identity_film, load_checkpoint, sac_update, \
    save_checkpoint

SMALL = SacConfig(actor_hidden=16, critic_hidden=16, film_hidden=8, batch_size=8)


def small_agent(seed=0, config=SMALL, context_dim=3, plan_shape=(1, 2, 3)):
    return SacAgent(state_dim=5, context_dim=context_dim, plan_shape=plan_shape,
                    goal_dim=4, config=config, seed=seed)


def random_batch(agent, rng, n=8, reward=None):
    M, R, D = agent.plan_shape
    return {'state': rng.normal(size=(n, agent.state_dim)),
            'next_state': rng.normal(size=(n, agent.state_dim)),
            'goal': rng.normal(size=(n, agent.goal_dim)),
            'context': rng.normal(size=(n, agent.context_dim)),
            'next_context': rng.normal(size=(n, agent.context_dim)),
            'plan': rng.dirichlet(np.ones(D), size=(n, M, R)),
            'reward': rng.normal(size=n) if reward is None else np.full(n, float(reward))}


def test_gradient_check_mlp(rng):
    assert gradient_check(Mlp([5, 8, 3], rng)) < 1e-4
    assert gradient_check(Mlp([6, 10, 10, 1], rng)) < 1e-4
    assert gradient_check(Mlp([4, 6, 2], rng, head='tanh')) < 1e-4


def test_gradient_check_linear_net(rng):
    assert gradient_check(Mlp([4, 6, 2], rng, activation='linear')) < 1e-7


def test_gradient_check_film(rng):
    assert gradient_check(FilmGenerator(3, (6, 6), rng, hidden=5)) < 1e-4


def test_gradient_check_film_actor(rng):
    actor = GaussianActor(5, 4, 3, rng, hidden=8, film_hidden=6)
    assert actor.film is not None
    assert gradient_check(actor) < 1e-4
    assert gradient_check(GaussianActor(5, 4, 0, rng, hidden=8)) < 1e-4


def test_identity_film_leaves_forward_unchanged(rng):
    net = Mlp([4, 7, 7, 3], rng)
    x = rng.normal(size=(5, 4))
    plain, _ = net.forward(x)
    modulated, _ = net.forward(x, identity_film(net.hidden_widths, 5))
    np.testing.assert_array_equal(plain, modulated)


def test_film_shift_moves_last_hidden_layer(rng):
    net = Mlp([4, 7, 7, 3], rng)
    x = rng.normal(size=(5, 4))
    film = identity_film(net.hidden_widths, 5)
    _, (plain, _, _) = net.forward(x, film)
    film[-1] = (film[-1][0], film[-1][1] + 0.25)
    _, (shifted, _, _) = net.forward(x, film)
    np.testing.assert_allclose(shifted[-1][0] - plain[-1][0], 0.25)


def test_context_changes_plan():
    agent = small_agent()
    state = np.ones(5)
    goal = np.zeros(4)
    a, _ = agent.act(state, goal, np.zeros(3), deterministic=True)
    b, _ = agent.act(state, goal, np.full(3, 3.), deterministic=True)
    assert not np.array_equal(a, b)
    forward = film_modulate(agent.actor, np.zeros(3))
    mean, log_std = forward(np.ones((2, 9)))
    assert mean.shape == (2, 6) and log_std.shape == (2, 6)


def test_context_dimension_mismatch(rng):
    actor = GaussianActor(5, 4, 3, rng, hidden=8)
    with pytest.raises(ValueError):
        film_modulate(actor, np.zeros(2))


def test_actions_are_squashed_and_plans_feasible(rng):
    agent = small_agent()
    for _ in range(20):
        plan, y = agent.act(rng.normal(size=5), rng.normal(size=4), rng.normal(size=3))
        assert np.all(np.abs(y) < 1.)
        assert plan.shape == (1, 2, 3)
        assert np.allclose(plan.sum(axis=-1), 1.) and np.all(plan >= 0.)


def test_imitation_pulls_plan_to_target(rng):
    agent = small_agent()
    state, goal, context = rng.normal(size=5), rng.normal(size=4), rng.normal(size=3)
    target = np.array([[[0., 0., 1.], [0.5, 0.5, 0.]]])
    first = agent.imitate(state, goal, target, context, steps=1)
    last = agent.imitate(state, goal, target, context, steps=500)
    assert last < first
    plan, _ = agent.act(state, goal, context, deterministic=True)
    np.testing.assert_allclose(plan, target, atol=0.05)


def test_q_gradient_matches_finite_differences(rng):
    agent = small_agent()
    state, goal = rng.normal(size=5), rng.normal(size=4)
    plan = rng.dirichlet(np.ones(3), size=(1, 2))
    grad = agent.q_gradient(state, goal, plan)
    h = 1e-6
    for idx in np.ndindex(plan.shape):
        up, down = plan.copy(), plan.copy()
        up[idx] += h
        down[idx] -= h
        numeric = (agent.q_value(state, goal, up) - agent.q_value(state, goal, down)) / (2 * h)
        assert grad[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-6)


def test_zero_tau_freezes_targets(rng):
    agent = small_agent(config=SacConfig(actor_hidden=16, critic_hidden=16, film_hidden=8,
                                         tau=0.))
    before = [p.copy() for t in agent.targets for p in t.parameters()]
    sac_update(agent, random_batch(agent, rng))
    after = [p for t in agent.targets for p in t.parameters()]
    for a, b in zip(before, after):
        np.testing.assert_array_equal(a, b)


def test_soft_update_is_exact():
    agent = small_agent()
    for c in agent.critics:
        for p in c.parameters():
            p += 1.
    old = [t.copy() for net in agent.targets for t in net.parameters()]
    online = [p for net in agent.critics for p in net.parameters()]
    agent.soft_update(0.3)
    new = [t for net in agent.targets for t in net.parameters()]
    for t, o, p in zip(new, old, online):
        np.testing.assert_array_equal(t, (1. - 0.3) * o + 0.3 * p)


def test_critic_loss_decreases_on_zero_reward(rng):
    agent = small_agent(config=SacConfig(actor_hidden=16, critic_hidden=16, film_hidden=8,
                                         alpha=0.))
    batch = random_batch(agent, rng, n=16, reward=0.)
    losses = [sac_update(agent, batch)['critic_loss'] for _ in range(100)]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


@pytest.mark.slow
def test_bandit_value_converges():
    config = SacConfig(actor_hidden=16, critic_hidden=32, film_hidden=8, alpha=0.,
                       tau=0.05, critic_lr=3e-3, gamma=0.95)
    agent = SacAgent(state_dim=1, context_dim=0, plan_shape=(1, 1, 2), goal_dim=1,
                     config=config, seed=0)
    rng = np.random.default_rng(1)
    n = 16
    plans = rng.dirichlet(np.ones(2), size=(n, 1, 1))
    batch = {'state': np.ones((n, 1)), 'next_state': np.ones((n, 1)),
             'goal': np.zeros((n, 1)), 'plan': plans, 'reward': np.ones(n)}
    for _ in range(3000):
        sac_update(agent, batch)
    value = agent.q_value(np.ones(1), np.zeros(1), plans[0])
    assert value == pytest.approx(1. / (1. - 0.95), rel=0.05)


def test_non_finite_loss_raises(rng):
    agent = small_agent()
    batch = random_batch(agent, rng)
    batch['reward'][0] = np.nan
    with pytest.raises(TrainingError) as err:
        sac_update(agent, batch)
    assert err.value.component == 'critic'


def test_empty_batch(rng):
    agent = small_agent()
    batch = random_batch(agent, rng, n=0)
    with pytest.raises(ValueError):
        sac_update(agent, batch)


def test_updates_are_seeded(rng):
    batch = random_batch(small_agent(), rng)
    a, b = small_agent(seed=4), small_agent(seed=4)
    for _ in range(3):
        sac_update(a, batch)
        sac_update(b, batch)
    for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p, q, err_msg=name)


def test_replay_buffer_is_fifo():
    buffer = ReplayBuffer(3)
    for i in range(5):
        buffer.push(state=[i], reward=float(i))
    assert len(buffer) == 3
    assert buffer.oldest()['reward'].tolist() == [2.]
    assert buffer.get([0, 1, 2])['state'][:, 0].tolist() == [2., 3., 4.]


def test_dual_buffer_split(rng):
    buffer = DualReplayBuffer(100, 50, cross_fraction=0.3)
    for i in range(20):
        buffer.push(state=[i], source=0.)
    buffer.push_cross({'state': np.zeros((5, 1)), 'source': np.ones(5)})
    batch = buffer.sample(10, rng)
    assert batch['source'].sum() == 3
    assert len(batch['state']) == 10

    single = DualReplayBuffer(100, 50, cross_fraction=0.3, dual=False)
    single.push(state=[1.], source=0.)
    single.push_cross({'state': np.zeros((5, 1)), 'source': np.ones(5)})
    assert len(single.cross) == 0
    assert len(single.replay) == 6


def her_buffer(n=6, cross_capacity=50):
    buffer = DualReplayBuffer(100, cross_capacity)
    for i in range(n):
        buffer.push(state=[float(i)], goal=np.zeros(4), achieved=np.full(4, float(i)),
                    base_reward=-1., reward=-1. - 0.1 * 2. * i)
    return buffer


def test_her_relabels_goal_and_reward(rng):
    buffer = her_buffer()
    achieved = np.array([1., 1., 1., 1.])
    assert her_relabel(buffer, achieved, 4, rng) == 4
    relabeled = buffer.cross.get(np.arange(4))
    np.testing.assert_array_equal(relabeled['goal'], np.tile(achieved, (4, 1)))
    expected = goal_distance_reward(-1., relabeled['achieved'], achieved)
    np.testing.assert_allclose(relabeled['reward'], expected)
    hit = relabeled['state'][:, 0] == 1.
    assert np.all(relabeled['reward'][hit] == -1.)
    assert len(buffer.replay) == 6


def test_her_reward_improves_when_goal_moves_to_achieved():
    grid = np.linspace(0., 2., 5)
    for g in grid:
        for a in grid:
            goal = np.full(4, g)
            achieved = np.full(4, a)
            before = goal_distance_reward(0., achieved, goal)[0]
            after = goal_distance_reward(0., achieved, achieved)[0]
            assert after >= before


def test_her_cross_buffer_evicts_oldest(rng):
    buffer = her_buffer(n=10, cross_capacity=4)
    her_relabel(buffer, np.zeros(4), 4, rng)
    her_relabel(buffer, np.ones(4), 2, rng)
    assert len(buffer.cross) == 4
    assert buffer.cross.oldest()['goal'].tolist() == [[0., 0., 0., 0.]]
    assert buffer.cross.get([3])['goal'].tolist() == [[1., 1., 1., 1.]]
    assert buffer.cross.get([1])['goal'].tolist() == [[0., 0., 0., 0.]]
    assert her_relabel(DualReplayBuffer(10, 10), np.zeros(4), 3, rng) == 0


def test_checkpoint_round_trip(tmp_path, rng):
    agent = small_agent(seed=1)
    sac_update(agent, random_batch(agent, rng))
    filename = tmp_path / 'agent.pkl'
    save_checkpoint(agent, filename)
    restored = load_checkpoint(small_agent(seed=2), filename)
    for (name, p), (_, q) in zip(agent.named_parameters(), restored.named_parameters()):
        np.testing.assert_array_equal(p, q, err_msg=name)
    with pytest.raises(ValueError):
        load_checkpoint(small_agent(plan_shape=(1, 2, 4)), filename)
