import numpy as np
import pytest
from scipy import stats

from hadmc.nn import Checkpoint, mlp
from hadmc.policy import (
    LatentTD3,
    PolicyHyper,
    ReplayBuffer,
    policy_buffer,
    pretrain_buffer,
    select_action,
    target_action,
    td3_target,
)

SD, K1, K2 = 6, 2, 3


def small_agent(**kw):
    return LatentTD3(SD, K1, K2, PolicyHyper(hidden=(16, 16), **kw), seed=0)


def random_policy_batch(rng, n=8):
    return {"s": rng.standard_normal((n, SD)), "z": rng.uniform(-1, 1, (n, K1)),
            "x": rng.uniform(-1, 1, (n, K2)), "r": rng.standard_normal(n),
            "s2": rng.standard_normal((n, SD)), "done": (rng.random(n) < 0.2).astype(float)}


def test_buffer_fifo_eviction():
    buf = policy_buffer(10_000, 2, 1, 1)
    for k in range(10_001):
        buf.push(s=[k, k], z=[0], x=[0], r=float(k), s2=[0, 0], done=0.0)
    assert len(buf) == 10_000
    order = buf.data["r"][buf.indices()]
    assert order[0] == 1.0 and order[-1] == 10_000.0


def test_buffer_sampling_seeded_and_guarded():
    buf = pretrain_buffer(100, 3)
    for k in range(50):
        buf.push(s=np.zeros(3), a_dis=k % 4, a_con=0.0, r=float(k), s2=np.zeros(3))
    a = buf.sample(20, np.random.default_rng(5))
    b = buf.sample(20, np.random.default_rng(5))
    assert np.array_equal(a["r"], b["r"]) and len(set(a["r"])) == 20
    with pytest.raises(ValueError):
        buf.sample(51, np.random.default_rng(0))


def test_buffer_sampling_uniform_chi2():
    buf = ReplayBuffer(100, {"r": ((), "float64")})
    for k in range(100):
        buf.push(r=float(k))
    rng = np.random.default_rng(0)
    counts = np.zeros(100)
    for _ in range(10_000):
        counts[buf.sample(10, rng)["r"].astype(int)] += 1
    assert counts.sum() == 100_000
    assert stats.chisquare(counts).pvalue > 0.01


def test_select_action():
    actor = mlp(SD, K1 + K2, "tanh", (16,), seed=0)
    s = np.random.default_rng(0).standard_normal(SD)
    z, x = select_action(actor, s, 0.0, np.random.default_rng(0), K1)
    assert np.array_equal(np.concatenate([z, x]), actor.predict(s[None])[0])
    for seed in range(20):
        z, x = select_action(actor, s, 5.0, np.random.default_rng(seed), K1)
        assert np.all(np.abs(z) <= 1) and np.all(np.abs(x) <= 1)


def test_exploration_noise_std():
    actor = mlp(SD, 4, "tanh", (8,), seed=0)
    actor.params[-2][:] = 0  # actor outputs 0: interior, no clamping at sigma 0.1 in practice
    rng = np.random.default_rng(1)
    draws = np.array([np.concatenate(select_action(actor, np.zeros(SD), 0.1, rng, 2)) for _ in range(10_000)])
    assert draws.std(axis=0) == pytest.approx([0.1] * 4, rel=0.05)


def test_target_action_noise_clipped():
    actor = mlp(SD, 4, "tanh", (8,), seed=0)
    actor.params[-2][:] = 0
    s = np.zeros((5000, SD))
    out = target_action(actor, s, 0.4, 0.5, np.random.default_rng(0))
    assert np.max(np.abs(out)) <= 0.5
    det = target_action(actor, s[:3], 0.4, 0.0, np.random.default_rng(0))
    assert np.array_equal(det, actor.predict(s[:3]))


def test_td3_target():
    assert td3_target(-20.0, 5.0, 6.0, 1.0, 0.995) == -20.0
    assert td3_target(1.0, 2.0, 3.0, 0.0, 0.995) == pytest.approx(2.99)
    rng = np.random.default_rng(0)
    r, q1, q2 = rng.standard_normal((3, 100))
    assert np.array_equal(td3_target(r, q1, q2, np.zeros(100), 0.9), td3_target(r, q2, q1, np.zeros(100), 0.9))
    assert np.array_equal(td3_target(r, q1, q2, np.zeros(100), 0.9), r + 0.9 * np.minimum(q1, q2))


def test_critic_update_zero_when_fitted():
    agent = small_agent()
    rng = np.random.default_rng(0)
    batch = random_policy_batch(rng)
    batch["done"][:] = 1.0
    sa = np.concatenate([batch["s"], batch["z"], batch["x"]], axis=1)
    # make both critics output exactly r: zero last layer, bias absorbs nothing, so set r = q
    batch["r"] = agent.critic1.predict(sa)[:, 0]
    agent.critic2 = agent.critic1.copy()
    before = [p.copy() for p in agent.critic1.params]
    loss = agent.critic_update(batch)
    assert loss == 0.0
    assert all(np.array_equal(a, b) for a, b in zip(before, agent.critic1.params))


def test_critic_loss_nonnegative_and_single_sample():
    agent = small_agent()
    rng = np.random.default_rng(1)
    batch = random_policy_batch(rng, n=1)
    batch["done"][:] = 1.0
    sa = np.concatenate([batch["s"], batch["z"], batch["x"]], axis=1)
    q1, q2 = agent.critic1.predict(sa)[0, 0], agent.critic2.predict(sa)[0, 0]
    expected = ((q1 - batch["r"][0]) ** 2 + (q2 - batch["r"][0]) ** 2) / 2
    assert agent.critic_update(batch) == pytest.approx(expected)


def test_actor_update_leaves_critics_and_improves():
    agent = small_agent(lr=1e-3)
    rng = np.random.default_rng(2)
    batch = random_policy_batch(rng, n=64)
    critics = [[p.copy() for p in n.params] for n in (agent.critic1, agent.critic2)]
    losses = [agent.actor_update(batch) for _ in range(100)]
    for net, snap in zip((agent.critic1, agent.critic2), critics):
        assert all(np.array_equal(a, b) for a, b in zip(net.params, snap))
    assert losses[-1] < losses[0]


def test_actor_unchanged_for_flat_critic():
    agent = small_agent()
    agent.critic1.params[-2][:] = 0
    before = [p.copy() for p in agent.actor.params]
    agent.actor_update(random_policy_batch(np.random.default_rng(0)))
    assert all(np.array_equal(a, b) for a, b in zip(before, agent.actor.params))


def test_policy_delay_counter():
    agent = small_agent(policy_delay=3)
    rng = np.random.default_rng(0)
    actor_steps = [agent.train_step(random_policy_batch(rng))[1] is not None for _ in range(9)]
    assert actor_steps == [False, False, True] * 3
    assert agent.actor_updates == 3 and agent.critic_updates == 9


def test_bit_reproducible_and_checkpoint():
    runs = []
    for _ in range(2):
        agent = small_agent(policy_delay=2)
        rng = np.random.default_rng(7)
        for _ in range(6):
            agent.train_step(random_policy_batch(rng))
        runs.append(agent.to_checkpoint(6).to_json())
    assert runs[0] == runs[1]
    back = LatentTD3.from_checkpoint(Checkpoint.from_json(runs[0]))
    assert back.to_checkpoint(6).to_json() == runs[0]


def test_hyper_validation():
    with pytest.raises(ValueError):
        PolicyHyper(discount=0.0)
    with pytest.raises(ValueError):
        PolicyHyper(policy_delay=0)
