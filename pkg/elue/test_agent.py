# ELUE/elue/test_agent.py

import numpy as np
import pytest

import agent
import embed
import ndiff
from agent import AgentBatch, AgentNets, Hyperparams
from envsim import TRANSITION_WIDTH
from errors import ShapeError
from ndiff import ParameterSet, Tape

HALF_LOG_2PI = 0.9189385332046727


def _batch(n=5, belief_dim=4, seed=0, r=None):
    rng = np.random.default_rng(seed)
    rows = rng.uniform(-1.0, 1.0, size=(n, TRANSITION_WIDTH))
    if r is not None:
        rows[:, 4] = r
    bel = rng.normal(size=(n, belief_dim))
    bel_next = rng.normal(size=(n, belief_dim))
    return AgentBatch.from_rows(rows, bel, bel_next)


def _constant_output(params, value):
    """Zero the last layer so the network returns `value` everywhere"""
    last = max(int(k[1:]) for k in params.names if k.startswith("W"))
    params[f"W{last}"].value[:] = 0.0
    params[f"b{last}"].value[:] = value


def _snapshot(nets):
    return [p.copy() for p in nets.parameter_sets]


def _unchanged(nets, snapshot):
    return all(p.equals(s) for p, s in zip(nets.parameter_sets, snapshot))


def test_mean_actions_are_deterministic_and_bounded(tiny_agent):
    bel = np.random.default_rng(0).normal(size=4)
    a = agent.act(tiny_agent, [0.2, -0.1], bel, "mean")
    b = agent.act(tiny_agent, [0.2, -0.1], bel, "mean")
    np.testing.assert_array_equal(a.action, b.action)
    assert np.all(np.abs(a.action) < 1.0)


def test_sampled_actions_follow_the_rng(tiny_agent):
    bel = np.zeros(4)
    a = agent.act(tiny_agent, [0.0, 0.0], bel, "sample", np.random.default_rng(1))
    b = agent.act(tiny_agent, [0.0, 0.0], bel, "sample", np.random.default_rng(1))
    c = agent.act(tiny_agent, [0.0, 0.0], bel, "sample", np.random.default_rng(2))
    np.testing.assert_array_equal(a.action, b.action)
    assert not np.array_equal(a.action, c.action)
    np.testing.assert_allclose(a.action, np.tanh(a.pre_tanh))


def test_act_accepts_belief_states(tiny_agent, tiny_embed):
    b = embed.encode(tiny_embed, np.random.default_rng(0).uniform(size=(3, TRANSITION_WIDTH)))
    by_state = agent.act(tiny_agent, [0.1, 0.1], b, "mean")
    by_features = agent.act(tiny_agent, [0.1, 0.1], b.features(), "mean")
    np.testing.assert_array_equal(by_state.action, by_features.action)


def test_act_rejects_wrong_belief_size(tiny_agent):
    with pytest.raises(ShapeError):
        agent.act(tiny_agent, [0.0, 0.0], np.zeros(3), "mean")
    with pytest.raises(ValueError):
        agent.act(tiny_agent, [0.0, 0.0], np.zeros(4), "argmax")


def test_belief_free_agent_acts_without_a_belief():
    nets = AgentNets(np.random.default_rng(0), belief_dim=0, w_dim=2, hidden=4)
    sample = agent.act(nets, [0.3, 0.3], None, "sample", np.random.default_rng(0))
    assert sample.action.shape == (2,)
    assert sample.w.shape == (2,)


def test_unit_gaussian_pi1_mean_log_prob(tiny_agent):
    _constant_output(tiny_agent.pi1, 0.0)
    sample = agent.act(tiny_agent, [0.5, -0.5], np.ones(4), "mean")
    np.testing.assert_array_equal(sample.w, np.zeros(2))
    assert sample.log_prob_w == pytest.approx(-HALF_LOG_2PI * tiny_agent.w_dim, abs=1e-9)


# --- actor ---

def test_actor_has_no_signal_without_penalty_or_q(tiny_agent):
    _constant_output(tiny_agent.q, 1.7)
    hyper = Hyperparams(beta=0.0)
    batch = _batch()
    with Tape() as tape:
        tape.watch(tiny_agent.pi1, tiny_agent.pi2)
        loss = agent.actor_loss(tiny_agent, batch, hyper, np.random.default_rng(0))
    assert loss.item() == pytest.approx(-1.7, abs=1e-12)
    grads = tape.gradient(loss)
    for name in ("pi1", "pi2"):
        assert max(np.abs(g).max() for g in grads[name].values()) < 1e-8


def test_actor_gradients_match_finite_differences(tiny_agent, fd_error):
    batch = _batch(seed=1)
    hyper = Hyperparams(beta=0.2)

    def loss():
        return agent.actor_loss(tiny_agent, batch, hyper, np.random.default_rng(4))

    assert fd_error(loss, [tiny_agent.pi1, tiny_agent.pi2]) < 1e-4


def test_actor_loss_is_linear_in_beta(tiny_agent):
    batch = _batch(seed=2)

    def loss(beta):
        return agent.actor_loss(tiny_agent, batch, Hyperparams(beta=beta), np.random.default_rng(0)).item()

    assert loss(0.4) - loss(0.2) == pytest.approx(loss(0.2) - loss(0.0), abs=1e-12)


def test_actor_step_leaves_q_untrained(tiny_agent):
    batch = _batch(seed=3)
    hyper = Hyperparams(beta=0.2)

    def loss():
        return agent.actor_loss(tiny_agent, batch, hyper, np.random.default_rng(0))

    with Tape() as tape:
        tape.watch(tiny_agent.q)
        value = loss()
    assert any(g.any() for g in tape.gradient(value)["q"].values())
    q_before, pi1_before, pi2_before = tiny_agent.q.copy(), tiny_agent.pi1.copy(), tiny_agent.pi2.copy()
    agent._step(loss, [tiny_agent.pi1, tiny_agent.pi2], lr=1e-2)
    assert tiny_agent.q.equals(q_before)
    assert not tiny_agent.pi1.equals(pi1_before)
    assert not tiny_agent.pi2.equals(pi2_before)


def test_bottleneck_bonus_is_bounded_for_a_wide_pi1(tiny_agent):
    n = 4000
    _constant_output(tiny_agent.pi1, 0.0)
    last = max(int(k[1:]) for k in tiny_agent.pi1.names if k.startswith("W"))
    tiny_agent.pi1[f"b{last}"].value[..., tiny_agent.w_dim:] = 50.0
    rng = np.random.default_rng(0)
    out = agent.policy_sample(tiny_agent, np.zeros((n, 2)), np.zeros((n, 4)),
                              rng.standard_normal((n, tiny_agent.w_dim)), np.zeros((n, 2)))
    assert np.all(np.abs(out.w.value) <= 1.0)
    assert np.all(np.isfinite(out.log_prob_w.value))
    # entropy of any density on (-1, 1)^d is at most d ln 2
    assert -out.log_prob_w.value.mean() <= tiny_agent.w_dim * np.log(2.0)


def test_pi1_entropy_falls_without_the_bottleneck_penalty(monkeypatch):
    def concave_q(nets, s, bel, a):
        d = a - 0.3
        return ndiff.reshape(-ndiff.reduce_sum(d * d, axis=-1), (-1, 1))

    monkeypatch.setattr(agent, "q_value", concave_q)
    batch = _batch(n=32, seed=7)

    def pi1_log_std(beta, steps=200):
        nets = AgentNets(np.random.default_rng(2), belief_dim=4, w_dim=2, hidden=4, activation="tanh")
        hyper = Hyperparams(beta=beta)
        rng = np.random.default_rng(0)
        for _ in range(steps):
            agent._step(lambda: agent.actor_loss(nets, batch, hyper, rng), [nets.pi1, nets.pi2], lr=1e-2)
        out = agent._forward(nets.pi1_spec, nets.pi1, batch.s, batch.bel_pi)
        return ndiff.gaussian_head(out, nets.w_dim).log_std.value.mean()

    assert pi1_log_std(0.0) < pi1_log_std(0.2)


def test_sac_penalty_covers_both_stages(tiny_agent):
    batch = _batch(seed=4)
    noise = (np.zeros((batch.size, 2)), np.zeros((batch.size, 2)))
    out = agent.policy_sample(tiny_agent, batch.s, batch.bel_pi, *noise)
    sac = agent.policy_penalty(out, Hyperparams(objective="sac", sac_alpha=0.5)).value
    ib = agent.policy_penalty(out, Hyperparams(objective="ib", beta=0.2)).value
    np.testing.assert_allclose(sac, 0.5 * (out.log_prob_w.value + out.log_prob_action.value))
    np.testing.assert_allclose(ib, 0.2 * out.log_prob_w.value)


# --- critics ---

@pytest.mark.parametrize("q_out, expected", [(2.98, 0.0), (0.0, 2.98 ** 2)])
def test_q_critic_target_substitution(tiny_agent, q_out, expected):
    _constant_output(tiny_agent.q, q_out)
    _constant_output(tiny_agent.v_target, 2.0)
    loss = agent.q_critic_loss(tiny_agent, _batch(r=1.0), gamma=0.99)
    assert loss.item() == pytest.approx(expected, abs=1e-9)


def test_q_critic_gradients(tiny_agent, fd_error):
    batch = _batch(seed=5)
    assert fd_error(lambda: agent.q_critic_loss(tiny_agent, batch, 0.99), [tiny_agent.q]) < 1e-4


def test_q_critic_target_is_a_constant(tiny_agent):
    with Tape() as tape:
        tape.watch(tiny_agent.q, tiny_agent.v_target, tiny_agent.v)
        loss = agent.q_critic_loss(tiny_agent, _batch(seed=6), 0.99)
    grads = tape.gradient(loss)
    for name in ("v_target", "v"):
        assert not any(g.any() for g in grads[name].values())
    assert any(g.any() for g in grads["q"].values())


def test_v_critic_target_substitution():
    nets = AgentNets(np.random.default_rng(3), belief_dim=4, w_dim=1, hidden=4, activation="tanh")
    _constant_output(nets.pi1, 0.0)
    _constant_output(nets.q, 2.98)
    _constant_output(nets.v, 2.98 + 0.2 * HALF_LOG_2PI)
    hyper = Hyperparams(beta=0.2)
    batch = _batch()
    np.testing.assert_allclose(agent.v_target(nets, batch, hyper), np.full((batch.size, 1), 3.1637877), atol=1e-7)
    assert agent.v_critic_loss(nets, batch, hyper).item() == pytest.approx(0.0, abs=1e-18)


def test_v_target_without_penalty_is_q_at_the_mean_action(tiny_agent):
    batch = _batch(seed=7)
    target = agent.v_target(tiny_agent, batch, Hyperparams(beta=0.0))
    zeros = (np.zeros((batch.size, 2)), np.zeros((batch.size, 2)))
    mean_action = agent.policy_sample(tiny_agent, batch.s, batch.bel_pi, *zeros).action.value
    np.testing.assert_allclose(target, agent.q_value(tiny_agent, batch.s, batch.bel_q, mean_action).value)


def test_v_critic_gradients(tiny_agent, fd_error):
    batch = _batch(seed=8)
    hyper = Hyperparams()
    assert fd_error(lambda: agent.v_critic_loss(tiny_agent, batch, hyper), [tiny_agent.v]) < 1e-4


# --- target network ---

def test_polyak_cases():
    source = ParameterSet("v", {"w": [[1.0, 1.0]]})
    target = ParameterSet("v_target", {"w": [[0.0, 0.0]]})
    agent.polyak_update(target, source, 0.005)
    np.testing.assert_allclose(target["w"].value, [[0.005, 0.005]], atol=1e-15)
    agent.polyak_update(target, source, 0.0)
    np.testing.assert_allclose(target["w"].value, [[0.005, 0.005]], atol=1e-15)
    agent.polyak_update(target, source, 1.0)
    assert target.equals(source)


def test_polyak_rejects_mismatched_sets():
    with pytest.raises(ShapeError):
        agent.polyak_update(ParameterSet("a", {"w": [1.0]}), ParameterSet("b", {"w": [1.0, 2.0]}), 0.5)
    with pytest.raises(ShapeError):
        agent.polyak_update(ParameterSet("a", {"w": [1.0]}), ParameterSet("b", {"u": [1.0]}), 0.5)


def test_polyak_tracking_decays_geometrically(tiny_agent):
    for key in tiny_agent.v_target.names:
        tiny_agent.v_target[key].value = tiny_agent.v_target[key].value + 1.0
    start = sum(np.sum((tiny_agent.v_target[k].value - tiny_agent.v[k].value) ** 2) for k in tiny_agent.v.names)
    for _ in range(100):
        agent.polyak_update(tiny_agent.v_target, tiny_agent.v, 0.005)
    end = sum(np.sum((tiny_agent.v_target[k].value - tiny_agent.v[k].value) ** 2) for k in tiny_agent.v.names)
    assert np.sqrt(end) == pytest.approx((1 - 0.005) ** 100 * np.sqrt(start), rel=1e-9)


# --- full steps ---

def test_zero_learning_rates_leave_every_parameter(tiny_agent, tiny_embed, random_buffers):
    hyper = Hyperparams(lr_pi=0.0, lr_q=0.0, lr_v=0.0, lr_embed=0.0)
    agent_before, embed_before = _snapshot(tiny_agent), tiny_embed.params.copy()
    report = agent.train_step(tiny_agent, tiny_embed, random_buffers, hyper, np.random.default_rng(0))
    assert _unchanged(tiny_agent, agent_before)
    assert tiny_embed.params.equals(embed_before)
    assert all(np.isfinite(v) for v in report.as_dict().values())


def test_frozen_embedding_is_bit_identical(tiny_agent, tiny_embed, random_buffers):
    before = tiny_embed.params.copy()
    rng = np.random.default_rng(0)
    for _ in range(3):
        report = agent.train_step(tiny_agent, tiny_embed, random_buffers, Hyperparams(), rng, freeze_embedding=True)
        assert report.embed is None
    assert tiny_embed.params.equals(before)
    assert not tiny_agent.pi1.equals(AgentNets(np.random.default_rng(2), 4, 2, 4, "tanh").pi1)


def test_training_without_embedding_feeds_the_prior(tiny_agent, random_buffers):
    hyper = Hyperparams()
    batches = agent.sample_context_batches(random_buffers, hyper, np.random.default_rng(0))
    batch = agent.build_agent_batch(None, batches, tiny_agent.belief_dim)
    assert batch.size == hyper.targets_per_context * len(random_buffers)
    assert not batch.bel_pi.any() and not batch.bel_next.any()
    report = agent.train_step(tiny_agent, None, random_buffers, hyper, np.random.default_rng(0), use_embedding=False)
    assert report.embed is None


def test_agent_batch_beliefs_come_from_the_context(tiny_embed, random_buffers):
    hyper = Hyperparams(tasks_per_step=1)
    cb = agent.sample_context_batches(random_buffers[:1], hyper, np.random.default_rng(0))[0]
    batch = agent.build_agent_batch(tiny_embed, [cb], 4)
    b = embed.encode(tiny_embed, cb.context)
    np.testing.assert_array_equal(batch.bel_pi, np.tile(b.features(), (len(cb.targets), 1)))
    np.testing.assert_allclose(batch.bel_next[0], embed.belief_update(tiny_embed, b, cb.targets[0]).features(),
                               rtol=1e-12, atol=1e-12)


def test_belief_copies_are_optimized_with_their_networks(tiny_agent):
    base = _batch(n=4, seed=9)
    feats = np.random.default_rng(0).normal(size=(1, 4))
    sets = {k: ParameterSet(f"belief_{k}", {"features": feats}) for k in ("pi", "q", "v")}
    batch = AgentBatch(base.s, base.a, base.r, base.s2, sets["pi"]["features"], sets["q"]["features"],
                       sets["v"]["features"], base.bel_next)
    agent.agent_update(tiny_agent, batch, Hyperparams(), np.random.default_rng(0), sets)
    for k in ("pi", "q", "v"):
        assert not np.array_equal(sets[k]["features"].value, feats)
    assert not np.array_equal(sets["pi"]["features"].value, sets["q"]["features"].value)


def test_losses_stay_finite_over_many_steps(tiny_agent, tiny_embed, random_buffers):
    rng = np.random.default_rng(0)
    for _ in range(50):
        report = agent.train_step(tiny_agent, tiny_embed, random_buffers, Hyperparams(), rng)
        assert all(np.isfinite(v) for v in report.as_dict().values())
