# ELUE/elue/agent.py

"""
Belief-conditional soft actor-critic with an information-bottleneck latent.

The policy is two-stage: pi1(w | s, b) picks a bottleneck variable w and
pi2(a | w, s) turns it into a tanh-bounded action, so the belief reaches
the action only through w. Q(s, b, a) and V(s, b) are trained on stored
transitions; V has a Polyak-averaged target copy.
"""

import logging
from dataclasses import dataclass

import numpy as np

import config
import ndiff
from embed import embed_step, encode, updated_belief_features
from envsim import A, R, S, S2
from errors import ShapeError
from ndiff import MlpSpec, ParameterSet, Tape, Tensor
from replay import sample_batch

logger = logging.getLogger(__name__)


class AgentNets:
    """
    pi1: s + belief -> tanh-squashed Gaussian over w
    pi2: w + s -> Gaussian over the pre-tanh action
    q:   s + belief + a -> scalar
    v:   s + belief -> scalar, with v_target as its slow copy
    :param belief_dim: 2 * z_dim, or 0 for agents trained without beliefs
    """

    def __init__(self, rng, belief_dim, w_dim=config.AgentConfig.w_dim, hidden=config.AgentConfig.hidden,
                 activation="relu"):
        self.belief_dim = int(belief_dim)
        self.w_dim = int(w_dim)
        sd, ad = config.STATE_DIM, config.ACTION_DIM
        self.pi1_spec = MlpSpec((sd + belief_dim, hidden, hidden, 2 * w_dim), activation)
        self.pi2_spec = MlpSpec((w_dim + sd, hidden, hidden, 2 * ad), activation)
        self.q_spec = MlpSpec((sd + belief_dim + ad, hidden, hidden, 1), activation)
        self.v_spec = MlpSpec((sd + belief_dim, hidden, hidden, 1), activation)
        self.pi1 = ParameterSet("pi1", ndiff.init_mlp(self.pi1_spec, rng))
        self.pi2 = ParameterSet("pi2", ndiff.init_mlp(self.pi2_spec, rng))
        self.q = ParameterSet("q", ndiff.init_mlp(self.q_spec, rng))
        self.v = ParameterSet("v", ndiff.init_mlp(self.v_spec, rng))
        self.v_target = self.v.copy("v_target", with_state=False)

    @classmethod
    def from_config(cls, cfg, rng, with_beliefs=True):
        return cls(rng, 2 * cfg.embed.z_dim if with_beliefs else 0, cfg.agent.w_dim, cfg.agent.hidden)

    @property
    def parameter_sets(self):
        return [self.pi1, self.pi2, self.q, self.v, self.v_target]

    def reset_optimizers(self):
        for params in self.parameter_sets:
            params.reset_optimizer()

    def copy(self, with_state=True):
        clone = object.__new__(AgentNets)
        clone.__dict__.update(self.__dict__)
        for name in ("pi1", "pi2", "q", "v", "v_target"):
            setattr(clone, name, getattr(self, name).copy(with_state=with_state))
        return clone


@dataclass
class Hyperparams:
    gamma: float = config.AgentConfig.gamma
    beta: float = config.AgentConfig.beta
    polyak: float = config.AgentConfig.polyak
    lr_pi: float = config.AgentConfig.lr_pi
    lr_q: float = config.AgentConfig.lr_q
    lr_v: float = config.AgentConfig.lr_v
    lr_embed: float = config.EmbedConfig.lr
    objective: str = config.AgentConfig.objective
    sac_alpha: float = config.AgentConfig.sac_alpha
    tasks_per_step: int = config.MetaTrainConfig.tasks_per_step
    targets_per_context: int = config.ReplayConfig.targets_per_context
    k_min: int = config.ReplayConfig.k_min
    k_max: int = config.ReplayConfig.k_max

    @classmethod
    def from_config(cls, cfg):
        ag = cfg.agent
        return cls(ag.gamma, ag.beta, ag.polyak, ag.lr_pi, ag.lr_q, ag.lr_v, cfg.embed.lr, ag.objective,
                   ag.sac_alpha, cfg.train.tasks_per_step, cfg.replay.targets_per_context,
                   cfg.replay.k_min, cfg.replay.k_max)


@dataclass
class ActionSample:
    w: np.ndarray
    pre_tanh: np.ndarray
    action: np.ndarray
    log_prob_w: float
    log_prob_action: float


@dataclass
class PolicyOutput:
    w: Tensor
    pre_tanh: Tensor
    action: Tensor
    log_prob_w: Tensor       # (N,), includes the tanh correction
    log_prob_action: Tensor  # (N,), includes the tanh correction


@dataclass
class AgentBatch:
    """
    Target transitions with the belief inputs each network sees.
    Belief inputs are (N, belief_dim) arrays, or (1, belief_dim) Tensors
    (per-network belief copies) that are broadcast over the batch.
    """
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    bel_pi: object
    bel_q: object
    bel_v: object
    bel_next: np.ndarray

    @property
    def size(self):
        return len(self.s)

    @classmethod
    def from_rows(cls, rows, bel, bel_next):
        rows = np.asarray(rows, dtype=np.float64)
        return cls(rows[:, S], rows[:, A], rows[:, R:R + 1], rows[:, S2], bel, bel, bel, np.asarray(bel_next))


@dataclass
class LossReport:
    embed: float
    actor: float
    q: float
    v: float

    def as_dict(self):
        return {"embed": self.embed, "actor": self.actor, "q": self.q, "v": self.v}


def _belief_input(bel, n):
    if isinstance(bel, Tensor):
        return ndiff.broadcast_to(bel, (n, bel.shape[-1]))
    bel = np.asarray(bel, dtype=np.float64)
    if bel.ndim == 1:
        bel = bel[None, :]
    return np.broadcast_to(bel, (n, bel.shape[1])) if len(bel) == 1 else bel


def _forward(spec, params, *parts):
    return ndiff.mlp_forward(spec, params, ndiff.concat(list(parts), axis=-1))


def policy_sample(nets, s, bel, w_noise, a_noise):
    """
    Reparameterized pass through pi1 then pi2; zero noise gives the mean path.
    Both stages are tanh-squashed, so w lives in (-1, 1)^w_dim where the
    uniform marginal of the bottleneck penalty is a proper density.
    :param s: (N, state_dim); bel: belief input for pi1
    """
    n = len(s)
    d1 = ndiff.gaussian_head(_forward(nets.pi1_spec, nets.pi1, s, _belief_input(bel, n)), nets.w_dim)
    v = ndiff.sample_reparam(d1, w_noise)
    w, log_prob_w = ndiff.tanh_squash(v, ndiff.gaussian_log_prob(d1, v, axis=-1), axis=-1)
    d2 = ndiff.gaussian_head(_forward(nets.pi2_spec, nets.pi2, w, s), config.ACTION_DIM)
    u = ndiff.sample_reparam(d2, a_noise)
    action, log_prob_action = ndiff.tanh_squash(u, ndiff.gaussian_log_prob(d2, u, axis=-1), axis=-1)
    return PolicyOutput(w, u, action, log_prob_w, log_prob_action)


def _noise(nets, n, rng, mode):
    if mode == "mean":
        return np.zeros((n, nets.w_dim)), np.zeros((n, config.ACTION_DIM))
    return rng.standard_normal((n, nets.w_dim)), rng.standard_normal((n, config.ACTION_DIM))


def act(nets, s, belief, mode="sample", rng=None):
    """
    Action for one state.
    :param belief: BeliefState, a feature vector, or None for belief-free agents
    :param mode: "sample" draws from pi1 and pi2, "mean" uses their means
    """
    if mode not in ("sample", "mean"):
        raise ValueError(f"unknown act mode {mode}")
    if belief is None:
        bel = np.zeros(0)
    else:
        bel = belief.features() if hasattr(belief, "features") else np.asarray(belief, dtype=np.float64)
    if bel.size != nets.belief_dim:
        raise ShapeError(f"belief has {bel.size} features, the agent expects {nets.belief_dim}")
    w_noise, a_noise = _noise(nets, 1, rng, mode)
    s = np.asarray(s, dtype=np.float64).reshape(1, -1)
    out = policy_sample(nets, s, bel.reshape(1, nets.belief_dim), w_noise, a_noise)
    return ActionSample(out.w.value[0].copy(), out.pre_tanh.value[0].copy(), out.action.value[0].copy(),
                        float(out.log_prob_w.value[0]), float(out.log_prob_action.value[0]))


def q_value(nets, s, bel, a):
    return _forward(nets.q_spec, nets.q, s, _belief_input(bel, len(s)), a)


def state_value(nets, params, s, bel):
    return _forward(nets.v_spec, params, s, _belief_input(bel, len(s)))


def policy_penalty(out, hyper):
    """Per-row regularizer: beta log pi1(w) for the IB objective, alpha times the full path for plain SAC"""
    if hyper.objective == "sac":
        return hyper.sac_alpha * (out.log_prob_w + out.log_prob_action)
    return hyper.beta * out.log_prob_w


def actor_loss(nets, batch, hyper, rng):
    """mean[penalty(w, a) - Q(s, b, a)] with (w, a) freshly reparameterized"""
    w_noise, a_noise = _noise(nets, batch.size, rng, "sample")
    out = policy_sample(nets, batch.s, batch.bel_pi, w_noise, a_noise)
    bel_q = batch.bel_q.value if isinstance(batch.bel_q, Tensor) else batch.bel_q
    q = ndiff.reshape(q_value(nets, batch.s, bel_q, out.action), (-1,))
    return ndiff.reduce_mean(policy_penalty(out, hyper) - q)


def q_target(nets, batch, gamma):
    """r + gamma V_target(s', b'), a constant"""
    v_next = state_value(nets, nets.v_target, batch.s2, batch.bel_next).value
    return batch.r + gamma * v_next


def q_critic_loss(nets, batch, gamma):
    err = q_value(nets, batch.s, batch.bel_q, batch.a) - q_target(nets, batch, gamma)
    return ndiff.reduce_mean(err * err)


def v_target(nets, batch, hyper):
    """Q(s, b, a~) - penalty(w~, a~) at the mean of pi1 and pi2, a constant"""
    bel_pi = batch.bel_pi.value if isinstance(batch.bel_pi, Tensor) else batch.bel_pi
    bel_q = batch.bel_q.value if isinstance(batch.bel_q, Tensor) else batch.bel_q
    w_noise, a_noise = _noise(nets, batch.size, None, "mean")
    out = policy_sample(nets, batch.s, bel_pi, w_noise, a_noise)
    q = q_value(nets, batch.s, bel_q, out.action).value
    return q - policy_penalty(out, hyper).value.reshape(-1, 1)


def v_critic_loss(nets, batch, hyper):
    err = state_value(nets, nets.v, batch.s, batch.bel_v) - v_target(nets, batch, hyper)
    return ndiff.reduce_mean(err * err)


def polyak_update(target, source, lam):
    """target <- (1 - lam) target + lam source, entry by entry"""
    if target.names != source.names:
        raise ShapeError(f"polyak: {target.name} and {source.name} hold different entries")
    for key in target.names:
        t, s = target[key], source[key]
        if t.shape != s.shape:
            raise ShapeError(f"polyak: {key} shapes {t.shape} vs {s.shape}")
        t.value = s.value.copy() if lam == 1.0 else t.value + lam * (s.value - t.value)
    return target


def _step(loss_fn, params, lr, belief_set=None):
    with Tape() as tape:
        tape.watch(*params, belief_set)
        loss = loss_fn()
    grads = tape.gradient(loss)
    for p in params:
        ndiff.adam_step(p, grads[p.name], lr=lr)
    if belief_set is not None:
        ndiff.adam_step(belief_set, grads[belief_set.name], lr=lr)
    return loss.item()


def agent_update(nets, batch, hyper, rng, belief_sets=None):
    """
    One Adam step on the Q, V and actor losses in that order, then the
    Polyak update of the V target.
    :param belief_sets: optional {"pi": ParameterSet, "q": ..., "v": ...} belief copies
        optimized together with the network that reads them
    :return: (actor, q, v) losses
    """
    belief_sets = belief_sets or {}
    q_loss = _step(lambda: q_critic_loss(nets, batch, hyper.gamma), [nets.q], hyper.lr_q, belief_sets.get("q"))
    v_loss = _step(lambda: v_critic_loss(nets, batch, hyper), [nets.v], hyper.lr_v, belief_sets.get("v"))
    actor = _step(lambda: actor_loss(nets, batch, hyper, rng), [nets.pi1, nets.pi2], hyper.lr_pi,
                  belief_sets.get("pi"))
    polyak_update(nets.v_target, nets.v, hyper.polyak)
    return actor, q_loss, v_loss


def build_agent_batch(embed_nets, context_batches, belief_dim):
    """
    Stack the targets of several tasks with their (stopped-gradient) beliefs.
    b comes from each task's context; b' adds the target transition to b.
    embed_nets=None feeds the prior belief everywhere.
    """
    rows, bel, bel_next = [], [], []
    for cb in context_batches:
        m = len(cb.targets)
        rows.append(cb.targets)
        if belief_dim == 0:
            bel.append(np.zeros((m, 0)))
            bel_next.append(np.zeros((m, 0)))
        elif embed_nets is None:
            bel.append(np.zeros((m, belief_dim)))
            bel_next.append(np.zeros((m, belief_dim)))
        else:
            b = encode(embed_nets, cb.context)
            bel.append(np.tile(b.features(), (m, 1)))
            bel_next.append(updated_belief_features(embed_nets, b, cb.targets))
    return AgentBatch.from_rows(np.concatenate(rows), np.concatenate(bel), np.concatenate(bel_next))


def sample_context_batches(buffers, hyper, rng):
    """One random task subset; one shared context plus targets per chosen task"""
    chosen = sorted(rng.choice(len(buffers), size=min(hyper.tasks_per_step, len(buffers)), replace=False))
    return [sample_batch(buffers[i], hyper.targets_per_context, rng, hyper.k_min, hyper.k_max) for i in chosen]


def train_step(nets, embed_nets, buffers, hyper, rng, freeze_embedding=False, use_embedding=True):
    """
    One training step of the meta-training loop: embedding step (unless frozen),
    then the agent losses on beliefs from the updated encoder.
    :return: LossReport (embed is None when no embedding step was taken)
    """
    batches = sample_context_batches(buffers, hyper, rng)
    embed_loss = None
    if use_embedding and not freeze_embedding:
        embed_loss = embed_step(embed_nets, batches, rng, hyper.lr_embed)
    batch = build_agent_batch(embed_nets if use_embedding else None, batches, nets.belief_dim)
    actor, q_loss, v_loss = agent_update(nets, batch, hyper, rng)
    return LossReport(embed_loss, actor, q_loss, v_loss)
