# ELUE/elue/embed.py

"""
Variational task embedding.

A deep-set encoder g(sum_t f(c_t)) maps a set of transitions to a diagonal
Gaussian belief over the latent task variable z. Reward and next-state
decoders give the reconstruction terms of the embedding ELBO. Because the
encoder only sums per-transition features, beliefs can be updated one
transition at a time at constant cost.
"""

import logging
from dataclasses import dataclass

import numpy as np

import config
import ndiff
from envsim import A, R, S, S2, TRANSITION_WIDTH
from errors import EmptyContextError, InsufficientDataError, ShapeError
from ndiff import MlpSpec, ParameterSet, Tape
from replay import ContextBatch, sample_context

logger = logging.getLogger(__name__)


class EmbedNets:
    """
    Encoder f, g and the two decoders, all stored in one ParameterSet ("embed")
    under the prefixes f., g., rdec., sdec.
    """

    def __init__(self, rng, z_dim=config.EmbedConfig.z_dim, aggregate_dim=config.EmbedConfig.aggregate_dim,
                 hidden=config.EmbedConfig.hidden, activation="relu"):
        self.z_dim = int(z_dim)
        self.aggregate_dim = int(aggregate_dim)
        sd, ad = config.STATE_DIM, config.ACTION_DIM
        self.f_spec = MlpSpec((TRANSITION_WIDTH, hidden, hidden, aggregate_dim), activation)
        self.g_spec = MlpSpec((aggregate_dim, hidden, hidden, 2 * z_dim), activation)
        self.reward_spec = MlpSpec((2 * sd + ad + z_dim, hidden, hidden, 2), activation)
        self.state_spec = MlpSpec((sd + ad + z_dim, hidden, hidden, 2 * sd), activation)
        self.params = ParameterSet("embed", ndiff.merge_entries(
            ndiff.init_mlp(self.f_spec, rng, "f."),
            ndiff.init_mlp(self.g_spec, rng, "g."),
            ndiff.init_mlp(self.reward_spec, rng, "rdec."),
            ndiff.init_mlp(self.state_spec, rng, "sdec."),
        ))

    @classmethod
    def from_config(cls, embed_cfg, rng):
        return cls(rng, embed_cfg.z_dim, embed_cfg.aggregate_dim, embed_cfg.hidden)


@dataclass
class BeliefState:
    aggregate: np.ndarray
    count: int
    mean: np.ndarray
    log_std: np.ndarray

    def features(self):
        """Network input: concatenated (mean, log_std)"""
        return np.concatenate([self.mean, self.log_std])

    @property
    def std_mean(self):
        return float(np.mean(np.exp(self.log_std)))

    def equals(self, other):
        return (self.count == other.count and np.array_equal(self.aggregate, other.aggregate)
                and np.array_equal(self.mean, other.mean) and np.array_equal(self.log_std, other.log_std))


def prior(z_dim=config.EmbedConfig.z_dim, aggregate_dim=config.EmbedConfig.aggregate_dim):
    """Standard normal belief; does not depend on the encoder parameters"""
    return BeliefState(np.zeros(aggregate_dim), 0, np.zeros(z_dim), np.zeros(z_dim))


def prior_for(nets):
    return prior(nets.z_dim, nets.aggregate_dim)


def _check_rows(rows):
    if isinstance(rows, (list, tuple)) and rows and hasattr(rows[0], "to_row"):
        rows = [tr.to_row() for tr in rows]
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 1 and rows.size == TRANSITION_WIDTH:
        rows = rows.reshape(1, -1)
    if rows.ndim != 2 or rows.shape[1] != TRANSITION_WIDTH:
        raise ShapeError(f"transitions must have shape (k, {TRANSITION_WIDTH}), got {rows.shape}")
    return rows


def canonical_order(rows):
    """Row order that depends only on the set of rows (lexicographic)"""
    return np.lexsort(rows.T[::-1])


def features(nets, rows):
    return ndiff.mlp_forward(nets.f_spec, nets.params, rows, "f.")


def belief_head(nets, aggregate):
    """g(aggregate) -> clamped DiagGaussian over z, one row per aggregate row"""
    out = ndiff.mlp_forward(nets.g_spec, nets.params, aggregate, "g.")
    return ndiff.gaussian_head(out, nets.z_dim)


def posterior(nets, rows):
    """
    Differentiable q(z | context) for a nonempty context.
    :return: (aggregate Tensor of shape (1, aggregate_dim), DiagGaussian of shape (1, z_dim))
    """
    rows = _check_rows(rows)
    if len(rows) == 0:
        raise EmptyContextError("posterior of an empty context is the prior; it has no encoder output")
    rows = rows[canonical_order(rows)]
    aggregate = ndiff.reduce_sum(features(nets, rows), axis=0, keepdims=True)
    return aggregate, belief_head(nets, aggregate)


def _belief_from_aggregate(nets, aggregate, count):
    d = belief_head(nets, aggregate.reshape(1, -1))
    return BeliefState(aggregate.reshape(-1).copy(), int(count), d.mean.value[0].copy(), d.log_std.value[0].copy())


def encode(nets, context):
    """Belief after observing a set of transitions; the empty set gives the prior"""
    rows = _check_rows(context) if len(context) else np.zeros((0, TRANSITION_WIDTH))
    if len(rows) == 0:
        return prior_for(nets)
    aggregate, d = posterior(nets, rows)
    return BeliefState(aggregate.value[0].copy(), len(rows), d.mean.value[0].copy(), d.log_std.value[0].copy())


def belief_update(nets, b, transition):
    """Add one transition to the running aggregate and re-apply the head"""
    row = transition.to_row() if hasattr(transition, "to_row") else transition
    row = _check_rows(row)
    aggregate = b.aggregate + features(nets, row).value[0]
    return _belief_from_aggregate(nets, aggregate, b.count + 1)


def updated_belief_features(nets, b, rows):
    """
    Features of the belief b' obtained by adding each row separately to b.
    :return: (M, 2*z_dim) array, row i conditioned on b plus rows[i]
    """
    rows = _check_rows(rows)
    aggregate = b.aggregate[None, :] + features(nets, rows).value
    d = belief_head(nets, aggregate)
    return np.concatenate([d.mean.value, d.log_std.value], axis=1)


def decode_reward(nets, z, s, a, s2):
    """p(r | s, a, s', z) as a 1-dim DiagGaussian per row"""
    x = ndiff.concat([s, a, s2, z], axis=-1)
    return ndiff.gaussian_head(ndiff.mlp_forward(nets.reward_spec, nets.params, x, "rdec."), 1)


def decode_next_state(nets, z, s, a):
    """p(s' | s, a, z), absolute next state"""
    x = ndiff.concat([s, a, z], axis=-1)
    return ndiff.gaussian_head(ndiff.mlp_forward(nets.state_spec, nets.params, x, "sdec."), config.STATE_DIM)


def context_elbo_terms(nets, rows, noise):
    """
    Negative ELBO pieces for one context.
    :param noise: (1, z_dim) standard normal draw for the single z sample
    :return: (negative log-likelihood Tensor, KL Tensor)
    """
    _, q = posterior(nets, rows)
    z = ndiff.broadcast_to(ndiff.sample_reparam(q, noise), (len(rows), nets.z_dim))
    s, a, r, s2 = rows[:, S], rows[:, A], rows[:, R:R + 1], rows[:, S2]
    log_lik = (ndiff.gaussian_log_prob(decode_reward(nets, z, s, a, s2), r)
               + ndiff.gaussian_log_prob(decode_next_state(nets, z, s, a), s2))
    kl = ndiff.kl_diag_gaussians(q, ndiff.standard_normal(q.mean.shape))
    return -log_lik, kl


def embedding_loss(nets, batches, rng):
    """
    Mean over batches of -E_q[sum_context log p(r|.) + log p(s'|.)] + KL(q || p(z)),
    with one reparameterized z per context.
    """
    if not batches:
        raise EmptyContextError("embedding loss needs at least one context batch")
    total = None
    for batch in batches:
        rows = _check_rows(batch.context) if len(batch.context) else np.zeros((0, TRANSITION_WIDTH))
        if len(rows) == 0:
            raise EmptyContextError(f"task {batch.task_id}: empty context, the embedding loss is undefined")
        noise = rng.standard_normal((1, nets.z_dim))
        nll, kl = context_elbo_terms(nets, rows, noise)
        term = nll + kl
        total = term if total is None else total + term
    return total * (1.0 / len(batches))


def embed_step(nets, batches, rng, lr=config.EmbedConfig.lr):
    """One Adam step on the embedding loss; returns the pre-step loss"""
    with Tape() as tape:
        tape.watch(nets.params)
        loss = embedding_loss(nets, batches, rng)
    ndiff.adam_step(nets.params, tape.gradient(loss)["embed"], lr=lr)
    return loss.item()


def pretrain_embedding(nets, buffers, steps, rng, lr=config.EmbedConfig.lr,
                       tasks_per_step=config.MetaTrainConfig.tasks_per_step,
                       k_min=config.ReplayConfig.k_min, k_max=config.ReplayConfig.k_max):
    """
    Initial embedding training on the initial-sampling data.
    :param buffers: list of TaskBuffer
    :return: nets (updated in place)
    """
    if steps <= 0:
        return nets
    if not buffers or any(buf.size == 0 for buf in buffers):
        raise InsufficientDataError("embedding pretraining needs initial-sampling data in every task buffer")
    losses = []
    for _ in range(steps):
        chosen = rng.choice(len(buffers), size=min(tasks_per_step, len(buffers)), replace=False)
        batches = [ContextBatch(buffers[i].task_id, sample_context(buffers[i], rng, k_min, k_max),
                                np.zeros((0, TRANSITION_WIDTH))) for i in sorted(chosen)]
        losses.append(embed_step(nets, batches, rng, lr))
    logger.info(f"[TRAIN] Embedding pretraining: {steps} steps, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    return nets
