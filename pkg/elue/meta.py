# ELUE/elue/meta.py

"""
Meta-training and meta-testing loops.

meta_train: initial sampling on every training task, embedding pretraining,
then iterations of (collect on a task subset with beliefs reset to the
prior and updated every step) followed by training steps.

meta_test: adapt to one new task with the encoder frozen, in one of the
adaptation modes:
    inference      belief updates only, no gradient steps
    no_bel_update  belief stays at the prior, no gradient steps
    bel_grad       belief copied per network and optimized with the networks
    no_bel_grad    belief is a fixed input, only the networks are optimized
    scratch        fresh belief-free agent trained on the new task
    no_emb         agent meta-trained without the embedding (prior belief)
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

import config
from agent import AgentBatch, AgentNets, Hyperparams, act, agent_update, build_agent_batch, train_step
from checkpoint import Checkpoint
from embed import BeliefState, EmbedNets, belief_update, pretrain_embedding, prior_for
from envsim import run_episode, sample_tasks
from errors import ConfigError, EluError, MetaRunError
from metrics import MetricsWriter
from ndiff import ParameterSet
from replay import TaskBuffer, sample_batch

logger = logging.getLogger(__name__)

BELIEF_UPDATE_MODES = ("inference", "bel_grad", "no_bel_grad")
GRADIENT_MODES = ("bel_grad", "no_bel_grad", "scratch", "no_emb")
EMBEDDING_MODES = ("inference", "no_bel_update", "bel_grad", "no_bel_grad")


class BeliefController:
    """
    Acts with an agent on its current belief and folds every observed
    transition into that belief.
    :param embed_nets: encoder, or None (the agent then sees the prior, or nothing if belief-free)
    :param mode: "mean" or "sample" actions
    """

    def __init__(self, agent, embed_nets=None, mode="mean", update_belief=True):
        self.agent = agent
        self.embed_nets = embed_nets
        self.mode = mode
        self.update_belief = update_belief and embed_nets is not None
        self.reset()

    def reset(self):
        if self.embed_nets is not None:
            self.belief = prior_for(self.embed_nets)
        elif self.agent.belief_dim:
            self.belief = np.zeros(self.agent.belief_dim)
        else:
            self.belief = None

    def features(self):
        if isinstance(self.belief, BeliefState):
            return self.belief.features()
        return None if self.belief is None else np.asarray(self.belief)

    def belief_std_mean(self):
        feats = self.features()
        if feats is None or feats.size == 0:
            return None
        return float(np.mean(np.exp(feats[feats.size // 2:])))

    def act(self, position, rng):
        return act(self.agent, position, self.belief, self.mode, rng).action

    def observe(self, transition):
        if self.update_belief:
            self.belief = belief_update(self.embed_nets, self.belief, transition)


def collect(controller, task, buffer, steps, rng, horizon=config.HORIZON):
    """Run steps // horizon episodes into the buffer; the belief carries across episodes"""
    returns = []
    for _ in range(steps // horizon):
        episode_return, transitions = run_episode(task, controller, rng, horizon)
        buffer.extend(transitions)
        returns.append(episode_return)
    logger.debug(f"[COLLECT] task {task.task_id}: {len(returns)} episode(s), buffer size {buffer.size}")
    return returns


def _mean_losses(reports):
    if not reports:
        return {}
    out = {}
    for name in ("embed", "actor", "q", "v"):
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        out[name] = float(np.mean(values)) if values else None
    return out


def _streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# --- Evaluation ---

@dataclass
class EvaluationResult:
    task_ids: list
    returns: np.ndarray  # (n_tasks, episodes)

    @property
    def per_episode_mean(self):
        return self.returns.mean(axis=0).tolist()


def _evaluate_task(task, controller, episodes, seed, horizon):
    rng = np.random.default_rng([seed, task.task_id])
    controller.reset()
    return [run_episode(task, controller, rng, horizon)[0] for _ in range(episodes)]


def evaluate_controller(tasks, make_controller, episodes, seed=0, n_jobs=1, horizon=config.HORIZON):
    """
    Roll out `episodes` consecutive episodes per task; the controller is reset
    once per task so its belief accumulates across episode boundaries.
    :param make_controller: task -> controller
    """
    if episodes < 1:
        raise ConfigError(f"need at least one evaluation episode, got {episodes}")
    rows = Parallel(n_jobs=n_jobs)(
        delayed(_evaluate_task)(task, make_controller(task), episodes, seed, horizon) for task in tasks)
    return EvaluationResult([t.task_id for t in tasks], np.array(rows, dtype=np.float64))


def _write_evaluation(metrics, phase, result, iteration=None, env_steps=None):
    for task_id, task_returns in zip(result.task_ids, result.returns):
        for episode_index, episode_return in enumerate(task_returns, start=1):
            metrics.write(phase, iteration, env_steps, task_id, episode_index, float(episode_return))


def evaluate(ckpt, tasks, episodes, n_jobs=1, seed=0, metrics=None):
    """Mean-action rollouts of a checkpoint's agent; returns per-episode means across tasks"""
    horizon = ckpt.cfg.env.horizon
    result = evaluate_controller(tasks, lambda task: BeliefController(ckpt.agent, ckpt.embed_nets, "mean"),
                                 episodes, seed, n_jobs, horizon)
    if metrics is not None:
        _write_evaluation(metrics, "evaluate", result)
    means = result.per_episode_mean
    logger.info(f"[EVAL] {len(tasks)} tasks, mean return per episode: "
                + ", ".join(f"{m:.3f}" for m in means))
    return result


# --- Meta-training ---

def meta_train(cfg, metrics=None):
    """
    Run meta-training.
    :return: Checkpoint of the final state
    """
    cfg.validate()
    metrics = metrics if metrics is not None else MetricsWriter(None, cfg.run.run_id, cfg.run.seed)
    env, tr = cfg.env, cfg.train
    hyper = Hyperparams.from_config(cfg)
    rng_init, rng_collect, rng_train = _streams(cfg.run.seed, 3)
    progress = dict(iteration=0, task_id=None)

    try:
        tasks = sample_tasks(env.family, env.n_train_tasks, cfg.run.seed)
        eval_tasks = sample_tasks(env.family, env.n_eval_tasks, env.eval_seed)
        use_embedding = cfg.embed.use_embedding
        embed_nets = EmbedNets.from_config(cfg.embed, rng_init) if use_embedding else None
        agent = AgentNets.from_config(cfg, rng_init)
        buffers = [TaskBuffer(t.task_id, cfg.replay.capacity) for t in tasks]
        beliefs = {}
        env_steps = 0

        logger.info(f"[TRAIN] {env.family}: {len(tasks)} tasks, initial sampling "
                    f"{tr.initial_sampling_steps} steps per task")
        for task, buf in zip(tasks, buffers):
            progress["task_id"] = task.task_id
            collect(BeliefController(agent, embed_nets, "sample"), task, buf, tr.initial_sampling_steps,
                    rng_collect, env.horizon)
            env_steps += tr.initial_sampling_steps
        progress["task_id"] = None

        if use_embedding and tr.embedding_pretrain_steps:
            pretrain_embedding(embed_nets, buffers, tr.embedding_pretrain_steps, rng_train, cfg.embed.lr,
                               hyper.tasks_per_step, hyper.k_min, hyper.k_max)

        def run_eval(iteration):
            result = evaluate_controller(eval_tasks, lambda task: BeliefController(agent, embed_nets, "mean"),
                                         tr.eval_episodes, cfg.run.seed, cfg.run.n_jobs, env.horizon)
            _write_evaluation(metrics, "meta_train_eval", result, iteration, env_steps)
            logger.info(f"[EVAL] iteration {iteration}: first-episode mean return "
                        f"{result.per_episode_mean[0]:.3f}")

        run_eval(0)
        for it in tqdm(range(1, tr.total_iterations + 1), desc="meta-train", disable=not cfg.run.progress):
            progress["iteration"] = it
            chosen = sorted(rng_collect.choice(len(tasks), size=min(tr.tasks_per_iteration, len(tasks)),
                                               replace=False))
            returns, stds = [], []
            for i in chosen:
                progress["task_id"] = tasks[i].task_id
                controller = BeliefController(agent, embed_nets, "sample")
                returns += collect(controller, tasks[i], buffers[i], tr.collection_steps, rng_collect, env.horizon)
                env_steps += tr.collection_steps
                if controller.belief_std_mean() is not None:
                    stds.append(controller.belief_std_mean())
                if isinstance(controller.belief, BeliefState):
                    beliefs[tasks[i].task_id] = controller.belief
            progress["task_id"] = None

            ready = [buf for buf in buffers if buf.size >= hyper.k_min]
            reports = [train_step(agent, embed_nets, ready, hyper, rng_train, use_embedding=use_embedding)
                       for _ in range(tr.training_steps)]
            losses = _mean_losses(reports)
            metrics.write("meta_train", it, env_steps, episode_return=float(np.mean(returns)), losses=losses,
                          belief_std_mean=float(np.mean(stds)) if stds else None)
            logger.info(f"[TRAIN] iteration {it}/{tr.total_iterations}: collect return "
                        f"{np.mean(returns):.3f}, losses " + ", ".join(
                            f"{k}={v:.4f}" for k, v in losses.items() if v is not None))
            if it % tr.eval_every == 0:
                run_eval(it)
    except MetaRunError:
        raise
    except EluError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise MetaRunError(str(exc), progress["iteration"], progress["task_id"]) from exc

    return Checkpoint(cfg, agent, embed_nets, buffers, beliefs, iteration=tr.total_iterations, env_steps=env_steps)


# --- Meta-testing ---

@dataclass
class MetaTestResult:
    task_id: int
    mode: str
    episode_returns: list
    agent: AgentNets
    embed_nets: EmbedNets = None
    controller: BeliefController = None
    belief_sets: dict = field(default_factory=dict)
    gradient_steps: int = 0


def _check_mode(mode, ckpt):
    if mode not in config.META_TEST_MODES:
        raise ConfigError(f"unknown meta-test mode '{mode}' (expected one of {config.META_TEST_MODES})")
    if mode == "no_emb" and ckpt.embed_nets is not None:
        raise ConfigError("no_emb mode needs a checkpoint meta-trained with [embed] use_embedding = false")
    if mode in EMBEDDING_MODES and ckpt.embed_nets is None:
        raise ConfigError(f"{mode} mode needs a checkpoint with a trained embedding")


def _meta_test_batch(mode, buffer, hyper, rng, controller, embed_nets, belief_sets, belief_dim):
    cb = sample_batch(buffer, hyper.targets_per_context, rng, hyper.k_min, hyper.k_max)
    m = len(cb.targets)
    if mode == "bel_grad":
        batch = AgentBatch.from_rows(cb.targets, np.zeros((m, belief_dim)), np.zeros((m, belief_dim)))
        batch.bel_pi = belief_sets["pi"]["features"]
        batch.bel_q = belief_sets["q"]["features"]
        batch.bel_v = belief_sets["v"]["features"]
        batch.bel_next = np.tile(belief_sets["v"]["features"].value, (m, 1))
        return batch
    if mode == "no_bel_grad" and not controller.update_belief:
        feats = np.tile(controller.features(), (m, 1))
        return AgentBatch.from_rows(cb.targets, feats, feats.copy())
    return build_agent_batch(embed_nets if mode == "no_bel_grad" else None, [cb], belief_dim)


def meta_test(cfg, ckpt, task, metrics=None):
    """
    Adapt a meta-trained checkpoint to one task. The checkpoint is never modified;
    the encoder is only read.
    :return: MetaTestResult
    """
    te = cfg.test
    mode = te.mode
    _check_mode(mode, ckpt)
    metrics = metrics if metrics is not None else MetricsWriter(None, cfg.run.run_id, te.seed)
    horizon = cfg.env.horizon
    hyper = replace(Hyperparams.from_config(cfg), tasks_per_step=1)
    rng_init, rng_collect, rng_train = _streams([te.seed, task.task_id], 3)

    if mode == "scratch":
        agent = AgentNets(rng_init, 0, cfg.agent.w_dim, cfg.agent.hidden)
        embed_nets = None
    else:
        agent = ckpt.agent.copy(with_state=False)
        embed_nets = None if mode == "no_emb" else ckpt.embed_nets
    controller = BeliefController(agent, embed_nets, te.collect_mode, update_belief=mode in BELIEF_UPDATE_MODES)
    buffer = TaskBuffer(task.task_id, cfg.replay.capacity)
    result = MetaTestResult(task.task_id, mode, [], agent, embed_nets, controller)
    env_steps = 0
    iteration = 0

    def record(returns, losses=None):
        for episode_return in returns:
            result.episode_returns.append(episode_return)
            metrics.write("meta_test", iteration, env_steps, task.task_id, len(result.episode_returns),
                          episode_return, losses, controller.belief_std_mean())

    try:
        returns = collect(controller, task, buffer, te.initial_sampling_steps, rng_collect, horizon)
        env_steps += te.initial_sampling_steps
        record(returns)
        if te.belief_freeze_after_initial:
            controller.update_belief = False

        if mode == "bel_grad":
            feats = controller.features()[None, :]
            result.belief_sets = {k: ParameterSet(f"belief_{k}", {"features": feats}) for k in ("pi", "q", "v")}
            controller.update_belief = False

        for iteration in range(1, te.total_iterations + 1):
            if mode == "bel_grad":
                controller.belief = result.belief_sets["pi"]["features"].value[0].copy()
            returns = collect(controller, task, buffer, te.collection_steps, rng_collect, horizon)
            env_steps += te.collection_steps

            losses = None
            if mode in GRADIENT_MODES and te.training_steps and buffer.size >= hyper.k_min:
                reports = []
                for _ in range(te.training_steps):
                    batch = _meta_test_batch(mode, buffer, hyper, rng_train, controller, embed_nets,
                                             result.belief_sets, agent.belief_dim)
                    reports.append(agent_update(agent, batch, hyper, rng_train, result.belief_sets))
                    result.gradient_steps += 1
                losses = {name: float(np.mean([r[i] for r in reports])) for i, name in enumerate(("actor", "q", "v"))}
            record(returns, losses)
            logger.info(f"[TEST] {mode} task {task.task_id} iteration {iteration}: returns "
                        + ", ".join(f"{r:.3f}" for r in returns))
    except EluError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise MetaRunError(str(exc), iteration, task.task_id) from exc
    return result
