# ELUE/elue/conftest.py

import os

import numpy as np
import pytest

from config import HORIZON, ExperimentConfig
from agent import AgentNets
from embed import EmbedNets
from envsim import RandomController, run_episode, sample_tasks
from ndiff import Tape
from replay import TaskBuffer

FD_EPS = 1e-5


def pytest_collection_modifyitems(config, items):
    if os.environ.get("ELUE_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="desk-scale run; set ELUE_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def max_fd_error(loss_fn, param_sets, eps=FD_EPS):
    """
    Largest relative error between tape gradients and central finite differences,
    |a - n| / max(|a|, |n|, 1e-4), over every entry of every parameter set.
    loss_fn must be deterministic (re-seed any rng inside it).
    """
    with Tape() as tape:
        tape.watch(*param_sets)
        loss = loss_fn()
    analytic = tape.gradient(loss)
    worst = 0.0
    for params in param_sets:
        for key in params.names:
            flat = params[key].value.reshape(-1)
            grad = analytic[params.name][key].reshape(-1)
            for i in range(flat.size):
                original = flat[i]
                flat[i] = original + eps
                up = loss_fn().item()
                flat[i] = original - eps
                down = loss_fn().item()
                flat[i] = original
                numeric = (up - down) / (2.0 * eps)
                worst = max(worst, abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), 1e-4))
    return worst


@pytest.fixture
def fd_error():
    return max_fd_error


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_embed():
    """Small smooth (tanh) encoder/decoders so finite differences are exact enough"""
    return EmbedNets(np.random.default_rng(1), z_dim=2, aggregate_dim=3, hidden=4, activation="tanh")


@pytest.fixture
def tiny_agent():
    return AgentNets(np.random.default_rng(2), belief_dim=4, w_dim=2, hidden=4, activation="tanh")


def fill_buffers(family="radial_goal", n_tasks=3, episodes=2, seed=0, horizon=HORIZON):
    """Task buffers filled with uniform random-action episodes"""
    rng = np.random.default_rng(seed)
    controller = RandomController()
    buffers = []
    for task in sample_tasks(family, n_tasks, seed):
        buf = TaskBuffer(task.task_id, capacity=1000)
        for _ in range(episodes):
            buf.extend(run_episode(task, controller, rng, horizon)[1])
        buffers.append(buf)
    return buffers


@pytest.fixture
def random_buffers():
    return fill_buffers()


def tiny_config(**sections):
    """Fast ExperimentConfig: short horizon, small nets, few steps"""
    cfg = ExperimentConfig()
    cfg.env.horizon = 8
    cfg.env.n_train_tasks = 2
    cfg.env.n_eval_tasks = 2
    cfg.embed.z_dim = 2
    cfg.embed.aggregate_dim = 6
    cfg.embed.hidden = 6
    cfg.agent.w_dim = 2
    cfg.agent.hidden = 6
    cfg.replay.capacity = 500
    cfg.replay.k_max = 8
    cfg.replay.targets_per_context = 4
    tr = cfg.train
    tr.total_iterations, tr.tasks_per_iteration, tr.collection_steps = 2, 2, 8
    tr.training_steps, tr.tasks_per_step, tr.initial_sampling_steps = 2, 2, 16
    tr.embedding_pretrain_steps, tr.eval_every, tr.eval_episodes = 2, 1, 2
    te = cfg.test
    te.n_tasks, te.collection_steps, te.training_steps = 2, 8, 2
    te.total_iterations, te.initial_sampling_steps = 2, 8
    for section, values in sections.items():
        for key, value in values.items():
            setattr(getattr(cfg, section), key, value)
    return cfg.validate()
