# ELUE/elue/envsim.py

"""
Analytic 2-D point-navigation task families.

The agent starts at the origin of the box [-1, 1]^2 and moves by at most
ACTION_SCALE per axis each step. The task (goal position or rotation of the
action frame) is hidden: the observation is the position only.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

import config
from errors import EpisodeFinishedError, TaskError

logger = logging.getLogger(__name__)

# Column layout of a transition row: s (2) | a (2) | r (1) | s' (2)
S = slice(0, 2)
A = slice(2, 4)
R = 4
S2 = slice(5, 7)
TRANSITION_WIDTH = 2 * config.STATE_DIM + config.ACTION_DIM + 1


@dataclass(frozen=True)
class TaskSpec:
    family: str
    goal: tuple
    rotation_angle: float = 0.0
    task_id: int = 0
    seed: int = 0

    @property
    def goal_array(self):
        return np.array(self.goal, dtype=np.float64)


@dataclass(frozen=True)
class EnvState:
    position: tuple = (0.0, 0.0)
    step_index: int = 0


@dataclass(frozen=True)
class Transition:
    state: tuple
    action: tuple
    reward: float
    next_state: tuple

    def to_row(self):
        return np.array([*self.state, *self.action, self.reward, *self.next_state], dtype=np.float64)

    @classmethod
    def from_row(cls, row):
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (TRANSITION_WIDTH,):
            raise TaskError(f"transition row must have {TRANSITION_WIDTH} values, got shape {row.shape}")
        return cls(tuple(row[S]), tuple(row[A]), float(row[R]), tuple(row[S2]))


def rotation_matrix(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


# --- Task sampling ---

def _stratified(n, rng):
    """One uniform draw inside each of n equal cells of [0, 1)"""
    return (np.arange(n) + rng.uniform(0.0, 1.0, size=n)) / n


def sample_tasks(family, n, seed):
    """
    Sample n tasks of a family, deterministic given seed.
    Goal angles (or rotations) are jittered from an evenly spaced grid so
    small task sets still cover the family.
    """
    if family not in config.TASK_FAMILIES:
        raise TaskError(f"unknown task family '{family}' (expected one of {config.TASK_FAMILIES})")
    if n < 1:
        raise TaskError(f"need n >= 1 tasks, got {n}")
    rng = np.random.default_rng(seed)
    cells = _stratified(n, rng)
    task_seeds = rng.integers(0, 2**31 - 1, size=n)
    tasks = []
    for i in range(n):
        if family == "rotated_dynamics":
            angle = -0.5 * math.pi + math.pi * cells[i]
            goal, rotation = config.ROTATED_GOAL, float(angle)
        else:
            radius = config.RADIAL_GOAL_RADIUS if family == "radial_goal" else config.SHIFTED_GOAL_RADIUS
            theta = 2.0 * math.pi * cells[i]
            goal, rotation = (radius * math.cos(theta), radius * math.sin(theta)), 0.0
        tasks.append(TaskSpec(family, (float(goal[0]), float(goal[1])), rotation, i, int(task_seeds[i])))
    return tasks


# --- Dynamics ---

def reset(task):
    return EnvState((0.0, 0.0), 0)


def step(task, st, action, horizon=config.HORIZON):
    """
    Advance one step.
    :return: (reward, next EnvState, done)
    """
    if st.step_index >= horizon:
        raise EpisodeFinishedError(f"task {task.task_id}: episode already finished at step {st.step_index}")
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (config.ACTION_DIM,) or not np.all(np.isfinite(action)):
        raise TaskError(f"action must be a finite {config.ACTION_DIM}-vector, got {action!r}")
    delta = config.ACTION_SCALE * rotation_matrix(task.rotation_angle) @ np.clip(action, -1.0, 1.0)
    position = np.clip(np.asarray(st.position) + delta, -config.BOX_LIMIT, config.BOX_LIMIT)
    reward = -float(np.linalg.norm(position - task.goal_array))
    nxt = EnvState((float(position[0]), float(position[1])), st.step_index + 1)
    return reward, nxt, nxt.step_index == horizon


def oracle_return(task, horizon=config.HORIZON):
    """Return of moving straight to the goal at full speed, then holding"""
    distance = float(np.linalg.norm(task.goal_array))
    return -sum(max(distance - config.ACTION_SCALE * t, 0.0) for t in range(1, horizon + 1))


# --- Controllers and rollouts ---

class OracleController:
    """Scripted optimal controller; compensates the task's action rotation exactly"""

    def __init__(self, task):
        self.task = task
        self.inverse_rotation = rotation_matrix(-task.rotation_angle)

    def reset(self):
        pass

    def act(self, position, rng=None):
        offset = self.task.goal_array - np.asarray(position)
        distance = np.linalg.norm(offset)
        if distance == 0.0:
            return np.zeros(config.ACTION_DIM)
        move = offset / max(distance, config.ACTION_SCALE)
        return self.inverse_rotation @ move

    def observe(self, transition):
        pass


class RandomController:
    def reset(self):
        pass

    def act(self, position, rng):
        return rng.uniform(-1.0, 1.0, size=config.ACTION_DIM)

    def observe(self, transition):
        pass


def run_episode(task, controller, rng, horizon=config.HORIZON):
    """
    Roll out one episode. The controller sees every transition through
    observe(), so belief-keeping controllers update as they go.
    :return: (episode return, list of Transition)
    """
    st = reset(task)
    transitions, total, done = [], 0.0, False
    while not done:
        action = np.clip(np.asarray(controller.act(st.position, rng), dtype=np.float64), -1.0, 1.0)
        reward, nxt, done = step(task, st, action, horizon)
        tr = Transition(st.position, (float(action[0]), float(action[1])), reward, nxt.position)
        controller.observe(tr)
        transitions.append(tr)
        total += reward
        st = nxt
    return total, transitions


def random_policy_return(family, n, seed, horizon=config.HORIZON):
    """Mean single-episode return of uniform random actions over n sampled tasks"""
    rng = np.random.default_rng(seed)
    controller = RandomController()
    returns = [run_episode(task, controller, rng, horizon)[0] for task in sample_tasks(family, n, seed)]
    return float(np.mean(returns))


# --- Task files: family,task_id,goal_x,goal_y,rotation_angle,seed ---

def format_task_line(task):
    return f"{task.family},{task.task_id},{task.goal[0]!r},{task.goal[1]!r},{task.rotation_angle!r},{task.seed}"


def parse_task_line(line, lineno=None):
    parts = [p.strip() for p in line.split(",")]
    where = f"line {lineno}: " if lineno is not None else ""
    if len(parts) != 6:
        raise TaskError(f"{where}expected 6 comma-separated fields, got {len(parts)}")
    family = parts[0]
    if family not in config.TASK_FAMILIES:
        raise TaskError(f"{where}unknown task family '{family}'")
    try:
        return TaskSpec(family, (float(parts[2]), float(parts[3])), float(parts[4]), int(parts[1]), int(parts[5]))
    except ValueError as exc:
        raise TaskError(f"{where}{exc}") from exc


def save_tasks(path, tasks):
    with open(path, "w", encoding="utf-8") as f:
        for task in tasks:
            f.write(format_task_line(task) + "\n")
    logger.info(f"Wrote {len(tasks)} tasks to {path}")


def load_tasks(path):
    tasks = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if line.strip() and not line.lstrip().startswith("#"):
                tasks.append(parse_task_line(line, lineno))
    if not tasks:
        raise TaskError(f"no tasks found in {path}")
    return tasks
