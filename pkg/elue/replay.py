# ELUE/elue/replay.py

import logging
from dataclasses import dataclass

import numpy as np

import config
from envsim import TRANSITION_WIDTH
from errors import InsufficientDataError, ShapeError

logger = logging.getLogger(__name__)


class TaskBuffer:
    """
    FIFO ring buffer of transition rows for one task.
    :param task_id: id of the task the data belongs to
    :param capacity: maximum number of stored transitions
    """

    def __init__(self, task_id, capacity=config.ReplayConfig.capacity):
        if capacity < 1:
            raise ShapeError(f"buffer capacity must be >= 1, got {capacity}")
        self.task_id = task_id
        self.capacity = int(capacity)
        self.rows = np.zeros((self.capacity, TRANSITION_WIDTH))
        self.insertions = 0

    @property
    def size(self):
        return min(self.insertions, self.capacity)

    def __len__(self):
        return self.size

    def add(self, transition):
        row = transition.to_row() if hasattr(transition, "to_row") else np.asarray(transition, dtype=np.float64)
        if row.shape != (TRANSITION_WIDTH,) or not np.all(np.isfinite(row)):
            raise ShapeError(f"task {self.task_id}: transition must be {TRANSITION_WIDTH} finite values")
        self.rows[self.insertions % self.capacity] = row
        self.insertions += 1

    def extend(self, transitions):
        for tr in transitions:
            self.add(tr)

    def contents(self):
        """Stored rows, oldest first"""
        if self.insertions <= self.capacity:
            return self.rows[:self.insertions].copy()
        start = self.insertions % self.capacity
        return np.concatenate([self.rows[start:], self.rows[:start]])

    def stored_rows(self):
        """Filled slots in storage order (the layout checkpoints persist)"""
        return self.rows[:self.size].copy()

    def restore(self, stored_rows, insertions):
        stored_rows = np.asarray(stored_rows, dtype=np.float64).reshape(-1, TRANSITION_WIDTH)
        if len(stored_rows) != min(int(insertions), self.capacity):
            raise ShapeError(f"task {self.task_id}: {len(stored_rows)} rows do not match "
                             f"{insertions} insertions at capacity {self.capacity}")
        self.rows = np.zeros((self.capacity, TRANSITION_WIDTH))
        self.rows[:len(stored_rows)] = stored_rows
        self.insertions = int(insertions)
        return self


@dataclass
class ContextBatch:
    task_id: int
    context: np.ndarray  # (k, TRANSITION_WIDTH)
    targets: np.ndarray  # (M, TRANSITION_WIDTH)


def sample_context(buffer, rng, k_min=config.ReplayConfig.k_min, k_max=config.ReplayConfig.k_max):
    """
    k ~ Uniform{k_min..k_max} clamped to the buffer size, then k rows
    drawn uniformly with replacement.
    """
    size = buffer.size
    if size < k_min:
        raise InsufficientDataError(
            f"task {buffer.task_id}: buffer holds {size} transitions but contexts need at least "
            f"{k_min}; collect more data first")
    k = min(int(rng.integers(k_min, k_max + 1)), size)
    idx = rng.integers(0, size, size=k)
    return buffer.rows[idx].copy()


def sample_batch(buffer, M, rng, k_min=config.ReplayConfig.k_min, k_max=config.ReplayConfig.k_max):
    """One shared context plus M target rows drawn independently of it"""
    if M < 1:
        raise ShapeError(f"need at least one target per context, got {M}")
    context = sample_context(buffer, rng, k_min, k_max)
    targets = buffer.rows[rng.integers(0, buffer.size, size=M)].copy()
    return ContextBatch(buffer.task_id, context, targets)
