# ELUE/elue/errors.py

"""
Exception hierarchy shared by every module.
The harness maps ConfigError / CheckpointVersionError to exit code 2 and
every other EluError to exit code 3.
"""


class EluError(Exception):
    """Root of all errors raised by this package"""


class ShapeError(EluError, ValueError):
    """Tensor shapes do not fit the operation (message names the layer or op)"""


class GradientError(EluError):
    """Reverse-mode differentiation or optimizer contract violated"""


class TaskError(EluError, ValueError):
    """Unknown task family or malformed task record"""


class EpisodeFinishedError(EluError):
    """step() called on an episode that already reached the horizon"""


class InsufficientDataError(EluError):
    """Replay buffer holds fewer tuples than a context needs"""


class EmptyContextError(EluError, ValueError):
    """Embedding loss requested on a context with no tuples"""


class ConfigError(EluError, ValueError):
    """Invalid experiment configuration"""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CheckpointError(EluError):
    """Checkpoint file is malformed or incompatible"""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written with a different schema version"""


class MetaRunError(EluError):
    """Failure inside meta-training / meta-testing, with run context attached"""

    def __init__(self, message, iteration=None, task_id=None):
        self.iteration = iteration
        self.task_id = task_id
        super().__init__(f"{message} (iteration={iteration}, task_id={task_id})")
