# ELUE/elue/config.py

import os
import re
from dataclasses import dataclass, field, fields, replace

from errors import ConfigError

# Environment (2-D point navigation)
HORIZON = 32              # steps per episode, no early termination
ACTION_SCALE = 0.1        # displacement per unit action
BOX_LIMIT = 1.0           # positions are clipped to [-1, 1]^2
STATE_DIM = 2
ACTION_DIM = 2
RADIAL_GOAL_RADIUS = 0.5
SHIFTED_GOAL_RADIUS = 0.75
ROTATED_GOAL = (0.5, 0.0)

# Gaussian heads
LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0

# Adam
ADAM_LR = 3e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Checkpoint container
CHECKPOINT_SCHEMA_VERSION = 1
CHECKPOINT_MAGIC = "ELUE-CHECKPOINT"

# Environment variable override prefix: ELUE_<SECTION>_<KEY>
ENV_PREFIX = "ELUE_"

# "#" opens a comment at the start of a line or after whitespace
COMMENT = re.compile(r"(^|\s)#")

TASK_FAMILIES = ("radial_goal", "rotated_dynamics", "shifted_goal")
META_TEST_MODES = ("inference", "no_bel_update", "bel_grad", "no_bel_grad", "scratch", "no_emb")


@dataclass
class RunConfig:
    run_id: str = "elue"
    seed: int = 0
    metrics_path: str = "metrics.jsonl"
    checkpoint_path: str = "elue.ckpt"
    progress: bool = False
    n_jobs: int = 1


@dataclass
class EnvConfig:
    family: str = "radial_goal"
    horizon: int = HORIZON
    n_train_tasks: int = 16
    n_eval_tasks: int = 5
    eval_seed: int = 1000


@dataclass
class EmbedConfig:
    z_dim: int = 5
    aggregate_dim: int = 64
    hidden: int = 64
    use_embedding: bool = True
    lr: float = ADAM_LR


@dataclass
class AgentConfig:
    """Hyperparams of the belief-conditional IB actor-critic"""
    w_dim: int = 5
    hidden: int = 64
    gamma: float = 0.99
    beta: float = 0.2
    polyak: float = 0.005
    lr_pi: float = ADAM_LR
    lr_q: float = ADAM_LR
    lr_v: float = ADAM_LR
    objective: str = "ib"
    sac_alpha: float = 0.2


@dataclass
class ReplayConfig:
    capacity: int = 100_000
    k_min: int = 4
    k_max: int = 64
    targets_per_context: int = 16


@dataclass
class MetaTrainConfig:
    total_iterations: int = 300
    tasks_per_iteration: int = 8
    collection_steps: int = 2 * HORIZON
    training_steps: int = 250
    tasks_per_step: int = 8
    initial_sampling_steps: int = 2 * HORIZON
    embedding_pretrain_steps: int = 2000
    eval_every: int = 10
    eval_episodes: int = 1


@dataclass
class MetaTestConfig:
    mode: str = "inference"
    family: str = "radial_goal"
    n_tasks: int = 5
    task_index: int = 0
    task_seed: int = 2000
    collection_steps: int = HORIZON
    training_steps: int = 100
    total_iterations: int = 10
    initial_sampling_steps: int = HORIZON
    belief_freeze_after_initial: bool = True
    collect_mode: str = "sample"
    seed: int = 0


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    train: MetaTrainConfig = field(default_factory=MetaTrainConfig)
    test: MetaTestConfig = field(default_factory=MetaTestConfig)

    def validate(self):
        validate_config(self)
        return self

    def with_seed(self, seed):
        return replace(self, run=replace(self.run, seed=int(seed)))


SECTIONS = tuple(f.name for f in fields(ExperimentConfig))


def _parse_value(raw, kind, where, line=None):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw.lower() == "true"
        if kind is int:
            return int(raw.replace("_", ""))
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {raw!r} ({exc})", line=line) from exc


def _field_types(section_obj):
    return {f.name: f.type for f in fields(section_obj)}


def _strip_comment(line):
    match = COMMENT.search(line)
    return (line[:match.start()] if match else line).strip()


def parse_config_text(text, environ=None):
    """
    Parse the line-based config format:

        [section]
        key = value    # comment

    Unknown sections/keys are rejected. ELUE_<SECTION>_<KEY> environment
    variables override file values.
    """
    cfg = ExperimentConfig()
    section = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw_line)
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", line=lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw_line.strip()!r}", line=lineno)
        if section is None:
            raise ConfigError("key outside of any [section]", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        section_obj = getattr(cfg, section)
        types = _field_types(section_obj)
        if key not in types:
            raise ConfigError(f"unknown key '{key}' in [{section}]", line=lineno)
        setattr(section_obj, key, _parse_value(value, types[key], f"[{section}] {key}", line=lineno))

    apply_env_overrides(cfg, os.environ if environ is None else environ)
    return validate_config(cfg)


def apply_env_overrides(cfg, environ):
    for name in SECTIONS:
        section_obj = getattr(cfg, name)
        for key, kind in _field_types(section_obj).items():
            env_key = f"{ENV_PREFIX}{name.upper()}_{key.upper()}"
            if env_key in environ:
                setattr(section_obj, key, _parse_value(environ[env_key], kind, env_key))
    return cfg


def load_config(path, environ=None):
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, environ=environ)


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(cfg):
    lines = []
    for name in SECTIONS:
        section_obj = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(section_obj):
            lines.append(f"{f.name} = {_format_value(getattr(section_obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def _require(condition, message):
    if not condition:
        raise ConfigError(message)


def validate_config(cfg):
    env, emb, ag, rep, tr, te = cfg.env, cfg.embed, cfg.agent, cfg.replay, cfg.train, cfg.test
    _require(env.family in TASK_FAMILIES, f"[env] family must be one of {TASK_FAMILIES}")
    _require(te.family in TASK_FAMILIES, f"[test] family must be one of {TASK_FAMILIES}")
    _require(te.mode in META_TEST_MODES, f"[test] mode must be one of {META_TEST_MODES}")
    _require(te.collect_mode in ("sample", "mean"), "[test] collect_mode must be sample or mean")
    _require(ag.objective in ("ib", "sac"), "[agent] objective must be ib or sac")
    _require(env.horizon >= 1, "[env] horizon must be >= 1")
    _require(env.n_train_tasks >= 1 and env.n_eval_tasks >= 1, "[env] task counts must be >= 1")
    _require(emb.z_dim >= 1 and emb.aggregate_dim >= 1 and emb.hidden >= 1, "[embed] sizes must be >= 1")
    _require(ag.w_dim >= 1 and ag.hidden >= 1, "[agent] sizes must be >= 1")
    _require(0.0 < ag.gamma < 1.0, "[agent] gamma must be in (0, 1)")
    _require(ag.beta >= 0.0 and ag.sac_alpha >= 0.0, "[agent] beta and sac_alpha must be >= 0")
    _require(0.0 <= ag.polyak <= 1.0, "[agent] polyak must be in [0, 1]")
    _require(min(ag.lr_pi, ag.lr_q, ag.lr_v, emb.lr) >= 0.0, "learning rates must be >= 0")
    _require(1 <= rep.k_min <= rep.k_max, "[replay] need 1 <= k_min <= k_max")
    _require(rep.capacity >= 1 and rep.targets_per_context >= 1, "[replay] capacity and targets must be >= 1")
    _require(tr.total_iterations >= 0, "[train] total_iterations must be >= 0")
    for name in ("tasks_per_iteration", "training_steps", "tasks_per_step", "eval_every", "eval_episodes"):
        _require(getattr(tr, name) >= 1, f"[train] {name} must be >= 1")
    _require(tr.embedding_pretrain_steps >= 0, "[train] embedding_pretrain_steps must be >= 0")
    for section, obj in (("train", tr), ("test", te)):
        for name in ("collection_steps", "initial_sampling_steps"):
            steps = getattr(obj, name)
            _require(steps >= 0 and steps % env.horizon == 0,
                     f"[{section}] {name} must be a non-negative multiple of the horizon ({env.horizon})")
    _require(tr.collection_steps >= env.horizon, "[train] collection_steps must cover at least one episode")
    _require(te.total_iterations >= 0 and te.training_steps >= 0, "[test] counts must be >= 0")
    _require(0 <= te.task_index < te.n_tasks, "[test] task_index must be < n_tasks")
    _require(cfg.run.n_jobs != 0, "[run] n_jobs must be non-zero")
    for name in SECTIONS:
        for key, value in vars(getattr(cfg, name)).items():
            if isinstance(value, str):
                _require(value == value.strip() and not COMMENT.search(value),
                         f"[{name}] {key} must not contain a comment marker or surrounding whitespace: {value!r}")
    return cfg
