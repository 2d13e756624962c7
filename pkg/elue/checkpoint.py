# ELUE/elue/checkpoint.py

"""
Checkpoint container: one file holding a plain-text, versioned header and a
little-endian float64 blob.

    ELUE-CHECKPOINT
    schema_version = 1
    agent_belief_dim = 10
    has_embedding = true
    iteration = 300
    env_steps = 16384
    begin_config
    [run]
    ...
    end_config
    segment param/pi1/W0 12,64 0
    ...
    end_header
    <blob>

Segment lines are "segment <name> <shape> <byte offset>", shape "-" for scalars.
"""

import logging
import os
from dataclasses import dataclass, field

import numpy as np

import config
from agent import AgentNets
from embed import BeliefState, EmbedNets
from errors import CheckpointError, CheckpointVersionError, ConfigError
from ndiff import SegmentDescriptor, flatten_segments, read_segment
from replay import TaskBuffer

logger = logging.getLogger(__name__)

END_HEADER = b"end_header\n"


@dataclass
class Checkpoint:
    cfg: config.ExperimentConfig
    agent: AgentNets
    embed_nets: EmbedNets = None
    buffers: list = field(default_factory=list)
    beliefs: dict = field(default_factory=dict)
    iteration: int = 0
    env_steps: int = 0
    schema_version: int = config.CHECKPOINT_SCHEMA_VERSION

    @property
    def parameter_sets(self):
        sets = list(self.agent.parameter_sets)
        if self.embed_nets is not None:
            sets.insert(0, self.embed_nets.params)
        return sets


def _parameter_segments(params):
    for key in params.names:
        st = params.state[key]
        yield f"param/{params.name}/{key}", params[key].value
        yield f"adam_m/{params.name}/{key}", st.m
        yield f"adam_v/{params.name}/{key}", st.v
        yield f"adam_step/{params.name}/{key}", np.array(float(st.step))


def _segments(ckpt):
    for params in ckpt.parameter_sets:
        yield from _parameter_segments(params)
    for buf in ckpt.buffers:
        yield f"buffer/{buf.task_id}", buf.stored_rows()
        yield f"buffer_meta/{buf.task_id}", np.array([float(buf.insertions), float(buf.capacity)])
    for task_id, b in sorted(ckpt.beliefs.items()):
        yield f"belief/{task_id}/aggregate", b.aggregate
        yield f"belief/{task_id}/count", np.array(float(b.count))
        yield f"belief/{task_id}/mean", b.mean
        yield f"belief/{task_id}/log_std", b.log_std


def _format_shape(shape):
    return ",".join(str(n) for n in shape) if shape else "-"


def _parse_shape(text):
    return () if text == "-" else tuple(int(n) for n in text.split(","))


def checkpoint_to_bytes(ckpt):
    descriptors, blob = flatten_segments(list(_segments(ckpt)))
    lines = [
        config.CHECKPOINT_MAGIC,
        f"schema_version = {ckpt.schema_version}",
        f"agent_belief_dim = {ckpt.agent.belief_dim}",
        f"has_embedding = {'true' if ckpt.embed_nets is not None else 'false'}",
        f"iteration = {ckpt.iteration}",
        f"env_steps = {ckpt.env_steps}",
        "begin_config",
        config.serialize_config(ckpt.cfg).rstrip("\n"),
        "end_config",
    ]
    lines += [f"segment {d.name} {_format_shape(d.shape)} {d.offset}" for d in descriptors]
    header = ("\n".join(lines) + "\n").encode("utf-8") + END_HEADER
    return header + blob


def save_checkpoint(path, ckpt):
    """Write atomically (temp file then rename)"""
    data = checkpoint_to_bytes(ckpt)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    logger.info(f"[CKPT] Saved checkpoint to {path} ({len(data)} bytes, iteration {ckpt.iteration})")
    return path


def _parse_header(text):
    lines = text.split("\n")
    if not lines or lines[0] != config.CHECKPOINT_MAGIC:
        raise CheckpointError("not an ELUE checkpoint (bad magic line)")
    fields_, descriptors, config_lines = {}, [], []
    in_config = False
    for line in lines[1:]:
        if line == "begin_config":
            in_config = True
        elif line == "end_config":
            in_config = False
        elif in_config:
            config_lines.append(line)
        elif line.startswith("segment "):
            try:
                _, name, shape, offset = line.split(" ")
                descriptors.append(SegmentDescriptor(name, _parse_shape(shape), int(offset)))
            except ValueError as exc:
                raise CheckpointError(f"malformed segment line {line!r}") from exc
        elif " = " in line:
            key, value = line.split(" = ", 1)
            fields_[key] = value
        elif line:
            raise CheckpointError(f"unexpected header line {line!r}")
    return fields_, descriptors, "\n".join(config_lines)


def checkpoint_from_bytes(data):
    pos = data.find(b"\n" + END_HEADER)
    if pos < 0:
        raise CheckpointError("checkpoint header is not terminated")
    header, blob = data[:pos + 1].decode("utf-8"), data[pos + 1 + len(END_HEADER):]
    fields_, descriptors, config_text = _parse_header(header)

    try:
        version = int(fields_.get("schema_version", "-1"))
    except ValueError as exc:
        raise CheckpointError("schema_version is not an integer") from exc
    if version != config.CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointVersionError(
            f"checkpoint schema version {version} is not supported (expected {config.CHECKPOINT_SCHEMA_VERSION})")
    try:
        cfg = config.parse_config_text(config_text, environ={})
    except ConfigError as exc:
        raise CheckpointError(f"checkpoint config echo is invalid: {exc}") from exc

    segments = {}
    for d in descriptors:
        if d.offset + 8 * d.count > len(blob):
            raise CheckpointError(f"segment {d.name} runs past the end of the file")
        segments[d.name] = read_segment(blob, d)

    rng = np.random.default_rng(0)
    belief_dim = int(fields_.get("agent_belief_dim", 2 * cfg.embed.z_dim))
    agent = AgentNets(rng, belief_dim, cfg.agent.w_dim, cfg.agent.hidden)
    embed_nets = EmbedNets.from_config(cfg.embed, rng) if fields_.get("has_embedding") == "true" else None
    ckpt = Checkpoint(cfg, agent, embed_nets, iteration=int(fields_.get("iteration", 0)),
                      env_steps=int(fields_.get("env_steps", 0)), schema_version=version)
    for params in ckpt.parameter_sets:
        _load_parameter_set(params, segments)

    for name in sorted(n for n in segments if n.startswith("buffer/")):
        task_id = int(name.split("/", 1)[1])
        insertions, capacity = segments[f"buffer_meta/{task_id}"]
        buf = TaskBuffer(task_id, int(capacity))
        ckpt.buffers.append(buf.restore(segments[name], int(insertions)))
    ckpt.buffers.sort(key=lambda buf: buf.task_id)

    for name in segments:
        if name.startswith("belief/") and name.endswith("/count"):
            task_id = int(name.split("/")[1])
            prefix = f"belief/{task_id}/"
            ckpt.beliefs[task_id] = BeliefState(segments[prefix + "aggregate"], int(segments[name].item()),
                                                segments[prefix + "mean"], segments[prefix + "log_std"])
    return ckpt


def _load_parameter_set(params, segments):
    for key in params.names:
        name = f"{params.name}/{key}"
        try:
            value = segments[f"param/{name}"]
            m, v, step = segments[f"adam_m/{name}"], segments[f"adam_v/{name}"], segments[f"adam_step/{name}"]
        except KeyError as exc:
            raise CheckpointError(f"checkpoint is missing segment for {name}") from exc
        if value.shape != params[key].shape:
            raise CheckpointError(f"{name}: stored shape {value.shape} does not match {params[key].shape}")
        params.assign({key: value})
        params.state[key].m = m.copy()
        params.state[key].v = v.copy()
        params.state[key].step = int(step.item())


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = checkpoint_from_bytes(data)
    logger.info(f"[CKPT] Loaded checkpoint {path} (iteration {ckpt.iteration}, "
                f"{len(ckpt.buffers)} task buffers)")
    return ckpt


def checkpoints_equal(a, b):
    """Bit-exact comparison of everything a checkpoint stores"""
    return checkpoint_to_bytes(a) == checkpoint_to_bytes(b)
