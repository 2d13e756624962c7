# ELUE/elue/metrics.py

import json
import logging
import math

import pandas as pd

logger = logging.getLogger(__name__)

REQUIRED_FIELDS = ("run_id", "phase", "iteration", "env_steps", "task_id", "episode_index", "return",
                   "losses", "belief_std_mean", "seed")
LOSS_NAMES = ("embed", "actor", "q", "v")
SUMMARY_COLUMNS = ["phase", "episode_index", "count", "mean_return", "std_return"]


def _clean(value):
    """JSON-safe scalar: numpy scalars to Python, non-finite floats to null"""
    if value is None:
        return None
    if hasattr(value, "item"):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class MetricsWriter:
    """
    Append-only line-delimited JSON stream, flushed after every record.
    Records carry no timestamps, so identical runs give identical files.
    :param path: output file, or None to keep records in memory only
    """

    def __init__(self, path=None, run_id="elue", seed=0):
        self.path = path
        self.run_id = run_id
        self.seed = seed
        self.records = []
        self._file = open(path, "w", encoding="utf-8") if path else None

    def write(self, phase, iteration=None, env_steps=None, task_id=None, episode_index=None, episode_return=None,
              losses=None, belief_std_mean=None):
        losses = losses or {}
        record = {
            "run_id": self.run_id,
            "phase": phase,
            "iteration": _clean(iteration),
            "env_steps": _clean(env_steps),
            "task_id": _clean(task_id),
            "episode_index": _clean(episode_index),
            "return": _clean(episode_return),
            "losses": {name: _clean(losses.get(name)) for name in LOSS_NAMES},
            "belief_std_mean": _clean(belief_std_mean),
            "seed": self.seed,
        }
        self.records.append(record)
        if self._file is not None:
            self._file.write(json.dumps(record) + "\n")
            self._file.flush()
        return record

    def close(self):
        if self._file is not None:
            self._file.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_records(metrics_path):
    """
    Parse a metrics file, skipping malformed lines.
    :return: (list of records, number of skipped lines)
    """
    records, skipped = [], 0
    with open(metrics_path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                skipped += 1
                continue
            if not isinstance(record, dict) or any(key not in record for key in ("phase", "episode_index", "return")):
                skipped += 1
                continue
            records.append(record)
    return records, skipped


def summarize(metrics_path, out_path=None):
    """
    Per (phase, episode_index): count, mean return, population std (ddof 0, so 0 for a single record).
    Records without an episode index or return (e.g. training-iteration records) are left out.
    :return: (summary DataFrame, number of skipped malformed lines)
    """
    records, skipped = read_records(metrics_path)
    if skipped:
        logger.warning(f"[SUMMARY] Skipped {skipped} malformed record(s) in {metrics_path}")

    df = pd.DataFrame(records, columns=["phase", "episode_index", "return"])
    df = df.dropna(subset=["episode_index", "return"])
    if df.empty:
        table = pd.DataFrame(columns=SUMMARY_COLUMNS)
    else:
        df["episode_index"] = df["episode_index"].astype(int)
        df["return"] = df["return"].astype(float)
        grouped = df.groupby(["phase", "episode_index"], sort=True)["return"]
        table = grouped.agg(count="count", mean_return="mean", std_return=lambda s: s.std(ddof=0)).reset_index()
        table = table[SUMMARY_COLUMNS]

    if out_path:
        table.to_csv(out_path, index=False)
        logger.info(f"[SUMMARY] Wrote {len(table)} rows to {out_path}")
    return table, skipped
