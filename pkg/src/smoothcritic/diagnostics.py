"""Training-stability instrumentation: gradient norms, singular-value
tracking, crash-hold evaluation series, and the metrics CSV writer.

The metrics CSV has a fixed column order (see MetricsWriter.COLUMNS) and is
fully deterministic for a fixed config and seed; wall-clock timings go to a
separate timing file so reruns stay bitwise identical.
"""

from __future__ import annotations

import numpy as np

from .agents import grad_l2_norm
from .errors import ContractError
from .specnorm import singular_value_report

grad_norm = grad_l2_norm


def track_singular_values(head, step: int) -> list[dict]:
    """Per-layer singular value report rows, stamped with the step."""
    rows = singular_value_report(head)
    for r in rows:
        r["step"] = step
    return rows


def crash_hold(steps: list[int], returns: list[float],
               crash_step: int | None) -> list[float]:
    """Carry the last pre-crash evaluation return forward past a crash.

    Evaluations strictly after `crash_step` are replaced by the last valid
    value; if the crash precedes the first evaluation the series is all
    zeros.
    """
    if crash_step is None:
        return list(returns)
    held: list[float] = []
    last = 0.0
    for s, r in zip(steps, returns):
        if s <= crash_step:
            last = r
            held.append(r)
        else:
            held.append(last)
    return held


class MetricsWriter:
    """Append-only CSV of per-logged-step training metrics."""

    COLUMNS = ["step", "critic_loss", "actor_loss", "alpha_loss", "alpha",
               "critic_grad_norm", "actor_grad_norm", "episode_return",
               "sigma_hat_max", "crash"]

    def __init__(self, path):
        self.path = path
        self._last_step = None
        self._fh = open(path, "w")
        self._fh.write(",".join(self.COLUMNS) + "\n")

    def write(self, record: dict) -> None:
        step = record["step"]
        if self._last_step is not None and step <= self._last_step:
            raise ContractError("metrics steps must be strictly increasing")
        self._last_step = step
        values = []
        for col in self.COLUMNS:
            v = record.get(col, 0.0)
            if col == "step" or col == "crash":
                values.append(str(int(v)))
            else:
                values.append(repr(float(v)))
        self._fh.write(",".join(values) + "\n")

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics_csv(path) -> dict[str, np.ndarray]:
    with open(path) as f:
        header = f.readline().strip().split(",")
        rows = [line.strip().split(",") for line in f if line.strip()]
    cols = {name: np.asarray([float(r[i]) for r in rows])
            for i, name in enumerate(header)}
    return cols
