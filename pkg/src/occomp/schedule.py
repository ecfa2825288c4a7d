"""Occasional-regularization scheduling: when to transform weights, how
strongly, and what to log at each event.

The training loop stays untouched between events; the hook is a strict
no-op except at steps t with t % pnr == 0, where it transforms the model's
weight tensors in place and records the incurred weight/loss changes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields

import numpy as np

from . import compress
from .errors import ParameterError, StateError
from .tensor import RngStream

# Reference operating points for the per-batch regularization strength
# e_w / pnr, measured on large recurrent language models. They are starting
# points, not universal constants: use estimate_e_opt for a new setup.
DEFAULT_E_OPT = {"weight_decay": 0.0007, "svd": 0.08, "prune": 0.035}

METRIC_COLUMNS = (
    "step",
    "e_w",
    "reg_error",
    "delta_loss_rel",
    "delta_w",
    "train_loss",
    "test_accuracy",
)


@dataclass
class MetricRecord:
    """One row of the run log: an event, an evaluation, or both."""

    step: int
    e_w: float | None = None
    reg_error: float | None = None
    delta_loss_rel: float | None = None
    delta_w: float | None = None
    train_loss: float | None = None
    test_accuracy: float | None = None

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def write_metrics_csv(records, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRIC_COLUMNS)
        for rec in records:
            row = rec.as_dict()
            writer.writerow(["" if row[c] is None else row[c] for c in METRIC_COLUMNS])


def write_metrics_jsonl(records, path) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec.as_dict()) + "\n")


@dataclass
class GradualSchedule:
    """Ramp of regularization strength from start_step to end_step.

    ``fraction(t)`` rises from 0 to 1; the cubic shape front-loads the ramp
    so most of the target rate is reached early. ``final_rate`` is optional
    and only used by :meth:`target_rate`; when the schedule drives an
    operator spec, the spec's own rates are scaled by ``fraction``.
    """

    start_step: int
    end_step: int
    final_rate: float | None = None
    shape: str = "cubic"

    def __post_init__(self):
        if self.end_step <= self.start_step:
            raise ParameterError(
                f"end_step {self.end_step} must exceed start_step {self.start_step}"
            )
        if self.shape not in ("cubic", "linear"):
            raise ParameterError(f"unknown ramp shape {self.shape!r}")

    def fraction(self, t: int) -> float:
        tau = (t - self.start_step) / (self.end_step - self.start_step)
        tau = min(max(tau, 0.0), 1.0)
        if self.shape == "cubic":
            return 1.0 - (1.0 - tau) ** 3
        return tau

    def target_rate(self, t: int) -> float:
        if self.final_rate is None:
            raise ParameterError("target_rate needs final_rate configured")
        return self.final_rate * self.fraction(t)


@dataclass
class NrSchedule:
    """Regularize every ``pnr`` mini-batches with the configured operator."""

    pnr: int
    spec: compress.CompressionSpec
    gradual: GradualSchedule | None = None
    stop_at_event: bool = False
    e_opt: float | None = None

    def __post_init__(self):
        if self.pnr < 1:
            raise ParameterError(f"pnr must be >= 1, got {self.pnr}")

    def should_regularize(self, t: int) -> bool:
        return t > 0 and t % self.pnr == 0

    def fraction(self, t: int) -> float:
        return self.gradual.fraction(t) if self.gradual is not None else 1.0


class NrHook:
    """train_steps hook that applies an :class:`NrSchedule`.

    Off-schedule steps return None without touching the model. At an event
    the loss is evaluated on the current batch, the operator is applied at
    the ramped strength, the loss is re-evaluated on the same batch, and a
    :class:`MetricRecord` with the weight-change statistics is returned.
    """

    def __init__(self, schedule: NrSchedule, noise_rng: RngStream | None = None):
        self.schedule = schedule
        self.noise_rng = noise_rng
        self.records: list[MetricRecord] = []
        self.last_stats: compress.ApplyStats | None = None

    def __call__(self, step, model, batch, lr) -> MetricRecord | None:
        if not self.schedule.should_regularize(step):
            return None
        try:
            return self._fire(step, model, batch, lr)
        except Exception as exc:
            raise StateError(f"regularization event at step {step} failed: {exc}") from exc

    def _fire(self, step, model, batch, lr) -> MetricRecord:
        x, y = batch
        loss_before, _ = model.forward(x, y)
        weights = {name: model.get_param(name) for name in model.weight_names()}
        rng = self.noise_rng.derive(step) if self.noise_rng is not None else None
        new_weights, stats = compress.apply(
            self.schedule.spec,
            weights,
            fraction=self.schedule.fraction(step),
            lr=lr,
            rng=rng,
        )
        for name in compress.select_layers(self.schedule.spec, weights):
            model.set_param(name, new_weights[name])
        loss_after, _ = model.forward(x, y)
        reg_error = None
        if self.schedule.e_opt is not None:
            reg_error = abs(stats.e_w / self.schedule.pnr - self.schedule.e_opt)
        record = MetricRecord(
            step=step,
            e_w=stats.e_w,
            reg_error=reg_error,
            delta_loss_rel=(loss_after - loss_before) / loss_before,
            delta_w=stats.delta_w,
            train_loss=loss_after,
        )
        self.records.append(record)
        self.last_stats = stats
        return record


def regularization_error(e_w_series, pnr: int, e_opt: float) -> float:
    """|mean(e_w)/pnr - e_opt| over a series of per-event weight changes."""
    series = np.asarray(list(e_w_series), dtype=np.float64)
    if series.size == 0:
        raise ParameterError("empty e_w series")
    if e_opt <= 0:
        raise ParameterError(f"e_opt must be > 0, got {e_opt}")
    return float(abs(series.mean() / pnr - e_opt))


@dataclass
class SweepPoint:
    """One sweep result: a config label with its pnr, mean e_w, and accuracy."""

    label: str
    pnr: int
    mean_e_w: float
    accuracy: float


@dataclass
class EOptEstimate:
    e_opt: float
    provenance: str  # "configured" | "estimated-from-sweep"


def estimate_e_opt(points: list[SweepPoint], accuracy_tol: float = 0.001) -> EOptEstimate:
    """Average e_w/pnr over the configs within ``accuracy_tol`` of the best.

    This is the empirical recipe for a new model family: sweep (pnr,
    strength) pairs, keep the top-accuracy band, and average their per-batch
    weight-change rates.
    """
    if not points:
        raise ParameterError("empty sweep")
    best = max(p.accuracy for p in points)
    selected = [p for p in points if p.accuracy >= best - accuracy_tol]
    value = float(np.mean([p.mean_e_w / p.pnr for p in selected]))
    return EOptEstimate(e_opt=value, provenance="estimated-from-sweep")
