"""Mini-batch training loop, evaluation, and checkpoint I/O."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..data import Dataset, batches
from ..errors import FormatError, ParameterError
from ..schedule import MetricRecord
from ..tensor import RngStream, load_tensor, save_tensor
from .layers import ModelGraph
from .optim import LrSchedule


def evaluate(model: ModelGraph, dataset: Dataset, batch_size: int = 500):
    """Mean loss and accuracy over the full dataset (no shuffling)."""
    n = len(dataset)
    total_loss = 0.0
    correct = 0
    for start in range(0, n, batch_size):
        x = dataset.images[start : start + batch_size]
        y = dataset.labels[start : start + batch_size]
        loss, logits = model.forward(x, y)
        total_loss += loss * x.shape[0]
        correct += int((logits.argmax(axis=1) == y).sum())
    return total_loss / n, correct / n


def train_steps(
    model: ModelGraph,
    dataset: Dataset,
    optimizer,
    lr_schedule: LrSchedule,
    n_steps: int,
    batch_size: int,
    *,
    rng: RngStream,
    hooks=(),
    eval_every: int = 0,
    eval_dataset: Dataset | None = None,
) -> list[MetricRecord]:
    """Run ``n_steps`` mini-batch updates and collect the metric stream.

    Hooks run after every optimizer step as ``hook(t, model, (x, y), lr)``
    and may return a :class:`MetricRecord`. When an evaluation falls on the
    same step as a hook record, the two are merged so the stream stays
    strictly increasing in step.
    """
    if n_steps < 0:
        raise ParameterError(f"n_steps must be >= 0, got {n_steps}")
    if n_steps == 0:
        return []
    if batch_size > len(dataset):
        raise ParameterError(f"batch_size {batch_size} exceeds dataset size {len(dataset)}")
    stream = batches(dataset, batch_size, rng)
    records: list[MetricRecord] = []
    for t in range(1, n_steps + 1):
        x, y = next(stream)
        loss, _ = model.forward(x, y)
        model.backward()
        lr = lr_schedule.rate(t)
        optimizer.step(model, lr)
        step_record = None
        for hook in hooks:
            rec = hook(t, model, (x, y), lr)
            if rec is not None:
                step_record = rec
        if eval_every and eval_dataset is not None and t % eval_every == 0:
            eval_loss, eval_acc = evaluate(model, eval_dataset)
            if step_record is None:
                step_record = MetricRecord(step=t, train_loss=loss)
            step_record.test_accuracy = eval_acc
        if step_record is not None:
            records.append(step_record)
    return records


def save_checkpoint(directory, model: ModelGraph) -> None:
    """One binary tensor container per parameter plus a text manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"model\t{model.name}"]
    for layer in model.layers:
        desc = layer.describe()
        for pname, value in layer.params.items():
            qual = f"{layer.name}.{pname}"
            save_tensor(directory / f"{qual}.tsr", value)
            shape = "x".join(str(s) for s in value.shape)
            lines.append(f"param\t{qual}\t{desc['kind']}\t{shape}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_checkpoint(directory) -> dict:
    """Load a checkpoint directory into a {name: tensor} mapping."""
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise FormatError(f"{directory}: missing manifest.txt")
    params = {}
    for line in manifest.read_text().splitlines():
        parts = line.split("\t")
        if parts[0] != "param":
            continue
        qual = parts[1]
        params[qual] = load_tensor(directory / f"{qual}.tsr")
    return params


def load_checkpoint(directory, model: ModelGraph) -> None:
    """Restore model parameters from :func:`save_checkpoint` output."""
    params = read_checkpoint(directory)
    for name, _ in model.named_params():
        if name not in params:
            raise FormatError(f"{directory}: checkpoint missing parameter {name}")
        model.set_param(name, params[name])
