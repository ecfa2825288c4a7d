"""Experiment configuration: a single JSON file fully determines a run."""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .compress import VARIANTS, CompressionSpec
from .errors import ConfigError
from .schedule import GradualSchedule, NrSchedule

MODELS = ("lenet300", "lenet5")

DEFAULTS = {
    "model": "lenet300",
    "data": {
        "train_images": "data/mnist/train-images-idx3-ubyte.gz",
        "train_labels": "data/mnist/train-labels-idx1-ubyte.gz",
        "test_images": "data/mnist/t10k-images-idx3-ubyte.gz",
        "test_labels": "data/mnist/t10k-labels-idx1-ubyte.gz",
    },
    "optimizer": {"kind": "adam", "beta1": 0.9, "beta2": 0.999, "eps": 1e-8},
    "lr_schedule": [[0, 0.001]],
    "n_steps": 20000,
    "batch_size": 50,
    "seed": 1,
    "eval_every": 2000,
    "out_dir": "runs",
    "nr": None,
}


class ExperimentConfig:
    """Validated wrapper around the canonical config dictionary."""

    def __init__(self, tree: dict):
        merged = copy.deepcopy(DEFAULTS)
        for key, value in tree.items():
            if key not in merged:
                raise ConfigError(f"{key}: unknown configuration field")
            if isinstance(merged[key], dict) and isinstance(value, dict) and key != "nr":
                merged[key].update(value)
            else:
                merged[key] = copy.deepcopy(value)
        self.tree = merged

    def __getitem__(self, key):
        return self.tree[key]

    def canonical_json(self) -> str:
        return json.dumps(self.tree, sort_keys=True, indent=2)

    def run_id(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]

    def with_value(self, dotted: str, value) -> "ExperimentConfig":
        """Copy with one dotted-path field replaced (used by sweeps)."""
        tree = copy.deepcopy(self.tree)
        node = tree
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"{dotted}: no such configuration field")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"{dotted}: no such configuration field")
        node[parts[-1]] = value
        return ExperimentConfig(tree)


def load_config(path) -> ExperimentConfig:
    try:
        tree = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig(tree)


def save_config(config: ExperimentConfig, path) -> None:
    Path(path).write_text(config.canonical_json() + "\n")


def _require(condition: bool, field: str, message: str) -> None:
    if not condition:
        raise ConfigError(f"{field}: {message}")


def validate(config: ExperimentConfig, check_files: bool = True) -> None:
    """Validate ranges and cross-field constraints; raise ConfigError with
    the offending field path."""
    tree = config.tree
    _require(tree["model"] in MODELS, "model", f"must be one of {MODELS}")
    _require(int(tree["n_steps"]) >= 0, "n_steps", "must be >= 0")
    _require(int(tree["batch_size"]) >= 1, "batch_size", "must be >= 1")
    _require(int(tree["eval_every"]) >= 0, "eval_every", "must be >= 0")
    opt = tree["optimizer"]
    _require(opt.get("kind") in ("adam", "sgd"), "optimizer.kind", "must be adam or sgd")
    sched = tree["lr_schedule"]
    _require(
        isinstance(sched, list) and len(sched) >= 1 and all(len(e) == 2 for e in sched),
        "lr_schedule",
        "must be a list of [step, rate] pairs",
    )
    _require(int(sched[0][0]) == 0, "lr_schedule", "first threshold must be step 0")
    steps = [int(s) for s, _ in sched]
    _require(
        all(b > a for a, b in zip(steps, steps[1:])),
        "lr_schedule",
        "thresholds must be strictly increasing",
    )
    _require(all(float(r) > 0 for _, r in sched), "lr_schedule", "rates must be positive")

    if check_files:
        for key, path in tree["data"].items():
            _require(Path(path).exists(), f"data.{key}", f"file not found: {path}")

    nr = tree["nr"]
    if nr is not None:
        _require(isinstance(nr, dict), "nr", "must be an object or null")
        _require(int(nr.get("pnr", 0)) >= 1, "nr.pnr", "must be >= 1")
        op = nr.get("op")
        _require(isinstance(op, dict) and "variant" in op, "nr.op", "needs a variant")
        _require(op["variant"] in VARIANTS, "nr.op.variant", f"must be one of {VARIANTS}")
        try:
            make_spec(op)
        except Exception as exc:
            raise ConfigError(f"nr.op: {exc}") from exc
        gradual = nr.get("gradual")
        if gradual is not None:
            _require(
                int(gradual.get("end_step", 0)) > int(gradual.get("start_step", 0)),
                "nr.gradual",
                "end_step must exceed start_step",
            )
            _require(
                int(gradual.get("end_step", 0)) <= int(tree["n_steps"]),
                "nr.gradual.end_step",
                "must not exceed n_steps (last event must see the final rate)",
            )
        if nr.get("stop_at_event"):
            _require(
                int(tree["n_steps"]) % int(nr["pnr"]) == 0,
                "nr.stop_at_event",
                "n_steps must be a multiple of pnr so training ends on an event",
            )


def make_spec(op: dict) -> CompressionSpec:
    """Build a CompressionSpec from its config subtree."""
    known = {
        "variant", "rate", "bits", "max_alt_iters", "tol", "rank",
        "tile_rows", "tile_cols", "tile_rank", "rank_s", "rank_t",
        "theta", "scale_by_lr", "layers",
    }
    unknown = set(op) - known
    if unknown:
        raise ConfigError(f"nr.op: unknown fields {sorted(unknown)}")
    return CompressionSpec(**op)


def make_nr_schedule(nr: dict) -> NrSchedule:
    gradual = nr.get("gradual")
    gradual_obj = None
    if gradual is not None:
        gradual_obj = GradualSchedule(
            start_step=int(gradual["start_step"]),
            end_step=int(gradual["end_step"]),
            final_rate=gradual.get("final_rate"),
            shape=gradual.get("shape", "cubic"),
        )
    return NrSchedule(
        pnr=int(nr["pnr"]),
        spec=make_spec(nr["op"]),
        gradual=gradual_obj,
        stop_at_event=bool(nr.get("stop_at_event", False)),
        e_opt=nr.get("e_opt"),
    )
