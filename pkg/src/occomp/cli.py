"""Config-driven experiment runner.

Subcommands: ``train`` runs one experiment from a JSON config; ``sweep``
repeats it across one axis; ``analyze`` produces CSV analytics; ``inspect``
prints a checkpoint summary. Every run writes a self-describing manifest
embedding the resolved config, so artifacts can be traced back to their
exact inputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, compress
from .config import ExperimentConfig, load_config, make_nr_schedule, save_config, validate
from .data import load_mnist, synthetic_gaussian
from .errors import ConfigError
from .nn import build_model, evaluate, save_checkpoint, train_steps
from .nn.optim import LrSchedule, make_optimizer
from .schedule import NrHook, write_metrics_csv, write_metrics_jsonl
from .tensor import RngStream, save_tensor

OUT_ROOT_ENV = "OCCOMP_OUT_ROOT"


def _out_root(config: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, config["out_dir"]))


def _count_nonzero(weights: dict) -> tuple[int, int]:
    total = sum(w.size for w in weights.values())
    nonzero = sum(int(np.count_nonzero(w)) for w in weights.values())
    return total, nonzero


def achieved_ratio(spec: compress.CompressionSpec, weights: dict) -> float:
    """Overall stored-parameter ratio across the transformed layers."""
    if spec.variant == "prune":
        total, nonzero = _count_nonzero(weights)
        return float("inf") if nonzero == 0 else total / nonzero
    if spec.variant == "quantize":
        return 32.0 / spec.bits
    if spec.variant in ("svd", "tiled_svd", "tucker2"):
        total = 0
        stored = 0.0
        for w in weights.values():
            total += w.size
            stored += w.size / compress.compression_ratio(spec, w.shape)
        return total / stored
    return 1.0


def export_compressed(spec: compress.CompressionSpec, weights: dict, directory: Path) -> None:
    """Write the decomposed/quantized deliverable forms plus their manifest."""
    directory.mkdir(parents=True, exist_ok=True)
    manifest: dict = {"variant": spec.variant, "layers": {}}
    for name, w in weights.items():
        entry: dict = {"shape": list(w.shape)}
        if spec.variant == "prune":
            save_tensor(directory / f"{name}.pruned.tsr", w)
            entry["nonzero"] = int(np.count_nonzero(w))
        elif spec.variant == "quantize":
            form = compress.quantize_binary(w, spec.bits, spec.max_alt_iters, spec.tol)
            save_tensor(directory / f"{name}.binaries.tsr", form.binaries)
            entry["bits"] = spec.bits
            entry["alphas"] = [float(a) for a in form.alphas]
        elif spec.variant == "svd":
            mat, kernel_shape = compress._as_matrix(w)
            result = compress.svd(mat)
            r = spec.rank
            save_tensor(directory / f"{name}.us.tsr", result.u[:, :r] * result.singular_values[:r])
            save_tensor(directory / f"{name}.v.tsr", result.v[:, :r])
            entry["rank"] = r
            if kernel_shape:
                entry["lowered_from"] = list(kernel_shape)
        elif spec.variant == "tiled_svd":
            mat, kernel_shape = compress._as_matrix(w)
            tr, tc, r = spec.tile_rows, spec.tile_cols, spec.tile_rank
            m, n = mat.shape
            us_tiles, v_tiles = [], []
            for bi in range(m // tr):
                for bj in range(n // tc):
                    tile = mat[bi * tr : (bi + 1) * tr, bj * tc : (bj + 1) * tc]
                    res = compress.svd(tile)
                    us_tiles.append(res.u[:, :r] * res.singular_values[:r])
                    v_tiles.append(res.v[:, :r])
            save_tensor(directory / f"{name}.us_tiles.tsr", np.stack(us_tiles))
            save_tensor(directory / f"{name}.v_tiles.tsr", np.stack(v_tiles))
            entry.update({"tile_rows": tr, "tile_cols": tc, "rank": r})
            if kernel_shape:
                entry["lowered_from"] = list(kernel_shape)
        elif spec.variant == "tucker2":
            form = compress.tucker2_decompose(w, spec.rank_s, spec.rank_t)
            save_tensor(directory / f"{name}.core.tsr", form.core)
            save_tensor(directory / f"{name}.ps.tsr", form.ps)
            save_tensor(directory / f"{name}.pt.tsr", form.pt)
            entry.update({"rank_s": spec.rank_s, "rank_t": spec.rank_t})
        manifest["layers"][name] = entry
    (directory / "compressed_manifest.json").write_text(json.dumps(manifest, indent=2))


def run(config: ExperimentConfig) -> dict:
    """Execute one experiment; returns the summary written to the manifest."""
    validate(config)
    run_dir = _out_root(config) / config.run_id()
    run_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, run_dir / "config.json")

    data_cfg = config["data"]
    train_set = load_mnist(data_cfg["train_images"], data_cfg["train_labels"])
    test_set = load_mnist(data_cfg["test_images"], data_cfg["test_labels"])

    master = RngStream(int(config["seed"]))
    model = build_model(config["model"], master.derive(0))
    optimizer = make_optimizer(**config["optimizer"])
    lr_schedule = LrSchedule([(int(s), float(r)) for s, r in config["lr_schedule"]])

    hooks = []
    nr_cfg = config["nr"]
    nr_schedule = None
    if nr_cfg is not None:
        nr_schedule = make_nr_schedule(nr_cfg)
        hooks.append(NrHook(nr_schedule, noise_rng=master.derive(2)))

    started = time.time()
    records = train_steps(
        model,
        train_set,
        optimizer,
        lr_schedule,
        int(config["n_steps"]),
        int(config["batch_size"]),
        rng=master.derive(1),
        hooks=hooks,
        eval_every=int(config["eval_every"]),
        eval_dataset=test_set,
    )
    test_loss, test_acc = evaluate(model, test_set)

    write_metrics_csv(records, run_dir / "metrics.csv")
    write_metrics_jsonl(records, run_dir / "metrics.jsonl")
    save_checkpoint(run_dir / "checkpoint", model)

    n_events = sum(1 for r in records if r.e_w is not None)
    summary = {
        "run_id": config.run_id(),
        "seed": int(config["seed"]),
        "model": config["model"],
        "n_steps": int(config["n_steps"]),
        "test_loss": test_loss,
        "test_accuracy": test_acc,
        "regularization_events": n_events,
        "wall_seconds": time.time() - started,
        "config": config.tree,
    }
    if nr_schedule is not None:
        weights = {name: model.get_param(name) for name in model.weight_names()}
        selected = {
            name: weights[name]
            for name in compress.select_layers(nr_schedule.spec, weights)
        }
        summary["compression_ratio"] = achieved_ratio(nr_schedule.spec, selected)
        if nr_schedule.spec.variant == "prune":
            summary["layer_sparsity"] = {
                name: 1.0 - np.count_nonzero(w) / w.size for name, w in selected.items()
            }
        if nr_schedule.stop_at_event:
            export_compressed(nr_schedule.spec, selected, run_dir / "compressed")
    (run_dir / "manifest.json").write_text(json.dumps(summary, indent=2) + "\n")

    ratio = summary.get("compression_ratio")
    ratio_text = f" compression_ratio={ratio:.2f}" if ratio is not None else ""
    print(
        f"run {summary['run_id']}: test_accuracy={test_acc:.4f}"
        f" events={n_events}{ratio_text} -> {run_dir}"
    )
    return summary


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def sweep(config: ExperimentConfig, axis: str, values: list, repeats: int = 1) -> list[dict]:
    """One run per axis value (times ``repeats`` with derived seeds)."""
    rows = []
    for value in values:
        accs = []
        for rep in range(repeats):
            point = config.with_value(axis, value)
            if repeats > 1:
                point = point.with_value("seed", int(config["seed"]) + 1000 * rep)
            summary = run(point)
            accs.append(summary["test_accuracy"])
        rows.append(
            {
                "value": value,
                "mean_accuracy": float(np.mean(accs)),
                "std_accuracy": float(np.std(accs)),
                "runs": repeats,
            }
        )
    out_dir = _out_root(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    sweep_path = out_dir / f"sweep_{axis.replace('.', '_')}.csv"
    with open(sweep_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["value", "mean_accuracy", "std_accuracy", "runs"])
        for row in rows:
            writer.writerow([row["value"], row["mean_accuracy"], row["std_accuracy"], row["runs"]])
    print(f"sweep over {axis}: {len(rows)} points -> {sweep_path}")
    return rows


def _cmd_train(args) -> int:
    config = load_config(args.config)
    run(config)
    return 0


def _cmd_sweep(args) -> int:
    config = load_config(args.config)
    values = [_parse_value(v) for v in args.values.split(",")]
    sweep(config, args.axis, values, repeats=args.repeats)
    return 0


def _cmd_analyze(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.subcommand == "epsilon":
        m, n = (int(x) for x in args.shape.split("x"))
        w = synthetic_gaussian(RngStream(args.seed), m, n)
        if args.op == "quantize":
            params = [("bits", b) for b in _int_list(args.bits)]
        elif args.op == "svd":
            params = [("rank", r) for r in _int_list(args.ranks)]
        else:
            params = [("rate", r) for r in [float(x) for x in args.rates.split(",")]]
        print("op,param,mean_in_range,decay_mean,underflow,overflow")
        for key, value in params:
            spec = compress.CompressionSpec(variant=args.op, **{key: value})
            hist = analysis.epsilon_distribution(w, spec, bins=args.bins)
            decay = analysis.epsilon_decay_mean(w, spec)
            path = out_dir / f"epsilon_{args.op}_{key}{value}.csv"
            analysis.write_histogram_csv(hist, path)
            print(f"{args.op},{value},{hist.mean:.6f},{decay:.6f},{hist.underflow},{hist.overflow}")
    elif args.subcommand == "quadratic":
        model = analysis.QuadraticModel(
            h=np.array([[args.hessian]]), w0=np.array([args.w0]), gamma=args.gamma
        )
        path = out_dir / "quadratic_trajectory.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["step", "norm"])
            for p in range(args.steps + 1):
                w = analysis.quadratic_trajectory(model, np.array([args.w_start]), p)
                writer.writerow([p, float(np.linalg.norm(w - model.w0))])
        print(f"quadratic trajectory -> {path}")
    elif args.subcommand == "taylor":
        rng = RngStream(args.seed)
        if args.net == "linear":
            net = analysis.LinearRegressionNet(rng.derive(0).standard_normal(4))
        else:
            net = analysis.TanhRegressionNet(rng.derive(0).standard_normal(3), 0.1, 1.5, 0.0)
        x = rng.derive(1).standard_normal((args.points, net.n_params if args.net == "linear" else 3))
        y = rng.derive(2).standard_normal(args.points)
        setup = analysis.RegressionSetup(net=net, x=x, y=y)
        empirical, predicted = analysis.taylor_noise_check(
            setup, args.eta, args.samples, rng.derive(3)
        )
        print(f"eta={args.eta} empirical={empirical:.6e} predicted={predicted:.6e}")
    elif args.subcommand == "histogram":
        from .nn.train import read_checkpoint

        params = read_checkpoint(args.checkpoint)
        weights = {k: v for k, v in params.items() if v.ndim >= 2}
        hist = analysis.weight_histogram(weights, bins=args.bins)
        path = out_dir / "weight_histogram.csv"
        analysis.write_histogram_csv(hist, path)
        print(
            f"histogram of {hist.n_total} weights (mean {hist.mean:.5f},"
            f" variance {hist.variance:.5f}) -> {path}"
        )
    return 0


def _int_list(text: str) -> list[int]:
    # accepts "1,2,3" or "1..4"
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",")]


def _cmd_inspect(args) -> int:
    from .nn.train import read_checkpoint

    params = read_checkpoint(args.checkpoint)
    total = 0
    for name, w in sorted(params.items()):
        nnz = int(np.count_nonzero(w))
        total += w.size
        shape = "x".join(str(s) for s in w.shape)
        print(
            f"{name:24s} {shape:>16s} n={w.size:<8d} nnz={nnz:<8d}"
            f" |w|max={np.abs(w).max():.4f} fro={np.linalg.norm(w):.4f}"
        )
    print(f"total parameters: {total}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occomp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one experiment from a config file")
    p_train.add_argument("config")
    p_train.set_defaults(func=_cmd_train)

    p_sweep = sub.add_parser("sweep", help="run the config across one axis")
    p_sweep.add_argument("config")
    p_sweep.add_argument("--axis", required=True, help="dotted config path, e.g. nr.pnr")
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--repeats", type=int, default=1)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_an = sub.add_parser("analyze", help="offline analytics to CSV")
    an_sub = p_an.add_subparsers(dest="subcommand", required=True)

    p_eps = an_sub.add_parser("epsilon")
    p_eps.add_argument("--shape", default="2048x2048")
    p_eps.add_argument("--op", choices=["quantize", "svd", "prune"], required=True)
    p_eps.add_argument("--bits", default="1..4")
    p_eps.add_argument("--ranks", default="256,512,1024")
    p_eps.add_argument("--rates", default="0.5")
    p_eps.add_argument("--bins", type=int, default=analysis.EPSILON_BINS)
    p_eps.add_argument("--seed", type=int, default=1)
    p_eps.add_argument("--out", default="analysis_out")
    p_eps.set_defaults(func=_cmd_analyze)

    p_quad = an_sub.add_parser("quadratic")
    p_quad.add_argument("--hessian", type=float, default=1.0)
    p_quad.add_argument("--gamma", type=float, default=0.5)
    p_quad.add_argument("--w0", type=float, default=0.0)
    p_quad.add_argument("--w-start", type=float, default=1.0)
    p_quad.add_argument("--steps", type=int, default=20)
    p_quad.add_argument("--out", default="analysis_out")
    p_quad.set_defaults(func=_cmd_analyze)

    p_taylor = an_sub.add_parser("taylor")
    p_taylor.add_argument("--net", choices=["linear", "tanh"], default="linear")
    p_taylor.add_argument("--eta", type=float, default=0.01)
    p_taylor.add_argument("--samples", type=int, default=20000)
    p_taylor.add_argument("--points", type=int, default=128)
    p_taylor.add_argument("--seed", type=int, default=1)
    p_taylor.add_argument("--out", default="analysis_out")
    p_taylor.set_defaults(func=_cmd_analyze)

    p_hist = an_sub.add_parser("histogram")
    p_hist.add_argument("--checkpoint", required=True)
    p_hist.add_argument("--bins", type=int, default=analysis.EPSILON_BINS)
    p_hist.add_argument("--out", default="analysis_out")
    p_hist.set_defaults(func=_cmd_analyze)

    p_inspect = sub.add_parser("inspect", help="summarize a checkpoint directory")
    p_inspect.add_argument("checkpoint")
    p_inspect.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
