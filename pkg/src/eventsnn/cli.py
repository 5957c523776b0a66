"""Command-line pipeline: synth, train, convert, calibrate, infer, eval, analyze.

Options resolve as flags > config file > defaults. Config files are JSON with
the same keys as the flags (dashes become underscores) and are checked against
the command's schema before any work starts. Exit codes: 0 success,
2 validation problem, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, analysis, ann, conversion as conv, cutoff, events, snn, synth
from .errors import ValidationError

__all__ = ["main"]


# ---------------------------------------------------------------------------
# Config plumbing


def _load_config(path, schema: dict, command: str) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    for key, value in doc.items():
        if key not in schema:
            raise ValidationError(f"{path}: unknown {command} config key {key!r}")
        expected = schema[key]
        if expected is float and isinstance(value, int):
            continue
        if not isinstance(value, expected):
            raise ValidationError(
                f"{path}: config key {key!r} should be {expected.__name__}")
    return doc


def _resolve(args, config: dict, defaults: dict) -> dict:
    merged = dict(defaults)
    merged.update(config)
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _echo(command: str, options: dict) -> dict:
    return {"command": command, "options": options, "version": __version__}


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Architecture strings


def _parse_arch(spec: str, input_shape, n_classes: int, rng) -> list:
    """Build layers from a compact stack description.

    Tokens joined by '-': dN dense(N units), cFkKsSpP conv, pK avgpool,
    bn batchnorm, f flatten. Hidden dense/conv layers get ReLU; the final
    logits layer is appended automatically.
    """
    layers = []
    shape = tuple(input_shape)
    for token in spec.split("-"):
        token = token.strip()
        if not token:
            continue
        if token == "f":
            layer = ann.Flatten()
        elif token == "bn":
            if not layers or layers[-1].kind not in ("dense", "conv2d"):
                raise ValidationError("bn must follow a dense/conv token")
            layer = ann.BatchNorm.create(shape[0])
        elif token.startswith("p"):
            layer = ann.AvgPool2d(int(token[1:]))
        elif token.startswith("d"):
            if len(shape) != 1:
                layers.append(ann.Flatten())
                shape = layers[-1].out_shape(shape)
            layer = ann.Dense.create(shape[0], int(token[1:]), True, rng)
        elif token.startswith("c"):
            body = token[1:]
            filters, rest = _split_int(body)
            kernel, stride, padding = 3, 1, 1
            while rest:
                key, rest = rest[0], rest[1:]
                value, rest = _split_int(rest)
                if key == "k":
                    kernel = value
                elif key == "s":
                    stride = value
                elif key == "p":
                    padding = value
                else:
                    raise ValidationError(f"bad conv token {token!r}")
            layer = ann.Conv2d.create(shape[0], filters, kernel, True, rng,
                                      stride, padding)
        else:
            raise ValidationError(f"unknown arch token {token!r}")
        shape = layer.out_shape(shape) if layer.kind != "batchnorm" else shape
        layers.append(layer)
    if len(shape) != 1:
        layers.append(ann.Flatten())
        shape = layers[-1].out_shape(shape)
    layers.append(ann.Dense.create(shape[0], n_classes, False, rng))
    return layers


def _split_int(s: str) -> tuple[int, str]:
    i = 0
    while i < len(s) and s[i].isdigit():
        i += 1
    if i == 0:
        raise ValidationError(f"expected a number in arch token near {s!r}")
    return int(s[:i]), s[i:]


# ---------------------------------------------------------------------------
# Shared helpers


def _dataset_stats_from_meta(network_meta: dict) -> events.DatasetStats:
    ds = network_meta.get("dataset_stats")
    if not ds:
        raise ValidationError(
            "model metadata lacks dataset_stats; re-train or pass a manifest")
    return events.DatasetStats(n_max=int(ds["n_max"]), s_r=float(ds["s_r"]))


def _run_traces(snn_net, streams, stats, workers: int = 1, **kwargs):
    if workers <= 1 or len(streams) < 2 * workers:
        return snn.run_batch(snn_net, streams, stats, **kwargs)
    chunks = np.array_split(np.arange(len(streams)), workers)
    jobs = [[streams[i] for i in chunk] for chunk in chunks if len(chunk)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(_trace_job,
                              [(snn_net, job, stats, kwargs) for job in jobs]))
    out = []
    for part in parts:
        out.extend(part)
    return out


def _trace_job(payload):
    snn_net, streams, stats, kwargs = payload
    return snn.run_batch(snn_net, streams, stats, **kwargs)


def _grid_from(merged: dict, duration_us: int) -> np.ndarray:
    return cutoff.default_grid(duration_us, merged["grid_points"])


# ---------------------------------------------------------------------------
# Commands


SYNTH_SCHEMA = {
    "classes": int, "samples_per_class": int, "train_fraction": float,
    "test_fraction": float, "width": int, "height": int, "duration_us": int,
    "max_rate": float, "seed": int, "noise": float, "max_shift": int,
    "format": str,
}

SYNTH_DEFAULTS = {
    "classes": 4, "samples_per_class": 65, "train_fraction": 0.6,
    "test_fraction": 0.4, "width": 12, "height": 12, "duration_us": 200_000,
    "max_rate": 5500.0, "seed": 0, "noise": 0.02, "max_shift": 2,
    "format": "binary",
}


def cmd_synth(args) -> int:
    merged = _resolve(args, _load_config(args.config, SYNTH_SCHEMA, "synth"),
                      SYNTH_DEFAULTS)
    if merged["samples_per_class"] < 1:
        raise ValidationError("samples_per_class must be >= 1")
    fractions = merged["train_fraction"] + merged["test_fraction"]
    if abs(fractions - 1.0) > 1e-9:
        raise ValidationError(
            f"split fractions must sum to 1, got {fractions}")
    total = merged["samples_per_class"] * merged["classes"]
    n_train = round(total * merged["train_fraction"])
    n_test = total - n_train
    if n_train < 1:
        raise ValidationError("train split is empty; raise samples or fraction")
    train, test = synth.make_dataset(
        n_classes=merged["classes"], n_train=n_train, n_test=n_test,
        width=merged["width"], height=merged["height"],
        duration_us=merged["duration_us"], max_rate=merged["max_rate"],
        seed=merged["seed"], noise=merged["noise"],
        max_shift=merged["max_shift"])
    manifest = synth.save_dataset(args.out, train, test, merged["format"],
                                  metadata=_echo("synth", merged))
    print(f"wrote {len(train)} train / {len(test)} test streams; "
          f"manifest at {manifest}")
    return 0


TRAIN_SCHEMA = {
    "arch": str, "alpha": float, "q": float, "frames": int, "lr": float,
    "epochs": int, "batch_size": int, "weight_decay": float, "momentum": float,
    "seed": int, "lambda_mode": str, "lambda_percentile": float,
}

TRAIN_DEFAULTS = {
    "arch": "d48-d32", "alpha": 0.0, "q": float("-inf"), "frames": 1,
    "lr": 0.05, "epochs": 100, "batch_size": 32, "weight_decay": 0.0,
    "momentum": 0.9, "seed": 0, "lambda_mode": "max", "lambda_percentile": 99.9,
}


def cmd_train(args) -> int:
    merged = _resolve(args, _load_config(args.config, TRAIN_SCHEMA, "train"),
                      TRAIN_DEFAULTS)
    streams = events.load_split(args.data, "train")
    labels = [s.label for s in streams]
    n_classes = max(labels) + 1
    stats = events.compute_dataset_stats(streams, merged["frames"])
    frames, labels = events.stack_frames(streams, merged["frames"], stats)

    rng = np.random.default_rng(np.random.SeedSequence(merged["seed"]).spawn(1)[0])
    first = streams[0]
    net = ann.Network(
        _parse_arch(merged["arch"], (2, first.height, first.width), n_classes, rng),
        (2, first.height, first.width), n_classes)
    config = ann.TrainConfig(
        alpha=merged["alpha"], q=merged["q"], frames=merged["frames"],
        lr=merged["lr"], epochs=merged["epochs"],
        batch_size=merged["batch_size"], weight_decay=merged["weight_decay"],
        momentum=merged["momentum"], seed=int(merged["seed"]))
    trained, history = ann.train(net, frames, labels, config)
    acc = float((ann.predict(trained, frames) == labels).mean())
    lam = ann.collect_lambda(trained, frames, merged["lambda_mode"],
                             merged["lambda_percentile"])
    trained.metadata.update({
        "train": _echo("train", {**merged, "q": repr(merged["q"])}),
        "train_config": config.to_dict(),
        "dataset_stats": {"n_max": stats.n_max, "s_r": stats.s_r},
        "frames": merged["frames"],
        "final_objective": history[-1],
        "train_accuracy": acc,
    })
    ann.save_model(trained, args.out, stats=lam)
    print(f"trained {merged['arch']} for {merged['epochs']} epochs; "
          f"objective {history[-1]:.4f}, train accuracy {acc:.3f}; "
          f"model at {args.out}")
    return 0


CONVERT_SCHEMA = {
    "stats": str, "lambda_input": float, "initial_charge": bool,
    "per_tick_charge": bool,
}

CONVERT_DEFAULTS = {
    "stats": "auto", "lambda_input": 1.0, "initial_charge": True,
    "per_tick_charge": False,
}


def cmd_convert(args) -> int:
    merged = _resolve(args, _load_config(args.config, CONVERT_SCHEMA, "convert"),
                      CONVERT_DEFAULTS)
    if args.no_initial_charge:
        merged["initial_charge"] = False
    net, embedded = ann.load_model(args.model)
    if merged["stats"] == "auto":
        stats = embedded
        if stats is None:
            raise ValidationError(
                f"{args.model} embeds no activation stats; pass --stats FILE")
    else:
        stats = ann.load_stats(merged["stats"])
    folded = ann.fold_batchnorm(net)
    index_map = {int(k): v for k, v in
                 folded.metadata["fold_index_map"].items()}
    stats = ann.ActivationStats(
        lambdas={index_map[i]: v for i, v in stats.lambdas.items()},
        mode=stats.mode, percentile=stats.percentile)
    snn_net = conv.convert(
        folded, stats, initial_charge=merged["initial_charge"],
        per_tick_charge=merged["per_tick_charge"],
        lambda_input=merged["lambda_input"])
    snn_net.metadata["convert"] = _echo("convert", merged)
    conv.save_snn(snn_net, args.out)
    thresholds = ", ".join(f"{v:.3f}" for v in snn_net.thresholds)
    print(f"converted {len(snn_net.layers)} spiking layers "
          f"(thresholds {thresholds}); model at {args.out}")
    return 0


CALIBRATE_SCHEMA = {"epsilon": float, "grid_points": int, "workers": int,
                    "frames": int}
CALIBRATE_DEFAULTS = {"epsilon": 0.01, "grid_points": 32, "workers": 1,
                      "frames": 1}


def cmd_calibrate(args) -> int:
    merged = _resolve(args, _load_config(args.config, CALIBRATE_SCHEMA,
                                         "calibrate"), CALIBRATE_DEFAULTS)
    snn_net = conv.load_snn(args.snn)
    stats = _dataset_stats_from_meta(snn_net.metadata)
    streams = events.load_split(args.data, "train")
    mode = "per_frame" if merged["frames"] > 1 else "continuous"
    traces = _run_traces(snn_net, streams, stats, merged["workers"],
                         mode=mode, frames=merged["frames"])
    grid = _grid_from(merged, streams[0].duration_us)
    table = cutoff.calibrate(traces, merged["epsilon"], grid)
    table.meta.update(_echo("calibrate", merged))
    cutoff.save_table(table, args.out)
    final_gaps = [cutoff.spike_gap(t.counts_at(t.n_ticks)) for t in traces]
    armed = int((table.beta < max(final_gaps)).sum())
    print(f"calibrated {len(table)} checkpoints at epsilon {merged['epsilon']}; "
          f"{armed} can arm; table at {args.out}")
    return 0


INFER_SCHEMA = {"per_frame": int, "width": int, "height": int,
                "duration_us": int}
INFER_DEFAULTS = {"per_frame": 1, "width": 0, "height": 0, "duration_us": 0}


def cmd_infer(args) -> int:
    merged = _resolve(args, _load_config(args.config, INFER_SCHEMA, "infer"),
                      INFER_DEFAULTS)
    snn_net = conv.load_snn(args.snn)
    stats = _dataset_stats_from_meta(snn_net.metadata)
    geometry = {}
    if merged["width"]:
        geometry = {"width": merged["width"], "height": merged["height"],
                    "duration_us": merged["duration_us"]}
    stream = events.load_events(args.events, **geometry)
    result = {}
    if args.cutoff:
        table = cutoff.load_table(args.cutoff)
        out = cutoff.infer_with_cutoff(snn_net, stream, stats, table)
        result = {"prediction": out.prediction,
                  "cutoff_time_us": out.cutoff_time_us,
                  "used_cutoff": out.used_cutoff,
                  "ticks_run": out.ticks_run}
        if args.trace:
            mode = "per_frame" if merged["per_frame"] > 1 else "continuous"
            trace = snn.run(snn_net, stream, stats, mode, merged["per_frame"],
                            max_ticks=out.ticks_run)
            snn.write_trace(trace, args.trace)
    else:
        mode = "per_frame" if merged["per_frame"] > 1 else "continuous"
        trace = snn.run(snn_net, stream, stats, mode, merged["per_frame"])
        counts = trace.counts_at(trace.n_ticks)
        result = {"prediction": int(counts.argmax()),
                  "cutoff_time_us": int(stream.duration_us),
                  "used_cutoff": False, "ticks_run": trace.n_ticks}
        if args.trace:
            snn.write_trace(trace, args.trace)
    print(json.dumps(result, sort_keys=True))
    return 0


EVAL_SCHEMA = {"epsilon_list": list, "grid_points": int, "workers": int}
EVAL_DEFAULTS = {"epsilon_list": [0.05, 0.01, 0.0], "grid_points": 32,
                 "workers": 1}


def cmd_eval(args) -> int:
    merged = _resolve(args, _load_config(args.config, EVAL_SCHEMA, "eval"),
                      EVAL_DEFAULTS)
    if args.epsilon_list is not None:
        merged["epsilon_list"] = [float(v) for v in args.epsilon_list.split(",")]
    snn_net = conv.load_snn(args.snn)
    stats = _dataset_stats_from_meta(snn_net.metadata)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_streams = events.load_split(args.data, "train")
    test_streams = events.load_split(args.data, "test")
    grid = _grid_from(merged, train_streams[0].duration_us)
    workers = merged["workers"]
    train_traces = _run_traces(snn_net, train_streams, stats, workers)
    test_traces = _run_traces(snn_net, test_streams, stats, workers)

    baseline = analysis.accuracy_vs_time(snn_net, test_streams, stats, grid,
                                         traces=test_traces)
    analysis.write_accuracy_csv(baseline, out_dir / "accuracy_vs_time.csv")
    summary = {"baseline_final_accuracy": baseline[-1].accuracy,
               "grid_points": merged["grid_points"], "epsilons": {},
               "echo": _echo("eval", {**merged})}
    for eps in merged["epsilon_list"]:
        table = cutoff.calibrate(train_traces, eps, grid)
        cutoff.save_table(table, out_dir / f"beta_eps{eps:g}.csv")
        curve = analysis.accuracy_vs_time(snn_net, test_streams, stats, grid,
                                          table=table, traces=test_traces)
        analysis.write_accuracy_csv(
            curve, out_dir / f"accuracy_vs_time_eps{eps:g}.csv")
        final = curve[-1]
        summary["epsilons"][f"{eps:g}"] = {
            "cutoff_accuracy": final.cutoff_accuracy,
            "avg_time_us": final.avg_time_us,
            "time_ratio": final.avg_time_us / train_streams[0].duration_us,
        }
        print(f"eps={eps:g}: accuracy {final.cutoff_accuracy:.3f} at "
              f"avg time {final.avg_time_us / 1000.0:.1f} ms")
    _write_json(out_dir / "summary.json", summary)
    print(f"curves in {out_dir}")
    return 0


ANALYZE_SCHEMA = {"grid_points": int, "ticks": list, "split": str,
                  "norm_trials": int, "workers": int}
ANALYZE_DEFAULTS = {"grid_points": 32, "ticks": [], "split": "train",
                    "norm_trials": 10_000, "workers": 1}


def cmd_analyze(args) -> int:
    merged = _resolve(args, _load_config(args.config, ANALYZE_SCHEMA,
                                         "analyze"), ANALYZE_DEFAULTS)
    net, _ = ann.load_model(args.model)
    net = ann.fold_batchnorm(net)
    snn_net = conv.load_snn(args.snn)
    stats = _dataset_stats_from_meta(snn_net.metadata)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    streams = events.load_split(args.data, merged["split"])
    duration = streams[0].duration_us
    grid = _grid_from(merged, duration)

    n_ticks = snn.total_ticks(duration, stats.tick_us)
    at_ticks = merged["ticks"] or sorted({
        max(1, round(n_ticks * f)) for f in (0.125, 0.25, 0.375, 0.5, 0.75, 1.0)})
    report = analysis.dataset_similarity(net, snn_net, streams, stats,
                                         at_ticks)
    analysis.write_similarity_csv(report, out_dir / "similarity.csv")

    traces = _run_traces(snn_net, streams, stats, merged["workers"])
    time_curve, beta_curve, fixed = analysis.confidence_curves(traces, grid)
    analysis.write_confidence_csv(time_curve, out_dir / "confidence_vs_time.csv")
    analysis.write_beta_confidence_csv(beta_curve,
                                       out_dir / "confidence_vs_beta.csv")

    norm_rows = ["layer,n,v_thr,mc_mean,bound"]
    for li, layer in enumerate(snn_net.layers):
        n = int(np.prod(layer.out_shape))
        mean, bound = analysis.membrane_norm_bound(
            n, layer.v_thr, merged["norm_trials"], seed=li)
        norm_rows.append(f"{layer.index},{n},{layer.v_thr!r},{mean!r},{bound!r}")
    (out_dir / "membrane_norm_bound.csv").write_text("\n".join(norm_rows) + "\n")
    print(f"analysis artifacts in {out_dir} "
          f"(beta sweep at t_hat={fixed} us)")
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eventsnn",
        description="Train, convert, and run event-driven spiking classifiers.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a Poisson-encoded shape dataset")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--config")
    p.add_argument("--classes", type=int)
    p.add_argument("--samples-per-class", dest="samples_per_class", type=int)
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--duration-us", dest="duration_us", type=int)
    p.add_argument("--max-rate", dest="max_rate", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a ReLU network on aggregated frames")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="model JSON path")
    p.add_argument("--config")
    p.add_argument("--arch")
    p.add_argument("--alpha", type=float)
    p.add_argument("--q", type=float)
    p.add_argument("--frames", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-mode", dest="lambda_mode",
                   choices=("max", "percentile"))
    p.add_argument("--lambda-percentile", dest="lambda_percentile", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert a trained model to spiking form")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--stats", help="'auto' for embedded stats or a stats JSON")
    p.add_argument("--lambda-input", dest="lambda_input", type=float)
    p.add_argument("--no-initial-charge", action="store_true")
    p.add_argument("--per-tick-charge", dest="per_tick_charge",
                   action="store_const", const=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("calibrate", help="fit the cutoff table on training data")
    p.add_argument("--snn", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--grid-points", dest="grid_points", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("infer", help="classify one event stream")
    p.add_argument("--snn", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--config")
    p.add_argument("--cutoff", help="cutoff table CSV")
    p.add_argument("--per-frame", dest="per_frame", type=int)
    p.add_argument("--trace", help="write per-tick output counts here")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--duration-us", dest="duration_us", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="latency/accuracy curves over a test split")
    p.add_argument("--snn", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--config")
    p.add_argument("--epsilon-list", dest="epsilon_list",
                   help="comma-separated epsilons")
    p.add_argument("--grid-points", dest="grid_points", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="similarity, confidence and bound reports")
    p.add_argument("--model", required=True)
    p.add_argument("--snn", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--config")
    p.add_argument("--split")
    p.add_argument("--grid-points", dest="grid_points", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_analyze)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
