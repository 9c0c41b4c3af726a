"""Command-line entry point: ``earlyflow <subcommand> ...``.

Exit status is 0 on success, 2 for invalid flags or configuration values and
1 for runtime failures such as unreadable or malformed input files.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .capture import FilterSpec
from .classifier import DEFAULT_THRESHOLD, decide
from .dataset import (AugmentConfig, FlowDataset, SplitConfig, augment, class_weights, load_dataset,
                      load_labeled_dataset, save_dataset, stratified_split)
from .errors import EarlyFlowError
from .evaluate import aggregate_reports, evaluate_dataset
from .flowtable import FlowTableConfig
from .monitor import UdpPacketSource, replay, run_pipeline, send_capture_udp, stats_json, throughput_check
from .nn import TrainConfig, init_model, load_model, save_model, train
from .preprocess import VectorizerConfig
from .synth import DEFAULT_CLASSES, default_config, synth_generate

log = logging.getLogger("earlyflow")


class ConfigError(Exception):
    """A flag value outside its domain; reported with exit status 2."""


@contextlib.contextmanager
def configuring():
    """Turn validation failures raised while building configs into :class:`ConfigError`."""
    try:
        yield
    except ConfigError:
        raise
    except (ValueError, EarlyFlowError) as exc:
        raise ConfigError(str(exc)) from exc


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: Path, command: str, params: dict, inputs: Sequence[str] = ()) -> dict:
    """Config echo: every effective parameter plus content hashes of the input files."""
    manifest = {
        "tool": "earlyflow",
        "version": __version__,
        "command": command,
        "params": params,
        "inputs": {str(p): _sha256(p) for p in inputs},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _manifest_path(args, default: Path) -> Path:
    return Path(args.manifest) if args.manifest else default


def _params(args) -> dict:
    skip = {"func", "manifest", "verbose"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


# parsers for flag values

def _classes(text: str) -> list[str]:
    names = [c.strip() for c in text.split(",") if c.strip()]
    if len(names) < 2 or len(set(names)) != len(names):
        raise argparse.ArgumentTypeError("need at least two distinct comma-separated class names")
    return names


def _imbalance(text: str) -> list[float]:
    try:
        parts = [float(x) for x in text.split(":")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad ratio {text!r}, expected e.g. 100:10:5:1") from None
    if any(not p > 0 for p in parts):
        raise argparse.ArgumentTypeError("ratio parts must be positive")
    return parts


def _address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def _filter(args) -> FilterSpec:
    return FilterSpec.from_strings(args.ports, args.protocol)


def _flow_config(args) -> FlowTableConfig:
    return FlowTableConfig(timeout_seconds=args.timeout, max_flows=args.max_flows)


def _vectorizer(args) -> VectorizerConfig:
    return VectorizerConfig(args.header_bytes, args.payload_bytes)


def _check_threshold(value: float) -> float:
    decide([1.0, 0.0], value)  # raises DomainError outside [0, 1)
    return value


# subcommands

def cmd_synth(args) -> int:
    with configuring():
        cfg = default_config(args.flows, args.imbalance, args.noise_packets)
    summary = synth_generate(cfg, args.seed, args.capture, args.labels)
    write_manifest(_manifest_path(args, Path(args.capture + ".manifest.json")), "synth", _params(args))
    print(json.dumps({"classes": summary.classes, "flows": summary.counts,
                      "packets": summary.packets, "noise_packets": summary.noise_packets}))
    return 0


def cmd_ingest(args) -> int:
    with configuring():
        spec, vec, flow_cfg = _filter(args), _vectorizer(args), _flow_config(args)
        if args.default_class is not None and args.default_class not in args.classes:
            raise ConfigError(f"--default-class {args.default_class!r} is not one of --classes")
    ds = load_labeled_dataset(args.capture, args.labels, args.classes, spec, vec, flow_cfg,
                              args.default_class, args.exact_key)
    params = _params(args)
    save_dataset(ds, args.out, params)
    write_manifest(_manifest_path(args, Path(args.out + ".manifest.json")), "ingest", params,
                   [args.capture, args.labels])
    print(json.dumps({"flows": ds.N, "class_counts": dict(zip(ds.classes, ds.class_counts())),
                      **ds.stats}))
    return 0


def cmd_augment(args) -> int:
    with configuring():
        cfg = AugmentConfig(args.segmentation_rate)
    ds = load_dataset(args.dataset)
    out = augment(ds, cfg)
    save_dataset(out, args.out, _params(args))
    write_manifest(_manifest_path(args, Path(args.out + ".manifest.json")), "augment", _params(args),
                   [args.dataset])
    print(json.dumps({"flows_in": ds.N, "flows_out": out.N,
                      "class_counts": dict(zip(out.classes, out.class_counts()))}))
    return 0


def cmd_split(args) -> int:
    with configuring():
        cfg = SplitConfig(args.train_fraction, args.seed)
    ds = load_dataset(args.dataset)
    train_ds, test_ds = stratified_split(ds, cfg)
    save_dataset(train_ds, args.train_out, _params(args))
    save_dataset(test_ds, args.test_out, _params(args))
    write_manifest(_manifest_path(args, Path(args.train_out + ".manifest.json")), "split", _params(args),
                   [args.dataset])
    print(json.dumps({"train": dict(zip(ds.classes, train_ds.class_counts())),
                      "test": dict(zip(ds.classes, test_ds.class_counts()))}))
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.learning_rate, seed=args.seed)


def _fit(ds: FlowDataset, cfg: TrainConfig, weighted: bool, seed: int):
    model = init_model(ds.flows[0].dim, len(ds.classes), seed=seed, classes=ds.classes)
    weights = class_weights(ds) if weighted else None
    return train(model, ds, weights, cfg,
                 on_epoch=lambda e, l: log.info("epoch %d loss %.5f", e + 1, l))


def cmd_train(args) -> int:
    with configuring():
        cfg = _train_config(args)
    ds = load_dataset(args.dataset)
    if ds.N == 0:
        raise EarlyFlowError("training dataset is empty")
    result = _fit(ds, cfg, not args.no_class_weights, args.seed)
    save_model(result.model, args.out)
    write_manifest(_manifest_path(args, Path(args.out + ".manifest.json")), "train", _params(args),
                   [args.dataset])
    print(json.dumps({"flows": ds.N, "final_loss": result.history[-1], "loss_history": result.history}))
    return 0


def cmd_evaluate(args) -> int:
    with configuring():
        threshold = _check_threshold(args.threshold)
    model = load_model(args.model)
    ds = load_dataset(args.dataset)
    if list(model.classes) != list(ds.classes):
        raise EarlyFlowError(f"model classes {model.classes} differ from dataset classes {ds.classes}")
    report = evaluate_dataset(model, ds, threshold, _params(args))
    print(report.render(args.stable))
    if args.out:
        Path(args.out).write_text(report.to_json(indent=2))
        write_manifest(_manifest_path(args, Path(args.out + ".manifest.json")), "evaluate",
                       _params(args), [args.model, args.dataset])
    return 0


def cmd_replay(args) -> int:
    with configuring():
        threshold = _check_threshold(args.threshold)
        spec, vec, flow_cfg = _filter(args), _vectorizer(args), _flow_config(args)
        if args.time_scale < 0:
            raise ConfigError("--time-scale must be >= 0")
        if args.udp_source and args.udp_sink:
            raise ConfigError("--udp-source and --udp-sink are mutually exclusive")
        if args.udp_sink is None and args.model is None:
            raise ConfigError("--model is required unless sending with --udp-sink")
        if args.udp_source is None and args.capture is None:
            raise ConfigError("--capture is required unless receiving with --udp-source")

    if args.udp_sink:
        sent = send_capture_udp(args.capture, args.udp_sink, args.time_scale)
        print(json.dumps({"packets_sent": sent, "sink": list(args.udp_sink)}))
        return 0

    model = load_model(args.model)
    kw = dict(vectorizer=vec, flow_config=flow_cfg, incremental=args.incremental, keep_decisions=False)
    if args.udp_source:
        source = UdpPacketSource(args.udp_source, timeout=args.udp_timeout)
        log_cm = open(args.decision_log, "w", encoding="utf-8") if args.decision_log else contextlib.nullcontext()
        with log_cm as fh:
            result = run_pipeline(source, model, spec, threshold, args.time_scale, decision_log=fh, **kw)
    else:
        result = replay(args.capture, model, spec, threshold, args.time_scale, args.decision_log, **kw)
    passed = throughput_check(result.stats) if result.stats.packets_filtered > 1 else None
    text = stats_json(result.stats, passed)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    inputs = [args.model] + ([args.capture] if args.capture else [])
    default = Path((args.out or args.decision_log or args.model) + ".replay.manifest.json")
    write_manifest(_manifest_path(args, default), "replay", _params(args), inputs)
    return 0


def cmd_experiment(args) -> int:
    with configuring():
        threshold = _check_threshold(args.threshold)
        aug_cfg = AugmentConfig(args.segmentation_rate)
        SplitConfig(args.train_fraction, args.seed)
        _train_config(args)
        if args.repetitions < 1:
            raise ConfigError("--repetitions must be at least 1")
    ds = load_dataset(args.dataset)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    params = _params(args)
    write_manifest(_manifest_path(args, out_dir / "manifest.json"), "experiment", params, [args.dataset])

    reports = []
    for r in range(args.repetitions):
        seed = args.seed + r
        started = time.perf_counter()
        train_ds, test_ds = stratified_split(ds, SplitConfig(args.train_fraction, seed))
        aug = augment(train_ds, aug_cfg)
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                          learning_rate=args.learning_rate, seed=seed)
        result = _fit(aug, cfg, not args.no_class_weights, seed)
        report = evaluate_dataset(result.model, test_ds, threshold,
                                  {"repetition": r, "seed": seed, "train_flows": train_ds.N,
                                   "augmented_flows": aug.N, "test_flows": test_ds.N})
        run_dir = out_dir / f"run_{r:02d}"
        run_dir.mkdir(exist_ok=True)
        save_model(result.model, run_dir / "model.efnn")
        (run_dir / "report.json").write_text(report.to_json(indent=2))
        print(f"== repetition {r + 1}/{args.repetitions} (seed {seed}, "
              f"{time.perf_counter() - started:.1f} s)")
        print(report.render(args.stable))
        reports.append(report)

    agg = aggregate_reports(reports)
    (out_dir / "aggregate.json").write_text(json.dumps(agg, indent=2))
    print("== aggregate over", len(reports), "runs")
    print(render_aggregate(agg, args.stable))
    return 0


def render_aggregate(agg: dict, stable: bool = False) -> str:
    def fmt(s):
        return "-" if s is None else f"{s['mean']:.3f}±{s['std']:.3f}"

    metrics = ("precision", "recall", "fpr", "bm", "earliness", "mnp") + (("mnp_stable",) if stable else ())
    head = f"{'Class':<16}" + "".join(f"{m:>14}" for m in metrics)
    lines = [head, "-" * len(head)]
    for name, row in agg["classes"].items():
        lines.append(f"{name:<16}" + "".join(f"{fmt(row[m]):>14}" for m in metrics))
    lines.append(f"balanced accuracy: {fmt(agg['ba'])}")
    return "\n".join(lines)


# parser construction

def _add_filter_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ports", default="80", help="comma-separated TCP ports to keep (default: 80)")
    p.add_argument("--protocol", default="tcp", help="transport protocol to keep (default: tcp)")
    p.add_argument("--timeout", type=float, default=120.0, help="flow idle timeout in seconds")
    p.add_argument("--max-flows", type=int, default=None, help="cap on concurrently active flows")
    p.add_argument("--header-bytes", type=int, default=48, help="header bytes kept per packet")
    p.add_argument("--payload-bytes", type=int, default=400, help="payload bytes kept per packet")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=1e-3)
    p.add_argument("--no-class-weights", action="store_true", help="train without class weighting")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="earlyflow",
                                     description="Early flow classification from raw packet bytes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    common.add_argument("--manifest", default=None, help="path of the config-echo JSON")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a labeled synthetic capture")
    p.add_argument("--capture", required=True, help="output capture file")
    p.add_argument("--labels", required=True, help="output label CSV")
    p.add_argument("--flows", type=int, default=2000)
    p.add_argument("--imbalance", type=_imbalance, default=[100.0, 10.0, 5.0, 1.0],
                   help="class ratio normal:brute_force:xss:sqli (default 100:10:5:1)")
    p.add_argument("--noise-packets", type=int, default=None,
                   help="non-web packets to mix in (default: one per flow)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], help="assemble labeled flows from a capture")
    p.add_argument("--capture", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="output dataset (.efds)")
    p.add_argument("--classes", type=_classes, default=list(DEFAULT_CLASSES),
                   help="comma-separated class names in label-id order")
    p.add_argument("--default-class", default=None, help="label for flows with no label record")
    p.add_argument("--exact-key", action="store_true", help="match labels by key only, ignoring time")
    _add_filter_flags(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("augment", parents=[common], help="add prefix segments of every flow")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--segmentation-rate", type=float, default=0.1)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("split", parents=[common], help="stratified train/test split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--train-out", required=True)
    p.add_argument("--test-out", required=True)
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="train the classifier")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output model (.efnn)")
    p.add_argument("--seed", type=int, required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="per-class metrics, earliness and MNP")
    p.add_argument("--dataset", "--data", dest="dataset", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", default=None, help="write the report as JSON")
    p.add_argument("--stable", action="store_true",
                   help="also show the earliest prefix from which decisions stay correct")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("replay", parents=[common], help="replay a capture through the live pipeline")
    p.add_argument("--capture", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--time-scale", type=float, default=1.0,
                   help="1 keeps the original pacing, 0 replays as fast as possible")
    p.add_argument("--decision-log", default=None, help="write per-packet decisions as NDJSON")
    p.add_argument("--incremental", action="store_true", help="reuse per-packet activations")
    p.add_argument("--out", default=None, help="also write the stats JSON here")
    p.add_argument("--udp-sink", type=_address, default=None, metavar="HOST:PORT",
                   help="send the capture as datagrams instead of classifying it")
    p.add_argument("--udp-source", type=_address, default=None, metavar="HOST:PORT",
                   help="classify datagrams received on this address")
    p.add_argument("--udp-timeout", type=float, default=5.0)
    _add_filter_flags(p)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("experiment", parents=[common],
                       help="repeat split, augment, train and evaluate with consecutive seeds")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--train-fraction", type=float, default=0.7)
    p.add_argument("--segmentation-rate", type=float, default=0.1)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--stable", action="store_true",
                   help="also show the earliest prefix from which decisions stay correct")
    _add_train_flags(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"earlyflow {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (EarlyFlowError, OSError, ValueError, KeyError) as exc:
        print(f"earlyflow {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
