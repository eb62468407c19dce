"""Command-line entry point: ``iotshield <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data or contract error. Every
subcommand writes a ``run_meta`` record (versions, seed, config fingerprint,
arguments; no timestamps) next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autoenc import AEModel, AETrainConfig, ae_scores_raw, fit_autoencoder
from .detector import Combine, DetectorConfig, detect, write_alerts, write_trace, read_trace
from .errors import FEATURE_SCHEMA_VERSION, DataError
from .evalkit import MetricsReport, benchmark_latency, confusion, config_fingerprint, report, trace_confusion
from .features import (WindowConfig, extract, feature_matrix, label_vector, read_features,
                       split_by_time, write_features)
from .flowdata import AttackKind, ColumnMapping, read_flows, read_telemetry, write_flows, write_telemetry
from .forest import (DEFAULT_ALPHA_GRID, ForestModel, ForestParams, QuantizedForest, predict_proba_batch,
                     predict_quantized_batch, prune, quantize, train)
from . import modelio
from .synthgen import default_scenario, generate, load_config, low_rate_scenario, scenario_meta

SPLIT_NAMES = ("train", "validation", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --- run_meta -----------------------------------------------------------------

def _meta_path(out: Path) -> Path:
    return out / "run_meta.txt" if out.is_dir() else out.with_name(out.stem + ".run_meta.txt")


def write_run_meta(out: Path, args: argparse.Namespace, *configs) -> None:
    items = {
        "command": args.command,
        "package_version": __version__,
        "container_format": str(modelio.FORMAT_VERSION),
        "feature_schema_version": str(FEATURE_SCHEMA_VERSION),
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "seed": str(args.seed),
        "config_fingerprint": config_fingerprint(*configs),
    }
    for key, value in sorted(vars(args).items()):
        if key not in ("command", "handler", "seed", "seed_given"):
            items[f"arg.{key}"] = ",".join(map(str, value)) if isinstance(value, list) else str(value)
    _meta_path(out).write_text("".join(f"{k}={v}\n" for k, v in items.items()), encoding="utf-8")


# --- config builders from flags -----------------------------------------------

def _window_config(a) -> WindowConfig:
    return WindowConfig(a.window_s, a.stride_s, a.baseline_windows)


def _forest_params(a) -> ForestParams:
    return ForestParams(n_trees=a.n_trees, max_depth=a.max_depth, min_samples_leaf=a.min_samples_leaf,
                        features_per_split=a.features_per_split, bootstrap=not a.no_bootstrap,
                        balanced=not a.no_balanced)


def _ae_config(a) -> AETrainConfig:
    return AETrainConfig(a.epochs, a.batch_size, a.learning_rate, a.seed)


def _detector_config(a) -> DetectorConfig:
    return DetectorConfig(rf_threshold=a.rf_threshold, ae_quantile=a.ae_quantile, ae_history=a.ae_history,
                          combine=Combine(a.combine), relief_slope=a.relief_slope,
                          relief_knee_pct=a.relief_knee_pct, relief_span_pct=a.relief_span_pct,
                          warmup=a.warmup, calibrated_floor=not a.no_calibrated_floor)


def _checked(builder, a):
    try:
        return builder(a)
    except ValueError as exc:  # dataclass invariants on flag values are usage errors
        raise UsageError(str(exc)) from None


def _load_forest(path) -> ForestModel | QuantizedForest:
    return modelio.load(path, expected=(modelio.Section.FOREST, modelio.Section.QUANTIZED_FOREST))


def _load_float_forest(path) -> ForestModel:
    return modelio.load(path, expected=modelio.Section.FOREST)


def _load_ae(path) -> AEModel:
    return modelio.load(path, expected=modelio.Section.AUTOENCODER)


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _out_file(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# --- subcommands --------------------------------------------------------------

def cmd_synth(a) -> None:
    if a.config:
        cfg = load_config(a.config)
        if a.seed_given:
            cfg.seed = a.seed
    elif a.scenario == "low-rate":
        cfg = low_rate_scenario(a.seed)
    else:
        kinds = [] if a.scenario == "benign" else [AttackKind(k) for k in a.kinds] if a.kinds else None
        cfg = default_scenario(a.seed, kinds)
    if a.n_devices is not None or a.duration_s is not None or a.target_events is not None:
        if a.n_devices is not None and cfg.attacks:
            raise UsageError("--n-devices cannot be combined with attack episodes; use --config")
        cfg.n_devices = a.n_devices if a.n_devices is not None else cfg.n_devices
        cfg.duration_s = a.duration_s if a.duration_s is not None else cfg.duration_s
        cfg.target_events = a.target_events if a.target_events is not None else cfg.target_events
    cfg.validate()
    a.seed = cfg.seed
    flows, telemetry = generate(cfg)
    out = _out_dir(a.out)
    write_flows(flows, out / "flows.csv")
    write_telemetry(telemetry, out / "telemetry.csv")
    meta = scenario_meta(cfg, flows, telemetry)
    (out / "scenario_meta.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()), encoding="utf-8")
    write_run_meta(out, a, cfg)
    print(f"wrote {len(flows)} flows and {len(telemetry)} telemetry samples to {out}")


def cmd_extract(a) -> None:
    wc = _checked(_window_config, a)
    mapping = ColumnMapping.load(a.mapping) if a.mapping else None
    flows = read_flows(a.flows, mapping, max_bad_rows=a.max_bad_rows)
    telemetry = read_telemetry(a.telemetry, max_bad_rows=a.max_bad_rows) if a.telemetry else []
    for what, table in (("flows", flows), ("telemetry", telemetry)):
        if getattr(table, "errors", None):
            print(f"skipped {len(table.errors)} malformed {what} rows", file=sys.stderr)
    vectors = extract(list(flows), list(telemetry), wc)
    out = _out_dir(a.out)
    write_features(vectors, out / "features.csv")
    for name, part in zip(SPLIT_NAMES, split_by_time(vectors, tuple(a.split))):
        write_features(part, out / f"{name}.csv")
    write_run_meta(out, a, wc)
    print(f"wrote {len(vectors)} feature vectors to {out}")


def _training_rows(vectors, exclude):
    drop = {AttackKind(k) for k in exclude}
    return [v for v in vectors if not (v.label and v.label.attack_kind in drop)]


def cmd_train(a) -> None:
    params = _checked(_forest_params, a)
    vectors = _training_rows(read_features(a.features), a.exclude_kind)
    model = train(feature_matrix(vectors), label_vector(vectors), params, a.seed)
    out = _out_file(a.out)
    size = modelio.save(model, out)
    write_run_meta(out, a, params)
    print(f"trained {params.n_trees} trees on {len(vectors)} windows; model {size} bytes")


def cmd_prune(a) -> None:
    model = _load_float_forest(a.model)
    vectors = _training_rows(read_features(a.validation), a.exclude_kind)
    pruned = prune(model, feature_matrix(vectors), label_vector(vectors), tuple(a.alpha_grid))
    out = _out_file(a.out)
    size = modelio.save(pruned, out)
    a.seed = model.training_seed
    write_run_meta(out, a, pruned.params)
    print(f"selected alpha {pruned.params.prune_alpha!r}; model {size} bytes")


def cmd_quantize(a) -> None:
    model = _load_float_forest(a.model)
    q = quantize(model)
    out = _out_file(a.out)
    size = modelio.save(q, out)
    a.seed = model.training_seed
    write_run_meta(out, a, model.params)
    print(f"quantized model {size} bytes")


def cmd_ae_train(a) -> None:
    cfg = _checked(_ae_config, a)
    benign = [v for v in read_features(a.features) if not (v.label and v.label.is_attack)]
    model = fit_autoencoder(feature_matrix(benign), cfg)
    out = _out_file(a.out)
    modelio.save(model, out)
    write_run_meta(out, a, cfg)
    print(f"trained autoencoder on {len(benign)} benign windows; "
          f"loss {model.loss_history[0]:.6g} -> {model.loss_history[-1]:.6g}")


def cmd_detect(a) -> None:
    cfg = _checked(_detector_config, a)
    wc = _checked(_window_config, a)
    rf, ae = _load_forest(a.forest), _load_ae(a.ae)
    if a.features:
        vectors = read_features(a.features)
    elif a.flows:
        telemetry = read_telemetry(a.telemetry) if a.telemetry else []
        vectors = extract(list(read_flows(a.flows)), list(telemetry), wc)
    else:
        raise UsageError("detect needs --features or --flows")
    alerts, trace = detect(vectors, rf, ae, cfg)
    out = _out_dir(a.out)
    write_alerts(alerts, out / "alerts.txt")
    write_trace(trace, out / "trace.csv")
    a.seed = rf.training_seed
    write_run_meta(out, a, cfg, wc)
    print(f"{len(alerts)} alerts over {len(trace)} windows")


def _named(spec: str) -> tuple[str, str]:
    if "=" in spec:
        name, path = spec.split("=", 1)
        return name, path
    return Path(spec).stem, spec


def cmd_evaluate(a) -> None:
    if not a.trace and not a.forest:
        raise UsageError("evaluate needs at least one --trace or --forest")
    if a.forest and not a.features:
        raise UsageError("--forest columns need --features")
    results = []
    for spec in a.trace:
        name, path = _named(spec)
        cm = trace_confusion(read_trace(path), warm_only=not a.include_warmup, path=a.decision)
        results.append(MetricsReport.from_counts(name, cm, config_fingerprint=config_fingerprint(a.decision)))
    if a.forest:
        vectors = read_features(a.features)
        X, truth = feature_matrix(vectors), label_vector(vectors).astype(bool)
        for spec in a.forest:
            name, path = _named(spec)
            model = _load_forest(path)
            size = Path(path).stat().st_size
            if isinstance(model, QuantizedForest):
                proba = predict_quantized_batch(model, X)
                sizes = dict(quantized_size_bytes=size)
            else:
                proba = predict_proba_batch(model, X)
                sizes = dict(model_size_bytes=size, quantized_size_bytes=len(modelio.to_bytes(quantize(model))))
            cm = confusion(proba >= a.rf_threshold, truth)
            results.append(MetricsReport.from_counts(
                name, cm, config_fingerprint=config_fingerprint(model.params, a.rf_threshold), **sizes))
    out = _out_file(a.out)
    report(results, out, {"features": str(a.features or ""), "decision": a.decision})
    write_run_meta(out, a, a.decision, a.rf_threshold)
    for r in results:
        print(f"{r.name}: accuracy={r.accuracy:.4f} recall={r.recall} fpr={r.fpr}")


def cmd_bench(a) -> None:
    model = _load_float_forest(a.forest)
    q = _load_forest(a.quantized) if a.quantized else quantize(model)
    vectors = read_features(a.features)
    X, truth = feature_matrix(vectors), label_vector(vectors).astype(bool)
    if a.limit:
        X, truth = X[:a.limit], truth[:a.limit]
    lat = benchmark_latency({"float": model, "quantized": q}, X, a.repetitions)
    sizes = {"float": len(modelio.to_bytes(model)), "quantized": len(modelio.to_bytes(q))}
    preds = {"float": predict_proba_batch(model, X), "quantized": predict_quantized_batch(q, X)}
    results = []
    for name in ("float", "quantized"):
        results.append(MetricsReport.from_counts(
            name, confusion(preds[name] >= a.rf_threshold, truth),
            latency_p50_us=lat[name].p50_us, latency_p99_us=lat[name].p99_us,
            model_size_bytes=sizes["float"], quantized_size_bytes=sizes["quantized"],
            config_fingerprint=config_fingerprint(model.params)))
    out = _out_file(a.out)
    report(results, out, {"vectors": str(X.shape[0]), "repetitions": str(a.repetitions)})
    a.seed = model.training_seed
    write_run_meta(out, a, model.params, a.repetitions)
    for name in ("float", "quantized"):
        print(f"{name}: p50={lat[name].p50_us:.2f}us p99={lat[name].p99_us:.2f}us size={sizes[name]}B")


def _write_scores(out, header, vectors, column, extra=None) -> None:
    fh = open(out, "w", newline="", encoding="utf-8") if out else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, v in enumerate(vectors):
            w.writerow([v.device, repr(float(v.window_start)), repr(float(column[i]))]
                       + ([extra[i]] if extra is not None else []))
    finally:
        if out:
            fh.close()


def cmd_predict(a) -> None:
    model = _load_forest(a.model)
    vectors = read_features(a.features)
    X = feature_matrix(vectors)
    proba = predict_quantized_batch(model, X) if isinstance(model, QuantizedForest) else predict_proba_batch(model, X)
    _write_scores(a.out, ("device", "window_start", "attack_probability", "prediction"), vectors, proba,
                  ["attack" if p >= a.rf_threshold else "benign" for p in proba])
    if a.out:
        a.seed = model.training_seed
        write_run_meta(Path(a.out), a, model.params, a.rf_threshold)


def cmd_ae_score(a) -> None:
    model = _load_ae(a.model)
    vectors = read_features(a.features)
    scores = ae_scores_raw(model, feature_matrix(vectors))
    _write_scores(a.out, ("device", "window_start", "ae_score"), vectors, scores)
    if a.out:
        a.seed = model.config.seed
        write_run_meta(Path(a.out), a, model.config)


# --- parser -------------------------------------------------------------------

def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _window_flags(p) -> None:
    d = WindowConfig()
    p.add_argument("--window-s", type=float, default=d.window_s, help="window length in seconds")
    p.add_argument("--stride-s", type=float, default=d.stride_s, help="hop between window starts in seconds")
    p.add_argument("--baseline-windows", type=int, default=d.baseline_windows,
                   help="trailing windows used for the deviation baselines")


def _rf_threshold_flag(p) -> None:
    p.add_argument("--rf-threshold", type=float, default=0.5, help="attack probability cutoff")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iotshield", description="Flow-based DDoS detection pipeline for IoT traffic.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, handler, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(handler=handler)
        p.add_argument("--seed", type=int, default=42, help="random seed (default 42); echoed to run_meta")
        return p

    p = command("synth", cmd_synth, "Generate a synthetic flows + telemetry scenario.")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scenario", choices=("default", "benign", "low-rate"), default="default",
                   help="preset: all attack kinds, attack-free, or low-rate pulses only")
    p.add_argument("--kinds", nargs="+", choices=[k.value for k in AttackKind],
                   help="restrict the default preset to these attack kinds")
    p.add_argument("--config", help="key = value scenario file (overrides --scenario)")
    p.add_argument("--n-devices", type=int, help="device count (attack-free runs only)")
    p.add_argument("--duration-s", type=float, help="scenario length in seconds")
    p.add_argument("--target-events", type=int, help="expected total flow count")

    p = command("extract", cmd_extract, "Turn flows + telemetry into windowed feature vectors.")
    p.add_argument("--flows", required=True, help="flow CSV")
    p.add_argument("--telemetry", help="telemetry CSV (optional)")
    p.add_argument("--mapping", help="column mapping file for non-canonical flow CSVs")
    p.add_argument("--out", required=True, help="output directory (features.csv plus time-split files)")
    p.add_argument("--split", type=_floats, default=[0.70, 0.15, 0.15],
                   help="train,validation,test fractions of distinct window starts")
    p.add_argument("--max-bad-rows", type=int, default=100, help="abort after this many malformed rows")
    _window_flags(p)

    p = command("train", cmd_train, "Train the random forest on a features CSV.")
    p.add_argument("--features", required=True, help="labelled training features CSV")
    p.add_argument("--out", required=True, help="model file to write")
    d = ForestParams()
    p.add_argument("--n-trees", type=int, default=d.n_trees, help="number of trees")
    p.add_argument("--max-depth", type=int, default=d.max_depth, help="maximum tree depth")
    p.add_argument("--min-samples-leaf", type=int, default=d.min_samples_leaf, help="minimum samples per leaf")
    p.add_argument("--features-per-split", type=int, default=None,
                   help="features tried per split (default ceil(sqrt(d)))")
    p.add_argument("--no-bootstrap", action="store_true", help="grow every tree on the full training set")
    p.add_argument("--no-balanced", action="store_true", help="disable inverse-frequency class weights")
    p.add_argument("--exclude-kind", nargs="*", default=[], choices=[k.value for k in AttackKind],
                   help="drop windows of these attack kinds before training")

    p = command("prune", cmd_prune, "Cost-complexity prune a forest, picking alpha on validation data.")
    p.add_argument("--model", required=True, help="float forest model file")
    p.add_argument("--validation", required=True, help="labelled validation features CSV")
    p.add_argument("--out", required=True, help="pruned model file to write")
    p.add_argument("--alpha-grid", type=_floats, default=list(DEFAULT_ALPHA_GRID), help="candidate alphas")
    p.add_argument("--exclude-kind", nargs="*", default=[], choices=[k.value for k in AttackKind],
                   help="drop windows of these attack kinds from validation")

    p = command("quantize", cmd_quantize, "Convert a float forest to 16-bit thresholds and 8-bit leaves.")
    p.add_argument("--model", required=True, help="float forest model file")
    p.add_argument("--out", required=True, help="quantized model file to write")

    p = command("ae-train", cmd_ae_train, "Train the autoencoder on the benign windows of a features CSV.")
    p.add_argument("--features", required=True, help="features CSV; attack-labelled rows are skipped")
    p.add_argument("--out", required=True, help="model file to write")
    d = AETrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs, help="training epochs")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="mini-batch size")
    p.add_argument("--learning-rate", type=float, default=d.learning_rate, help="gradient step size")

    p = command("detect", cmd_detect, "Run the streaming detector and write alerts plus a per-window trace.")
    p.add_argument("--forest", required=True, help="float or quantized forest model")
    p.add_argument("--ae", required=True, help="autoencoder model")
    p.add_argument("--features", help="features CSV to score")
    p.add_argument("--flows", help="flow CSV to extract and score (instead of --features)")
    p.add_argument("--telemetry", help="telemetry CSV for --flows")
    p.add_argument("--out", required=True, help="output directory")
    d = DetectorConfig()
    p.add_argument("--rf-threshold", type=float, default=d.rf_threshold, help="forest attack probability cutoff")
    p.add_argument("--ae-quantile", type=float, default=d.ae_quantile, help="rolling quantile for the AE threshold")
    p.add_argument("--ae-history", type=int, default=d.ae_history, help="benign scores kept per device")
    p.add_argument("--combine", choices=[c.value for c in Combine], default=d.combine.value,
                   help="how forest and autoencoder verdicts combine")
    p.add_argument("--relief-slope", type=float, default=d.relief_slope, help="load relief slope")
    p.add_argument("--relief-knee-pct", type=float, default=d.relief_knee_pct, help="CPU percent where relief starts")
    p.add_argument("--relief-span-pct", type=float, default=d.relief_span_pct, help="CPU span for one slope unit")
    p.add_argument("--warmup", type=int, default=d.warmup, help="scores needed before the AE path may fire")
    p.add_argument("--no-calibrated-floor", action="store_true",
                   help="drop the training-score floor under the per-device threshold")
    _window_flags(p)

    p = command("evaluate", cmd_evaluate, "Compute window-level metrics and write a comparison report.")
    p.add_argument("--trace", nargs="*", default=[], help="detector trace CSVs, optionally NAME=PATH")
    p.add_argument("--forest", nargs="*", default=[], help="forest models scored on --features, optionally NAME=PATH")
    p.add_argument("--features", help="labelled features CSV for --forest columns")
    p.add_argument("--decision", choices=("alert", "rf_fired", "ae_fired"), default="alert",
                   help="trace column used as the prediction")
    p.add_argument("--include-warmup", action="store_true", help="also count windows from warming-up devices")
    p.add_argument("--out", required=True, help="report file to write")
    _rf_threshold_flag(p)

    p = command("bench", cmd_bench, "Time float versus quantized forest inference.")
    p.add_argument("--forest", required=True, help="float forest model")
    p.add_argument("--quantized", help="quantized model (default: quantize --forest in memory)")
    p.add_argument("--features", required=True, help="features CSV to time on (at least 100 rows)")
    p.add_argument("--repetitions", type=int, default=11, help="passes over the vectors; the first 10%% are warm-up")
    p.add_argument("--limit", type=int, help="use only the first N vectors")
    p.add_argument("--out", required=True, help="report file to write")
    _rf_threshold_flag(p)

    p = command("predict", cmd_predict, "Score feature vectors with a forest.")
    p.add_argument("--model", required=True, help="float or quantized forest model")
    p.add_argument("--features", required=True, help="features CSV")
    p.add_argument("--out", help="output CSV (default: standard output)")
    _rf_threshold_flag(p)

    p = command("ae-score", cmd_ae_score, "Score feature vectors with the autoencoder.")
    p.add_argument("--model", required=True, help="autoencoder model")
    p.add_argument("--features", required=True, help="features CSV")
    p.add_argument("--out", help="output CSV (default: standard output)")
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.seed_given = any(t == "--seed" or t.startswith("--seed=") for t in argv)
        args.handler(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
