"""Command-line entry point: convert, calibrate, simulate, eval, analyze,
fixture. Every run writes a reproducibility record next to its artifacts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .analysis import energy_estimate, firing_rate_stats, layer_error, error_propagation_bound
from .ann import ann_forward
from .calibration import PipelineConfig, load_bundle, run_pipeline, save_bundle
from .data import (
    FIXTURE_KINDS,
    accuracy,
    fixture_manifest,
    load_samples,
    make_fixture,
    save_samples,
)
from .errors import SpikeforgeError
from .graph import normalize_thresholds, rewrite_for_snn, spiking_units, validate_graph
from .model_io import load_model, save_model
from .snn import expected_rate_forward, init_state, simulate_snn
from .thresholds import ThresholdTable, baseline_threshold, load_thresholds, save_thresholds

_CALIBRATE_DEFAULTS = {
    "pipeline": "light",
    "T": 32,
    "threshold": "mmse",
    "threshold_n": 100,
    "percentile": 99.9,
    "bc_batch": 128,
    "wc_batch": 1024,
    "wc_iters": 5000,
    "wc_lr": 1e-5,
    "wc_momentum": 0.9,
    "seed": 0,
}


def _default_threads() -> int:
    env = os.environ.get("SPIKEFORGE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikeforge", description=__doc__)
    parser.add_argument("--version", action="version", version=f"spikeforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--json", action="store_true", help="machine-readable stdout")
        p.add_argument("--config", help="key = value file merged under explicit flags")
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: cores)")

    p = sub.add_parser("convert", help="fold BN, convert AvgPool, optionally normalize")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--thresholds", help="apply unit-threshold weight normalization")
    common(p)

    p = sub.add_parser("calibrate", help="run the light or advanced pipeline")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("-T", type=int, default=None)
    p.add_argument("--pipeline", choices=["light", "advanced"], default=None)
    p.add_argument(
        "--threshold", choices=["mmse", "mmse_channel", "max", "percentile"], default=None
    )
    p.add_argument("--threshold-n", type=int, default=None)
    p.add_argument("--percentile", type=float, default=None)
    p.add_argument("--bc-batch", type=int, default=None)
    p.add_argument("--wc-batch", type=int, default=None)
    p.add_argument("--wc-iters", type=int, default=None)
    p.add_argument("--wc-lr", type=float, default=None)
    p.add_argument("--wc-momentum", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    common(p)

    p = sub.add_parser("simulate", help="run the SNN and report accuracy + stats")
    p.add_argument("--bundle")
    p.add_argument("--model")
    p.add_argument("--thresholds")
    p.add_argument("--data", required=True)
    p.add_argument("-T", type=int, required=True)
    p.add_argument("--out")
    p.add_argument("--record", action="store_true")
    common(p)

    p = sub.add_parser("eval", help="compare calibrated bundle against naive conversion")
    p.add_argument("--model", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-T", type=int, required=True)
    p.add_argument("--out")
    common(p)

    p = sub.add_parser("analyze", help="layer errors, bound diagnostic, sparsity, energy")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("-T", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", action="store_true")
    common(p)

    p = sub.add_parser("fixture", help="emit a committed fixture net and its data")
    p.add_argument("--kind", choices=list(FIXTURE_KINDS), required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    common(p)
    return parser


def _load_config_file(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _merge_config(args: argparse.Namespace, defaults: dict) -> None:
    """Fill unset flags from the config file, then from built-in defaults."""
    file_values = _load_config_file(args.config) if args.config else {}
    for key, fallback in defaults.items():
        if getattr(args, key, None) is not None:
            continue
        if key in file_values:
            raw = file_values[key]
            caster = type(fallback)
            setattr(args, key, caster(raw) if caster is not bool else raw == "true")
        else:
            setattr(args, key, fallback)


def _resolved_options(args: argparse.Namespace) -> dict:
    skip = {"command", "json", "config"}
    out = {}
    for key, value in sorted(vars(args).items()):
        if key in skip:
            continue
        out[key] = value
    return out


def _write_run_record(out_dir, args: argparse.Namespace) -> dict:
    options = _resolved_options(args)
    blob = json.dumps(options, sort_keys=True, separators=(",", ":"), default=str)
    record = {
        "command": args.command,
        "options": options,
        "config_hash": hashlib.sha256(blob.encode()).hexdigest(),
        "versions": {
            "spikeforge": __version__,
            "numpy": np.__version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
        },
    }
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_record.json"), "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return record


def _emit(args, payload: dict, text_lines: list[str]) -> None:
    if args.json:
        print(json.dumps(payload, sort_keys=True, default=str))
    else:
        for line in text_lines:
            print(line)


def _max_act_table(graph, images, T) -> ThresholdTable:
    _, trace = ann_forward(graph, images, capture=True)
    table = ThresholdTable(method="max", T=T)
    for unit in spiking_units(graph):
        if not unit.is_output:
            table.set(unit.op_id, baseline_threshold(trace.pre[unit.op_id], method="max"))
    return table


def cmd_convert(args) -> int:
    g = load_model(args.model)
    violations = validate_graph(g)
    if violations:
        raise SpikeforgeError(f"model invalid: {violations}")
    rewritten = rewrite_for_snn(g)
    if args.thresholds:
        table = load_thresholds(args.thresholds)
        rewritten, table = normalize_thresholds(rewritten, table)
        save_thresholds(table, os.path.join(args.out, "thresholds.json"))
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "model.sfm")
    save_model(rewritten, out_path)
    _write_run_record(args.out, args)
    _emit(args, {"model": out_path, "nodes": len(rewritten.nodes)}, [f"wrote {out_path}"])
    return 0


def cmd_calibrate(args) -> int:
    _merge_config(args, _CALIBRATE_DEFAULTS)
    g = load_model(args.model)
    samples = load_samples(args.data)
    cfg = PipelineConfig(
        mode=args.pipeline,
        T=args.T,
        threshold_method=args.threshold,
        threshold_n=args.threshold_n,
        percentile=args.percentile,
        bc_batch=args.bc_batch,
        wc_batch=args.wc_batch,
        wc_iters=args.wc_iters,
        wc_lr=args.wc_lr,
        wc_momentum=args.wc_momentum,
        seed=args.seed,
    )
    bundle = run_pipeline(g, samples.images, cfg)
    save_bundle(bundle, args.out)
    _write_run_record(args.out, args)
    payload = {"bundle": args.out, "report": bundle.report}
    _emit(args, payload, [f"calibrated bundle written to {args.out}"])
    return 0


def _simulation_target(args):
    if args.bundle:
        bundle = load_bundle(args.bundle)
        return bundle.graph, bundle.thresholds, bundle.v0s
    if args.model and args.thresholds:
        return load_model(args.model), load_thresholds(args.thresholds), {}
    return None


def cmd_simulate(args, parser) -> int:
    target = _simulation_target(args)
    if target is None:
        parser.error("simulate needs --bundle or both --model and --thresholds")
    graph, table, v0s = target
    samples = load_samples(args.data)
    state = init_state(graph, table, v0s)
    result = simulate_snn(
        graph, state, samples.images, args.T, record=args.record, threads=args.threads or _default_threads()
    )
    acc = accuracy(result.output_rate, samples.labels)
    stats = firing_rate_stats(result)
    payload = {"accuracy": acc, "T": args.T, "firing": stats}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "simulate.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_run_record(args.out, args)
    _emit(
        args,
        payload,
        [f"accuracy {acc:.2f}% at T={args.T}"]
        + [f"  {k}: mean firing {v['mean']:.4f}" for k, v in stats.items()],
    )
    return 0


def cmd_eval(args) -> int:
    bundle = load_bundle(args.bundle)
    samples = load_samples(args.data)
    g = load_model(args.model)
    baseline_graph = rewrite_for_snn(g)
    table = _max_act_table(baseline_graph, samples.images, args.T)
    threads = args.threads or _default_threads()

    state = init_state(baseline_graph, table)
    uncal = simulate_snn(baseline_graph, state, samples.images, args.T, threads=threads)
    uncal_acc = accuracy(uncal.output_rate, samples.labels)

    state = init_state(bundle.graph, bundle.thresholds, bundle.v0s)
    cal = simulate_snn(bundle.graph, state, samples.images, args.T, threads=threads)
    cal_acc = accuracy(cal.output_rate, samples.labels)

    ann_acc = accuracy(ann_forward(baseline_graph, samples.images)[0], samples.labels)
    payload = {
        "T": args.T,
        "ann_accuracy": ann_acc,
        "calibrated_accuracy": cal_acc,
        "uncalibrated_accuracy": uncal_acc,
    }
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        _write_run_record(args.out, args)
    _emit(
        args,
        payload,
        [
            f"ANN accuracy:                    {ann_acc:.2f}%",
            f"calibrated SNN accuracy:         {cal_acc:.2f}%  (T={args.T})",
            f"uncalibrated max-act accuracy:   {uncal_acc:.2f}%  (T={args.T})",
        ],
    )
    return 0


def cmd_analyze(args) -> int:
    bundle = load_bundle(args.bundle)
    samples = load_samples(args.data)
    T = args.T if args.T is not None else bundle.config.T
    graph = bundle.graph
    _, trace = ann_forward(graph, samples.images, capture=True)
    rf = expected_rate_forward(graph, bundle.thresholds, bundle.v0s, samples.images, T)
    state = init_state(graph, bundle.thresholds, bundle.v0s)
    sim = simulate_snn(graph, state, samples.images, T, threads=args.threads or _default_threads())

    reports = layer_error(trace, rf, bundle.thresholds, T, v0s=bundle.v0s, sim=sim)
    bound = error_propagation_bound(graph, trace, rf, bundle.thresholds, T, v0s=bundle.v0s)
    firing = firing_rate_stats(sim)
    energy = energy_estimate(sim, graph)
    acc = accuracy(sim.output_rate, samples.labels)

    payload = {
        "T": T,
        "accuracy": acc,
        "layers": [vars(r) for r in reports],
        "bound": bound,
        "firing": firing,
        "energy": energy,
    }
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "analysis.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    lines = [
        f"accuracy {acc:.2f}% at T={T}",
        "",
        f"{'layer':<10} {'||e||':>10} {'floor':>8} {'clip':>8} {'viol%':>8} {'fire':>8}",
    ]
    for r in reports:
        viol = "-" if r.terminal_violation_fraction is None else f"{100 * r.terminal_violation_fraction:.1f}"
        fire = firing.get(r.layer_id, {}).get("mean", 0.0)
        lines.append(
            f"{r.layer_id:<10} {r.e_norm:>10.4f} {r.floor_count:>8} {r.clip_count:>8} {viol:>8} {fire:>8.4f}"
        )
    if "lhs" in bound:
        lines.append("")
        lines.append(f"error-propagation bound: lhs {bound['lhs']:.4f}  rhs {bound['rhs']:.4f}")
    lines.append(
        f"energy: snn {energy['snn_energy']:.1f} vs ann {energy['ann_energy']:.1f} "
        f"({energy['units']}), ratio {energy['ratio']:.4f}"
    )
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    if args.csv:
        with open(os.path.join(args.out, "layer_errors.csv"), "w", encoding="utf-8") as fh:
            fh.write("layer,e_norm,floor_count,clip_count,total,terminal_violation_fraction\n")
            for r in reports:
                fh.write(
                    f"{r.layer_id},{r.e_norm},{r.floor_count},{r.clip_count},{r.total},"
                    f"{r.terminal_violation_fraction}\n"
                )
    _write_run_record(args.out, args)
    _emit(args, payload, lines)
    return 0


def cmd_fixture(args) -> int:
    graph, train, test = make_fixture(args.kind, args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_model(graph, os.path.join(args.out, "model.sfm"))
    save_samples(train, os.path.join(args.out, "train.sft"))
    save_samples(test, os.path.join(args.out, "test.sft"))
    manifest = fixture_manifest(args.kind)
    with open(os.path.join(args.out, "fixture.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_run_record(args.out, args)
    _emit(
        args,
        {"out": args.out, "kind": args.kind, "ann_accuracy": manifest["ann_accuracy"]},
        [f"fixture {args.kind} written to {args.out} (ANN accuracy {manifest['ann_accuracy']:.2f}%)"],
    )
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "convert":
            return cmd_convert(args)
        if args.command == "calibrate":
            return cmd_calibrate(args)
        if args.command == "simulate":
            return cmd_simulate(args, parser)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "analyze":
            return cmd_analyze(args)
        if args.command == "fixture":
            return cmd_fixture(args)
        parser.error(f"unknown command {args.command}")
    except (SpikeforgeError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
