"""Command-line pipeline: profile -> LUT -> cost model -> search -> derive ->
retrain -> evaluate -> lint -> report.

Every command writes a run manifest recording its configuration hash, seed,
and the content hash of each produced artifact (hashes are computed over
timestamp-stripped content so reruns with the same seed match byte-for-byte).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, costmodel, datasets, lint, profiler, search, spaces
from .errors import HwnasError
from .graph import CompactNet, SuperNet, Task, load_net, save_net, validate
from .latency import DEFAULT_CLOCK_GHZ, compact_latency, load_lut, save_lut
from .nncore import load_checkpoint, save_checkpoint

DEVICE_CONFIG_ENV = "HWNAS_DEVICE_CONFIG"


# ---------------------------------------------------------------------------
# Manifest helpers
# ---------------------------------------------------------------------------

def _strip_timestamps(data: bytes) -> bytes:
    """Zero volatile metadata (creation timestamps) before hashing."""
    try:
        doc = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError):
        return data
    if isinstance(doc, dict) and isinstance(doc.get("metadata"), dict):
        doc["metadata"].pop("created", None)
    return json.dumps(doc, sort_keys=True).encode()


def content_hash(path) -> str:
    return hashlib.sha256(_strip_timestamps(Path(path).read_bytes())).hexdigest()


def write_manifest(out_dir, command: str, args_doc: dict, seed, artifacts: dict):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = hashlib.sha256(
        json.dumps(args_doc, sort_keys=True).encode()).hexdigest()
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config_hash": cfg_hash,
        "seed": seed,
        "artifacts": {name: {"path": str(p), "sha256": content_hash(p)}
                      for name, p in artifacts.items()},
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Shared argument plumbing
# ---------------------------------------------------------------------------

def _load_device(spec: str):
    """'sim' for defaults, or a JSON config file ({'type': 'sim'|'command'})."""
    if spec == "sim":
        path = os.environ.get(DEVICE_CONFIG_ENV)
        if not path:
            return profiler.SimulatedVPU()
        spec = path
    doc = json.loads(Path(spec).read_text(encoding="utf-8"))
    kind = doc.pop("type", "sim")
    if kind == "sim":
        return profiler.SimulatedVPU(**doc)
    if kind == "command":
        return profiler.ExternalCommandRunner(**doc)
    raise HwnasError(f"unknown device type {kind!r}")


def _add_dataset_args(p):
    p.add_argument("--data-samples", type=int, default=400)
    p.add_argument("--data-size", type=int, default=8)
    p.add_argument("--data-classes", type=int, default=4)
    p.add_argument("--data-noise", type=float, default=0.15)
    p.add_argument("--data-seed", type=int, default=42)


def _make_dataset(task: Task, args) -> datasets.Dataset:
    if task is Task.Classification:
        spec = datasets.DatasetSpec(task, args.data_samples, args.data_size,
                                    num_classes=args.data_classes,
                                    seed=args.data_seed, noise=args.data_noise)
        return datasets.generate_classification_dataset(spec)
    spec = datasets.DatasetSpec(task, args.data_samples, args.data_size,
                                sr_scale=2, seed=args.data_seed, noise=args.data_noise)
    return datasets.generate_sr_dataset(spec)


def _load_supernet(spec: str) -> SuperNet:
    if spec in spaces.BUILTIN_SPACES:
        return spaces.BUILTIN_SPACES[spec]()
    net = load_net(spec)
    if not isinstance(net, SuperNet):
        raise HwnasError(f"{spec} is not a supernet file")
    return net


def _emit(args, doc: dict):
    if getattr(args, "json", False):
        print(json.dumps(doc, indent=2))
    else:
        for k, v in doc.items():
            print(f"{k}: {v}")


# ---------------------------------------------------------------------------
# SVG plotting (textual, diffable, dependency-free)
# ---------------------------------------------------------------------------

def svg_scatter(points, xlabel: str, ylabel: str, path, diagonal=False):
    """Write a minimal scatter plot; points is a list of (x, y)."""
    w, h, m = 480, 360, 50
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    xr = (x1 - x0) or 1.0
    yr = (y1 - y0) or 1.0
    def sx(x): return m + (x - x0) / xr * (w - 2 * m)
    def sy(y): return h - m - (y - y0) / yr * (h - 2 * m)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>',
             f'<line x1="{m}" y1="{h-m}" x2="{w-m}" y2="{h-m}" stroke="black"/>',
             f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h-m}" stroke="black"/>',
             f'<text x="{w//2}" y="{h-10}" text-anchor="middle" font-size="12">{xlabel}</text>',
             f'<text x="14" y="{h//2}" font-size="12" transform="rotate(-90 14 {h//2})" '
             f'text-anchor="middle">{ylabel}</text>',
             f'<text x="{m}" y="{h-m+16}" font-size="10">{x0:.4g}</text>',
             f'<text x="{w-m}" y="{h-m+16}" font-size="10" text-anchor="end">{x1:.4g}</text>',
             f'<text x="{m-4}" y="{h-m}" font-size="10" text-anchor="end">{y0:.4g}</text>',
             f'<text x="{m-4}" y="{m+4}" font-size="10" text-anchor="end">{y1:.4g}</text>']
    if diagonal:
        lo, hi = max(x0, y0), min(x1, y1)
        if hi > lo:
            parts.append(f'<line x1="{sx(lo):.1f}" y1="{sy(lo):.1f}" x2="{sx(hi):.1f}" '
                         f'y2="{sy(hi):.1f}" stroke="gray" stroke-dasharray="4"/>')
    for x, y in points:
        parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" r="3" '
                     f'fill="steelblue" fill-opacity="0.7"/>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------

def cmd_lut_build(args):
    net = _load_supernet(args.net)
    device = _load_device(args.device)
    lut = profiler.build_lut(device, net, n=args.stack_n, trials=args.trials)
    save_lut(lut, args.out)
    write_manifest(Path(args.out).parent, "lut build", vars(args) | {"func": None},
                   getattr(device, "seed", None), {"lut": args.out})
    _emit(args, {"entries": len(lut.entries), "out": args.out})
    return 0


def cmd_lut_from_model(args):
    net = _load_supernet(args.net)
    model = costmodel.load_model(args.model)
    lut = costmodel.lut_from_model(model, net, clock_ghz=args.clock_ghz)
    save_lut(lut, args.out)
    write_manifest(Path(args.out).parent, "lut from-model", vars(args) | {"func": None},
                   None, {"lut": args.out})
    _emit(args, {"entries": len(lut.entries), "out": args.out})
    return 0


def cmd_costmodel_train(args):
    if args.records:
        records = costmodel.load_records(args.records)
    else:
        device = _load_device(args.device)
        records = costmodel.simulate_records(device, args.simulate, seed=args.seed,
                                             clock_ghz=args.clock_ghz)
        if args.save_records:
            costmodel.save_records(records, args.save_records)
    cfg = costmodel.CostModelConfig(epochs=args.epochs, lr=args.lr, seed=args.seed)
    model, report = costmodel.train_cost_model(records, cfg)
    costmodel.save_model(model, args.out)
    artifacts = {"model": args.out}
    if not args.records and args.save_records:
        artifacts["records"] = args.save_records
    write_manifest(Path(args.out).parent, "costmodel train", vars(args) | {"func": None},
                   args.seed, artifacts)
    _emit(args, {"train_mape_percent": report.final_train_mape,
                 "val_mape_percent": report.final_val_mape, "out": args.out})
    return 0


def cmd_costmodel_eval(args):
    model = costmodel.load_model(args.model)
    records = costmodel.load_records(args.records)
    mape = costmodel.evaluate_mape(model, records)
    _emit(args, {"mape_percent": mape, "records": len(records)})
    return 0


def cmd_search_run(args):
    net = _load_supernet(args.net)
    report = validate(net)
    if not report.ok:
        raise HwnasError(f"invalid supernet: {report.findings[0]}")
    lut = load_lut(args.lut)
    if args.config:
        cfg = search.SearchConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
    else:
        cfg = search.SearchConfig(
            lambda1=args.lambda1, lambda2=args.lambda2, lr_weights=args.lr_weights,
            lr_arch=args.lr_arch, rounds=args.rounds, batch_size=args.batch_size,
            weight_steps_per_round=args.weight_steps,
            arch_steps_per_round=args.arch_steps,
            seed=args.seed if args.seed is not None else 0,
            latency_source=args.lut)
    ds = _make_dataset(net.task, args)
    state, history = search.train_search(net, ds.train, ds.val, cfg, lut)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hist_path = out_dir / "history.csv"
    hist_path.write_text(history.to_csv(), encoding="utf-8")
    arch_path = out_dir / "arch.json"
    arch_path.write_text(json.dumps(
        {"alphas": [v.tolist() for v in state.arch.vectors]}, indent=2) + "\n",
        encoding="utf-8")
    net_path = out_dir / "supernet.net.json"
    save_net(net, net_path)
    write_manifest(out_dir, "search run", vars(args) | {"func": None}, cfg.seed,
                   {"history": hist_path, "arch": arch_path, "supernet": net_path})
    _emit(args, {"rounds": len(history.records), "out_dir": str(out_dir)})
    return 0


def _load_arch(path) -> search.ArchParams:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return search.ArchParams(tuple(np.asarray(a, dtype=np.float64)
                                   for a in doc["alphas"]))


def cmd_derive(args):
    net = _load_supernet(args.net)
    arch = _load_arch(args.arch)
    compact = search.derive_compact(net, arch)
    save_net(compact, args.out)
    write_manifest(Path(args.out).parent, "derive", vars(args) | {"func": None},
                   None, {"compact": args.out})
    _emit(args, {"chosen": list(compact.chosen_indices),
                 "tie_stages": list(compact.tie_stages), "out": args.out})
    return 0


def cmd_train_compact(args):
    net = load_net(args.net)
    if not isinstance(net, CompactNet):
        raise HwnasError(f"{args.net} is not a compact network file")
    ds = _make_dataset(net.task, args)
    model = search.train_compact(net, ds.train, steps=args.steps,
                                 batch_size=args.batch_size, lr=args.lr,
                                 weight_decay=args.weight_decay, seed=args.seed)
    save_checkpoint(model.named_parameters(), args.out)
    write_manifest(Path(args.out).parent, "train-compact", vars(args) | {"func": None},
                   args.seed, {"checkpoint": args.out})
    _emit(args, {"steps": args.steps, "out": args.out})
    return 0


def cmd_eval(args):
    net = load_net(args.net)
    if not isinstance(net, CompactNet):
        raise HwnasError(f"{args.net} is not a compact network file")
    model = search.CompactNetModel(net, seed=args.seed)
    load_checkpoint(model.named_parameters(), args.checkpoint)
    ds = _make_dataset(net.task, args)
    metrics = {}
    if net.task is Task.Classification:
        metrics["test_accuracy"] = search.accuracy(model, ds.test)
    else:
        x, y = ds.test
        pred = model.forward(x)
        res = datasets.psnr(pred, y, peak=1.0)
        metrics["test_psnr_db"] = res.db
        metrics["psnr_exact_match"] = res.exact
    if args.lut:
        metrics["lut_latency_ms"] = compact_latency(net, load_lut(args.lut))
    if args.out:
        Path(args.out).write_text(json.dumps(metrics, indent=2) + "\n", encoding="utf-8")
        write_manifest(Path(args.out).parent, "eval", vars(args) | {"func": None},
                       args.seed, {"metrics": args.out})
    _emit(args, metrics)
    return 0


def cmd_lint(args):
    net = load_net(args.net) if args.net not in spaces.BUILTIN_SPACES \
        else spaces.BUILTIN_SPACES[args.net]()
    findings = lint.lint_network(net, strict_leaky=args.strict_leaky,
                                 streaming_threshold_bytes=args.streaming_threshold)
    if args.json:
        print(lint.findings_to_json(findings), end="")
    else:
        print(lint.findings_to_table(findings), end="")
    if args.out:
        Path(args.out).write_text(lint.findings_to_json(findings), encoding="utf-8")
    if lint.has_warnings(findings) and not args.exit_zero:
        return 1
    return 0


def cmd_calibrate(args):
    net = _load_supernet(args.net)
    lut = load_lut(args.lut)
    device = _load_device(args.device)
    report = profiler.calibrate(device, net, lut, num_samples=args.samples,
                                seed=args.seed, trials=args.trials)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    csv_path = prefix.with_suffix(".csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("predicted_ms,measured_ms\n")
        for p, mmt in zip(report.predicted_ms, report.measured_ms):
            fh.write(f"{float(p)!r},{float(mmt)!r}\n")
    summary = {"mape_percent": report.mape_percent, "pearson": report.pearson,
               "samples": args.samples, "note": report.note}
    json_path = prefix.with_suffix(".json")
    json_path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    write_manifest(prefix.parent, "calibrate", vars(args) | {"func": None},
                   args.seed, {"calibration_csv": csv_path, "calibration_json": json_path})
    _emit(args, summary)
    return 0


def cmd_report(args):
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    produced = {}
    summary = {"source_manifest": args.manifest, "command": manifest.get("command")}
    arts = manifest.get("artifacts", {})
    for name, entry in arts.items():
        path = Path(entry["path"])
        if content_hash(path) != entry["sha256"]:
            raise HwnasError(f"artifact {name} changed since manifest was written")
        if name == "calibration_csv":
            rows = path.read_text(encoding="utf-8").strip().splitlines()[1:]
            pts = [tuple(float(v) for v in r.split(",")) for r in rows]
            svg = out_dir / "calibration_scatter.svg"
            svg_scatter(pts, "predicted latency (ms)", "measured latency (ms)",
                        svg, diagonal=True)
            produced["calibration_scatter"] = svg
        if name == "frontier_csv":
            rows = path.read_text(encoding="utf-8").strip().splitlines()[1:]
            pts = [tuple(float(v) for v in r.split(",")[:2]) for r in rows]
            svg = out_dir / "latency_accuracy_frontier.svg"
            svg_scatter(pts, "latency (ms)", "accuracy / quality", svg)
            produced["frontier"] = svg
    summary_path = out_dir / "report.json"
    summary["plots"] = {k: str(v) for k, v in produced.items()}
    summary_path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    produced["summary"] = summary_path
    write_manifest(out_dir, "report", vars(args) | {"func": None}, None, produced)
    _emit(args, {"out_dir": str(out_dir), "plots": len(produced) - 1})
    return 0


# ---------------------------------------------------------------------------
# Argument parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="hwnas",
        description="Hardware-latency-aware architecture search pipeline")
    ap.add_argument("--json", action="store_true", help="machine-readable output")
    sub = ap.add_subparsers(dest="cmd", required=True)

    lut = sub.add_parser("lut").add_subparsers(dest="lut_cmd", required=True)
    p = lut.add_parser("build", help="profile a search space on a device")
    p.add_argument("--net", required=True, help="supernet file or builtin space name")
    p.add_argument("--device", default="sim")
    p.add_argument("--out", required=True)
    p.add_argument("--stack-n", type=int, default=profiler.DEFAULT_STACK_N)
    p.add_argument("--trials", type=int, default=profiler.DEFAULT_TRIALS)
    p.set_defaults(func=cmd_lut_build)
    p = lut.add_parser("from-model", help="predict a LUT with a trained cost model")
    p.add_argument("--net", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clock-ghz", type=float, default=DEFAULT_CLOCK_GHZ)
    p.set_defaults(func=cmd_lut_from_model)

    cm = sub.add_parser("costmodel").add_subparsers(dest="cm_cmd", required=True)
    p = cm.add_parser("train")
    p.add_argument("--records", help="profile records (.records.jsonl)")
    p.add_argument("--simulate", type=int, default=500,
                   help="generate N records from the device when --records absent")
    p.add_argument("--save-records", help="where to write simulated records")
    p.add_argument("--device", default="sim")
    p.add_argument("--clock-ghz", type=float, default=DEFAULT_CLOCK_GHZ)
    p.add_argument("--epochs", type=int, default=3000)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_costmodel_train)
    p = cm.add_parser("eval")
    p.add_argument("--model", required=True)
    p.add_argument("--records", required=True)
    p.set_defaults(func=cmd_costmodel_eval)

    p = sub.add_parser("search").add_subparsers(dest="search_cmd", required=True) \
        .add_parser("run")
    p.add_argument("--net", required=True)
    p.add_argument("--lut", required=True)
    p.add_argument("--config", help=".search.json config file")
    p.add_argument("--lambda1", type=float, default=0.0)
    p.add_argument("--lambda2", type=float, default=0.0)
    p.add_argument("--lr-weights", type=float, default=0.02)
    p.add_argument("--lr-arch", type=float, default=0.2)
    p.add_argument("--rounds", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--weight-steps", type=int, default=8)
    p.add_argument("--arch-steps", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", required=True)
    _add_dataset_args(p)
    p.set_defaults(func=cmd_search_run)

    p = sub.add_parser("derive")
    p.add_argument("--net", required=True)
    p.add_argument("--arch", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("train-compact")
    p.add_argument("--net", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_dataset_args(p)
    p.set_defaults(func=cmd_train_compact)

    p = sub.add_parser("eval")
    p.add_argument("--net", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lut", help="also report LUT latency of the net")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write metrics JSON here")
    _add_dataset_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lint")
    p.add_argument("--net", required=True)
    p.add_argument("--strict-leaky", action="store_true")
    p.add_argument("--streaming-threshold", type=int,
                   default=lint.DEFAULT_STREAMING_THRESHOLD_BYTES)
    p.add_argument("--out", help="write findings JSON here")
    p.add_argument("--exit-zero", action="store_true",
                   help="exit 0 even when warnings are present")
    p.set_defaults(func=cmd_lint)

    p = sub.add_parser("calibrate")
    p.add_argument("--net", required=True)
    p.add_argument("--lut", required=True)
    p.add_argument("--device", default="sim")
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--trials", type=int, default=profiler.DEFAULT_TRIALS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except HwnasError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
