"""``sbnn`` command line: prune, rearrange, convert, validate, run, bench, inspect.

Exit codes: 0 success, 2 validation failure (bad manifest, config, masks or
model file contents), 3 I/O error (missing or unreadable/unwritable files).
"""
from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import DEFAULT_SPARSITY, BenchSpec, parse_shapes, run_bench, to_csv
from .core import DTYPE
from .engine import Counters, backend_name, flop_count, get_backend, plan_model, run_model
from .ir import IRFormatError, convert, layer_summary, load, save, validate
from .model import load_model, mobilenet_v1, save_model
from .pruner import PruneConfig, mask_from_json, mask_to_json, network_prune
from .rearrange import rearrange_network

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 2, 3

log = logging.getLogger("sbnn")


class CliError(Exception):
    def __init__(self, msg: str, code: int = EXIT_INVALID):
        super().__init__(msg)
        self.code = code


def _read_json(path, what: str):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise CliError(f"{what} {path}: not valid JSON ({e})") from e


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _config(args) -> tuple[PruneConfig, dict]:
    doc = _read_json(args.config, "config") if args.config else {}
    if not isinstance(doc, dict):
        raise CliError("config must be a JSON object")
    doc = dict(doc)
    extra = doc.pop("rearrange", {}) or {}
    return PruneConfig.from_dict(doc), extra


def _model(args, with_weights=True):
    return load_model(args.manifest, args.weights, with_weights=with_weights)


def _load_masks(path) -> dict:
    doc = _read_json(path, "mask file")
    if not isinstance(doc, dict) or not isinstance(doc.get("masks"), dict):
        raise CliError(f"mask file {path}: expected an object with a 'masks' mapping")
    out = {}
    for name, d in doc["masks"].items():
        try:
            out[name] = mask_from_json(d)
        except (KeyError, TypeError, ValueError) as e:
            raise CliError(f"mask file {path}: layer {name!r}: {e}") from e
    return out


def cmd_prune(args):
    cfg, _ = _config(args)
    model = _model(args)
    masks, report = network_prune(model, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "masks.json", {"config": cfg.to_dict(),
                                     "masks": {k: mask_to_json(v) for k, v in masks.items()}})
    rep = report.to_dict()
    _write_json(out / "report.json", rep)
    _emit(rep)


def cmd_rearrange(args):
    cfg, extra = _config(args)
    model = _model(args)
    unknown = set(extra) - {"budget"}
    if unknown:
        raise CliError(f"unknown rearrange config keys: {sorted(unknown)}")
    new, plan, report = rearrange_network(model, cfg.conv1x1_go, cfg.conv1x1_gi, cfg.conv1x1_rho,
                                          int(extra.get("budget", 2000)))
    out = Path(args.out)
    save_model(new, out)
    _write_json(out / "plan.json", plan.to_dict())
    rep = report.to_dict()
    _write_json(out / "rearrange_report.json", rep)
    _emit(rep)


def cmd_convert(args):
    model = _model(args)
    masks = _load_masks(args.masks) if args.masks else {}
    ir = convert(model, masks)
    nbytes = save(ir, args.out)
    dense_bytes = sum(4 * (0 if layer.weight is None else layer.weight.size) for layer in model.layers)
    weight_bytes = sum(4 * layer_summary(layer)["weight_floats"] for layer in ir.layers)
    _emit({"out": str(args.out), "file_bytes": nbytes, "dense_weight_bytes": int(dense_bytes),
           "stored_weight_bytes": int(weight_bytes),
           "weight_ratio": weight_bytes / dense_bytes if dense_bytes else 1.0})


def cmd_validate(args):
    try:
        ir = load(args.model, check=False)
    except IRFormatError as e:
        raise CliError(f"{args.model}: {e}") from e
    problems = validate(ir)
    _emit({"model": str(args.model), "valid": not problems, "violations": problems})
    if problems:
        raise CliError(f"{len(problems)} violation(s)")


def _read_input(args, shape):
    if args.input:
        raw = np.fromfile(args.input, dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise CliError(f"input {args.input} holds {raw.size} floats, model expects {shape}")
        return raw.astype(DTYPE).reshape(shape)
    return np.random.default_rng(args.seed).standard_normal(shape).astype(DTYPE)


def cmd_run(args):
    ir = load(args.model)
    x = _read_input(args, tuple(ir.layers[0].in_shape))
    plan = plan_model(ir, threads=args.threads, backend=args.backend)
    for _ in range(args.warmup):
        run_model(ir, x, plan)
    times = []
    counters = Counters()
    for i in range(args.reps):
        t0 = time.perf_counter()
        y = run_model(ir, x, plan, counters if i == 0 else None)
        times.append(time.perf_counter() - t0)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(y, dtype="<f4").tofile(args.out)
    fc = flop_count(ir)
    timing = {"model": str(args.model), "backend": backend_name(get_backend(plan.backend)),
              "threads": args.threads, "reps": args.reps, "warmup": args.warmup,
              "median_ms": statistics.median(times) * 1e3, "min_ms": min(times) * 1e3,
              "max_ms": max(times) * 1e3, "output_shape": list(y.shape),
              "dense_macs": fc["dense_macs"], "effective_macs": fc["effective_macs"],
              "kernel_macs": counters.macs}
    if args.timing:
        _write_json(args.timing, timing)
    _emit(timing)


def cmd_bench(args):
    shapes = parse_shapes(args.shapes) if args.shapes else ()
    sparsities = tuple(float(s) for s in args.sparsity.split(",")) if args.sparsity else DEFAULT_SPARSITY
    spec = BenchSpec(args.op, shapes, sparsities, args.reps, args.warmup, args.seed, args.threads,
                     args.backend)
    text = to_csv(run_bench(spec))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def cmd_inspect(args):
    ir = load(args.model)
    fc = flop_count(ir)
    macs = {d["layer"]: d for d in fc["layers"]}
    layers = []
    for layer in ir.layers:
        d = layer_summary(layer)
        d["dense_macs"] = macs[layer.name]["dense_macs"]
        d["effective_macs"] = macs[layer.name]["effective_macs"]
        layers.append(d)
    doc = {"version": ir.version, "input": ir.input_name, "output": ir.output_name,
           "layers": layers, "dense_macs": fc["dense_macs"], "effective_macs": fc["effective_macs"]}
    if args.json:
        _emit(doc)
        return
    print(f"{args.model}: {len(layers)} layers, input {ir.input_name!r}, output {ir.output_name!r}")
    for d in layers:
        print(f"  {d['name']:<16} {d['kind']:<15} {d['op']:<8} "
              f"{'x'.join(map(str, d['out_shape'])):<16} sparsity {d['sparsity']:.3f}  "
              f"MACs {d['effective_macs']}/{d['dense_macs']}")
    print(f"total MACs {fc['effective_macs']} of {fc['dense_macs']} dense")


def cmd_mobilenet(args):
    model = mobilenet_v1(args.resolution, args.width, args.classes, seed=args.seed)
    path = save_model(model, args.out)
    _emit({"manifest": str(path), "layers": len(model.layers), "dense_macs": model.dense_macs()})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sbnn", description="Block-sparse CNN pruning and inference.")
    p.add_argument("--version", action="version", version=f"sbnn {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def model_args(sp):
        sp.add_argument("--manifest", required=True, help="model manifest.json")
        sp.add_argument("--weights", help="weight blob directory (default: next to the manifest)")

    def engine_args(sp):
        sp.add_argument("--threads", type=int, default=1)
        sp.add_argument("--backend", default="auto", choices=("auto", "cython", "python"))
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("prune", help="compute masks and a pruning report")
    model_args(sp)
    sp.add_argument("--config", help="pruning config JSON")
    sp.add_argument("--out", required=True, help="output directory (masks.json, report.json)")
    sp.set_defaults(fn=cmd_prune)

    sp = sub.add_parser("rearrange", help="permute filters and write the permuted model")
    model_args(sp)
    sp.add_argument("--config", help="pruning config JSON (optional 'rearrange': {'budget': N})")
    sp.add_argument("--out", required=True, help="output directory (manifest, weights, plan.json)")
    sp.set_defaults(fn=cmd_rearrange)

    sp = sub.add_parser("convert", help="write a .sbnn model from a manifest and masks")
    model_args(sp)
    sp.add_argument("--masks", help="masks.json written by 'prune'")
    sp.add_argument("--out", required=True, help="output .sbnn path")
    sp.set_defaults(fn=cmd_convert)

    sp = sub.add_parser("validate", help="check a .sbnn file")
    sp.add_argument("model")
    sp.set_defaults(fn=cmd_validate)

    sp = sub.add_parser("run", help="run a .sbnn model on an input blob")
    sp.add_argument("model")
    sp.add_argument("--input", help="raw little-endian float32 NHWC input (default: seeded random)")
    sp.add_argument("--out", help="raw float32 output blob")
    sp.add_argument("--timing", help="timing JSON path")
    sp.add_argument("--reps", type=int, default=10)
    sp.add_argument("--warmup", type=int, default=3)
    engine_args(sp)
    sp.set_defaults(fn=cmd_run)

    sp = sub.add_parser("bench", help="dense vs sparse operator benchmark (CSV)")
    sp.add_argument("--op", default="conv1x1", choices=("conv1x1", "dw"))
    sp.add_argument("--shapes", help="comma list of HxWxICxOC[xSTRIDE] (default: MobileNet-v1 grid)")
    sp.add_argument("--sparsity", help="comma list of sparsities (default: 0,0.1,0.3,0.5)")
    sp.add_argument("--reps", type=int, default=10)
    sp.add_argument("--warmup", type=int, default=3)
    sp.add_argument("--out", help="CSV path (also printed to stdout)")
    engine_args(sp)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("inspect", help="describe a .sbnn model")
    sp.add_argument("model")
    sp.add_argument("--json", action="store_true", help="machine-readable dump")
    sp.set_defaults(fn=cmd_inspect)

    sp = sub.add_parser("mobilenet", help="write a MobileNet-v1 manifest with random weights")
    sp.add_argument("--out", required=True)
    sp.add_argument("--resolution", type=int, default=224)
    sp.add_argument("--width", type=float, default=1.0)
    sp.add_argument("--classes", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_mobilenet)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        args.fn(args)
    except CliError as e:
        print(f"sbnn {args.command}: {e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"sbnn {args.command}: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        # ManifestError, ConversionError, IRFormatError, PlanError and config errors
        print(f"sbnn {args.command}: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
