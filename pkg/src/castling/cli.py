"""Command-line entry point: ``castling <subcommand> --config c.json --out dir``.

Exit codes: 0 success, 2 validation or usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .tensor import ConfigError

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERICAL = 3
SCHEMA_VERSION = 1

log = logging.getLogger("castling")


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    version = doc.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    return doc


def _take(doc: dict, allowed: dict) -> dict:
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    return {k: doc.get(k, v) for k, v in allowed.items()}


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, default=str) + "\n")


def _train_config(doc: dict, seed):
    from .train import TrainConfig

    cfg = TrainConfig.from_dict(doc)
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg.validate()


# ----------------------------------------------------------- subcommands


def cmd_bench_scaling(doc, args, out: Path) -> int:
    from .bench import scaling_benchmark, write_scaling_csv

    p = _take(doc, {"variants": ["exact_softmax", "linear_angular"],
                    "ns": [256, 512, 1024, 2048, 4096, 8192], "d": 32, "reps": 7, "seed": 0})
    seed = args.seed if args.seed is not None else p["seed"]
    runs = scaling_benchmark(p["variants"], p["ns"], p["d"], p["reps"], seed=seed, threads=1)
    write_scaling_csv(runs, out / "scaling.csv")
    for r in runs:
        print(f"{r.variant}: slope {r.slope:.3f} (R^2 {r.r2:.3f})")
    return EXIT_OK


def cmd_flops(doc, args, out: Path) -> int:
    from .attention import AttentionConfig, KernelKind
    from .flops import flop_count
    from .train import write_rows_csv

    p = _take(doc, {"n": 8, "n_k": None, "d": 2, "d_v": None, "kernels": ["exact_softmax", "linear_angular"],
                    "use_dwconv": False, "dw_kernel_size": 3, "use_aux": False, "grid": None,
                    "castled": True})
    rows = []
    for kind in p["kernels"]:
        cfg = AttentionConfig(
            n_q=p["n"], n_k=p["n_k"] or p["n"], d=p["d"], d_v=p["d_v"] or p["d"],
            kernel=KernelKind(kind), mode="faithful", use_dwconv=p["use_dwconv"],
            dw_kernel_size=p["dw_kernel_size"], use_aux=p["use_aux"],
            grid=tuple(p["grid"]) if p["grid"] else None,
        ).validate()
        row = {"n_q": cfg.n_q, "n_k": cfg.n_k, "d": cfg.d, "d_v": cfg.d_v}
        row.update(flop_count(cfg, castled=p["castled"]).as_row())
        rows.append(row)
    write_rows_csv(rows, out / "flops.csv")
    for r in rows:
        print(f"{r['kernel']}: core {r['core_macs']} total {r['total_macs']}")
    return EXIT_OK


def cmd_grad_check(doc, args, out: Path) -> int:
    from .bench import grad_check_suite

    p = _take(doc, {"seeds": 50, "base_seed": 0})
    base = args.seed if args.seed is not None else p["base_seed"]
    report = grad_check_suite(p["seeds"], base_seed=base)
    lines = report.lines()
    (out / "grad_check.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    if not report.passed:
        print(f"gradient check failed for: {', '.join(report.failures)}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_train(doc, args, out: Path) -> int:
    from .train import save_checkpoint, train, write_metrics_csv

    cfg = _train_config(doc, args.seed)
    result = train(cfg)
    write_metrics_csv(result, out / "metrics.csv")
    ckpt = out / "checkpoint"
    save_checkpoint(result.model, ckpt, cfg)
    summary = {"schema_version": SCHEMA_VERSION, "checkpoint": str(ckpt.resolve()),
               "epsilon": cfg.epsilon.epsilon_max, "val_acc": result.val_accuracy,
               "dataset_hash": result.dataset.digest(), "steps": len(result.metrics)}
    if len(result.trace):
        lo, hi = result.epoch_steps(cfg.epochs - 1)
        summary["initial_mask_fraction"] = result.trace.fraction_at(0)
        summary["final_mask_fraction"] = result.trace.fractions_between(lo, hi)
    _write_json(out / "trained.json", summary)
    print(f"val_acc {result.val_accuracy:.4f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_ablate(doc, args, out: Path) -> int:
    from .train import ABLATION_COLUMNS, run_ablation_grid, write_rows_csv

    doc = dict(doc)
    cells = doc.pop("cells", None)
    cfg = _train_config(doc, args.seed)
    rows = run_ablation_grid(cfg, cells)
    write_rows_csv(rows, out / "ablation.csv", ABLATION_COLUMNS)
    for r in rows:
        print(f"{r['cell']}: val_acc {r['val_acc']:.4f} macs {r['macs_inference']}")
    return EXIT_OK


def cmd_fprinciple(doc, args, out: Path) -> int:
    from .fprinciple import (
        NetConfig, convergence_steps, fit_residual, low_before_high, write_loss_csv, write_spectrum_csv,
    )

    doc = dict(doc)
    threshold = doc.pop("threshold", 0.1)
    cfg = NetConfig(**_take(doc, NetConfig().__dict__))
    if args.seed is not None:
        cfg.seed = args.seed
    result = fit_residual(cfg)
    write_loss_csv(result, out / "loss.csv")
    write_spectrum_csv(result, out / "spectrum.csv")
    steps = convergence_steps(result.trajectory, threshold)
    summary = {"schema_version": SCHEMA_VERSION, "seed": cfg.seed, "final_loss": result.final_loss,
               "threshold": threshold, "convergence_steps": steps,
               "low_before_high": low_before_high(result.trajectory, threshold)}
    _write_json(out / "fprinciple.json", summary)
    print(f"final loss {result.final_loss:.3e}; low before high: {summary['low_before_high']}")
    return EXIT_OK


def cmd_castle(doc, args, out: Path) -> int:
    from .data import generate_dataset
    from .train import TrainConfig, castle, load_checkpoint, zero_mask_indices

    p = _take(doc, {"checkpoint": None, "epsilon": 0.02, "split": "val", "zero_mask_only": True,
                    "max_images": 64, "val_acc": None, "dataset_hash": None, "steps": None,
                    "initial_mask_fraction": None, "final_mask_fraction": None})
    if not p["checkpoint"]:
        raise ConfigError("castle needs a 'checkpoint' directory (the trained.json written by train)")
    ckpt = Path(p["checkpoint"])
    model = load_checkpoint(ckpt)
    manifest = json.loads((ckpt / "manifest.json").read_text())
    tc = TrainConfig.from_dict(manifest["train_config"]) if manifest.get("train_config") else TrainConfig()
    if args.seed is not None:
        tc = tc.replace(seed=args.seed)
    data = generate_dataset(tc.num_samples, tc.num_classes, tc.image_size, tc.seed)
    images, _ = data.split(p["split"])
    if p["zero_mask_only"]:
        idx = zero_mask_indices(model, images, p["epsilon"])
        images = images[idx]
    images = images[: p["max_images"]]
    if len(images) == 0:
        raise ConfigError("no calibration images with an all-zero surviving mask")
    _, report = castle(model, images, p["epsilon"])
    payload = {"schema_version": SCHEMA_VERSION, "calibration_images": int(len(images)),
               "nonzeros": report.nonzeros, "residual_mass": report.residual_mass,
               "max_output_delta": report.max_output_delta,
               "bitwise_identical": bool(report.bitwise_identical)}
    _write_json(out / "castle.json", payload)
    msg = f"bitwise identical: {report.bitwise_identical} ({len(images)} images, {report.nonzeros} surviving entries)"
    log.info(msg)
    print(msg)
    return EXIT_OK if report.bitwise_identical or report.nonzeros else EXIT_NUMERICAL


def cmd_kernel_compare(doc, args, out: Path) -> int:
    from .bench import KERNEL_COLUMNS, kernel_compare
    from .train import write_rows_csv

    doc = dict(doc)
    kernels = doc.pop("kernels", ["exact_softmax", "linear_angular"])
    cfg = _train_config(doc, args.seed)
    rows = kernel_compare(cfg, kernels)
    write_rows_csv(rows, out / "kernels.csv", KERNEL_COLUMNS)
    for r in rows:
        print(f"{r['kernel']}: val_acc {r['val_acc']:.4f} macs {r['macs']}")
    return EXIT_OK


COMMANDS = {
    "bench-scaling": (cmd_bench_scaling, "wall-clock scaling of attention variants"),
    "flops": (cmd_flops, "analytic MAC counts"),
    "grad-check": (cmd_grad_check, "finite-difference gradient suite"),
    "train": (cmd_train, "train the toy classifier"),
    "ablate": (cmd_ablate, "ablation grid on a shared seed"),
    "fprinciple": (cmd_fprinciple, "frequency-resolved curve fitting"),
    "castle": (cmd_castle, "drop the auxiliary branch and compare logits"),
    "kernel-compare": (cmd_kernel_compare, "train one model per attention kernel"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="castling", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON config path")
        sp.add_argument("--out", help="output directory (default: $CASTLING_OUT or .)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--threads", type=int, default=1, help="BLAS threads for untimed work")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:   # argparse exits 2 on usage errors and 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out or os.environ.get("CASTLING_OUT") or ".")
    from .train import NumericalError
    from .fprinciple import DivergenceError

    try:
        out.mkdir(parents=True, exist_ok=True)
        doc = _load_config(args.config)
        fn = COMMANDS[args.command][0]
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        if args.command == "bench-scaling":
            return fn(doc, args, out)
        with threadpool_limits(limits=args.threads):
            return fn(doc, args, out)
    except (NumericalError, DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, TypeError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
