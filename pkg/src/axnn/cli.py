"""Command-line entry point.

Subcommands: characterize, eval, sweep, explore, plot, fixture, predict.
Exit codes are a stable contract: 0 success, 2 argument/grammar error,
3 input mismatch, 4 capacity exceeded.

Every run writes a manifest (resolved parameters, input digests, seed,
version, wall clock) next to its primary output; primary outputs are
byte-deterministic for a fixed manifest.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import dse as dse_mod
from . import multipliers as mx
from . import plots
from .dse import CapacityError, Evaluator, SpaceError, pareto_filter
from .engine import ShapeError
from .inference import compile_plan, run_model
from .modelio import (Dataset, ModelFormatError, generate_fixture, load_dataset,
                      load_model, save_dataset, save_model)
from .planning import PlanError, identity_plan, parse_plan, format_plan

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISMATCH = 3
EXIT_CAPACITY = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _digest_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def write_manifest(primary_out: Path, subcommand: str, params: dict,
                   inputs: list[str], seed: int | None, started: float) -> None:
    manifest = {
        "subcommand": subcommand,
        "parameters": params,
        "input_digests": {str(p): _digest_file(p) for p in inputs},
        "seed": seed,
        "tool_version": __version__,
        "wall_clock_s": round(time.time() - started, 3),
    }
    path = primary_out.with_name(primary_out.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _fmt(v: float) -> str:
    return f"{v:.10g}"


def _load_energy_table(path: str | None):
    return mx.load_energy_table(path) if path else None


def _make_evaluator(args) -> Evaluator:
    if args.limit is not None and args.limit < 1:
        raise CliError("--limit must be at least 1", EXIT_USAGE)
    try:
        model = load_model(args.model)
        data = load_dataset(args.data)
    except ModelFormatError as e:
        raise CliError(str(e), EXIT_MISMATCH)
    if data.images.shape[1:] != model.input_shape:
        raise CliError(
            f"dataset images {data.images.shape[1:]} do not match model input "
            f"{model.input_shape}", EXIT_MISMATCH)
    energy_table = _load_energy_table(getattr(args, "energy_table", None))
    try:
        return Evaluator(model, data, limit=args.limit,
                         tune=getattr(args, "tune", False),
                         energy_table=energy_table)
    except SpaceError as e:
        raise CliError(str(e), EXIT_USAGE)


RECORD_COLUMNS = ["plan_id", "approach", "flavor", "accuracy", "accuracy_loss",
                  "energy", "energy_gain", "dominated"]


def _record_row(rec, dominated: bool) -> list[str]:
    return [
        rec.plan_id,
        rec.plan.approach,
        rec.plan.flavor or "",
        _fmt(rec.accuracy),
        _fmt(rec.accuracy_loss),
        _fmt(rec.total_energy),
        _fmt(rec.energy_gain),
        "yes" if dominated else "no",
    ]


def _write_records_csv(path: Path, records, front_ids: set[str]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RECORD_COLUMNS)
        for rec in records:
            writer.writerow(_record_row(rec, rec.plan_id not in front_ids))


# --- subcommands ---


def cmd_characterize(args) -> int:
    started = time.time()
    energy_table = _load_energy_table(args.energy_table)
    specs = []
    for mult_id in args.mult:
        try:
            specs.append(mx.resolve_multiplier_id(mult_id))
        except mx.MultiplierError as e:
            raise CliError(str(e), EXIT_USAGE)
    out = Path(args.out)
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "mred", "mae", "max_abs_err", "error_rate", "energy"])
        for spec in specs:
            try:
                table = mx.build_table(spec, energy_table)
            except mx.MultiplierError as e:
                raise CliError(str(e), EXIT_MISMATCH)
            prof = mx.characterize(table)
            writer.writerow([spec.id, _fmt(prof.mred), _fmt(prof.mae),
                             str(prof.max_abs_err), _fmt(prof.error_rate),
                             _fmt(table.energy)])
    inputs = [args.energy_table] if args.energy_table else []
    write_manifest(out, "characterize",
                   {"mult": args.mult, "energy_table": args.energy_table,
                    "out": str(out)}, inputs, None, started)
    return EXIT_OK


def cmd_eval(args) -> int:
    started = time.time()
    evaluator = _make_evaluator(args)
    try:
        plan = parse_plan(args.plan)
        record = evaluator.evaluate(plan)
    except (PlanError, mx.MultiplierError) as e:
        raise CliError(str(e), EXIT_MISMATCH)
    out = Path(args.report)
    _write_records_csv(out, [record], {record.plan_id})
    layers_out = out.with_name(out.stem + ".layers.csv")
    with layers_out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "energy"])
        for li, e in enumerate(record.per_layer_energy):
            writer.writerow([str(li), _fmt(e)])
    write_manifest(out, "eval",
                   {"model": args.model, "data": args.data, "plan": args.plan,
                    "limit": args.limit, "tune": args.tune,
                    "slice_size": len(evaluator.dataset.images),
                    "data_digest": evaluator.data_digest,
                    "report": str(out)},
                   [args.model, args.data, args.plan], None, started)
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.time()
    if args.mode not in ("single", "prefix"):
        raise CliError(f"unknown sweep mode {args.mode!r}", EXIT_USAGE)
    try:
        mult_id = mx.resolve_multiplier_id(args.mult).id
    except mx.MultiplierError as e:
        raise CliError(str(e), EXIT_USAGE)
    evaluator = _make_evaluator(args)
    if args.mode == "single":
        records = dse_mod.sweep_single_layer(evaluator, mult_id)
    else:
        records = dse_mod.sweep_prefix(evaluator, mult_id)
    out = Path(args.out)
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "accuracy", "accuracy_loss", "energy",
                         "energy_gain"])
        for m, rec in enumerate(records):
            writer.writerow([str(m), _fmt(rec.accuracy), _fmt(rec.accuracy_loss),
                             _fmt(rec.total_energy), _fmt(rec.energy_gain)])
    plots.sweep_curve([(m, rec.accuracy) for m, rec in enumerate(records)],
                      out.with_suffix(".svg"), args.mode, mult_id)
    write_manifest(out, "sweep",
                   {"mode": args.mode, "mult": mult_id, "model": args.model,
                    "data": args.data, "limit": args.limit, "tune": args.tune,
                    "slice_size": len(evaluator.dataset.images),
                    "data_digest": evaluator.data_digest, "out": str(out)},
                   [args.model, args.data], None, started)
    return EXIT_OK


def cmd_explore(args) -> int:
    started = time.time()
    if args.mode not in ("exhaustive", "nsga2"):
        raise CliError(f"unknown explore mode {args.mode!r}", EXIT_USAGE)
    if args.mode == "nsga2" and args.seed is None:
        raise CliError("nsga2 mode requires an explicit --seed", EXIT_USAGE)
    evaluator = _make_evaluator(args)
    try:
        space = dse_mod.load_space(args.space)
    except SpaceError as e:
        raise CliError(str(e), EXIT_USAGE)
    if space.n_layers != evaluator.n_layers:
        raise CliError(
            f"space covers {space.n_layers} layers but the model has "
            f"{evaluator.n_layers} multiplicative layers", EXIT_MISMATCH)
    try:
        if args.mode == "exhaustive":
            result = dse_mod.exhaustive_search(space, evaluator, cap=args.max_space)
        else:
            result = dse_mod.nsga2(space, evaluator, population=args.pop,
                                   generations=args.gens, seed=args.seed)
    except CapacityError as e:
        raise CliError(str(e), EXIT_CAPACITY)
    except SpaceError as e:
        raise CliError(str(e), EXIT_USAGE)

    archive = sorted(result.archive, key=lambda r: r.plan_id)
    eligible = [r for r in archive if r.accuracy >= args.min_accuracy]
    front = pareto_filter(eligible)
    front_ids = {r.plan_id for r in front}

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    archive_csv = out_dir / "archive.csv"
    _write_records_csv(archive_csv, archive, front_ids)
    _write_records_csv(out_dir / "front.csv", front, front_ids)
    plans_dir = out_dir / "plans"
    plans_dir.mkdir(exist_ok=True)
    for rec in front:
        format_plan(rec.plan, plans_dir / f"{rec.plan_id}.json")
    plots.scatter_accuracy_energy(
        [r.objectives for r in archive], [r.objectives for r in front],
        out_dir / "scatter.svg")
    write_manifest(archive_csv, "explore",
                   {"model": args.model, "data": args.data, "space": args.space,
                    "mode": args.mode, "pop": args.pop, "gens": args.gens,
                    "min_accuracy": args.min_accuracy, "limit": args.limit,
                    "tune": args.tune, "max_space": args.max_space,
                    "slice_size": len(evaluator.dataset.images),
                    "data_digest": evaluator.data_digest,
                    "evaluations": result.evaluations,
                    "out_dir": str(out_dir)},
                   [args.model, args.data, args.space], args.seed, started)
    return EXIT_OK


def cmd_plot(args) -> int:
    started = time.time()
    points, front = [], []
    try:
        with open(args.infile, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not (
                    {"accuracy_loss", "energy", "dominated"}
                    <= set(reader.fieldnames)):
                raise CliError(
                    f"{args.infile}: expected columns {RECORD_COLUMNS}", EXIT_USAGE)
            for row in reader:
                pt = (float(row["accuracy_loss"]), float(row["energy"]))
                points.append(pt)
                if row["dominated"] == "no":
                    front.append(pt)
    except (OSError, ValueError, KeyError) as e:
        raise CliError(f"{args.infile}: malformed CSV ({e})", EXIT_USAGE)
    out = Path(args.out)
    plots.scatter_accuracy_energy(points, front, out)
    write_manifest(out, "plot", {"in": args.infile, "out": str(out)},
                   [args.infile], None, started)
    return EXIT_OK


def cmd_fixture(args) -> int:
    started = time.time()
    try:
        model, data = generate_fixture(args.seed, args.preset)
    except ModelFormatError as e:
        raise CliError(str(e), EXIT_USAGE)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_path = out_dir / f"{args.preset}-model.json"
    data_path = out_dir / f"{args.preset}-data.npz"
    save_model(model, model_path)
    save_dataset(data, data_path)
    write_manifest(model_path, "fixture",
                   {"preset": args.preset, "out_dir": str(out_dir)},
                   [], args.seed, started)
    print(f"wrote {model_path} and {data_path}")
    return EXIT_OK


def cmd_predict(args) -> int:
    started = time.time()
    evaluator = _make_evaluator(args)
    model = evaluator.model
    compiled = compile_plan(model, identity_plan(evaluator.n_layers))
    logits, classes = run_model(model, evaluator.dataset.images, compiled)
    real = logits.scale * (logits.data.astype(np.float64) - logits.zero_point)
    out = Path(args.out)
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh)
        n_classes = real.shape[1]
        writer.writerow(["index", "predicted"] +
                        [f"logit_{c}" for c in range(n_classes)])
        for i in range(real.shape[0]):
            writer.writerow([str(i), str(int(classes[i]))]
                            + [_fmt(v) for v in real[i]])
    write_manifest(out, "predict",
                   {"model": args.model, "data": args.data,
                    "limit": args.limit, "out": str(out)},
                   [args.model, args.data], None, started)
    return EXIT_OK


# --- argument parsing ---


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="axnn", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("characterize", help="error/energy profile of multipliers")
    p.add_argument("--mult", action="append", required=True,
                   help=f"multiplier id ({mx.GRAMMAR}); repeatable")
    p.add_argument("--energy-table", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_characterize)

    def add_eval_args(p):
        p.add_argument("--model", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--limit", type=int, default=None,
                       help="evaluate only the first N samples")
        p.add_argument("--tune", action="store_true",
                       help="apply multiplier-aware weight tuning first")
        p.add_argument("--energy-table", default=None)

    p = sub.add_parser("eval", help="evaluate one plan")
    add_eval_args(p)
    p.add_argument("--plan", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="layer sensitivity sweeps")
    add_eval_args(p)
    p.add_argument("--mode", required=True, choices=["single", "prefix"])
    p.add_argument("--mult", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("explore", help="design space exploration")
    add_eval_args(p)
    p.add_argument("--space", required=True)
    p.add_argument("--mode", required=True, choices=["exhaustive", "nsga2"])
    p.add_argument("--pop", type=int, default=32)
    p.add_argument("--gens", type=int, default=50)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--min-accuracy", type=float, default=0.0)
    p.add_argument("--max-space", type=int, default=dse_mod.DEFAULT_SPACE_CAP)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_explore)

    p = sub.add_parser("plot", help="scatter plot from an archive CSV")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("fixture", help="generate a synthetic model + dataset")
    p.add_argument("--preset", required=True, choices=["tiny", "resnet8"])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("predict", help="identity-plan logits for a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"axnn {args.command}: {e}", file=sys.stderr)
        return e.code
    except (mx.MultiplierError, PlanError, SpaceError) as e:
        print(f"axnn {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelFormatError, ShapeError) as e:
        print(f"axnn {args.command}: {e}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
