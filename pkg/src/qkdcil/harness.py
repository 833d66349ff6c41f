"""Command-line entry point: runs, ablations, sweeps, gate comparisons.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime
error.  Every subcommand that trains writes a JSON report plus a CSV
table into the output directory; writes are atomic.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

from . import __version__
from .checkpoint import inspect_checkpoint, save_checkpoint
from .config import (
    STREAM_KEYS,
    coerce_value,
    parse_inline_overrides,
    resolve_config,
    stream_spec_from,
    train_config_from,
)
from .datagen import (
    LabeledSample,
    LabeledSet,
    gen_stream,
    load_feature_file,
    samples_to_stream,
    write_feature_file,
)
from .errors import ConfigError, DataError, QkdError
from .report import ExperimentReport, csv_text, json_text, write_text_atomic
from .trainer import GATE_INPUTS, GATE_KINDS, IncrementalModel, run_protocol_full

ABLATION_TOGGLES = ("qgtm", "qkd_loss", "sparsity")
SWEEP_AXES = {
    "qubits": "q",
    "svd_dim": "r_svd",
    "lambda_kd": "lambda_kd",
    "lambda_s": "lambda_s",
}
GATE_ORDER = ("quantum", "cosine", "mlp", "random")


def trainable_parameter_count(model: IncrementalModel) -> int:
    """Number of scalars that received gradient updates during training.

    Adapters and heads count for every task; the gate contributes its
    angle projection plus variational angles (quantum) or its scorer
    weights (mlp).  Cosine and random gates train nothing.
    """
    count = 0
    for stack in model.adapter_pool:
        for block in stack.blocks:
            count += block.w_down.size + block.w_up.size
    for head in model.heads:
        count += head.weight.size + head.bias.size
    kind = model.config.gate_kind
    if kind == "quantum":
        count += model.gate.projection.size + model.gate.circuit.layer_angles.size
    elif kind == "mlp" and model.mlp_gate is not None:
        g = model.mlp_gate
        count += g.w1.size + g.b1.size + g.w2.size + g.b2.size
    return count


def build_stream(resolved: dict, features_dir) -> list[tuple[LabeledSet, LabeledSet]]:
    """Synthesize a stream from the config, or load one from feature files."""
    if features_dir is None:
        return gen_stream(stream_spec_from(resolved))
    train_path = os.path.join(features_dir, "train.qkdfeat")
    test_path = os.path.join(features_dir, "test.qkdfeat")
    try:
        train = load_feature_file(train_path)
        test = load_feature_file(test_path)
    except OSError as exc:
        raise DataError(f"cannot read feature files under {features_dir}: {exc}") from None
    return samples_to_stream(train, test)


def run_experiment(
    resolved: dict,
    stream: list[tuple[LabeledSet, LabeledSet]],
    label: str = "run",
) -> tuple[ExperimentReport, IncrementalModel]:
    config = train_config_from(resolved)
    start = time.perf_counter()
    metrics, model, records = run_protocol_full(stream, config)
    wall = time.perf_counter() - start
    report = ExperimentReport(
        config=dict(resolved),
        metrics=metrics,
        stages=records,
        wall_seconds=wall,
        seed=config.seed,
        version=__version__,
        label=label,
    )
    return report, model


def _overrides_from_args(args: argparse.Namespace) -> dict:
    flag_to_key = {
        "seed": "seed",
        "gate": "gate_kind",
        "qubits": "q",
        "layers": "l_q",
        "tau": "tau",
        "lambda_kd": "lambda_kd",
        "lambda_s": "lambda_s",
        "svd_dim": "r_svd",
        "gate_input": "gate_input",
        "distill_space": "distill_space",
    }
    overrides: dict = {}
    for flag, key in flag_to_key.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "stream", None):
        overrides.update(parse_inline_overrides(args.stream, allowed=STREAM_KEYS))
    return overrides


def _resolve_from_args(args: argparse.Namespace) -> dict:
    return resolve_config(getattr(args, "config", None), _overrides_from_args(args))


def _out_dir(args: argparse.Namespace) -> str:
    out = getattr(args, "out", None) or "qkd-out"
    os.makedirs(out, exist_ok=True)
    return out


def _print_summary(report: ExperimentReport) -> None:
    accs = " ".join(format(a, ".4f") for a in report.metrics.per_stage_accuracy)
    print(
        f"{report.label}: average={report.metrics.average:.4f} "
        f"final={report.metrics.final:.4f} stages=[{accs}] "
        f"wall={report.wall_seconds:.2f}s"
    )


def cmd_run(args: argparse.Namespace) -> int:
    resolved = _resolve_from_args(args)
    stream = build_stream(resolved, args.features)
    report, model = run_experiment(resolved, stream)
    out = _out_dir(args)
    write_text_atomic(os.path.join(out, "report.json"), report.to_json())
    write_text_atomic(os.path.join(out, "report.csv"), report.to_csv())
    save_checkpoint(model, os.path.join(out, "model.ckpt"))
    _print_summary(report)
    return 0


def ablation_rows(resolved: dict, toggles: tuple[str, ...]) -> list[tuple[str, dict]]:
    """Cumulative ablation ladder: everything off, then one toggle at a time.

    The all-off row routes through a uniformly random adapter choice and
    trains with both auxiliary losses at zero; each subsequent row restores
    one configured component on top of the previous row.
    """
    for toggle in toggles:
        if toggle not in ABLATION_TOGGLES:
            raise ConfigError(
                f"unknown toggle {toggle!r}; valid toggles: {', '.join(ABLATION_TOGGLES)}"
            )
    current = {"gate_kind": "random", "lambda_kd": 0.0, "lambda_s": 0.0}
    rows = [("none", dict(current))]
    labels = {"qgtm": "+gate", "qkd_loss": "+distill", "sparsity": "+sparsity"}
    for toggle in ABLATION_TOGGLES:
        if toggle not in toggles:
            continue
        if toggle == "qgtm":
            current["gate_kind"] = resolved["gate_kind"]
        elif toggle == "qkd_loss":
            current["lambda_kd"] = resolved["lambda_kd"]
        else:
            current["lambda_s"] = resolved["lambda_s"]
        rows.append((labels[toggle], dict(current)))
    return rows


def cmd_ablate(args: argparse.Namespace) -> int:
    resolved = _resolve_from_args(args)
    toggles = tuple(t.strip() for t in args.toggles.split(",") if t.strip())
    rows = ablation_rows(resolved, toggles)
    stream = build_stream(resolved, args.features)

    reports = []
    for label, overrides in rows:
        row_config = dict(resolved)
        row_config.update(overrides)
        report, _ = run_experiment(row_config, stream, label=label)
        reports.append(report)
        _print_summary(report)

    out = _out_dir(args)
    write_text_atomic(
        os.path.join(out, "ablation.json"),
        json_text([r.to_dict() for r in reports]),
    )
    num_stages = len(reports[0].metrics.per_stage_accuracy)
    names = ["label", "gate_kind", "lambda_kd", "lambda_s"]
    names += [f"stage_{i}" for i in range(1, num_stages + 1)]
    names += ["average", "final", "wall_seconds"]
    table = []
    for report in reports:
        row = report.summary_row()
        row["gate_kind"] = report.config["gate_kind"]
        row["lambda_kd"] = report.config["lambda_kd"]
        row["lambda_s"] = report.config["lambda_s"]
        table.append(row)
    write_text_atomic(os.path.join(out, "ablation.csv"), csv_text(names, table))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    resolved = _resolve_from_args(args)
    key = SWEEP_AXES[args.axis]
    raw_values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not raw_values:
        raise ConfigError("sweep needs at least one value")
    stream = build_stream(resolved, args.features)

    documents = []
    table = []
    for raw in raw_values:
        label = f"{args.axis}={raw}"
        try:
            value = coerce_value(key, raw)
            row_config = dict(resolved)
            row_config[key] = value
            report, _ = run_experiment(row_config, stream, label=label)
        except (QkdError, ValueError) as exc:
            # A bad grid point should not kill the rest of the sweep.
            print(f"{label}: error: {exc}", file=sys.stderr)
            documents.append({"label": label, "error": str(exc)})
            table.append({"label": label, "value": raw, "error": str(exc)})
            continue
        documents.append(report.to_dict())
        row = report.summary_row()
        row["value"] = raw
        row["error"] = ""
        table.append(row)
        _print_summary(report)

    out = _out_dir(args)
    write_text_atomic(os.path.join(out, "sweep.json"), json_text(documents))
    num_stages = len(stream)
    names = ["label", "value"]
    names += [f"stage_{i}" for i in range(1, num_stages + 1)]
    names += ["average", "final", "wall_seconds", "error"]
    write_text_atomic(os.path.join(out, "sweep.csv"), csv_text(names, table))
    return 0


def cmd_compare_gates(args: argparse.Namespace) -> int:
    resolved = _resolve_from_args(args)
    stream = build_stream(resolved, args.features)

    reports = []
    table = []
    for kind in GATE_ORDER:
        row_config = dict(resolved)
        row_config["gate_kind"] = kind
        report, model = run_experiment(row_config, stream, label=kind)
        reports.append(report)
        row = report.summary_row()
        row["parameters"] = trainable_parameter_count(model)
        table.append(row)
        _print_summary(report)

    out = _out_dir(args)
    write_text_atomic(
        os.path.join(out, "gates.json"),
        json_text([r.to_dict() for r in reports]),
    )
    num_stages = len(stream)
    names = ["label", "parameters"]
    names += [f"stage_{i}" for i in range(1, num_stages + 1)]
    names += ["average", "final", "wall_seconds"]
    write_text_atomic(os.path.join(out, "gates.csv"), csv_text(names, table))
    return 0


def cmd_gen_data(args: argparse.Namespace) -> int:
    resolved = _resolve_from_args(args)
    stream = gen_stream(stream_spec_from(resolved))
    train: list[LabeledSample] = []
    test: list[LabeledSample] = []
    for train_set, test_set in stream:
        for dest, split in ((train, train_set), (test, test_set)):
            for i in range(len(split)):
                dest.append(
                    LabeledSample(split.features[i], int(split.labels[i]), split.task_id)
                )
    out = _out_dir(args)
    for name, samples in (("train.qkdfeat", train), ("test.qkdfeat", test)):
        path = os.path.join(out, name)
        tmp = path + ".tmp"
        write_feature_file(tmp, samples)
        os.replace(tmp, path)
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")
    return 0


def cmd_inspect_checkpoint(args: argparse.Namespace) -> int:
    try:
        info = inspect_checkpoint(args.path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {args.path}: {exc}") from None
    sys.stdout.write(json_text(info))
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat key = value config file")
    common.add_argument("--out", metavar="DIR", help="output directory (default qkd-out)")
    common.add_argument("--seed", type=int)
    common.add_argument("--gate", choices=GATE_KINDS)
    common.add_argument("--qubits", type=int)
    common.add_argument("--layers", type=int)
    common.add_argument("--tau", type=float)
    common.add_argument("--lambda-kd", type=float, dest="lambda_kd")
    common.add_argument("--lambda-s", type=float, dest="lambda_s")
    common.add_argument("--svd-dim", type=int, dest="svd_dim")
    common.add_argument("--gate-input", choices=GATE_INPUTS, dest="gate_input")
    common.add_argument("--distill-space", choices=("logit_kl", "feature_mse"), dest="distill_space")
    source = common.add_mutually_exclusive_group()
    source.add_argument("--stream", metavar="K=V[,K=V]", help="synthetic stream overrides")
    source.add_argument("--features", metavar="DIR", help="directory with train/test .qkdfeat files")

    parser = argparse.ArgumentParser(prog="qkdcil", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", parents=[common], help="one incremental run")
    p_run.set_defaults(func=cmd_run)

    p_ablate = sub.add_parser("ablate", parents=[common], help="cumulative component ablation")
    p_ablate.add_argument(
        "--toggles",
        default=",".join(ABLATION_TOGGLES),
        help=f"comma list from {{{', '.join(ABLATION_TOGGLES)}}}",
    )
    p_ablate.set_defaults(func=cmd_ablate)

    p_sweep = sub.add_parser("sweep", parents=[common], help="one run per grid value")
    p_sweep.add_argument("--axis", choices=tuple(SWEEP_AXES), required=True)
    p_sweep.add_argument("--values", required=True, help="comma-separated grid")
    p_sweep.set_defaults(func=cmd_sweep)

    p_gates = sub.add_parser(
        "compare-gates", parents=[common], help="quantum vs cosine vs mlp vs random"
    )
    p_gates.set_defaults(func=cmd_compare_gates)

    p_gen = sub.add_parser("gen-data", parents=[common], help="write synthetic feature files")
    p_gen.set_defaults(func=cmd_gen_data)

    p_inspect = sub.add_parser("inspect-checkpoint", help="print checkpoint summary")
    p_inspect.add_argument("path")
    p_inspect.set_defaults(func=cmd_inspect_checkpoint)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return int(code) if code is not None else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (QkdError, ValueError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
