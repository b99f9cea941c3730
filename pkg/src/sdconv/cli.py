"""Command-line entry point: generate / compare / analyze / gradcheck / bench.

One strict-parsed JSON config drives every subcommand; individual keys can
be overridden with repeated ``--set section.key=value`` flags. All CSV
output is comma-separated with a header row, LF line endings, and ``.``
decimals; timing lives in dedicated columns so determinism checks can drop
them mechanically.
"""
from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from sdconv.aggregation import mean_trajectory
from sdconv.autodiff import check_gradients
from sdconv.bench import bench_variants, ordering_stable
from sdconv.conv import ConvSpec
from sdconv.errors import ConfigError, IoError, ParameterError
from sdconv.gridding import (
    LayerEntry,
    LayerStack,
    export_dependency_art,
    gridding_score,
    trace_dependencies,
)
from sdconv.segmentation import (
    MODES,
    SupervisedLoss,
    TrainConfig,
    build_model,
    compare_modes,
    comparison_header,
    generate_dataset,
    save_dataset,
)
from sdconv.tensor import Rng, Tensor

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_IO = 2
EXIT_CELL = 3
EXIT_GRADCHECK = 4

_NUM = (int, float)

SCHEMA = {
    "output_dir": str,
    "dataset": {
        "n_train": int,
        "n_val": int,
        "height": int,
        "width": int,
        "classes": int,
        "noise_level": _NUM,
        "seed": int,
    },
    "model": {
        "in_channels": int,
        "hidden_channels": int,
        "dilation_rates": list,
        "kernel_size": int,
        "sigma": _NUM,
    },
    "training": {
        "learning_rate": _NUM,
        "momentum": _NUM,
        "steps": int,
        "batch_size": int,
        "seed": int,
        "crop_size": int,
        "log_interval": int,
    },
    "experiment": {
        "modes": list,
        "seeds": list,
        "noise_level": _NUM,
    },
    "analysis": {
        "stack": list,
        "height": int,
        "width": int,
        "write_art": bool,
    },
    "bench": {
        "variants": list,
        "reps": int,
        "measured_steps": int,
        "warmup_steps": int,
    },
    "gradcheck": {
        "modes": list,
        "tolerance": _NUM,
        "height": int,
        "width": int,
        "batch_size": int,
        "seed": int,
        "hidden_channels": int,
        "classes": int,
    },
}

_STACK_ITEM_KEYS = {"kernel_size": int, "dilation": int, "smoothing": str, "size": int}

DEFAULT_CONFIG = {
    "output_dir": "runs/out",
    "dataset": {
        "n_train": 24,
        "n_val": 12,
        "height": 64,
        "width": 64,
        "classes": 4,
        "noise_level": 0.5,
        "seed": 1,
    },
    "model": {
        "in_channels": 1,
        "hidden_channels": 8,
        "dilation_rates": [3, 3, 5],
        "kernel_size": 3,
        "sigma": 1.0,
    },
    "training": {
        "learning_rate": 0.01,
        "momentum": 0.9,
        "steps": 2000,
        "batch_size": 4,
        "seed": 1,
        "crop_size": 64,
        "log_interval": 50,
    },
    "experiment": {
        "modes": ["none", "average", "gaussian", "learned"],
        "seeds": [1, 2, 3, 4, 5],
        "noise_level": 0.5,
    },
    "analysis": {
        "stack": [
            {"kernel_size": 3, "dilation": 2, "smoothing": "none", "size": 1},
            {"kernel_size": 3, "dilation": 2, "smoothing": "none", "size": 1},
        ],
        "height": 21,
        "width": 21,
        "write_art": True,
    },
    "bench": {
        "variants": ["none", "average", "gaussian", "learned"],
        "reps": 3,
        "measured_steps": 30,
        "warmup_steps": 5,
    },
    "gradcheck": {
        "modes": ["none", "average", "gaussian", "learned", "aggregated"],
        "tolerance": 1e-4,
        "height": 10,
        "width": 10,
        "batch_size": 1,
        "seed": 3,
        "hidden_channels": 4,
        "classes": 3,
    },
}


# ---------------------------------------------------------------------------
# Config loading and strict validation
# ---------------------------------------------------------------------------


def _validate(section, schema, path: str) -> None:
    for key, value in section.items():
        dotted = f"{path}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key: {dotted}")
        expected = schema[key]
        if isinstance(expected, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted} must be a section object")
            _validate(value, expected, dotted + ".")
        else:
            if expected is _NUM:
                ok = isinstance(value, _NUM) and not isinstance(value, bool)
            elif expected is int:
                ok = isinstance(value, int) and not isinstance(value, bool)
            elif expected is bool:
                ok = isinstance(value, bool)
            else:
                ok = isinstance(value, expected)
            if not ok:
                raise ConfigError(
                    f"config key {dotted} has wrong type "
                    f"{type(value).__name__}"
                )


def _validate_stack_items(stack: list) -> None:
    for i, item in enumerate(stack):
        if not isinstance(item, dict):
            raise ConfigError(f"config key analysis.stack[{i}] must be an object")
        for key, value in item.items():
            if key not in _STACK_ITEM_KEYS:
                raise ConfigError(f"unknown config key: analysis.stack[{i}].{key}")
            if not isinstance(value, _STACK_ITEM_KEYS[key]) or isinstance(value, bool):
                raise ConfigError(
                    f"config key analysis.stack[{i}].{key} has wrong type"
                )


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _apply_override(config: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key.path=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node = config
    for key in keys[:-1]:
        nxt = node.get(key)
        if not isinstance(nxt, dict):
            node[key] = {}
            nxt = node[key]
        node = nxt
    node[keys[-1]] = value


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Defaults, then the config file, then --set overrides; strict-parsed."""
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise IoError(f"config file not found: {p}")
        try:
            loaded = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must contain a JSON object")
        config = _merge(config, loaded)
    for assignment in overrides:
        _apply_override(config, assignment)
    _validate(config, SCHEMA, "")
    _validate_stack_items(config["analysis"]["stack"])
    return config


def _resolve_output_dir(config: dict) -> Path:
    out = Path(config["output_dir"]).resolve()
    if not out.parent.exists():
        raise IoError(f"output directory parent does not exist: {out.parent}")
    out.mkdir(exist_ok=True)
    return out


def _train_config(config: dict, seed: int | None = None) -> TrainConfig:
    t = config["training"]
    return TrainConfig(
        learning_rate=float(t["learning_rate"]),
        momentum=float(t["momentum"]),
        steps=int(t["steps"]),
        batch_size=int(t["batch_size"]),
        seed=int(t["seed"] if seed is None else seed),
        crop_size=int(t["crop_size"]),
        log_interval=int(t["log_interval"]),
    )


def _model_kwargs(config: dict) -> dict:
    m = config["model"]
    return {
        "in_channels": int(m["in_channels"]),
        "hidden_channels": int(m["hidden_channels"]),
        "dilations": tuple(int(r) for r in m["dilation_rates"]),
        "kernel_size": int(m["kernel_size"]),
        "sigma": float(m["sigma"]),
    }


def _fmt(x) -> str:
    """Deterministic CSV cell: shortest round-trip repr for floats."""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path: Path, header: str, rows: list[list]) -> None:
    lines = [header]
    lines += [",".join(_fmt(cell) for cell in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(config: dict) -> int:
    """Write train/val dataset blobs plus metadata; print a class histogram."""
    out = _resolve_output_dir(config)
    ds = config["dataset"]
    extent = (int(ds["height"]), int(ds["width"]))
    classes = int(ds["classes"])
    noise = float(ds["noise_level"])
    rng = Rng(int(ds["seed"])).child("data")
    train = generate_dataset(int(ds["n_train"]), extent, classes, noise, rng.child("train"))
    val = generate_dataset(int(ds["n_val"]), extent, classes, noise, rng.child("val"))
    save_dataset(train, out / "train")
    save_dataset(val, out / "val")
    histogram = np.zeros(classes, dtype=np.int64)
    for s in train + val:
        ids, counts = np.unique(s.labels, return_counts=True)
        histogram[ids] += counts
    print(f"wrote {len(train)} train and {len(val)} val samples to {out}")
    print("class histogram (pixels):")
    for cls in range(classes):
        print(f"  class {cls}: {int(histogram[cls])}")
    return EXIT_OK


def cmd_compare(config: dict) -> int:
    """Train every (mode, seed) cell; write row, summary, and trajectory CSVs."""
    out = _resolve_output_dir(config)
    exp = config["experiment"]
    ds = config["dataset"]
    modes = [str(m) for m in exp["modes"]]
    for mode in modes:
        if mode not in MODES:
            raise ConfigError(f"unknown mode in experiment.modes: {mode!r}")
    seeds = [int(s) for s in exp["seeds"]]
    classes = int(ds["classes"])
    table = compare_modes(
        modes,
        _train_config(config),
        seeds,
        noise_level=float(exp["noise_level"]),
        n_train=int(ds["n_train"]),
        n_val=int(ds["n_val"]),
        extent=(int(ds["height"]), int(ds["width"])),
        classes=classes,
        model_kwargs=_model_kwargs(config),
    )
    rows = []
    for r in table.rows:
        rows.append(
            [r.mode, r.seed, float(r.miou)]
            + [float(v) for v in r.per_class_iou]
            + [float(r.sec_per_step)]
        )
    _write_csv(out / "comparison.csv", comparison_header(classes), rows)
    summary_rows = [
        [s.mode, s.runs, float(s.mean_miou), float(s.std_miou), float(s.mean_sec_per_step)]
        for s in table.summaries()
    ]
    _write_csv(
        out / "summary.csv",
        "mode,runs,mean_miou,std_miou,mean_sec_per_step",
        summary_rows,
    )
    print(f"{'mode':<12}{'runs':>5}{'mean mIoU':>12}{'std':>9}{'s/step':>9}")
    for s in table.summaries():
        print(
            f"{s.mode:<12}{s.runs:>5}{s.mean_miou:>12.4f}"
            f"{s.std_miou:>9.4f}{s.mean_sec_per_step:>9.4f}"
        )
    for (mode, seed), trajs in table.trajectories.items():
        for i, traj in enumerate(trajs):
            (out / f"alpha_trajectory_seed{seed}_layer{i}.csv").write_text(traj.to_csv())
        mean = mean_trajectory(trajs)
        (out / f"alpha_trajectory_seed{seed}_mean.csv").write_text(mean.to_csv())
        first = mean.samples[0][1]
        last = mean.samples[-1][1]
        trend = "decreased" if last[3] < first[3] else "did not decrease"
        print(
            f"aggregated seed {seed}: alpha_none {first[3]:.4f} -> {last[3]:.4f} "
            f"({trend} over training)"
        )
    failed = [r for r in table.rows if r.failed]
    if failed:
        for r in failed:
            print(f"FAILED cell mode={r.mode} seed={r.seed}: {r.error}", file=sys.stderr)
        return EXIT_CELL
    return EXIT_OK


def _stack_from_config(items: list) -> LayerStack:
    entries = []
    for item in items:
        kind = str(item.get("smoothing", "none"))
        dilation = int(item["dilation"])
        if "size" in item:
            size = int(item["size"])
        else:
            size = 1 if kind == "none" else dilation
        entries.append(
            LayerEntry(
                spec=ConvSpec(
                    kernel_size=int(item["kernel_size"]), dilation=dilation
                ),
                smoothing=kind,
                smoothing_size=size,
            )
        )
    return LayerStack(layers=tuple(entries))


def cmd_analyze(config: dict) -> int:
    """Gridding scores for every stack prefix; optional dependency art."""
    out = _resolve_output_dir(config)
    ana = config["analysis"]
    stack = _stack_from_config(ana["stack"])
    extent = (int(ana["height"]), int(ana["width"]))
    rows = []
    for depth in range(1, len(stack.layers) + 1):
        prefix = LayerStack(layers=stack.layers[:depth])
        dep_map = trace_dependencies(prefix, extent)
        score = gridding_score(dep_map)
        last = prefix.layers[-1]
        rows.append(
            [
                depth,
                last.spec.dilation,
                last.spec.kernel_size,
                last.smoothing,
                float(score),
            ]
        )
    _write_csv(out / "gridding.csv", "layer_count,r,K,smoothing,gridding_score", rows)
    for row in rows:
        print(
            f"layers={row[0]} r={row[1]} K={row[2]} smoothing={row[3]} "
            f"gridding_score={row[4]}"
        )
    if ana["write_art"]:
        dep_map = trace_dependencies(stack, extent)
        center = (extent[0] // 2, extent[1] // 2)
        art = export_dependency_art(dep_map, center)
        (out / "dependency_art.txt").write_text(art)
        print(f"dependency art for output pixel {center} written to {out}")
    return EXIT_OK


def cmd_gradcheck(config: dict) -> int:
    """Finite-difference check of every trainable parameter per mode."""
    gc = config["gradcheck"]
    tolerance = float(gc["tolerance"])
    h, w = int(gc["height"]), int(gc["width"])
    batch = int(gc["batch_size"])
    classes = int(gc["classes"])
    model_cfg = config["model"]
    failing: list[str] = []
    for mode in [str(m) for m in gc["modes"]]:
        if mode not in MODES:
            raise ConfigError(f"unknown mode in gradcheck.modes: {mode!r}")
        rng = Rng(int(gc["seed"])).child(f"gradcheck-{mode}")
        model = build_model(
            mode,
            rng=rng,
            in_channels=int(model_cfg["in_channels"]),
            hidden_channels=int(gc["hidden_channels"]),
            classes=classes,
            dilations=tuple(int(r) for r in model_cfg["dilation_rates"]),
            kernel_size=int(model_cfg["kernel_size"]),
            sigma=float(model_cfg["sigma"]),
        )
        x = Tensor(
            rng.child("x").uniform(batch * model.in_channels * h * w, -1.0, 1.0)
            .reshape(batch, model.in_channels, h, w)
        )
        labels = np.asarray(
            rng.child("labels").integers(0, classes, batch * h * w)
        ).reshape(batch, h, w)
        report = check_gradients(SupervisedLoss(model, labels), x, tolerance)
        for name, err in sorted(report.per_parameter.items()):
            status = "ok" if err <= tolerance else "FAIL"
            print(f"{mode:<12}{name:<24}max rel err {err:.3e}  {status}")
        failing.extend(f"{mode}:{name}" for name in report.failing())
    if failing:
        print(
            "gradient check failed for: " + ", ".join(failing), file=sys.stderr
        )
        return EXIT_GRADCHECK
    print(f"all gradients within tolerance {tolerance}")
    return EXIT_OK


def cmd_bench(config: dict) -> int:
    """Median per-step cost of each variant plus parameter/flop censuses."""
    out = _resolve_output_dir(config)
    b = config["bench"]
    ds = config["dataset"]
    extent = (int(ds["height"]), int(ds["width"]))
    results = bench_variants(
        [str(v) for v in b["variants"]],
        _train_config(config),
        reps=int(b["reps"]),
        warmup_steps=int(b["warmup_steps"]),
        measured_steps=int(b["measured_steps"]),
        extent=extent,
        classes=int(ds["classes"]),
        model_kwargs=_model_kwargs(config),
    )
    rows = [
        [
            r.variant,
            float(r.median_ms),
            float(r.iqr_ms),
            float(r.overhead_pct),
            r.param_count,
            r.flops_per_step,
        ]
        for r in results
    ]
    _write_csv(
        out / "bench.csv",
        "variant,median_ms,iqr_ms,overhead_pct,param_count,flops_per_step",
        rows,
    )
    print(f"{'variant':<14}{'median ms':>11}{'IQR ms':>9}{'overhead':>10}{'params':>8}{'MACs':>12}")
    for r in results:
        print(
            f"{r.variant:<14}{r.median_ms:>11.3f}{r.iqr_ms:>9.3f}"
            f"{r.overhead_pct:>9.1f}%{r.param_count:>8}{r.flops_per_step:>12}"
        )
    stable = ordering_stable(results)
    print(f"ordering stable across {int(b['reps'])} repetitions: {'yes' if stable else 'no'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "generate": (cmd_generate, "generate and cache a synthetic dataset"),
    "compare": (cmd_compare, "train and score every smoothing mode over seeds"),
    "analyze": (cmd_analyze, "trace dependency sets and gridding scores"),
    "gradcheck": (cmd_gradcheck, "verify analytic gradients against finite differences"),
    "bench": (cmd_bench, "measure per-step training overhead per variant"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sdconv",
        description="Smoothed dilated convolution experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_fn, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file (merged over defaults)")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY.PATH=VALUE",
            help="override one config key, e.g. --set training.steps=100",
        )
        p.add_argument("--output-dir", help="shorthand for --set output_dir=...")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.overrides)
        if args.output_dir:
            overrides.append(f"output_dir={args.output_dir}")
        config = load_config(args.config, overrides)
        fn = _COMMANDS[args.command][0]
        return fn(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IoError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
