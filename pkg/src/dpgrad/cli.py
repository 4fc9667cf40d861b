"""``dpgrad`` command line: train, microbench, account, validate, predict-mem."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from . import accountant as acct
from .bench import (PRESETS, LayerSpec, Report, cmd_microbench, emit_report, layer_sizes,
                    predict_memory)
from .errors import DPGradError
from .layers import load_model
from .optimizer import NoiseSchedule
from .train import RunConfig, cmd_train, default_seed
from .validator import ValidationError, suggest_fix, validate

EXIT_OK, EXIT_VIOLATIONS, EXIT_ERROR = 0, 1, 2

ACCOUNT_COLUMNS = ["step", "sigma", "q", "epsilon", "best_order"]


def _ints(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v]


def _write(report: Report, fmt: str, out: Optional[str]) -> None:
    text = emit_report(report, fmt, out)
    if out is None:
        sys.stdout.write(text)


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--format", choices=("csv", "markdown"), default=None)


# -- subcommands -------------------------------------------------------------


_TRAIN_FLAGS = {
    "model": "model", "noise_multiplier": "noise_multiplier", "max_grad_norm": "max_grad_norm",
    "target_epsilon": "target_epsilon", "delta": "delta", "sample_rate": "sample_rate",
    "epochs": "epochs", "logical_batch": "logical_batch", "physical_batch": "physical_batch",
    "seed_data": "seed_data", "seed_noise": "seed_noise", "lr": "lr", "noise_schedule": "noise_schedule",
    "out": "out", "format": "format",
}


def run_train(args) -> int:
    doc = {}
    base = None
    if args.config:
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        base = Path(args.config).parent
    for attr, key in _TRAIN_FLAGS.items():
        v = getattr(args, attr)
        if v is not None:
            doc[key] = v
    if args.secure_mode:
        doc["secure_mode"] = True
    if args.plain:
        doc["mode"] = "plain"
    # a flag beats a config value for the sigma / target-epsilon pair
    if args.noise_multiplier is not None:
        doc.pop("target_epsilon", None)
    if args.target_epsilon is not None:
        doc.pop("noise_multiplier", None)
    cfg = RunConfig.from_dict(doc)
    if base is not None and isinstance(cfg.model, str) and args.model is None and not Path(cfg.model).is_absolute():
        cfg.model = str(base / cfg.model)
    result = cmd_train(cfg)
    _write(result.report, cfg.format, cfg.out)
    print(json.dumps(result.summary()), file=sys.stderr if cfg.out is None else sys.stdout)
    return EXIT_OK


def run_microbench(args) -> int:
    specs = []
    if args.layer_spec:
        doc = json.loads(Path(args.layer_spec).read_text(encoding="utf-8"))
        specs += [LayerSpec.from_dict(d) for d in (doc if isinstance(doc, list) else [doc])]
    for name in (args.layers.split(",") if args.layers else ([] if specs else ["linear"])):
        if name not in PRESETS:
            raise DPGradError(f"unknown layer preset {name!r}; choose from {sorted(PRESETS)}")
        specs.append(PRESETS[name])
    report = cmd_microbench(specs, _ints(args.batch_sizes), repeats=args.repeats,
                            num_batches=args.batches, warmup=args.warmup, seed=args.seed)
    _write(report, args.format or "csv", args.out)
    return EXIT_OK


def run_account(args) -> int:
    q, steps = args.sample_rate, args.steps
    if (args.noise_multiplier is None) == (args.target_epsilon is None):
        raise DPGradError("supply exactly one of --noise-multiplier and --target-epsilon")
    sigma0 = args.noise_multiplier
    if args.target_epsilon is not None:
        sigma0 = acct.get_noise_multiplier(args.target_epsilon, args.delta, q, steps)
        print(f"calibrated noise multiplier: {sigma0:.6g}", file=sys.stderr)
    sched = NoiseSchedule.parse(args.schedule, sigma0)
    per_epoch = args.steps_per_epoch or max(1, round(1.0 / q))
    records = [(sched.sigma(s // per_epoch), q) for s in range(steps)]
    every = args.every or max(1, steps // 20)
    report = Report(list(ACCOUNT_COLUMNS), title="privacy spent")
    for row in acct.epsilon_trace(records, args.delta, every=every):
        report.add(*row)
    _write(report, args.format or "csv", args.out)
    return EXIT_OK


def run_validate(args) -> int:
    model = load_model(args.model_file)
    violations = validate(model)
    for v in violations:
        print(v)
    if args.fix_out:
        fixed = suggest_fix(model)
        Path(args.fix_out).write_text(json.dumps(fixed.to_dict(), indent=2) + "\n", encoding="utf-8")
    return EXIT_VIOLATIONS if violations else EXIT_OK


def run_predict_mem(args) -> int:
    if args.layer:
        L, c_data = layer_sizes(PRESETS[args.layer])
    else:
        if args.params is None or args.c_data is None:
            raise DPGradError("supply --layer or both --params and --c-data")
        L, c_data = args.params, args.c_data
    report = Report(["b", "L", "C_data", "M_nonDP", "M_DP", "ratio", "regime", "approx_ratio"],
                    title="memory model")
    for b in _ints(args.batch_sizes):
        e = predict_memory(b, L, c_data)
        report.add(e.b, e.L, e.C_data, e.M_nonDP, e.M_DP, e.ratio, e.regime, e.approx_ratio)
    _write(report, args.format or "csv", args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpgrad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="end-to-end DP-SGD run")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--model", help="architecture file (overrides the config)")
    p.add_argument("--noise-multiplier", type=float)
    p.add_argument("--target-epsilon", type=float)
    p.add_argument("--max-grad-norm", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--sample-rate", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--logical-batch", type=int)
    p.add_argument("--physical-batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--noise-schedule")
    p.add_argument("--seed-data", type=int)
    p.add_argument("--seed-noise", type=int)
    p.add_argument("--secure-mode", action="store_true")
    p.add_argument("--plain", action="store_true", help="non-private SGD baseline on the same batches")
    _add_output(p)
    p.set_defaults(func=run_train)

    p = sub.add_parser("microbench", help="per-layer runtime and grad-sample storage")
    p.add_argument("--layers", help=f"comma list of presets: {','.join(PRESETS)}")
    p.add_argument("--layer-spec", help="JSON file with custom layer specs")
    p.add_argument("--batch-sizes", default="16,32,64")
    p.add_argument("--repeats", type=int, default=200)
    p.add_argument("--batches", type=int, default=10)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--seed", type=int, default=None)
    _add_output(p)
    p.set_defaults(func=run_microbench)

    p = sub.add_parser("account", help="epsilon trace for a noise schedule")
    p.add_argument("--noise-multiplier", type=float)
    p.add_argument("--target-epsilon", type=float)
    p.add_argument("--schedule", default="constant")
    p.add_argument("--sample-rate", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--steps-per-epoch", type=int)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--every", type=int, help="checkpoint interval in steps")
    _add_output(p)
    p.set_defaults(func=run_account)

    p = sub.add_parser("validate", help="check a model file for DP violations")
    p.add_argument("model_file")
    p.add_argument("--fix-out", help="write the suggested fixed model here")
    p.set_defaults(func=run_validate)

    p = sub.add_parser("predict-mem", help="memory model for a batch-size sweep")
    p.add_argument("--batch-sizes", default="1,16,32,64,128,256,512")
    p.add_argument("--params", type=int, help="L, trainable parameter count")
    p.add_argument("--c-data", type=float, help="per-sample feature+label+output size")
    p.add_argument("--layer", choices=sorted(PRESETS))
    _add_output(p)
    p.set_defaults(func=run_predict_mem)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", "unset") is None:
        args.seed = default_seed()
    try:
        return args.func(args)
    except ValidationError as e:
        for v in e.violations:
            print(v)
        return EXIT_VIOLATIONS
    except (DPGradError, OSError, json.JSONDecodeError) as e:
        print(f"dpgrad: error: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
