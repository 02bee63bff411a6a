"""Command-line interface.

Subcommands:
  generate          build and save a synthetic dataset
  search            run the PPO2 parameter search (or the random baseline)
  train-eval        one inner training plus evaluation-set metrics
  export-functions  dump the five substitution curves of a parameter file
  compare           merge two search histories into a best-so-far CSV

Every command takes `--config PATH` (JSON, unknown keys rejected), is
deterministic under a fixed `--seed`, and writes a resolved-config snapshot
next to its outputs so runs can be reproduced byte-for-byte.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .apmetric import COCO_THRESHOLDS, ap_pr_area
from .errors import ConfigError, ParamLossError, TrainingDivergedError
from .paploss import (
    HANDCRAFTED_KINDS,
    LossParams,
    handcrafted_substitution,
    lambda_from_theta,
    resolve_functions,
)
from .search import (
    PRESETS,
    SearchConfig,
    best_so_far_curve,
    random_search,
    run_search,
)
from .toybench import (
    DatasetConfig,
    dataset_to_json_dict,
    generate,
    load_dataset,
    model_forward,
    reward,
    train_inner,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _load_json(path):
    with open(path) as fh:
        return json.load(fh)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_history(path, history):
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "best_reward"])
        writer.writerows(curve)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_for(config: SearchConfig):
    """Load the configured dataset, or build the default desk-scale one."""
    if config.dataset is not None:
        dataset_config, train_set, eval_set = load_dataset(config.dataset)
    else:
        dataset_config = DatasetConfig()
        train_set, eval_set = generate(dataset_config)
    return dataset_config, train_set, eval_set


def _search_config(args) -> SearchConfig:
    data = _load_json(args.config) if args.config else {}
    if args.preset is not None:
        data = {**PRESETS[args.preset], **data}
    config = SearchConfig.from_json_dict(data)
    if args.seed is not None:
        config = SearchConfig.from_json_dict({**config.to_json_dict(), "seed": args.seed})
    return config


def cmd_generate(args) -> int:
    data = _load_json(args.config) if args.config else {}
    config = DatasetConfig.from_json_dict(data)
    if args.seed is not None:
        config = DatasetConfig.from_json_dict({**config.to_json_dict(), "seed": args.seed})
    train_set, eval_set = generate(config)
    out = _out_dir(args)
    _write_json(out / "dataset.json", dataset_to_json_dict(config, train_set, eval_set))
    _write_json(out / "resolved_config.json", config.to_json_dict())
    print(f"wrote {len(train_set)} train / {len(eval_set)} eval scenes to {out / 'dataset.json'}")
    return EXIT_OK


def cmd_search(args) -> int:
    config = _search_config(args)
    dataset_config, train_set, eval_set = _dataset_for(config)
    if args.strategy == "ppo2":
        best, history = run_search(config, dataset=(train_set, eval_set), jobs=args.jobs)
    else:
        best, history = random_search(config, dataset=(train_set, eval_set),
                                      jobs=args.jobs, budget=args.budget)
    out = _out_dir(args)
    _write_json(out / "resolved_config.json",
                {"search": config.to_json_dict(), "strategy": args.strategy,
                 "budget": args.budget, "dataset_config": dataset_config.to_json_dict()})
    _write_history(out / "history.jsonl", history)
    _write_curve(out / "curve.csv", best_so_far_curve(history))
    rewards = [r["reward"] for r in history if "reward" in r]
    if not rewards or max(rewards) <= 0.0:
        print("search produced no trainable loss", file=sys.stderr)
        return EXIT_RUNTIME
    _write_json(out / "best_params.json", best.to_json_dict())
    print(f"best reward {max(rewards):.4f} over {len(rewards)} samples; "
          f"artifacts in {out}")
    return EXIT_OK


def _train_eval_params(args, config: SearchConfig):
    """Resolve the loss parameterization: params file or handcrafted curves."""
    if (args.params is None) == (args.substitution is None):
        raise ConfigError(
            "exactly one of a params file or --substitution must be given")
    if args.params is not None:
        params = LossParams.from_json_dict(_load_json(args.params))
        functions = None
        source = str(args.params)
    else:
        params = LossParams.identity(M=config.M, measurement=config.measurement)
        functions = tuple(handcrafted_substitution(args.substitution) for _ in range(5))
        source = f"substitution:{args.substitution}"
    fields = params.to_json_dict()
    if args.shared_params:
        shared = fields["theta1"]
        fields = {**fields, "theta2": shared, "theta3": shared,
                  "theta4": shared, "theta5": shared}
    if args.lambda_fixed is not None:
        if not (0.1 < args.lambda_fixed < 10.0):
            raise ConfigError("--lambda-fixed must lie in (0.1, 10)")
        fields = {**fields, "theta_lambda": (np.log10(args.lambda_fixed) + 1.0) / 2.0}
    if args.no_block_denominator:
        fields = {**fields, "block_denominator": False}
    return LossParams.from_json_dict(fields), functions, source


def cmd_train_eval(args) -> int:
    config_data = _load_json(args.config) if args.config else {}
    config = SearchConfig.from_json_dict(config_data)
    if args.seed is not None:
        config = SearchConfig.from_json_dict({**config.to_json_dict(), "seed": args.seed})
    if args.steps is not None:
        config = SearchConfig.from_json_dict({**config.to_json_dict(), "steps": args.steps})
    params, functions, source = _train_eval_params(args, config)
    dataset_config, train_set, eval_set = _dataset_for(config)

    try:
        model = train_inner(params, train_set, config.steps, config.seed,
                            functions=functions)
    except TrainingDivergedError as exc:
        print(f"training diverged at step {exc.step}", file=sys.stderr)
        return EXIT_RUNTIME

    per_threshold = {}
    for thr in COCO_THRESHOLDS:
        values = [ap_pr_area(b.boxes, b.scores, b.gt_boxes, (thr,))
                  for b in (model_forward(model, s) for s in eval_set)]
        per_threshold[f"{thr:.2f}"] = float(np.mean(values))
    metrics = {
        "reward": reward(model, eval_set),
        "per_threshold_ap": per_threshold,
        "source": source,
        "params": params.to_json_dict(),
        "lambda": lambda_from_theta(params.theta_lambda),
        "steps": config.steps,
        "seed": config.seed,
    }
    out = _out_dir(args)
    _write_json(out / "metrics.json", metrics)
    _write_json(out / "resolved_config.json",
                {"train_eval": config.to_json_dict(), "source": source,
                 "shared_params": args.shared_params,
                 "lambda_fixed": args.lambda_fixed,
                 "no_block_denominator": args.no_block_denominator,
                 "dataset_config": dataset_config.to_json_dict()})
    print(f"reward {metrics['reward']:.4f} ({source}); metrics in {out / 'metrics.json'}")
    return EXIT_OK


def cmd_export_functions(args) -> int:
    params = LossParams.from_json_dict(_load_json(args.params))
    functions = resolve_functions(params)
    out = _out_dir(args)
    grid = np.linspace(0.0, 1.0, 201)
    control = {}
    for k, fn in enumerate(functions, start=1):
        with open(out / f"f{k}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "f"])
            for x, y in zip(grid, fn.eval(grid)):
                writer.writerow([repr(float(x)), repr(float(y))])
        control[f"f{k}"] = fn.to_points()
    control["lambda"] = lambda_from_theta(params.theta_lambda)
    _write_json(out / "control_points.json", control)
    print(f"wrote 5 curves and control points to {out}")
    return EXIT_OK


def _read_history(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def cmd_compare(args) -> int:
    curve_a = dict(best_so_far_curve(_read_history(args.history_a)))
    curve_b = dict(best_so_far_curve(_read_history(args.history_b)))
    rounds = sorted(set(curve_a) | set(curve_b))
    out = _out_dir(args)
    last_a, last_b = "", ""
    with open(out / "comparison.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "best_a", "best_b"])
        for r in rounds:
            last_a = curve_a.get(r, last_a)
            last_b = curve_b.get(r, last_b)
            writer.writerow([r, last_a, last_b])
    print(f"wrote {out / 'comparison.csv'} over {len(rounds)} rounds")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="paramloss",
        description="Parameterized detection-loss search on a synthetic benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("generate", help="build and save a synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("search", help="outer-loop parameter search")
    common(p)
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--strategy", choices=("ppo2", "random"), default="ppo2")
    p.add_argument("--budget", type=int, default=None,
                   help="sample budget for --strategy random (default T*S)")
    p.add_argument("--jobs", type=int, default=1,
                   help="concurrent inner trainings")
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("train-eval", help="train once and report eval metrics")
    common(p)
    p.add_argument("params", nargs="?", default=None,
                   help="loss parameter JSON file (omit with --substitution)")
    p.add_argument("--substitution", choices=sorted(HANDCRAFTED_KINDS), default=None,
                   help="use a handcrafted substitution instead of a params file")
    p.add_argument("--steps", type=int, default=None, help="inner training steps")
    p.add_argument("--no-block-denominator", action="store_true",
                   help="let gradients flow through the denominator terms")
    p.add_argument("--shared-params", action="store_true",
                   help="use the first function's parameters for all five slots")
    p.add_argument("--lambda-fixed", type=float, default=None,
                   help="force the localization gradient scale to this value")
    p.set_defaults(fn=cmd_train_eval)

    p = sub.add_parser("export-functions", help="dump substitution curves")
    p.add_argument("params", help="loss parameter JSON file")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(fn=cmd_export_functions)

    p = sub.add_parser("compare", help="merge two histories into one CSV")
    p.add_argument("history_a", help="first history.jsonl")
    p.add_argument("history_b", help="second history.jsonl")
    p.add_argument("--out", default="out", help="output directory")
    p.set_defaults(fn=cmd_compare)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ParamLossError, FileNotFoundError, json.JSONDecodeError, KeyError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
