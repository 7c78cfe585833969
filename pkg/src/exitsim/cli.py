"""Command-line experiment runner.

Every subcommand reads an optional JSON config file, applies flag
overrides on top, echoes the effective configuration into its outputs,
and writes CSV data plus a JSON summary into --out-dir.  Outputs carry
no timestamps and use sorted keys, so a rerun at the same seed is
byte-identical.

Exit codes: 0 success, 2 configuration problems, 3 unreadable or
malformed inputs, 4 runtime failures.  Failures print one line to
stderr of the form ``error: <category>: <message>``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
from itertools import islice
from typing import Callable, Iterable, Sequence

import numpy as np

from .bandit import (
    ActionSet,
    BanditError,
    RewardParams,
    expected_reward_oracle,
    regret_bound,
    regret_curve,
    run_adaptive_captioning,
)
from .cascade import (
    DEFAULT_MAX_CAPTION_LENGTH,
    ExitHistogram,
    TokenTrace,
    TraceValidationError,
    decide_exit,
    speedup_ratio,
)
from .distill import (
    CheckpointError,
    StepSchedule,
    ToyConfig,
    TrainingError,
    forward_traces,
    init_cascade,
    layer_accuracies,
    load_cascade,
    make_task,
    save_cascade,
    train_backbone,
    train_exits,
)
from .synth import (
    SyntheticConfidenceModel,
    TraceFormatError,
    distort,
    image_stream,
    read_traces,
    write_traces,
)

DEFAULT_SEED = 7
DEFAULT_GRID = [i / 10 for i in range(1, 11)]


class ConfigError(ValueError):
    """Invalid, unknown, or missing configuration values."""


# ---------------------------------------------------------------------------
# Config plumbing: defaults < config file < explicit flags


def _floats(value: object, key: str) -> tuple[float, ...]:
    if isinstance(value, str):
        parts = [p for p in value.replace(",", " ").split() if p]
        value = parts
    if isinstance(value, (list, tuple)):
        try:
            out = tuple(float(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected numbers, got {value!r}") from None
        if not out:
            raise ConfigError(f"{key}: list must not be empty")
        return out
    raise ConfigError(f"{key}: expected a list of numbers, got {value!r}")


def _coerce(key: str, value: object, kind: str) -> object:
    if value is None:
        return None
    try:
        if kind == "int":
            if isinstance(value, bool) or int(value) != float(value):
                raise ValueError
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "str":
            if not isinstance(value, str):
                raise ValueError
            return value
        if kind == "floatlist":
            return _floats(value, key)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from None
    raise ConfigError(f"unknown option kind {kind!r} for {key}")


def effective_config(
    args: argparse.Namespace, schema: dict[str, tuple[str, object]]
) -> dict:
    """Merge defaults, config-file values, and flag overrides, in that order."""
    config = {key: default for key, (_, default) in schema.items()}
    if args.config is not None:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        unknown = sorted(set(loaded) - set(schema))
        if unknown:
            raise ConfigError(
                f"{args.config}: unknown keys {unknown}; valid keys are "
                f"{sorted(schema)}"
            )
        for key, value in loaded.items():
            config[key] = _coerce(key, value, schema[key][0])
    for key, (kind, _) in schema.items():
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            config[key] = _coerce(key, flag_value, kind)
    config["seed"] = args.seed
    return config


def _echo_lines(config: dict) -> list[str]:
    return [f"{key}={json.dumps(config[key])}" for key in sorted(config)]


def _out_path(args: argparse.Namespace, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _write_csv(
    path: str,
    config: dict,
    header: Sequence[str],
    rows: Iterable[Sequence[object]],
) -> None:
    with open(path, "w", encoding="ascii", newline="") as fh:
        for line in _echo_lines(config):
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [repr(v) if isinstance(v, float) else v for v in row]
            )


def _write_summary(path: str, summary: dict) -> None:
    text = json.dumps(summary, sort_keys=True, indent=2)
    with open(path, "w", encoding="ascii") as fh:
        fh.write(text)
        fh.write("\n")
    print(json.dumps(summary, sort_keys=True))


# ---------------------------------------------------------------------------
# Shared evaluation helpers


def _reward_params(config: dict, n_layers: int) -> RewardParams:
    return RewardParams(n_layers=n_layers, mu=config.get("mu"), lam=config["lam"])


def _action_set(config: dict) -> ActionSet:
    return ActionSet(tuple(config["alphas"]))


def _policy_cell(
    model: SyntheticConfidenceModel,
    actions: ActionSet,
    params: RewardParams,
    gamma: float,
    tokens: int,
    max_len: int,
) -> dict:
    """One adaptive (or single-arm fixed) run plus its replay metrics.

    The image stream is regenerated from the model seed for the run and
    once more for the accuracy replay, so every cell that shares a seed
    consumes identical images regardless of policy.
    """
    images = image_stream(model, model.stream_rng(0), max_len)
    run = run_adaptive_captioning(
        images,
        actions,
        params,
        gamma=gamma,
        max_caption_length=max_len,
        eos_id=model.eos_id,
        max_tokens=tokens,
    )
    hist = ExitHistogram.empty(model.n_layers)
    for layer in run.log.exit_layers:
        hist.record(layer)
    mean_reward = sum(run.log.rewards) / len(run.log.rewards)

    replay = image_stream(model, model.stream_rng(0), max_len)
    next(replay)  # the first image was spent on arm initialization
    hits = 0
    total = 0
    for caption, image in zip(run.captions, replay):
        if caption.image_id != image.image_id:
            raise RuntimeError(
                f"replay misaligned: caption {caption.image_id} vs image "
                f"{image.image_id}"
            )
        for pos, decision in enumerate(caption.tokens):
            hits += decision.token_id == image.targets[pos]
            total += 1
    return {
        "speedup": speedup_ratio(hist),
        "accuracy": hits / total if total else float("nan"),
        "mean_reward": mean_reward,
        "run": run,
    }


def _collect_tokens(
    images: Iterable, need_targets: bool, source_name: str
) -> tuple[list[TokenTrace], list[int]]:
    traces: list[TokenTrace] = []
    targets: list[int] = []
    for image in images:
        if need_targets and image.targets is None:
            raise TraceFormatError(
                f"{source_name}: image {image.image_id} has no targets; "
                f"accuracy cannot be computed"
            )
        traces.extend(image.traces)
        if image.targets is not None:
            targets.extend(image.targets)
    if not traces:
        raise TraceFormatError(f"{source_name}: no traces found")
    return traces, targets


# ---------------------------------------------------------------------------
# Subcommands


GEN_TRACES_SCHEMA = {
    "n_images": ("int", 200),
    "max_len": ("int", DEFAULT_MAX_CAPTION_LENGTH),
    "sigma": ("float", 0.0),
    "out": ("str", "traces.txt"),
}


def cmd_gen_traces(args: argparse.Namespace) -> int:
    config = effective_config(args, GEN_TRACES_SCHEMA)
    if config["n_images"] < 1:
        raise ConfigError(f"n_images must be >= 1, got {config['n_images']}")
    model = distort(
        SyntheticConfidenceModel(seed=config["seed"]), config["sigma"]
    )
    rng = model.stream_rng(0)
    images = image_stream(model, rng, config["max_len"])
    path = _out_path(args, config["out"])
    count = write_traces(
        path,
        islice(images, config["n_images"]),
        n_layers=model.n_layers,
        vocab_size=model.vocab_size,
        source=f"synthetic-seed{config['seed']}-sigma{config['sigma']}",
    )
    summary = {
        "config": {k: config[k] for k in sorted(config)},
        "n_images": count,
        "n_tokens": count * config["max_len"],
        "outputs": [config["out"], "gen_traces_summary.json"],
    }
    _write_summary(_out_path(args, "gen_traces_summary.json"), summary)
    return 0


SWEEP_SCHEMA = {
    "alphas": ("floatlist", tuple(DEFAULT_GRID)),
    "traces": ("str", None),
    "model": ("str", None),
}


def cmd_sweep_threshold(args: argparse.Namespace) -> int:
    config = effective_config(args, SWEEP_SCHEMA)
    if (config["traces"] is None) == (config["model"] is None):
        raise ConfigError("provide exactly one of --traces or --model")
    if config["traces"] is not None:
        traces, targets = _collect_tokens(
            read_traces(config["traces"]), True, config["traces"]
        )
        n_layers = traces[0].n_layers
    else:
        model = load_cascade(config["model"])
        rng = np.random.default_rng(config["seed"])
        task = make_task(model.config, rng)
        traces = []
        targets = []
        for example in task.heldout:
            traces.extend(forward_traces(model, example))
            targets.extend(int(t) for t in example.targets)
        n_layers = model.config.n_layers

    rows = []
    for alpha in config["alphas"]:
        hist = ExitHistogram.empty(n_layers)
        hits = 0
        for trace, target in zip(traces, targets):
            decision = decide_exit(trace, alpha)
            hist.record(decision.exit_layer)
            hits += decision.token_id == target
        mean_exit = sum(
            (i + 1) * c for i, c in enumerate(hist.counts)
        ) / hist.total
        rows.append(
            (alpha, speedup_ratio(hist), hits / len(traces), mean_exit)
        )
    _write_csv(
        _out_path(args, "sweep_threshold.csv"),
        config,
        ["alpha", "speedup_ratio", "token_accuracy", "mean_exit_layer"],
        rows,
    )
    summary = {
        "config": {k: config[k] for k in sorted(config)},
        "n_tokens": len(traces),
        "outputs": ["sweep_threshold.csv", "sweep_threshold_summary.json"],
    }
    _write_summary(_out_path(args, "sweep_threshold_summary.json"), summary)
    return 0


BANDIT_SCHEMA = {
    "alphas": ("floatlist", tuple(DEFAULT_GRID)),
    "sigma": ("float", 0.0),
    "tokens": ("int", 100_000),
    "gamma": ("float", 1.0),
    "lam": ("float", 1.0),
    "mu": ("float", None),
    "max_len": ("int", DEFAULT_MAX_CAPTION_LENGTH),
    "oracle_samples": ("int", 200_000),
}


def cmd_bandit(args: argparse.Namespace) -> int:
    config = effective_config(args, BANDIT_SCHEMA)
    model = distort(
        SyntheticConfidenceModel(seed=config["seed"]), config["sigma"]
    )
    actions = _action_set(config)
    params = _reward_params(config, model.n_layers)
    if config["tokens"] < len(actions):
        raise ConfigError(
            f"tokens must cover one pull per arm: {config['tokens']} < "
            f"{len(actions)}"
        )
    images = image_stream(model, model.stream_rng(0), config["max_len"])
    run = run_adaptive_captioning(
        images,
        actions,
        params,
        gamma=config["gamma"],
        max_caption_length=config["max_len"],
        eos_id=model.eos_id,
        max_tokens=config["tokens"],
    )
    oracle = expected_reward_oracle(
        model, actions, params, samples=config["oracle_samples"]
    )
    run.log.to_csv(
        _out_path(args, "bandit_log.csv"), oracle, preamble=_echo_lines(config)
    )
    regret = regret_curve(run.log, oracle)
    counts = run.log.arm_counts()
    empirical_best = max(counts, key=lambda a: (counts[a], -a))
    summary = {
        "config": {k: config[k] for k in sorted(config)},
        "rounds": len(run.log),
        "arm_frequencies": {repr(a): counts.get(a, 0) for a in actions.thresholds},
        "oracle_best_arm": oracle.best_threshold,
        "oracle_expected_rewards": {
            repr(a): e
            for a, e in zip(oracle.thresholds, oracle.expected_rewards)
        },
        "empirical_best_arm": empirical_best,
        "mean_reward": sum(run.log.rewards) / len(run.log.rewards),
        "pseudo_regret": float(regret[-1]),
        "regret_bound": regret_bound(oracle, len(run.log), config["gamma"]),
        "outputs": ["bandit_log.csv", "bandit_summary.json"],
    }
    _write_summary(_out_path(args, "bandit_summary.json"), summary)
    return 0


COMPARE_SCHEMA = {
    "sigmas": ("floatlist", (0.0, 1.0, 2.0)),
    "tokens": ("int", 200_000),
    "fixed_alpha": ("float", 0.6),
    "alphas": ("floatlist", tuple(DEFAULT_GRID)),
    "gamma": ("float", 1.0),
    "lam": ("float", 1.0),
    "mu": ("float", None),
    "max_len": ("int", DEFAULT_MAX_CAPTION_LENGTH),
    "oracle_samples": ("int", 200_000),
}


def cmd_compare_distortion(args: argparse.Namespace) -> int:
    config = effective_config(args, COMPARE_SCHEMA)
    base = SyntheticConfidenceModel(seed=config["seed"])
    adaptive_actions = _action_set(config)
    fixed_actions = ActionSet((config["fixed_alpha"],))
    params = _reward_params(config, base.n_layers)

    rows = []
    margins = {}
    oracle_best = {}
    for sigma in config["sigmas"]:
        model = distort(base, sigma)
        cells = {}
        for policy, actions in (
            (f"fixed-{config['fixed_alpha']:g}", fixed_actions),
            ("adaptive", adaptive_actions),
        ):
            cell = _policy_cell(
                model,
                actions,
                params,
                config["gamma"],
                config["tokens"],
                config["max_len"],
            )
            cells[policy] = cell
            rows.append(
                (
                    sigma,
                    policy,
                    cell["speedup"],
                    cell["accuracy"],
                    cell["mean_reward"],
                )
            )
        fixed_name = f"fixed-{config['fixed_alpha']:g}"
        margins[repr(sigma)] = (
            cells["adaptive"]["mean_reward"] - cells[fixed_name]["mean_reward"]
        )
        oracle = expected_reward_oracle(
            model, adaptive_actions, params, samples=config["oracle_samples"]
        )
        oracle_best[repr(sigma)] = oracle.best_threshold
    _write_csv(
        _out_path(args, "compare_distortion.csv"),
        config,
        ["sigma", "policy", "speedup", "token_accuracy", "mean_reward"],
        rows,
    )
    summary = {
        "config": {k: config[k] for k in sorted(config)},
        "adaptive_minus_fixed_mean_reward": margins,
        "oracle_best_arm": oracle_best,
        "outputs": ["compare_distortion.csv", "compare_distortion_summary.json"],
    }
    _write_summary(
        _out_path(args, "compare_distortion_summary.json"), summary
    )
    return 0


ABLATION_SCHEMA = {
    "stage1_epochs": ("int", 800),
    "stage2_epochs": ("int", 600),
    "learning_rate": ("float", 1.0),
    "decay": ("float", 0.5),
    "decay_every": ("int", 200),
    "n_train": ("int", 512),
    "n_heldout": ("int", 1024),
    "tokens_per_example": ("int", 8),
    "n_classes": ("int", 4),
    "margin": ("float", 0.3),
    "label_noise": ("float", 0.1),
}

ABLATION_VARIANTS = ("ce", "kl", "both")


def _train_ablation(config: dict) -> dict[str, tuple[float, ...]]:
    """Train the backbone once, then each loss variant from a fresh copy."""
    toy = ToyConfig()
    rng = np.random.default_rng(config["seed"])
    task = make_task(
        toy,
        rng,
        n_train=config["n_train"],
        n_heldout=config["n_heldout"],
        tokens_per_example=config["tokens_per_example"],
        n_classes=config["n_classes"],
        margin=config["margin"],
        label_noise=config["label_noise"],
    )
    model = init_cascade(toy, rng)
    schedule = StepSchedule(
        initial=config["learning_rate"],
        decay=config["decay"],
        every=config["decay_every"],
    )
    train_backbone(model, task.train, config["stage1_epochs"], schedule)
    accuracies = {}
    for terms in ABLATION_VARIANTS:
        variant = copy.deepcopy(model)
        train_exits(
            variant, task.train, config["stage2_epochs"], schedule, loss_terms=terms
        )
        accuracies[terms] = layer_accuracies(variant, task.heldout)
    return accuracies


def cmd_ablation(args: argparse.Namespace) -> int:
    config = effective_config(args, ABLATION_SCHEMA)
    accuracies = _train_ablation(config)
    n_layers = len(accuracies["ce"])
    rows = [
        (
            layer + 1,
            accuracies["ce"][layer],
            accuracies["kl"][layer],
            accuracies["both"][layer],
        )
        for layer in range(n_layers)
    ]
    _write_csv(
        _out_path(args, "ablation.csv"),
        config,
        ["layer", "accuracy_ce_only", "accuracy_kl_only", "accuracy_both"],
        rows,
    )
    deepest = n_layers - 2
    summary = {
        "config": {k: config[k] for k in sorted(config)},
        "layer1_both_minus_ce": accuracies["both"][0] - accuracies["ce"][0],
        "deepest_exit_spread": max(
            abs(accuracies["both"][deepest] - accuracies["ce"][deepest]),
            abs(accuracies["kl"][deepest] - accuracies["ce"][deepest]),
        ),
        "teacher_accuracy": accuracies["ce"][-1],
        "outputs": ["ablation.csv", "ablation_summary.json"],
    }
    _write_summary(_out_path(args, "ablation_summary.json"), summary)
    return 0


LAMBDA_SCHEMA = {
    "lambdas": ("floatlist", (0.5, 1.0, 2.0)),
    "sigma": ("float", 0.0),
    "tokens": ("int", 100_000),
    "alphas": ("floatlist", tuple(DEFAULT_GRID)),
    "gamma": ("float", 1.0),
    "mu": ("float", None),
    "max_len": ("int", DEFAULT_MAX_CAPTION_LENGTH),
    "oracle_samples": ("int", 200_000),
}


def cmd_lambda_sweep(args: argparse.Namespace) -> int:
    config = effective_config(args, LAMBDA_SCHEMA)
    model = distort(
        SyntheticConfidenceModel(seed=config["seed"]), config["sigma"]
    )
    actions = _action_set(config)
    rows = []
    oracle_best = {}
    mean_rewards = {}
    for lam in config["lambdas"]:
        params = RewardParams(
            n_layers=model.n_layers, mu=config.get("mu"), lam=lam
        )
        cell = _policy_cell(
            model,
            actions,
            params,
            config["gamma"],
            config["tokens"],
            config["max_len"],
        )
        rows.append((lam, cell["speedup"], cell["accuracy"]))
        oracle = expected_reward_oracle(
            model, actions, params, samples=config["oracle_samples"]
        )
        oracle_best[repr(lam)] = oracle.best_threshold
        mean_rewards[repr(lam)] = cell["mean_reward"]
    _write_csv(
        _out_path(args, "lambda_sweep.csv"),
        config,
        ["lambda", "speedup", "token_accuracy"],
        rows,
    )
    summary = {
        "config": {k: config[k] for k in sorted(config)},
        "oracle_best_arm": oracle_best,
        "mean_reward": mean_rewards,
        "outputs": ["lambda_sweep.csv", "lambda_sweep_summary.json"],
    }
    _write_summary(_out_path(args, "lambda_sweep_summary.json"), summary)
    return 0


TRAIN_TOY_SCHEMA = {
    "stage1_epochs": ("int", 800),
    "stage2_epochs": ("int", 600),
    "loss_terms": ("str", "both"),
    "learning_rate": ("float", 1.0),
    "decay": ("float", 0.5),
    "decay_every": ("int", 200),
    "n_train": ("int", 512),
    "n_heldout": ("int", 1024),
    "tokens_per_example": ("int", 8),
    "n_classes": ("int", 4),
    "margin": ("float", 0.3),
    "label_noise": ("float", 0.1),
    "checkpoint": ("str", "toy_cascade.json"),
}


def cmd_train_toy(args: argparse.Namespace) -> int:
    config = effective_config(args, TRAIN_TOY_SCHEMA)
    toy = ToyConfig()
    rng = np.random.default_rng(config["seed"])
    task = make_task(
        toy,
        rng,
        n_train=config["n_train"],
        n_heldout=config["n_heldout"],
        tokens_per_example=config["tokens_per_example"],
        n_classes=config["n_classes"],
        margin=config["margin"],
        label_noise=config["label_noise"],
    )
    model = init_cascade(toy, rng)
    schedule = StepSchedule(
        initial=config["learning_rate"],
        decay=config["decay"],
        every=config["decay_every"],
    )
    stage1 = train_backbone(model, task.train, config["stage1_epochs"], schedule)
    stage2 = train_exits(
        model,
        task.train,
        config["stage2_epochs"],
        schedule,
        loss_terms=config["loss_terms"],
    )
    path = _out_path(args, config["checkpoint"])
    save_cascade(model, path)
    summary = {
        "config": {k: config[k] for k in sorted(config)},
        "stage1_loss": {
            "first": stage1[0] if stage1 else None,
            "last": stage1[-1] if stage1 else None,
        },
        "stage2_loss": {
            "first": stage2[0] if stage2 else None,
            "last": stage2[-1] if stage2 else None,
        },
        "heldout_accuracy": list(layer_accuracies(model, task.heldout)),
        "train_accuracy": list(layer_accuracies(model, task.train)),
        "outputs": [config["checkpoint"], "train_toy_summary.json"],
    }
    _write_summary(_out_path(args, "train_toy_summary.json"), summary)
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="JSON config file", default=None)
    sub.add_argument("--seed", type=int, default=DEFAULT_SEED)
    sub.add_argument("--out-dir", default=".")


def _add_schema_flags(
    sub: argparse.ArgumentParser, schema: dict[str, tuple[str, object]]
) -> None:
    for key, (kind, default) in schema.items():
        flag = "--" + key.replace("_", "-")
        if kind == "int":
            sub.add_argument(flag, type=int, default=None, dest=key)
        elif kind == "float":
            sub.add_argument(flag, type=float, default=None, dest=key)
        else:
            sub.add_argument(flag, default=None, dest=key)


COMMANDS: dict[str, tuple[Callable, dict]] = {
    "gen-traces": (cmd_gen_traces, GEN_TRACES_SCHEMA),
    "sweep-threshold": (cmd_sweep_threshold, SWEEP_SCHEMA),
    "bandit": (cmd_bandit, BANDIT_SCHEMA),
    "compare-distortion": (cmd_compare_distortion, COMPARE_SCHEMA),
    "ablation": (cmd_ablation, ABLATION_SCHEMA),
    "lambda-sweep": (cmd_lambda_sweep, LAMBDA_SCHEMA),
    "train-toy": (cmd_train_toy, TRAIN_TOY_SCHEMA),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="exitsim",
        description="Early-exit inference experiments on synthetic traces.",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (func, schema) in COMMANDS.items():
        sub = subparsers.add_parser(name)
        _add_common(sub)
        _add_schema_flags(sub, schema)
        sub.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TraceFormatError, CheckpointError, TraceValidationError) as exc:
        return _fail("input", exc, 3)
    except FileNotFoundError as exc:
        return _fail("input", exc, 3)
    except (TrainingError, BanditError) as exc:
        return _fail("runtime", exc, 4)
    except (ConfigError, ValueError) as exc:
        return _fail("config", exc, 2)


def _fail(category: str, exc: Exception, code: int) -> int:
    print(f"error: {category}: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
