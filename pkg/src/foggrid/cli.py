"""``foggrid`` command line: train, eval, baseline, compare.

Exit codes: 0 ok, 2 bad config or arguments, 3 I/O failure, 4 bad checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import statistics
import sys
from pathlib import Path

from . import config as cfgmod
from .checkpoint import CheckpointError, load_checkpoint
from .graph import PartitionError
from .trainer import (
    DELAY_CURVE_FIELDS,
    TRAIN_LOG_FIELDS,
    TrainingDiverged,
    baseline_policy,
    evaluate,
    rollout,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_CHECKPOINT = 0, 2, 3, 4

log = logging.getLogger("foggrid")

PARTITION_FLAG = {"full": "fully_observable", "two_fog": "two_fog_rows", "custom": "custom"}
SUMMARY_FIELDS = ("setting", "seed_count", "mean_final_delay_s", "stdev")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _setup_logging() -> None:
    level = os.environ.get("FOGGRID_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise CliError(f"FOGGRID_LOG_LEVEL must be one of {sorted(levels)}, got {level!r}", EXIT_CONFIG)
    logging.basicConfig(level=levels[level], format="%(message)s", stream=sys.stdout, force=True)


def _load_config(path: str | None, seed: int | None = None, partition: str | None = None) -> dict:
    try:
        cfg = cfgmod.load(path) if path else cfgmod.resolve({})
        if seed is not None:
            cfg["seed"] = seed
        if partition is not None:
            cfg["fog"]["preset"] = PARTITION_FLAG[partition]
        cfgmod.resolve(cfg)
    except cfgmod.ConfigFileError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    return cfg


def _train_config(cfg: dict):
    try:
        return cfgmod.to_train_config(cfg)
    except (cfgmod.ConfigFileError, PartitionError) as exc:
        raise CliError(f"invalid config: {exc}", EXIT_CONFIG) from exc


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc}", EXIT_IO) from exc
    return path


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed, args.partition)
    if args.out:
        cfg["io"]["out_dir"] = args.out
    tc = _train_config(cfg)
    out = _ensure_dir(Path(cfg["io"]["out_dir"]))
    tc.checkpoint_dir = str(out / "checkpoints")
    snapshot = cfgmod.resolved_snapshot(cfg, tc)
    try:
        (out / "resolved_config.json").write_text(cfgmod.dumps(snapshot), encoding="utf-8")
        params, history = train(tc, checkpoint_meta=snapshot)
        history.write_csv(out / "train_log.csv")
        curve = evaluate(params, tc, tc.eval_steps)
        curve.write_csv(out / "delay_curve.csv")
    except TrainingDiverged as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    print(f"trained {tc.total_steps} steps; replay mean delay {curve.mean:.3f} s, final {curve.final:.3f} s")
    return EXIT_OK


def _config_from_checkpoint(meta: dict, path: str) -> dict:
    try:
        return cfgmod.resolve(meta)
    except cfgmod.ConfigFileError as exc:
        raise CliError(f"{path}: checkpoint does not carry a usable run config: {exc}", EXIT_CHECKPOINT) from exc


def cmd_eval(args) -> int:
    try:
        params, _step, meta = load_checkpoint(args.checkpoint)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint not found: {args.checkpoint}", EXIT_CHECKPOINT) from exc
    except (CheckpointError, OSError) as exc:
        raise CliError(str(exc), EXIT_CHECKPOINT) from exc
    cfg = _load_config(args.config) if args.config else _config_from_checkpoint(meta, args.checkpoint)
    if args.seed is not None:
        cfg["seed"] = args.seed
    tc = _train_config(cfg)
    if params.shapes() != dict(_expected_shapes(tc)):
        raise CliError(f"{args.checkpoint}: parameter shapes do not match the run config", EXIT_CHECKPOINT)
    curve = evaluate(params, tc, args.steps)
    _write_curve(curve, args.out)
    print(f"mean delay {curve.mean:.3f} s, final delay {curve.final:.3f} s over {len(curve)} steps")
    return EXIT_OK


def _expected_shapes(tc):
    from .agent import layer_spec

    return [(k, tuple(s)) for k, s in layer_spec(tc.agent_spec())]


def _write_curve(curve, out: str) -> None:
    path = Path(out)
    try:
        if path.parent != Path(""):
            path.parent.mkdir(parents=True, exist_ok=True)
        curve.write_csv(path)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}", EXIT_IO) from exc


def cmd_baseline(args) -> int:
    cfg = _load_config(args.config, args.seed)
    tc = _train_config(cfg)
    policy = baseline_policy(args.policy, tc.build_network(), args.steps_per_phase, tc.seed)
    curve = rollout(policy, tc, args.steps)
    _write_curve(curve, args.out)
    print(f"{args.policy}: mean delay {curve.mean:.3f} s, final delay {curve.final:.3f} s over {len(curve)} steps")
    return EXIT_OK


def _read_csv(path: Path, header: tuple[str, ...]) -> list[list[str]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_CONFIG) from exc
    if not rows or tuple(rows[0]) != header:
        raise CliError(f"{path}: unexpected header {rows[0] if rows else None}", EXIT_CONFIG)
    if any(len(r) != len(header) for r in rows[1:]):
        raise CliError(f"{path}: ragged rows", EXIT_CONFIG)
    return rows[1:]


def _load_run(directory: str) -> dict:
    d = Path(directory)
    try:
        snapshot = json.loads((d / "resolved_config.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"{d}: not a completed run directory ({exc})", EXIT_CONFIG) from exc
    preset = snapshot.get("fog", {}).get("preset", "custom")
    delays = [float(r[1]) for r in _read_csv(d / "delay_curve.csv", DELAY_CURVE_FIELDS)]
    log_rows = _read_csv(d / "train_log.csv", TRAIN_LOG_FIELDS)
    reward_col = TRAIN_LOG_FIELDS.index("mean_reward")
    rewards = [float(r[reward_col]) for r in log_rows]
    if not delays:
        raise CliError(f"{d}: empty delay curve", EXIT_CONFIG)
    return {"dir": d, "setting": preset, "seed": snapshot.get("seed"), "delays": delays, "rewards": rewards}


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        raise CliError("compare needs at least two run directories", EXIT_CONFIG)
    runs = [_load_run(r) for r in args.runs]
    if len({len(r["delays"]) for r in runs}) != 1 or len({len(r["rewards"]) for r in runs}) != 1:
        raise CliError("runs are incompatible: curve lengths differ", EXIT_CONFIG)
    out = _ensure_dir(Path(args.out))
    labels = [f"{r['setting']}_seed{r['seed']}_{i}" for i, r in enumerate(runs)]
    try:
        for name, key in (("combined_delay.csv", "delays"), ("combined_reward.csv", "rewards")):
            with open(out / name, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["step", *labels])
                for k, values in enumerate(zip(*(r[key] for r in runs)), start=1):
                    w.writerow([k, *(repr(v) for v in values)])
        settings: dict[str, list[float]] = {}
        for r in runs:
            settings.setdefault(r["setting"], []).append(r["delays"][-1])
        with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_FIELDS)
            for setting, finals in settings.items():
                sd = statistics.stdev(finals) if len(finals) > 1 else 0.0
                w.writerow([setting, len(finals), repr(statistics.fmean(finals)), repr(sd)])
                print(f"{setting}: {len(finals)} run(s), final delay {statistics.fmean(finals):.3f} +/- {sd:.3f} s")
    except OSError as exc:
        raise CliError(str(exc), EXIT_IO) from exc
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="foggrid", description="Fog-partitioned graph-attention signal control lab")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent and replay it greedily")
    t.add_argument("--config", help="JSON config (defaults used when omitted)")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="run directory (overrides io.out_dir)")
    t.add_argument("--partition", choices=sorted(PARTITION_FLAG), help="fog layout (overrides fog.preset)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="greedy policy replay from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--steps", type=int, default=1000)
    e.add_argument("--out", default="delay_curve.csv")
    e.add_argument("--config", help="override the run config stored in the checkpoint")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", help="replay a fixed-time or random controller")
    b.add_argument("--policy", required=True, choices=["fixed", "random"])
    b.add_argument("--steps", type=int, default=1000)
    b.add_argument("--out", default="delay_curve.csv")
    b.add_argument("--config")
    b.add_argument("--seed", type=int)
    b.add_argument("--steps-per-phase", type=int, default=4)
    b.set_defaults(func=cmd_baseline)

    c = sub.add_parser("compare", help="aggregate completed run directories")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--out", default="compare")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _setup_logging()
        if getattr(args, "steps", 1) is not None and getattr(args, "steps", 1) < 1:
            raise CliError("--steps must be >= 1", EXIT_CONFIG)
        return args.func(args)
    except CliError as exc:
        print(f"foggrid: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
