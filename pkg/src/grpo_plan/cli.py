"""Command-line entry point: ``grpo-plan <command> --config FILE [--seed N] [--out PATH] ...``.

Commands
  gen     write a scene dataset
  sft     train on a dataset: plain dataset -> direct-trajectory proxy,
          routed dataset -> reasoning policy
  route   label each scene short/long with a trained proxy
  rft     GRPO fine-tuning from a supervised checkpoint
  eval    greedy-decode evaluation, JSON plus text table
  ablate  reward-component and group-size grid of GRPO runs

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

from . import policy
from .config import ConfigError, RunConfig, load_config, write_resolved
from .grpo import GrpoConfig, train_rft, write_curves_csv
from .metrics import EvalReport, evaluate, format_table
from .policy import CheckpointError, PolicySnapshot
from .rewards import RewardWeights
from .sft import (
    TrainingError,
    is_routed,
    read_routed,
    route_scenes,
    train_proxy,
    train_sft,
    write_loss_csv,
    write_routed,
)
from .world import DatasetError, generate_scenes, read_dataset, write_dataset

log = logging.getLogger("grpo_plan")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
THREADS_ENV = "GRPO_PLAN_THREADS"


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sidecar(out: Path, suffix: str) -> Path:
    return out.with_name(out.name + suffix)


def _need(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise RuntimeFailure(f"{what} not found: {path}")
    return p


def _load_scenes(path: str):
    try:
        scenes = read_dataset(_need(path, "dataset"))
    except DatasetError as exc:
        raise RuntimeFailure(str(exc)) from exc
    if not scenes:
        raise RuntimeFailure(f"dataset {path} is empty")
    return scenes


def _load_ckpt(path: str, what: str) -> PolicySnapshot:
    p = _need(path, what)
    if not policy.is_checkpoint(p):
        raise RuntimeFailure(f"{path} is not a policy checkpoint")
    try:
        return policy.load_checkpoint(p)
    except CheckpointError as exc:
        raise RuntimeFailure(str(exc)) from exc


def _split(scenes, fraction: float):
    """Leading part for training, trailing ``fraction`` held out."""
    n_hold = int(round(len(scenes) * fraction))
    if n_hold == 0 or n_hold >= len(scenes):
        return list(scenes), list(scenes)
    return list(scenes[:-n_hold]), list(scenes[-n_hold:])


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig, out: Path, args) -> None:
    scenes = generate_scenes(cfg.n_scenes, cfg.seed_for("world"), cfg.world)
    n = write_dataset(scenes, out)
    write_resolved(cfg, _sidecar(out, ".config.json"), {"command": "gen", "records": n})
    log.info("wrote %d scenes to %s", n, out)


def cmd_sft(cfg: RunConfig, out: Path, args) -> None:
    data = _need(args.dataset, "dataset")
    try:
        routed = is_routed(data)
        if routed:
            pairs = read_routed(data).pairs()
        else:
            scenes = _load_scenes(args.dataset)
    except DatasetError as exc:
        raise RuntimeFailure(str(exc)) from exc
    if routed:
        log.info("training reasoning policy on %d routed scenes for %d steps", len(pairs), cfg.sft.steps)
        result = train_sft(pairs, cfg.sft)
    else:
        log.info("training direct-trajectory proxy on %d scenes for %d steps", len(scenes), cfg.sft.proxy_steps)
        result = train_proxy(scenes, replace(cfg.sft, seed=cfg.seed_for("proxy")))
    policy.save_checkpoint(result.snapshot, out)
    write_loss_csv(result.losses, _sidecar(out, ".loss.csv"))
    stage = "sft" if routed else "proxy"
    write_resolved(cfg, _sidecar(out, ".config.json"), {"command": "sft", "stage": stage, "dataset": str(data)})
    log.info("loss %.3f -> %.3f in %.1fs", result.losses[0], result.losses[-1], result.seconds)


def cmd_route(cfg: RunConfig, out: Path, args) -> None:
    proxy = _load_ckpt(args.proxy, "proxy checkpoint")
    scenes = _load_scenes(args.dataset)
    routed = route_scenes(proxy, scenes, cfg.sft.route_threshold)
    write_routed(routed, out)
    write_resolved(cfg, _sidecar(out, ".config.json"), {"command": "route", "counts": routed.counts()})
    log.info("routed %s", routed.counts())


def _warn_if_untrained(snap: PolicySnapshot, path: str) -> None:
    if snap.version == 0:
        log.warning("%s has never been trained; RL from an untrained policy usually underperforms", path)


def cmd_rft(cfg: RunConfig, out: Path, args) -> None:
    sft = _load_ckpt(args.checkpoint, "SFT checkpoint")
    _warn_if_untrained(sft, args.checkpoint)
    scenes = _load_scenes(args.dataset)
    train, probe = _split(scenes, cfg.eval.holdout_fraction)
    t0 = time.perf_counter()

    def progress(row):
        if not math.isnan(row["mean_L2"]):
            log.info("iter %d reward %.3f probe L2 %.3f KL %.4f", row["iteration"], row["mean_reward"], row["mean_L2"], row["mean_KL"])

    result = train_rft(sft, train, cfg.grpo, cfg.rewards, probe=probe[: cfg.grpo.probe_size], callback=progress, raise_on_collapse=False)
    write_curves_csv(result.curves, _sidecar(out, ".curves.csv"))
    write_resolved(cfg, _sidecar(out, ".config.json"), {"command": "rft", "checkpoint": args.checkpoint})
    if result.collapsed:
        raise RuntimeFailure(f"GRPO diverged ({result.error}); partial curves written")
    policy.save_checkpoint(result.snapshot, out)
    log.info("GRPO done in %.1fs", time.perf_counter() - t0)


def _write_report(report: EvalReport, out: Path, label: str) -> None:
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    out.with_suffix(".txt").write_text(report.to_table(label), encoding="utf-8")


def cmd_eval(cfg: RunConfig, out: Path, args) -> None:
    snap = _load_ckpt(args.checkpoint, "checkpoint")
    scenes = _load_scenes(args.dataset)
    report = evaluate(snap, scenes, convention=cfg.eval.convention)
    _write_report(report, out, Path(args.checkpoint).name)
    write_resolved(cfg, _sidecar(out, ".config.json"), {"command": "eval", "checkpoint": args.checkpoint})
    print(report.to_table(Path(args.checkpoint).name))


def ablation_cells(cfg: RunConfig) -> list[tuple[str, GrpoConfig, RewardWeights]]:
    """Reward rows at the configured G, then the remaining group sizes."""
    base = cfg.grpo
    if cfg.ablate.iterations is not None:
        base = replace(base, iterations=cfg.ablate.iterations)
    w = cfg.rewards
    g0 = cfg.ablate.groups[0]
    cells = [
        ("traj+format", replace(base, G=g0), replace(w, w_m=0.0, w_r=0.0)),
        ("traj+format+rep", replace(base, G=g0), replace(w, w_m=0.0)),
        ("traj+format+rep+meta", replace(base, G=g0), w),
    ]
    for g in cfg.ablate.groups[1:]:
        cells.append((f"all rewards, G={g}", replace(base, G=g), w))
    return cells


def cmd_ablate(cfg: RunConfig, out: Path, args) -> None:
    sft = _load_ckpt(args.checkpoint, "SFT checkpoint")
    _warn_if_untrained(sft, args.checkpoint)
    scenes = _load_scenes(args.dataset)
    train, held = _split(scenes, cfg.eval.holdout_fraction)
    out.mkdir(parents=True, exist_ok=True)
    rows = [("SFT (no RL)", evaluate(sft, held, convention=cfg.eval.convention))]
    notes, summary = {}, []
    for i, (label, gcfg, weights) in enumerate(ablation_cells(cfg)):
        cell_dir = out / f"cell{i}"
        cell_dir.mkdir(exist_ok=True)
        cell_cfg = replace(cfg, grpo=replace(gcfg, seed=cfg.seed_for("ablate", i)), rewards=weights)
        write_resolved(cell_cfg, cell_dir / "config.json", {"command": "ablate", "cell": label})
        entry = {"cell": label, "dir": cell_dir.name, "status": "ok"}
        try:
            result = train_rft(sft, train, cell_cfg.grpo, weights, probe=[], raise_on_collapse=False)
            write_curves_csv(result.curves, cell_dir / "curves.csv")
            if result.collapsed:
                entry.update(status="collapsed", error=result.error)
                notes[label] = "collapsed"
                rows.append((label, None))
                log.warning("cell %r collapsed: %s", label, result.error)
            else:
                report = evaluate(result.snapshot, held, convention=cfg.eval.convention)
                _write_report(report, cell_dir / "report.json", label)
                policy.save_checkpoint(result.snapshot, cell_dir / "policy.ckpt")
                entry["report"] = report.to_dict()
                rows.append((label, report))
            entry["seconds"] = result.seconds
        except Exception as exc:  # one failing cell must not stop the grid
            entry.update(status="failed", error=f"{type(exc).__name__}: {exc}")
            notes[label] = "failed"
            rows.append((label, None))
            log.error("cell %r failed: %s", label, exc)
        summary.append(entry)
        log.info("cell %d (%s): %s", i, label, entry["status"])
    table = format_table(rows, notes)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    (out / "ablation.json").write_text(
        json.dumps({"baseline": rows[0][1].to_dict(), "cells": summary}, indent=2, allow_nan=True) + "\n",
        encoding="utf-8",
    )
    write_resolved(cfg, out / "config.json", {"command": "ablate", "checkpoint": args.checkpoint})
    print(table)


COMMANDS = {
    "gen": (cmd_gen, []),
    "sft": (cmd_sft, ["dataset"]),
    "route": (cmd_route, ["proxy", "dataset"]),
    "rft": (cmd_rft, ["checkpoint", "dataset"]),
    "eval": (cmd_eval, ["checkpoint", "dataset"]),
    "ablate": (cmd_ablate, ["checkpoint", "dataset"]),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grpo-plan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, positionals) in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the root seed")
        p.add_argument("--out", required=True, help="output file (directory for ablate)")
        for pos in positionals:
            p.add_argument(pos)
    return parser


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config, args.seed)
        limit = _thread_limit()
    except (ConfigError, UsageError) as exc:
        print(f"grpo-plan: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    if args.command != "ablate" and out.parent and not out.parent.exists():
        print(f"grpo-plan: output directory {out.parent} does not exist", file=sys.stderr)
        return EXIT_RUNTIME
    handler = COMMANDS[args.command][0]
    try:
        with limit:
            handler(cfg, out, args)
    except (RuntimeFailure, TrainingError, OSError) as exc:
        print(f"grpo-plan: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
