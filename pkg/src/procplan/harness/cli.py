"""Command-line entry point: ``procplan <command> [--config PATH] [--seed N] [--out DIR]``.

Log verbosity comes from the ``PROCPLAN_LOG`` environment variable
(``DEBUG``, ``INFO``, ``WARNING``; default ``WARNING``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ..gail import ABLATIONS
from ..planner import PlanQuery, plan_procedure, walkthrough
from ..taskworld import load_trajectories
from .checkpoint import load_bundle
from .config import ExperimentConfig, load_config
from .experiment import (
    STAGE_FILE, cluster_scores, embed_dump, eval_stage, generate, mark_failure, prepare_data, train_stage,
)

log = logging.getLogger("procplan")


def _config(args, saved=False) -> ExperimentConfig:
    """Config from ``--config``; with ``saved`` fall back to the one a training run left in ``--out``."""
    path = args.config
    if path is None and saved and (Path(args.out) / "config.json").exists():
        path = Path(args.out) / "config.json"
    cfg = load_config(path) if path else ExperimentConfig()
    d = cfg.to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "variant", None):
        d["variant"] = args.variant
    if getattr(args, "ablate", None) is not None:
        d["ablations"] = [a for a in args.ablate.split(",") if a]
    return ExperimentConfig.from_dict(d)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_path(args, out):
    return Path(args.checkpoint) if args.checkpoint else out / "model.ckpt"


def _write_lines(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


def _queries(args, cfg):
    """Trajectories to plan on: ``--data`` if given, else the regenerated test split."""
    if args.data:
        return load_trajectories(args.data, cfg.world.num_actions)
    return prepare_data(cfg).test_set


def cmd_gen(args):
    cfg, out = _config(args), _out(args)
    world, dataset = generate(cfg, out)
    print(f"wrote {len(dataset)} trajectories over {len(world.tasks)} tasks to {out}")


def cmd_train(args):
    cfg, out = _config(args), _out(args)
    data = prepare_data(cfg)
    bundle, report = train_stage(cfg, data, out)
    last = report.records[-1] if report.records else {}
    print(f"trained {cfg.variant} {','.join(cfg.ablations) or '(full)'}; "
          f"final distance {last.get('distance', float('nan')):.4f}; checkpoint {out / 'model.ckpt'}")


def cmd_eval(args):
    cfg, out = _config(args, saved=True), _out(args)
    bundle = load_bundle(_checkpoint_path(args, out))
    metrics, fixed, free = eval_stage(cfg, bundle, prepare_data(cfg), out)
    for rep in (metrics, fixed, free):
        print(rep.name)
        print(rep.table())


def cmd_plan(args):
    cfg, out = _config(args, saved=True), _out(args)
    bundle = load_bundle(_checkpoint_path(args, out))
    rng = np.random.default_rng([cfg.seed, 201])
    T = args.horizon
    records = []
    for tr in _queries(args, cfg):
        if len(tr) < args.start + T:
            continue
        q = PlanQuery(tr.observations[args.start], tr.observations[args.start + T - 1], T,
                      mode=args.mode, num_samples=args.samples)
        acts = plan_procedure(q, bundle, rng)
        records.append({"actions": [int(a) for a in acts], "walk_order": [], "scores": [],
                        "task_id": tr.task_id, "gt": tr.actions[args.start:args.start + T].tolist()})
    _write_lines(out / "plans.jsonl", records)
    hits = sum(r["actions"] == r["gt"] for r in records)
    print(f"{len(records)} plans written to {out / 'plans.jsonl'}; exact matches {hits}")


def cmd_walk(args):
    cfg, out = _config(args, saved=True), _out(args)
    bundle = load_bundle(_checkpoint_path(args, out))
    rng = np.random.default_rng([cfg.seed, 202])
    T = args.horizon
    records = []
    for tr in _queries(args, cfg):
        if len(tr) < args.start + T:
            continue
        obs = tr.observations[args.start:args.start + T]
        perm = np.concatenate([[0], 1 + rng.permutation(T - 2), [T - 1]])
        plan = walkthrough(obs[0], obs[-1], obs[perm], bundle, greedy=args.greedy)
        records.append({"actions": [], "walk_order": plan.order, "scores": plan.scores,
                        "pool_order": perm.tolist(), "recovered": perm[plan.order].tolist()})
    _write_lines(out / "walks.jsonl", records)
    exact = sum(r["recovered"] == list(range(T)) for r in records)
    print(f"{len(records)} walks written to {out / 'walks.jsonl'}; fully recovered {exact}")


def cmd_embed(args):
    cfg, out = _config(args, saved=True), _out(args)
    bundle = load_bundle(_checkpoint_path(args, out))
    path = out / "embeddings.csv"
    labels, Z = embed_dump(bundle, _queries(args, cfg), path, args.pairs, np.random.default_rng([cfg.seed, 203]))
    scores = cluster_scores(labels, Z)
    (out / "embedding_scores.json").write_text(json.dumps(scores, indent=1) + "\n", encoding="utf-8")
    print(f"{len(labels)} embeddings written to {path}; " + ", ".join(f"{k} {v:.4f}" for k, v in scores.items()))


def cmd_gradcheck(args):
    from .gradsuite import gradcheck_suite

    seed = 0 if args.seed is None else args.seed
    res = gradcheck_suite(instances=args.instances, seed=seed)
    ok = True
    for name, r in res.items():
        good = r["max_rel_error"] < args.tol
        ok &= good
        print(f"{name:15s} max rel error {r['max_rel_error']:.3e} over {r['instances']} instances "
              f"({r['seconds']:.1f}s) {'ok' if good else 'FAIL'}")
    if args.out:
        (_out(args) / "gradcheck.json").write_text(json.dumps(res, indent=1) + "\n", encoding="utf-8")
    if not ok:
        raise RuntimeError(f"gradient error above {args.tol}")


def cmd_plot(args):
    from .plot import render

    out = _out(args)
    for p in render(args.input, out, svg=not args.no_svg):
        print(p)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="experiment seed (split, training, evaluation)")
    common.add_argument("--out", default="runs/default", help="output directory")

    ck = argparse.ArgumentParser(add_help=False)
    ck.add_argument("--checkpoint", help="model checkpoint (default: OUT/model.ckpt)")
    ck.add_argument("--data", help="trajectory file (default: the regenerated test split)")

    p = argparse.ArgumentParser(prog="procplan", description="Procedure planning on synthetic task worlds.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="write the world and its demonstrations")
    t = sub.add_parser("train", parents=[common], help="train a model on the train split")
    t.add_argument("--variant", choices=("int", "ext"))
    t.add_argument("--ablate", help=f"comma-separated subset of {','.join(ABLATIONS)}")
    sub.add_parser("eval", parents=[common, ck], help="evaluate a checkpoint on the test split")
    pl = sub.add_parser("plan", parents=[common, ck], help="plan actions between two observations")
    pl.add_argument("--horizon", type=int, default=3)
    pl.add_argument("--start", type=int, default=0, help="index of the start observation")
    pl.add_argument("--mode", choices=("mean", "sample"), default="mean")
    pl.add_argument("--samples", type=int, default=1)
    w = sub.add_parser("walk", parents=[common, ck], help="order a shuffled observation pool")
    w.add_argument("--horizon", type=int, default=4)
    w.add_argument("--start", type=int, default=0)
    w.add_argument("--greedy", action="store_true", help="greedy ordering instead of the exact solver")
    e = sub.add_parser("embed", parents=[common, ck], help="dump context embeddings as CSV")
    e.add_argument("--pairs", type=int, default=100, help="pairs per task")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--tol", type=float, default=1e-4)
    g.set_defaults(out=None)
    pt = sub.add_parser("plot", parents=[common], help="render a training log or metrics file")
    pt.add_argument("input")
    pt.add_argument("--no-svg", action="store_true")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "plan": cmd_plan, "walk": cmd_walk,
            "embed": cmd_embed, "gradcheck": cmd_gradcheck, "plot": cmd_plot}


def main(argv=None):
    level = getattr(logging, os.environ.get("PROCPLAN_LOG", "WARNING").upper(), logging.WARNING)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "out", None):
        (Path(args.out) / STAGE_FILE).unlink(missing_ok=True)
    try:
        COMMANDS[args.command](args)
    except Exception as e:  # report the failing stage, keep the traceback in debug logs
        log.debug("command failed", exc_info=True)
        if getattr(args, "out", None) and Path(args.out).is_dir():
            mark_failure(Path(args.out), args.command, e)
        print(f"procplan: stage {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
