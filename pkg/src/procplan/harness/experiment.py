"""End-to-end experiment driver: world, split, training, evaluation, artifacts."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..gail import ModelBundle, TrainReport, train
from ..planner import plan_batch, walkthrough
from ..taskworld import World, sample_dataset, save_trajectories
from .checkpoint import save_checkpoint
from .config import ExperimentConfig
from .metrics import MetricsReport, uniform_baseline

log = logging.getLogger(__name__)

STAGE_FILE = "FAILED_STAGE"


class ExperimentError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class ExperimentResult:
    metrics: MetricsReport
    uniform: MetricsReport
    uniform_free: MetricsReport
    train_report: TrainReport
    bundle: ModelBundle
    test_set: list
    out_dir: Path | None = None


def split_dataset(dataset, test_fraction, rng):
    """Split by whole trajectory; returns ``(train_ids, test_ids)``."""
    idx = rng.permutation(len(dataset))
    n_train = int(round((1.0 - test_fraction) * len(dataset)))
    train_ids, test_ids = sorted(idx[:n_train].tolist()), sorted(idx[n_train:].tolist())
    assert not set(train_ids) & set(test_ids)
    return train_ids, test_ids


def eval_windows(trajectories, T, rng, per_trajectory=None):
    """``(trajectory index, start)`` of length-T evaluation windows."""
    out = []
    for i, tr in enumerate(trajectories):
        starts = list(range(len(tr) - T + 1))
        if per_trajectory is not None and len(starts) > per_trajectory:
            starts = sorted(rng.choice(starts, size=per_trajectory, replace=False).tolist())
        out.extend((i, m) for m in starts)
    return out


def evaluate(bundle, test_set, eval_cfg, rng, name="model"):
    """Procedure planning at every horizon plus walk-through planning."""
    rep = MetricsReport(name)
    for T in eval_cfg.horizons:
        wins = eval_windows(test_set, T, rng, eval_cfg.queries_per_trajectory)
        if not wins:
            continue
        o1 = np.stack([test_set[i].observations[m] for i, m in wins])
        oT = np.stack([test_set[i].observations[m + T - 1] for i, m in wins])
        pred = plan_batch(bundle, o1, oT, T, rng, eval_cfg.plan_mode, eval_cfg.num_samples,
                          eval_cfg.rollout_mode)
        for (i, m), p in zip(wins, pred):
            rep.add_plan(test_set[i].actions[m:m + T], p, trajectory=i, start=m)
    W = eval_cfg.walk_horizon
    for i, m in eval_windows(test_set, W, rng, eval_cfg.queries_per_trajectory):
        obs = test_set[i].observations[m:m + W]
        perm = np.concatenate([[0], 1 + rng.permutation(W - 2), [W - 1]])
        plan = walkthrough(obs[0], obs[-1], obs[perm], bundle)
        rep.add_walk(np.arange(W), perm[plan.order], trajectory=i, start=m)
    return rep


def baselines(report: MetricsReport, M, walk_horizon, rng):
    plans = [r["gt"] for r in report.records if r["kind"] == "plan"]
    walks = [walk_horizon] * sum(r["kind"] == "walk" for r in report.records)
    fixed = uniform_baseline(plans, M, rng, walks, fixed_endpoints=True, name="uniform")
    free = uniform_baseline(plans, M, rng, walks, fixed_endpoints=False, name="uniform_free")
    return fixed, free


class _Stage:
    name = None

    def __call__(self, name):
        self.name = name
        log.info("stage %s", name)


@dataclass
class DataSplit:
    world: World
    train_set: list
    test_set: list
    train_ids: list
    test_ids: list


def prepare_data(config: ExperimentConfig) -> DataSplit:
    """World, demonstrations and the seeded 70/30 trajectory split."""
    world = World(config.world)
    dataset = sample_dataset(world)
    train_ids, test_ids = split_dataset(dataset, config.eval.test_fraction,
                                        np.random.default_rng([config.seed, 101]))
    return DataSplit(world, [dataset[i] for i in train_ids], [dataset[i] for i in test_ids],
                     train_ids, test_ids)


def train_stage(config: ExperimentConfig, data: DataSplit, out=None):
    M, d_o = config.world.num_actions, config.world.obs_dim
    bundle, report = train(data.train_set, (M, d_o), config.train_config(), config.variant, config.ablations)
    if out is not None:
        (out / "config.json").write_text(config.to_json() + "\n", encoding="utf-8")
        (out / "split.json").write_text(json.dumps({"train": data.train_ids, "test": data.test_ids}) + "\n",
                                        encoding="utf-8")
        save_checkpoint(bundle, out / "model.ckpt")
        report.save(out / "train_report.jsonl")
    return bundle, report


def eval_stage(config: ExperimentConfig, bundle, data: DataSplit, out=None):
    metrics = evaluate(bundle, data.test_set, config.eval, np.random.default_rng([config.seed, 102]),
                       name=_run_name(config))
    fixed, free = baselines(metrics, config.world.num_actions, config.eval.walk_horizon,
                            np.random.default_rng([config.seed, 103]))
    if out is not None:
        for rep in (metrics, fixed, free):
            (out / f"metrics_{rep.name}.json").write_text(rep.to_json() + "\n", encoding="utf-8")
        with open(out / "queries.jsonl", "w", encoding="utf-8") as fh:
            for r in metrics.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    return metrics, fixed, free


def run_experiment(config: ExperimentConfig, out_dir=None, ablations=None) -> ExperimentResult:
    """Generate the world, split 70/30 by trajectory, train, evaluate, persist.

    Hindsight relabeling happens inside training, so it only ever sees the
    train split. Deterministic in ``config.seed``. On failure a
    ``FAILED_STAGE`` file names the stage and whatever artifacts were already
    written stay in place.
    """
    if ablations is not None:
        d = config.to_dict()
        d["ablations"] = list(ablations)
        config = ExperimentConfig.from_dict(d)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / STAGE_FILE).unlink(missing_ok=True)
    stage = _Stage()
    try:
        stage("data")
        data = prepare_data(config)
        stage("train")
        bundle, report = train_stage(config, data, out)
        stage("eval")
        metrics, fixed, free = eval_stage(config, bundle, data, out)
    except Exception as e:
        mark_failure(out, stage.name, e)
        raise ExperimentError(stage.name, e) from e
    return ExperimentResult(metrics, fixed, free, report, bundle, data.test_set, out)


def mark_failure(out, stage, err):
    if out is not None:
        (out / STAGE_FILE).write_text(f"{stage}\n{type(err).__name__}: {err}\n", encoding="utf-8")


def _run_name(config):
    return config.variant + "".join("-" + a for a in config.ablations)


def generate(config: ExperimentConfig, out_dir):
    """Write the world's task table and its full demonstration set."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    world = World(config.world)
    dataset = sample_dataset(world)
    save_trajectories(out / "trajectories.jsonl", dataset)
    tasks = [{"task_id": t.task_id, "steps": list(map(int, t.steps)),
              "precedence": sorted([int(i), int(j)] for i, j in t.precedence),
              "orders": t.num_linear_extensions} for t in world.tasks]
    (out / "world.json").write_text(json.dumps({"config": config.to_dict()["world"], "tasks": tasks},
                                               indent=1) + "\n", encoding="utf-8")
    return world, dataset


# ------------------------------------------------------------- embeddings

def embed_pairs(dataset, pairs_per_task, rng):
    """Endpoint pairs of randomly chosen trajectories, ``pairs_per_task`` per task."""
    by_task = {}
    for t in dataset:
        if not t.relabeled:
            by_task.setdefault(t.task_id, []).append(t)
    labels, o1, oT = [], [], []
    for task in sorted(by_task):
        trs = by_task[task]
        for k in rng.integers(0, len(trs), size=pairs_per_task):
            labels.append(task)
            o1.append(trs[k].observations[0])
            oT.append(trs[k].observations[-1])
    return np.array(labels), np.stack(o1), np.stack(oT)


def embed_dump(bundle, dataset, path=None, pairs_per_task=100, rng=None):
    """Posterior means of z_c for sampled (start, goal) pairs, written as CSV.

    Returns ``(labels, means)``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    labels, o1, oT = embed_pairs(dataset, pairs_per_task, rng)
    Z = bundle.context.encode(o1, oT).mean
    if path is not None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["task_id"] + [f"z{j}" for j in range(Z.shape[1])])
            for lab, z in zip(labels, Z):
                w.writerow([int(lab)] + [repr(float(x)) for x in z])
    return labels, Z


def read_embeddings(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    data = np.array(rows[1:], dtype=np.float64)
    return data[:, 0].astype(int), data[:, 1:]


def cluster_scores(labels, Z):
    """Silhouette (Euclidean) plus mean intra- and inter-task cosine similarity."""
    from sklearn.metrics import silhouette_score

    U = Z / np.maximum(np.linalg.norm(Z, axis=1, keepdims=True), 1e-12)
    C = U @ U.T
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    return {"silhouette": float(silhouette_score(Z, labels, metric="euclidean")),
            "intra_cosine": float(C[same & off].mean()),
            "inter_cosine": float(C[~same].mean())}
