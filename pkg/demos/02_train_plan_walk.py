"""Train a small Ext model, plan actions between start and goal, order a pool.

Takes about twenty seconds on one core.
Run: python demos/02_train_plan_walk.py
"""
import numpy as np

from procplan.harness.config import ExperimentConfig
from procplan.harness.experiment import run_experiment
from procplan.harness.metrics import action_metrics, order_metrics, uniform_success_rate
from procplan.planner import PlanQuery, plan_procedure, walkthrough

config = ExperimentConfig.from_dict({
    "variant": "ext",
    "world": {"num_tasks": 4, "demos_per_task": 60, "seed": 3},
    "train": {"epochs": 80, "batch_size": 32},
})
res = run_experiment(config)
M = config.world.num_actions

print(res.metrics.table())
print(f"uniform T=3 success: {100 * uniform_success_rate(M, 3):.4f}%")

traj = res.test_set[0]
o1, oT = traj.observations[0], traj.observations[2]
plan = plan_procedure(PlanQuery(o1, oT, horizon=3), res.bundle)
print(f"\nexpert {traj.actions[:3].tolist()} planned {plan}")
print("success, accuracy, mIoU:", action_metrics(traj.actions[:3].tolist(), plan))

pool = traj.observations[:4]
shuffled = np.array([0, 2, 1, 3])  # interior swapped, endpoints fixed
walk = walkthrough(pool[0], pool[3], pool[shuffled], res.bundle)
recovered = [int(shuffled[i]) for i in walk.order]
print(f"\nshuffled pool {shuffled.tolist()} -> walk {recovered}")
print("hamming, pair accuracy:", order_metrics([0, 1, 2, 3], recovered))
