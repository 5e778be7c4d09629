"""Procedure planning on synthetic task worlds.

Modules: ``autodiff`` (reverse-mode engine), ``taskworld`` (tasks and expert
demonstrations), ``context`` (start/goal context VAE), ``genmodel`` (Int and
Ext generators, behaviour policy), ``gail`` (adversarial training),
``planner`` (procedure and walk-through planning) and ``harness`` (metrics,
experiments, checkpoints, CLI).
"""

__version__ = "0.1.0"
