"""Finite-difference checks of every learned component on random instances."""
from __future__ import annotations

import time

import numpy as np

from .. import autodiff as ad
from ..context import ContextVAE, elbo_loss
from ..gail import Discriminator, TrainConfig, discriminator_loss, make_policy_batch, policy_loss
from ..genmodel import BehaviorPolicy, ExtModel, IntModel, one_hot

COMPONENTS = ("context", "int_cell", "ext_transition", "policy", "discriminator")


def _jitter(params, rng, scale=0.3):
    # zero-initialised heads would make several gradients trivially zero
    for p in params.values():
        p.data[...] = scale * rng.standard_normal(p.shape)


def _context_case(rng, d=4, z=3, B=3):
    vae = ContextVAE(d, z, hidden=5, seed=int(rng.integers(1 << 30)))
    params = vae.named_parameters()
    _jitter(params, rng)
    o1, oT = rng.standard_normal((B, d)), rng.standard_normal((B, d))
    eps = rng.standard_normal((B, z))
    return (lambda: elbo_loss(vae, o1, oT, None, eps=eps)), params


def _int_case(rng, d=4, z=3, M=5, B=2, T=3):
    model = IntModel(d, z, M, seed=int(rng.integers(1 << 30)))
    params = model.named_parameters()
    _jitter(params, rng)
    zc = rng.standard_normal((B, z))
    Ws, Wl = rng.standard_normal((T, B, d)), rng.standard_normal((T, B, M))

    def loss():
        states, logits = model.rollout_graph(zc, T)
        tot = None
        for t in range(T):
            term = ad.sum(states[t] * Ws[t]) + ad.sum(ad.log_softmax(logits[t]) * Wl[t])
            tot = term if tot is None else tot + term
        return tot
    return loss, params


def _ext_case(rng, d=4, z=3, M=5, B=3):
    model = ExtModel(d, z, M, hidden=6, policy_hidden=5, seed=int(rng.integers(1 << 30)))
    params = {k: v for k, v in model.named_parameters().items() if k.startswith("ext.transition")}
    _jitter(params, rng, 0.2)
    s, a, zc = rng.standard_normal((B, d)), one_hot(rng.integers(0, M, B), M), rng.standard_normal((B, z))
    Wm, Wv = rng.standard_normal((B, d)), rng.standard_normal((B, d))
    eps = rng.standard_normal((B, d))

    def loss():
        mu, lv = model.transition_graph(ad.Tensor(s), ad.Tensor(a), ad.Tensor(zc))
        s_next = ad.reparameterize(mu, lv, eps)
        return ad.sum(s_next * Wm) + ad.sum(lv * Wv)
    return loss, params


def _policy_case(rng, d=4, z=3, M=5, B=2, T=3):
    model = ExtModel(d, z, M, hidden=6, policy_hidden=5, seed=int(rng.integers(1 << 30)))
    params = {k: v for k, v in model.named_parameters().items() if k.startswith("ext.policy")}
    _jitter(params, rng)
    beta = BehaviorPolicy(d, M, hidden=5, seed=1)
    _jitter(beta.named_parameters(), rng)
    disc = Discriminator(d, M, hidden=5, seed=2)
    _jitter(disc.named_parameters(), rng)
    batch = make_policy_batch(rng.standard_normal((B, T, d)), beta, disc, 0.9, rng)
    expert = rng.integers(0, M, (B, T))
    cfg = TrainConfig(ratio_clip=(1e-6, 1e6))   # keep the ratio off its clip kinks
    return (lambda: policy_loss(model, batch, expert, cfg)[0]), params


def _disc_case(rng, d=4, M=5, B=4):
    disc = Discriminator(d, M, hidden=5, seed=int(rng.integers(1 << 30)))
    params = disc.named_parameters()
    _jitter(params, rng)
    es, gs = rng.standard_normal((B, d)), rng.standard_normal((B, d))
    ea, ga = one_hot(rng.integers(0, M, B), M), one_hot(rng.integers(0, M, B), M)
    return (lambda: discriminator_loss(disc, es, ea, gs, ga)), params


_CASES = {"context": _context_case, "int_cell": _int_case, "ext_transition": _ext_case,
          "policy": _policy_case, "discriminator": _disc_case}


def gradcheck_suite(instances=20, seed=0, h=1e-5, components=COMPONENTS):
    """Max relative gradient error per component over ``instances`` random builds.

    Returns ``{component: {"max_rel_error": float, "instances": n, "seconds": t}}``.
    """
    rng = np.random.default_rng([seed, 77])
    out = {}
    for name in components:
        t0, worst = time.perf_counter(), 0.0
        for _ in range(instances):
            loss_fn, params = _CASES[name](rng)
            errs = ad.gradcheck(loss_fn, params, h)
            worst = max(worst, max(errs.values()))
        out[name] = {"max_rel_error": worst, "instances": instances, "seconds": time.perf_counter() - t0}
    return out
