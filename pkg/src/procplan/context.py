"""Predictive VAE that infers a task context vector from a (start, goal) pair."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Dense

log = logging.getLogger(__name__)

LOG_VAR_RANGE = (-10.0, 10.0)


@dataclass
class ContextPosterior:
    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_var = np.clip(np.asarray(self.log_var, dtype=np.float64), *LOG_VAR_RANGE)


@dataclass
class ContextTrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    kl_weight: float = 1.0
    seed: int = 0


class ContextVAE:
    """Two parallel observation encoders fused into a diagonal Gaussian over z_c,
    and a decoder with one reconstruction head per observation."""

    def __init__(self, obs_dim, z_dim=16, hidden=64, seed=0):
        rng = np.random.default_rng([seed, 11])
        self.obs_dim, self.z_dim, self.hidden = obs_dim, z_dim, hidden
        self.enc_start = Dense(rng, obs_dim, hidden)
        self.enc_goal = Dense(rng, obs_dim, hidden)
        self.fuse = Dense(rng, 2 * hidden, hidden)
        self.head_mean = Dense(rng, hidden, z_dim, zero=True)
        self.head_log_var = Dense(rng, hidden, z_dim, zero=True)
        self.dec = Dense(rng, z_dim, hidden)
        self.dec_start = Dense(rng, hidden, obs_dim)
        self.dec_goal = Dense(rng, hidden, obs_dim)

    def named_parameters(self):
        out = {}
        for name in ("enc_start", "enc_goal", "fuse", "head_mean", "head_log_var",
                     "dec", "dec_start", "dec_goal"):
            out.update(getattr(self, name).named_parameters(f"context.{name}"))
        return out

    def encode_graph(self, o1, oT):
        o1, oT = ad.as_tensor(o1), ad.as_tensor(oT)
        for o in (o1, oT):
            if o.ndim != 2 or o.shape[1] != self.obs_dim:
                raise ad.ShapeError(f"encode: expected (batch, {self.obs_dim}) observations, got {o.shape}")
        h = ad.concat([ad.tanh(self.enc_start(o1)), ad.tanh(self.enc_goal(oT))])
        h = ad.tanh(self.fuse(h))
        return self.head_mean(h), ad.clip(self.head_log_var(h), *LOG_VAR_RANGE)

    def decode_graph(self, z):
        h = ad.tanh(self.dec(z))
        return self.dec_start(h), self.dec_goal(h)

    def encode(self, o1, oT) -> ContextPosterior:
        """Posterior for one pair of 1-D observations, or a batch of pairs."""
        o1, oT = np.asarray(o1, dtype=np.float64), np.asarray(oT, dtype=np.float64)
        single = o1.ndim == 1
        if single:
            o1, oT = o1[None], oT[None]
        mu, lv = self.encode_graph(Tensor(o1), Tensor(oT))
        if single:
            return ContextPosterior(mu.data[0], lv.data[0])
        return ContextPosterior(mu.data, lv.data)


def sample_context(post: ContextPosterior, rng, eps=None) -> np.ndarray:
    """Reparameterised draw z = mean + exp(log_var / 2) * eps."""
    if eps is None:
        eps = rng.standard_normal(post.mean.shape)
    return post.mean + np.exp(0.5 * post.log_var) * eps


def kl_to_standard_normal(mu, log_var):
    """Closed-form KL(N(mu, diag exp(log_var)) || N(0, I)) per row."""
    # expm1 keeps exp(v) - 1 - v >= 0 in floating point for tiny v
    terms = ad.square(mu) + (ad.expm1(log_var) - log_var)
    return ad.mul(ad.sum(terms, axis=-1), 0.5)


def elbo_loss(vae: ContextVAE, o1, oT, rng, kl_weight=1.0, eps=None, parts=False):
    """Negative ELBO averaged over the batch (unit-variance Gaussian decoder)."""
    o1, oT = np.atleast_2d(o1), np.atleast_2d(oT)
    if len(o1) == 0:
        raise ValueError("elbo_loss needs a non-empty batch")
    mu, lv = vae.encode_graph(o1, oT)
    if eps is None:
        eps = rng.standard_normal(mu.shape)
    z = ad.reparameterize(mu, lv, eps)
    r1, rT = vae.decode_graph(z)
    recon = ad.mul(ad.sum(ad.square(r1 - o1), axis=-1) + ad.sum(ad.square(rT - oT), axis=-1), 0.5)
    kl = kl_to_standard_normal(mu, lv)
    loss = ad.mean(recon) + ad.mul(ad.mean(kl), kl_weight)
    if parts:
        goal_recon = ad.mean(ad.mul(ad.sum(ad.square(rT - oT), axis=-1), 0.5))
        return loss, {"recon": float(recon.data.mean()), "kl": kl.data, "goal_recon": goal_recon.item()}
    return loss


def endpoint_pairs(dataset):
    o1 = np.stack([t.observations[0] for t in dataset])
    oT = np.stack([t.observations[-1] for t in dataset])
    return o1, oT


class TrainingDiverged(RuntimeError):
    pass


def train_context(dataset, config: ContextTrainConfig | None = None, vae: ContextVAE | None = None,
                  z_dim=16, hidden=64):
    """Fit a :class:`ContextVAE` on the (first, last) observation of every trajectory.

    Returns ``(vae, curve)`` where ``curve`` holds one dict per epoch. On a
    non-finite loss the parameters of the last finite epoch are restored and
    training stops.
    """
    config = config or ContextTrainConfig()
    if not dataset:
        raise ValueError("train_context needs a non-empty dataset")
    o1, oT = endpoint_pairs(dataset)
    if vae is None:
        vae = ContextVAE(o1.shape[1], z_dim=z_dim, hidden=hidden, seed=config.seed)
    params = vae.named_parameters()
    opt = ad.Adam(params.values(), lr=config.lr)
    rng = np.random.default_rng([config.seed, 12])
    curve = []
    snapshot = {k: p.data.copy() for k, p in params.items()}
    for epoch in range(config.epochs):
        order = rng.permutation(len(o1))
        tot = rec = 0.0
        kl_min = np.inf
        diverged = False
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, info = elbo_loss(vae, o1[idx], oT[idx], rng, config.kl_weight, parts=True)
            if not np.isfinite(loss.item()):
                diverged = True
                break
            kl_min = min(kl_min, float(info["kl"].min()))
            assert kl_min >= -1e-12, "KL divergence went negative"
            ad.backward(loss)
            opt.step()
            tot += loss.item() * len(idx)
            rec += info["recon"] * len(idx)
        if diverged:
            log.warning("context training diverged at epoch %d; restoring last finite parameters", epoch)
            for k, p in params.items():
                p.data[...] = snapshot[k]
            break
        snapshot = {k: p.data.copy() for k, p in params.items()}
        curve.append({"epoch": epoch, "loss": tot / len(o1), "recon": rec / len(o1), "kl_min": kl_min})
        log.debug("context epoch %d loss %.4f", epoch, curve[-1]["loss"])
    return vae, curve
