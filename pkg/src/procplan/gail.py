"""Model-based adversarial imitation: discriminator, transition and policy updates.

Per batch of expert trajectories the generator is rolled out from the
inferred context, then three steps run in order:

1. discriminator ascent on ``E_pi[log(1 - D(s, a))] + E_E[log D(s_E, a_E)]``
2. transition descent on ``log(1 - D(T(s_{t-1}, a_{t-1}, z), a_E_t))`` plus a
   squared distance to the expert state
3. policy gradient with behaviour-policy importance weights, Monte-Carlo
   returns of ``log D`` and an entropy bonus

A cross-entropy "sequence mapping" term on the expert actions is added to
both generator steps; the ablations switch the adversarial pieces off.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .context import ContextTrainConfig, ContextVAE, train_context
from .genmodel import BehaviorPolicy, ExtModel, IntModel, cross_entropy, one_hot, softmax_np
from .layers import MLP
from .taskworld import her_relabel

log = logging.getLogger(__name__)

ABLATIONS = ("no_reward", "no_disc", "no_her")
BETA_FLOOR = 1e-8
BASELINES = ("state", "batch", "none")


def parse_ablations(flags) -> frozenset:
    if isinstance(flags, str):
        flags = [f for f in flags.split(",") if f]
    flags = frozenset(flags or ())
    unknown = flags - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation flag(s): {sorted(unknown)}")
    return flags


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr_disc: float = 1e-3
    lr_transition: float = 3e-3
    lr_policy: float = 3e-3
    entropy_weight: float = 0.01
    gamma: float = 0.99
    ratio_clip: tuple[float, float] = (0.1, 10.0)
    distance_weight: float = 1.0
    adversarial_weight: float = 1.0
    seq_weight: float = 1.0
    baseline: str = "state"     # "state", "batch" or "none"
    her_fraction: float = 0.30
    bc_epochs: int = 30
    z_dim: int = 16
    context_hidden: int = 64
    transition_hidden: int = 128
    policy_hidden: int = 64
    disc_hidden: int = 64
    context: ContextTrainConfig = field(default_factory=ContextTrainConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.context, dict):
            self.context = ContextTrainConfig(**self.context)
        self.ratio_clip = tuple(float(x) for x in self.ratio_clip)
        lo, hi = self.ratio_clip
        if not 0 < lo <= 1 <= hi:
            raise ValueError(f"ratio_clip must satisfy 0 < lo <= 1 <= hi, got {self.ratio_clip}")
        if self.entropy_weight < 0:
            raise ValueError("entropy_weight must be >= 0")
        if not 0 <= self.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        if self.baseline not in BASELINES:
            raise ValueError(f"baseline must be one of {BASELINES}, got {self.baseline!r}")


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    diverged: bool = False
    is_clamp_events: int = 0
    # per-epoch context VAE records (loss, kl, kl_min, ...)
    context_curve: list = field(default_factory=list)

    def to_lines(self):
        keys = ("epoch", "loss_D", "loss_T", "loss_pi", "mean_reward", "entropy")
        return [json.dumps({k: r[k] for k in keys}) for r in self.records]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.to_lines():
                fh.write(line + "\n")


class Discriminator:
    """``D(s, a) = sigmoid(f([s; a]))`` with a zero-initialised output layer."""

    def __init__(self, state_dim, num_actions, hidden=64, seed=0):
        rng = np.random.default_rng([seed, 31])
        self.state_dim, self.num_actions = state_dim, num_actions
        self.net = MLP(rng, [state_dim + num_actions, hidden, 1], zero_last=True)

    def named_parameters(self):
        return self.net.named_parameters("disc")

    def logit(self, s, a_repr):
        return self.net(ad.concat([ad.as_tensor(s), ad.as_tensor(a_repr)]))

    def forward(self, s, a_repr):
        """Returns ``(D, reward)`` arrays with ``reward = log D``."""
        lg = self.logit(np.atleast_2d(s), np.atleast_2d(a_repr)).data[:, 0]
        return 1.0 / (1.0 + np.exp(-lg)), -np.logaddexp(0.0, -lg)


def disc_forward(disc: Discriminator, s, a_repr):
    return disc.forward(s, a_repr)


def discriminator_loss(disc, expert_s, expert_a, gen_s, gen_a):
    """Negated discriminator objective (so descending it ascends the objective)."""
    real = disc.logit(expert_s, expert_a)
    fake = disc.logit(gen_s, gen_a)
    return ad.neg(ad.mean(ad.log_sigmoid(real)) + ad.mean(ad.log_sigmoid(ad.neg(fake))))


def disc_update(disc, opt, expert_s, expert_a, gen_s, gen_a):
    if len(expert_s) == 0 or len(gen_s) == 0:
        raise ValueError("disc_update needs non-empty expert and generated batches")
    loss = discriminator_loss(disc, expert_s, expert_a, gen_s, gen_a)
    if not np.isfinite(loss.item()):
        raise FloatingPointError("non-finite discriminator loss")
    ad.backward(loss)
    opt.step()
    return loss.item()


def transition_loss(disc, states, logits, expert_obs, expert_actions, config, ablations=frozenset()):
    """Adversarial + distance (+ sequence-mapping) loss on a rollout graph.

    ``states``/``logits`` are per-step tensors (B, d) / (B, M); the
    adversarial term pairs generated states with the expert actions.
    """
    T = len(states)
    M = logits[0].shape[1]
    total = None
    parts = {}
    S = ad.concat(states, axis=0)
    E = np.concatenate([expert_obs[:, t] for t in range(T)], axis=0)
    A = np.concatenate([expert_actions[:, t] for t in range(T)], axis=0)
    dist = ad.mean(ad.sum(ad.square(S - E), axis=-1))
    parts["distance"] = dist.item()
    total = ad.mul(dist, config.distance_weight)
    if "no_disc" not in ablations and config.adversarial_weight:
        adv = ad.mean(ad.log_sigmoid(ad.neg(disc.logit(S, one_hot(A, M)))))
        parts["adversarial"] = adv.item()
        total = total + ad.mul(adv, config.adversarial_weight)
    if config.seq_weight:
        seq = cross_entropy(ad.concat(logits, axis=0), A)
        parts["seq"] = seq.item()
        total = total + ad.mul(seq, config.seq_weight)
    return total, parts


def transition_update(opt, disc, states, logits, expert_obs, expert_actions, config, ablations=frozenset()):
    loss, parts = transition_loss(disc, states, logits, expert_obs, expert_actions, config, ablations)
    if not np.isfinite(loss.item()):
        raise FloatingPointError("non-finite transition loss")
    ad.backward(loss)
    opt.step()
    return loss.item(), parts


def discounted_returns(rewards, gamma):
    """Q_t = r_t + gamma * Q_{t+1}, Q_{T+1} = 0, along the last axis."""
    rewards = np.asarray(rewards, dtype=np.float64)
    Q = np.zeros_like(rewards)
    nxt = np.zeros(rewards.shape[:-1])
    for t in range(rewards.shape[-1] - 1, -1, -1):
        nxt = rewards[..., t] + gamma * nxt
        Q[..., t] = nxt
    return Q


def categorical_entropy(probs):
    p = np.clip(probs, 1e-300, 1.0)
    return -(probs * np.log(p)).sum(axis=-1)


@dataclass
class PolicyBatch:
    """Detached rollout states and the quantities the policy step consumes."""
    states: np.ndarray          # (B, T, d)
    actions: np.ndarray         # (B, T) sampled from the behaviour policy
    beta_probs: np.ndarray      # (B, T) beta(a|s)
    rewards: np.ndarray         # (B, T) log D(s, a)
    returns: np.ndarray         # (B, T)
    clamp_events: int = 0
    # (B, T) expected return under beta at the visited states
    values: np.ndarray | None = None


def make_policy_batch(states, beta, disc, gamma, rng):
    B, T, d = states.shape
    flat = states.reshape(B * T, d)
    bprobs = beta.forward(flat)
    M = bprobs.shape[1]
    u = rng.random((len(flat), 1))
    acts = np.minimum((bprobs.cumsum(axis=1) < u).sum(axis=1), M - 1)
    bsel = bprobs[np.arange(len(flat)), acts]
    events = int((bsel < BETA_FLOOR).sum())
    bsel = np.maximum(bsel, BETA_FLOOR)
    # log D for every action at every state; the sampled column is the reward
    _, table = disc.forward(np.repeat(flat, M, axis=0), np.tile(np.eye(M), (len(flat), 1)))
    table = table.reshape(B * T, M)
    rew = table[np.arange(len(flat)), acts].reshape(B, T)
    expected = (bprobs * table).sum(axis=1).reshape(B, T)
    return PolicyBatch(states, acts.reshape(B, T), bsel.reshape(B, T), rew,
                       discounted_returns(rew, gamma), events,
                       discounted_returns(expected, gamma))


def advantages(batch: PolicyBatch, kind):
    if kind == "state":
        return batch.returns - batch.values
    if kind == "batch":
        return batch.returns - batch.returns.mean(axis=0, keepdims=True)
    return batch.returns


def importance_ratios(pi_probs, beta_probs, clip):
    # both sides floored so that pi == beta gives exactly 1 even for
    # actions beta all but rules out
    return np.clip(np.maximum(pi_probs, BETA_FLOOR) / np.maximum(beta_probs, BETA_FLOOR), *clip)


def policy_loss(model, batch: PolicyBatch, expert_actions, config, ablations=frozenset()):
    B, T, d = batch.states.shape
    S = Tensor(batch.states.reshape(B * T, d))
    logits = model.policy_logits(S)
    logp = ad.log_softmax(logits)
    M = logits.shape[1]
    acts = batch.actions.reshape(-1)
    ent = ad.neg(ad.mean(ad.sum(ad.exp(logp) * logp, axis=-1)))
    parts = {"entropy": ent.item()}
    total = ad.mul(ent, -config.entropy_weight)
    if "no_reward" not in ablations:
        # surrogate -mean(clip(pi/beta) * A); inside the clip range its gradient
        # is the importance-weighted score-function estimator
        logp_sel = ad.sum(logp * one_hot(acts, M), axis=-1)
        inv_beta = 1.0 / np.maximum(batch.beta_probs.reshape(-1), BETA_FLOOR)
        ratio = ad.clip(ad.mul(ad.exp(logp_sel), inv_beta), *config.ratio_clip)
        adv = advantages(batch, config.baseline).reshape(-1)
        pg = ad.mul(ad.sum(ratio * adv), -1.0 / (B * T))
        parts["pg"] = pg.item()
        total = total + pg
    if config.seq_weight:
        A = expert_actions.reshape(-1)
        seq = cross_entropy(logits, A)
        parts["seq"] = seq.item()
        total = total + ad.mul(seq, config.seq_weight)
    return total, parts


def policy_update(opt, model, batch, expert_actions, config, ablations=frozenset()):
    loss, parts = policy_loss(model, batch, expert_actions, config, ablations)
    if not np.isfinite(loss.item()):
        raise FloatingPointError("non-finite policy loss")
    ad.backward(loss)
    opt.step()
    return loss.item(), parts


# ----------------------------------------------------------------- training

@dataclass
class ModelBundle:
    """Everything a planner needs: context VAE, generator, discriminator, behaviour policy."""
    variant: str
    context: ContextVAE
    generator: object
    discriminator: Discriminator
    behavior: BehaviorPolicy
    num_actions: int
    obs_dim: int
    z_dim: int
    config: dict = field(default_factory=dict)
    seed: int = 0

    def named_parameters(self):
        out = {}
        for part in (self.context, self.generator, self.discriminator, self.behavior):
            out.update(part.named_parameters())
        return out

    def context_of(self, o1, oT):
        return self.context.encode(o1, oT)


def build_bundle(variant, obs_dim, num_actions, config: TrainConfig) -> ModelBundle:
    if variant not in ("int", "ext"):
        raise ValueError(f"variant must be 'int' or 'ext', got {variant!r}")
    s = config.seed
    ctx = ContextVAE(obs_dim, config.z_dim, config.context_hidden, seed=s)
    if variant == "int":
        gen = IntModel(obs_dim, config.z_dim, num_actions, seed=s)
    else:
        gen = ExtModel(obs_dim, config.z_dim, num_actions, config.transition_hidden,
                       config.policy_hidden, seed=s)
    disc = Discriminator(obs_dim, num_actions, config.disc_hidden, seed=s)
    beta = BehaviorPolicy(obs_dim, num_actions, config.policy_hidden, seed=s)
    return ModelBundle(variant, ctx, gen, disc, beta, num_actions, obs_dim, config.z_dim,
                       config=asdict(config), seed=s)


class Trainer:
    def __init__(self, bundle: ModelBundle, config: TrainConfig, ablations=frozenset()):
        self.bundle, self.config = bundle, config
        self.ablations = parse_ablations(ablations)
        self.opt_disc = ad.Adam(bundle.discriminator.named_parameters().values(), lr=config.lr_disc)
        self.opt_trans = ad.Adam(bundle.generator.transition_parameters(), lr=config.lr_transition)
        self.opt_policy = ad.Adam(bundle.generator.policy_parameters(), lr=config.lr_policy)
        self.clamp_events = 0

    def contexts(self, obs):
        return self.bundle.context.encode(obs[:, 0], obs[:, -1]).mean

    def step(self, obs, actions, rng):
        """One D -> T -> pi update on a batch of equal-length expert trajectories."""
        cfg, b = self.config, self.bundle
        B, T, _ = obs.shape
        M = b.num_actions
        z = self.contexts(obs)
        states, logits = b.generator.rollout_graph(Tensor(z), T, rng, sample=True)
        S = np.stack([s.data for s in states], axis=1)
        rec = {}

        if "no_disc" not in self.ablations:
            gp = softmax_np(np.stack([lg.data for lg in logits], axis=1)).reshape(B * T, M)
            u = rng.random((B * T, 1))
            gen_a = np.minimum((gp.cumsum(axis=1) < u).sum(axis=1), M - 1)
            rec["loss_D"] = disc_update(
                b.discriminator, self.opt_disc,
                obs.reshape(B * T, -1), one_hot(actions.reshape(-1), M),
                S.reshape(B * T, -1), one_hot(gen_a, M))
        else:
            rec["loss_D"] = 0.0

        # time-major expert arrays for the per-step state lists
        rec["loss_T"], tparts = transition_update(
            self.opt_trans, b.discriminator, states, logits, obs, actions, cfg, self.ablations)
        rec["grad_norm_T"] = _grad_norm(self.opt_trans.params)

        pb = make_policy_batch(S, b.behavior, b.discriminator, cfg.gamma, rng)
        self.clamp_events += pb.clamp_events
        rec["loss_pi"], pparts = policy_update(
            self.opt_policy, b.generator, pb, actions, cfg, self.ablations)
        rec["grad_norm_pi"] = _grad_norm(self.opt_policy.params)
        rec["mean_reward"] = float(pb.rewards.mean())
        rec["entropy"] = pparts["entropy"]
        rec["distance"] = tparts["distance"]
        return rec


def _grad_norm(params):
    return float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))


def _length_batches(dataset, batch_size, rng):
    by_len = {}
    for i, t in enumerate(dataset):
        by_len.setdefault(len(t), []).append(i)
    batches = []
    for T in sorted(by_len):
        idx = rng.permutation(by_len[T])
        batches.extend(idx[k:k + batch_size] for k in range(0, len(idx), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def prepare_dataset(dataset, config: TrainConfig, ablations=frozenset()):
    """Originals plus hindsight-relabeled slices, unless ``no_her`` is set."""
    originals = [t for t in dataset if not t.relabeled]
    if "no_her" in parse_ablations(ablations):
        return originals
    rng = np.random.default_rng([config.seed, 41])
    return her_relabel(originals, config.her_fraction, rng)


def train(dataset, world_dims, config: TrainConfig | None = None, variant="ext",
          ablations=frozenset(), bundle: ModelBundle | None = None):
    """Train context VAE, behaviour policy and the adversarial generator.

    ``world_dims`` is ``(num_actions, obs_dim)``. Returns ``(bundle, report)``.
    """
    config = config or TrainConfig()
    ablations = parse_ablations(ablations)
    M, d_o = world_dims
    data = prepare_dataset(dataset, config, ablations)
    if not data:
        raise ValueError("train needs a non-empty dataset")
    if bundle is None:
        bundle = build_bundle(variant, d_o, M, config)
    ctx_cfg = config.context
    _, curve = train_context(data, ctx_cfg, vae=bundle.context)
    bundle.behavior.fit(data, epochs=config.bc_epochs, seed=config.seed)

    trainer = Trainer(bundle, config, ablations)
    report = TrainReport(context_curve=curve)
    rng = np.random.default_rng([config.seed, 42])
    params = bundle.generator.named_parameters() | bundle.discriminator.named_parameters()
    snapshot = {k: p.data.copy() for k, p in params.items()}
    for epoch in range(config.epochs):
        recs = []
        try:
            for idx in _length_batches(data, config.batch_size, rng):
                obs = np.stack([data[i].observations for i in idx])
                acts = np.stack([data[i].actions for i in idx])
                recs.append(trainer.step(obs, acts, rng))
        except FloatingPointError as e:
            log.warning("training diverged at epoch %d (%s); restoring last finite parameters", epoch, e)
            for k, p in params.items():
                p.data[...] = snapshot[k]
            report.diverged = True
            break
        snapshot = {k: p.data.copy() for k, p in params.items()}
        summary = {k: float(np.mean([r[k] for r in recs])) for k in recs[0]}
        summary["epoch"] = epoch
        report.records.append(summary)
        log.debug("epoch %d %s", epoch, summary)
    report.is_clamp_events = trainer.clamp_events
    return bundle, report
