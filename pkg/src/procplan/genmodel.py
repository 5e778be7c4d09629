"""Generation models: policy + transition rolled out from a context vector.

Two stacks share one interface:

* :class:`IntModel` keeps the transition inside a modified LSTM cell. The
  cell state is the planning state ``s_t`` and the short-term hidden vector
  plays the role of the action; everything is deterministic.
* :class:`ExtModel` uses a separate Gaussian transition network and a
  categorical policy network.

States live in observation space (``d_s == obs_dim``) so generated and
expert states can be compared directly. Rollouts start from the zero state
and zero action and see the goal only through ``z``.
"""
from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import MLP, Dense, glorot

log = logging.getLogger(__name__)

EXT_LOG_VAR_RANGE = (-10.0, 2.0)


def softmax_np(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(ids, M):
    ids = np.asarray(ids)
    out = np.zeros(ids.shape + (M,))
    np.put_along_axis(out, ids[..., None], 1.0, axis=-1)
    return out


def _rows(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 1 else x


def _batch(x):
    """Tensors pass through (must be 2-D); arrays are promoted to one row."""
    if isinstance(x, Tensor):
        if x.ndim != 2:
            raise ad.ShapeError(f"expected a (batch, dim) tensor, got {x.shape}")
        return x
    return Tensor(_rows(x))


class IntModel:
    """Deterministic cell::

        a_t     = tanh(W_a s_t + b_a)
        f_t     = sigmoid(W_f a_t + U_f s_t + b_f)
        i_t     = sigmoid(W_i a_t + U_i s_t + b_i)
        s_{t+1} = f_t * W_s [s_t; z] + i_t * a_t
        pi(.|s_t) = softmax(W_out a_t)

    ``W_s`` projects the concatenation back to ``d_s`` so the gate product is
    well defined.
    """

    variant = "int"

    def __init__(self, state_dim, z_dim, num_actions, seed=0):
        rng = np.random.default_rng([seed, 21])
        d, M = state_dim, num_actions
        self.state_dim, self.z_dim, self.num_actions = d, z_dim, M

        def p(a):
            return Tensor(a, requires_grad=True)
        self.params = {
            "W_f": p(glorot(rng, d, d)), "U_f": p(glorot(rng, d, d)), "b_f": p(np.zeros(d)),
            "W_i": p(glorot(rng, d, d)), "U_i": p(glorot(rng, d, d)), "b_i": p(np.zeros(d)),
            "W_a": p(glorot(rng, d, d)), "b_a": p(np.zeros(d)),
            "W_s": p(glorot(rng, d + z_dim, d)),
            "W_out": p(np.zeros((d, M))),
        }

    def named_parameters(self):
        return {f"int.{k}": v for k, v in self.params.items()}

    def transition_parameters(self):
        return [self.params[k] for k in ("W_f", "U_f", "b_f", "W_i", "U_i", "b_i", "W_s")]

    def policy_parameters(self):
        return [self.params[k] for k in ("W_a", "b_a", "W_out")]

    def action_hidden(self, s):
        P = self.params
        return ad.tanh(ad.add(ad.matmul(s, P["W_a"]), P["b_a"]))

    def _next_state(self, s, a_hidden, z):
        P = self.params
        f = ad.sigmoid(ad.add(ad.matmul(a_hidden, P["W_f"]) + ad.matmul(s, P["U_f"]), P["b_f"]))
        i = ad.sigmoid(ad.add(ad.matmul(a_hidden, P["W_i"]) + ad.matmul(s, P["U_i"]), P["b_i"]))
        carried = ad.matmul(ad.concat([s, z]), P["W_s"])
        return f * carried + i * a_hidden, f, i

    def step(self, s, z):
        """One cell update from ``s_t``: returns ``(a_hidden, probs, s_next)``."""
        s, z = _batch(s), _batch(z)
        a_h = self.action_hidden(s)
        s_next, _, _ = self._next_state(s, a_h, z)
        return a_h, ad.softmax(ad.matmul(a_h, self.params["W_out"])), s_next

    def gates(self, s, z):
        a_h = self.action_hidden(s)
        _, f, i = self._next_state(s, a_h, z)
        return a_h, f, i

    def policy_logits(self, s):
        return ad.matmul(self.action_hidden(s), self.params["W_out"])

    def initial_state(self, z):
        # zero state and zero action
        B = z.shape[0]
        zeros = Tensor(np.zeros((B, self.state_dim)))
        s1, _, _ = self._next_state(zeros, zeros, z)
        return s1

    def rollout_graph(self, z, T, rng=None, sample=True, actions=None):
        """Differentiable rollout. Returns ``(states, logits)`` lists of length T."""
        z = ad.as_tensor(z)
        s = self.initial_state(z)
        states, logits = [], []
        for t in range(T):
            a_h = self.action_hidden(s)
            states.append(s)
            logits.append(ad.matmul(a_h, self.params["W_out"]))
            if t < T - 1:
                s, _, _ = self._next_state(s, a_h, z)
        return states, logits

    def next_state_for_action(self, s, action_ids, z, mean=True):
        """Successor used by the walk-through planner; the cell ignores discrete actions."""
        s = ad.as_tensor(s)
        a_h = self.action_hidden(s)
        return self._next_state(s, a_h, ad.as_tensor(z))[0].data


class ExtModel:
    """Gaussian transition network ``[s; a; z] -> (mean, log_var)`` and a
    separate categorical policy network ``s -> logits``."""

    variant = "ext"

    def __init__(self, state_dim, z_dim, num_actions, hidden=128, policy_hidden=64, seed=0):
        rng = np.random.default_rng([seed, 22])
        d, M = state_dim, num_actions
        self.state_dim, self.z_dim, self.num_actions = d, z_dim, M
        self.trunk = MLP(rng, [d + M + z_dim, hidden, hidden])
        self.head_mean = Dense(rng, hidden, d)
        self.head_log_var = Dense(rng, hidden, d, zero=True)
        self.head_log_var.b.data[:] = -4.0
        self.policy_net = MLP(rng, [d, policy_hidden, M], zero_last=True)

    def named_parameters(self):
        out = {}
        out.update(self.trunk.named_parameters("ext.transition.trunk"))
        out.update(self.head_mean.named_parameters("ext.transition.mean"))
        out.update(self.head_log_var.named_parameters("ext.transition.log_var"))
        out.update(self.policy_net.named_parameters("ext.policy"))
        return out

    def transition_parameters(self):
        return [v for k, v in self.named_parameters().items() if k.startswith("ext.transition")]

    def policy_parameters(self):
        return [v for k, v in self.named_parameters().items() if k.startswith("ext.policy")]

    def transition_graph(self, s_prev, a_repr, z):
        h = ad.tanh(self.trunk(ad.concat([s_prev, a_repr, z])))
        return self.head_mean(h), ad.clip(self.head_log_var(h), *EXT_LOG_VAR_RANGE)

    def transition(self, s_prev, a_prev, z, rng=None, mode="sample"):
        """Next state from ``(s_prev, a_prev, z)``; ``a_prev=None`` is the zero action."""
        s_prev, z = _rows(s_prev), _rows(z)
        if a_prev is None:
            a = np.zeros((len(s_prev), self.num_actions))
        else:
            ids = np.atleast_1d(a_prev)
            if np.any((ids < 0) | (ids >= self.num_actions)):
                raise ValueError(f"action id out of range [0, {self.num_actions})")
            a = one_hot(ids, self.num_actions)
        mu, lv = self.transition_graph(Tensor(s_prev), Tensor(a), Tensor(z))
        out = mu.data if mode == "mean" else mu.data + np.exp(0.5 * lv.data) * rng.standard_normal(mu.shape)
        return out[0] if len(out) == 1 else out

    def policy_logits(self, s):
        return self.policy_net(s)

    def rollout_graph(self, z, T, rng=None, sample=True, actions=None, hard=True):
        """Differentiable rollout. Generated actions enter the transition as
        one-hot rows (sampled, or argmax when ``sample`` is off) with the softmax
        gradient passed straight through; ``hard=False`` feeds the probability
        vector itself. One-hot rows of ``actions`` override both."""
        z = ad.as_tensor(z)
        B = z.shape[0]
        s = Tensor(np.zeros((B, self.state_dim)))
        a = Tensor(np.zeros((B, self.num_actions)))
        states, logits = [], []
        for t in range(T):
            mu, lv = self.transition_graph(s, a, z)
            if sample:
                s = ad.reparameterize(mu, lv, rng.standard_normal(mu.shape))
            else:
                s = mu
            lg = self.policy_logits(s)
            states.append(s)
            logits.append(lg)
            if actions is not None:
                a = Tensor(one_hot(actions[:, t], self.num_actions))
            else:
                a = ad.softmax(lg)
                if hard:
                    a = a + Tensor(one_hot(_pick(a.data, rng if sample else None), self.num_actions) - a.data)
        return states, logits

    def next_state_for_action(self, s, action_ids, z, mean=True):
        s, z = _rows(s), _rows(z)
        mu, _ = self.transition_graph(Tensor(s), Tensor(one_hot(action_ids, self.num_actions)), Tensor(z))
        return mu.data


def _pick(probs, rng=None):
    """Row-wise categorical draw, or argmax without ``rng``."""
    if rng is None:
        return np.argmax(probs, axis=1)
    u = rng.random((len(probs), 1))
    return np.minimum((probs.cumsum(axis=1) < u).sum(axis=1), probs.shape[1] - 1)


def policy_forward(model, s) -> np.ndarray:
    """Action distribution(s) at state(s) ``s``."""
    single = np.ndim(s) == 1
    p = softmax_np(model.policy_logits(Tensor(_rows(s))).data)
    return p[0] if single else p


def rollout_batch(model, z, T, rng=None, mode="greedy"):
    """Roll out a batch of contexts.

    Returns ``states`` (B, T, d_s), ``actions`` (B, T) and ``probs`` (B, T, M).
    ``mode="greedy"`` takes argmax actions (and the transition mean for the
    Ext stack); ``mode="sample"`` samples both.
    """
    if T < 1:
        raise ValueError("horizon must be >= 1")
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown rollout mode {mode!r}")
    z = _rows(z)
    B, M = len(z), model.num_actions
    states = np.zeros((B, T, model.state_dim))
    actions = np.zeros((B, T), dtype=np.int64)
    probs = np.zeros((B, T, M))
    zt = Tensor(z)
    if isinstance(model, IntModel):
        s = model.initial_state(zt)
        for t in range(T):
            a_h = model.action_hidden(s)
            p = softmax_np(ad.matmul(a_h, model.params["W_out"]).data)
            states[:, t], probs[:, t] = s.data, p
            actions[:, t] = _choose(p, rng, mode)
            s, _, _ = model._next_state(s, a_h, zt)
        return states, actions, probs
    s = np.zeros((B, model.state_dim))
    a = np.zeros((B, M))
    for t in range(T):
        mu, lv = model.transition_graph(Tensor(s), Tensor(a), zt)
        s = mu.data if mode == "greedy" else mu.data + np.exp(0.5 * lv.data) * rng.standard_normal(mu.shape)
        p = softmax_np(model.policy_logits(Tensor(s)).data)
        states[:, t], probs[:, t] = s, p
        actions[:, t] = _choose(p, rng, mode)
        a = one_hot(actions[:, t], M)
    return states, actions, probs


def _choose(p, rng, mode):
    if mode == "greedy":
        return p.argmax(axis=-1)
    u = rng.random((len(p), 1))
    return np.minimum((p.cumsum(axis=-1) < u).sum(axis=-1), p.shape[1] - 1)


def rollout(model, z_c, T, rng=None, mode="greedy"):
    """Roll out one context vector for ``T`` steps.

    Returns a list of ``(state, action_id, action_probs)``. Only the context
    vector and horizon are inputs; the goal observation is never seen here.
    """
    states, actions, probs = rollout_batch(model, np.asarray(z_c)[None], T, rng, mode)
    return [(states[0, t], int(actions[0, t]), probs[0, t]) for t in range(T)]


class BehaviorPolicy:
    """Behavioural-cloning classifier ``beta(a | s)`` over expert state/action pairs."""

    def __init__(self, state_dim, num_actions, hidden=64, seed=0):
        rng = np.random.default_rng([seed, 23])
        self.state_dim, self.num_actions = state_dim, num_actions
        self.net = MLP(rng, [state_dim, hidden, num_actions], zero_last=True)

    def named_parameters(self):
        return self.net.named_parameters("behavior")

    def logits(self, s):
        return self.net(s)

    def forward(self, s) -> np.ndarray:
        return softmax_np(self.net(Tensor(_rows(s))).data)

    def fit(self, dataset, epochs=30, lr=3e-3, batch_size=128, seed=0):
        """Cross-entropy training on every (o_t, a_t) of ``dataset``; returns final train accuracy."""
        if not dataset:
            raise ValueError("bc_fit needs a non-empty dataset")
        X = np.concatenate([t.observations for t in dataset])
        y = np.concatenate([t.actions for t in dataset])
        missing = sorted(set(range(self.num_actions)) - set(int(a) for a in y))
        if missing:
            log.warning("behaviour policy: %d action(s) never demonstrated; they stay near uniform", len(missing))
        params = list(self.named_parameters().values())
        opt = ad.Adam(params, lr=lr)
        rng = np.random.default_rng([seed, 24])
        for _ in range(epochs):
            order = rng.permutation(len(X))
            for start in range(0, len(X), batch_size):
                idx = order[start:start + batch_size]
                loss = cross_entropy(self.net(Tensor(X[idx])), y[idx])
                ad.backward(loss)
                opt.step()
        return float((self.forward(X).argmax(axis=1) == y).mean())


def cross_entropy(logits, targets):
    """Mean negative log-likelihood of integer ``targets`` under ``logits``."""
    lp = ad.log_softmax(logits)
    mask = one_hot(targets, logits.shape[-1])
    return ad.mul(ad.sum(lp * mask), -1.0 / len(targets))


def bc_fit(dataset, state_dim, num_actions, **kw) -> BehaviorPolicy:
    beta = BehaviorPolicy(state_dim, num_actions, seed=kw.pop("seed", 0))
    beta.fit(dataset, **kw)
    return beta


def bc_forward(beta: BehaviorPolicy, s) -> np.ndarray:
    return beta.forward(s)
