import inspect

import numpy as np
import pytest

from procplan import autodiff as ad
from procplan.autodiff import Tensor
from procplan.gail import TrainConfig, train
from procplan.genmodel import (
    BehaviorPolicy, ExtModel, IntModel, bc_fit, bc_forward, one_hot, policy_forward, rollout, rollout_batch,
)
from procplan.taskworld import Trajectory, World, WorldConfig, sample_dataset

D, Z, M = 6, 3, 5


def randomise(params, rng, scale=0.5):
    for p in params.values():
        p.data[...] = scale * rng.standard_normal(p.shape)


def test_int_step_zero_parameters():
    model = IntModel(D, Z, M)
    for p in model.params.values():
        p.data[...] = 0.0
    s, z = Tensor(np.zeros((1, D))), Tensor(np.ones((1, Z)))
    a_h, probs, s_next = model.step(s, z)
    _, f, i = model.gates(s, z)
    assert np.all(a_h.data == 0) and np.all(s_next.data == 0)
    assert np.all(f.data == 0.5) and np.all(i.data == 0.5)
    np.testing.assert_allclose(probs.data, 1 / M)


def test_int_gate_ranges_on_random_states():
    rng = np.random.default_rng(0)
    model = IntModel(D, Z, M)
    randomise(model.params, rng, 0.5)
    # moderate inputs: far out the float64 sigmoid rounds to exactly 0 or 1
    s, z = Tensor(rng.standard_normal((10_000, D))), Tensor(rng.standard_normal((10_000, Z)))
    a_h, f, i = model.gates(s, z)
    assert np.all((f.data > 0) & (f.data < 1)) and np.all((i.data > 0) & (i.data < 1))
    assert np.all(np.abs(a_h.data) < 1)


def test_int_step_gradient_of_next_state_norm():
    rng = np.random.default_rng(1)
    model = IntModel(D, Z, M)
    randomise(model.params, rng)
    s, z = rng.standard_normal((2, D)), rng.standard_normal((2, Z))
    errs = ad.gradcheck(lambda: ad.sum(ad.square(model.step(s, z)[2])), model.params)
    assert max(errs.values()) < 1e-4


def test_int_rollout_is_a_pure_function():
    rng = np.random.default_rng(2)
    model = IntModel(D, Z, M)
    randomise(model.params, rng)
    z = rng.standard_normal(Z)
    a, b = rollout(model, z, 4), rollout(model, z, 4)
    for (s1, a1, p1), (s2, a2, p2) in zip(a, b):
        assert s1.tobytes() == s2.tobytes() and a1 == a2 and p1.tobytes() == p2.tobytes()


def test_rollout_horizon_one_starts_from_zero_convention():
    rng = np.random.default_rng(3)
    model = ExtModel(D, Z, M, hidden=8, policy_hidden=8)
    randomise(dict(model.named_parameters()), rng, 0.3)
    z = rng.standard_normal(Z)
    ((s, a, p),) = rollout(model, z, 1)
    expected = model.transition(np.zeros(D), None, z, mode="mean")
    np.testing.assert_array_equal(s, expected)
    assert a == int(np.argmax(p))


def test_rollout_signature_exposes_no_goal_or_history():
    params = list(inspect.signature(rollout).parameters)
    assert params == ["model", "z_c", "T", "rng", "mode"]
    for cls in (IntModel, ExtModel):
        assert list(inspect.signature(cls.next_state_for_action).parameters) == ["self", "s", "action_ids", "z", "mean"]


def test_rollout_rejects_bad_arguments():
    model = IntModel(D, Z, M)
    with pytest.raises(ValueError):
        rollout(model, np.zeros(Z), 0)
    with pytest.raises(ValueError):
        rollout(model, np.zeros(Z), 2, mode="beam")


def test_ext_transition_mean_is_deterministic():
    rng = np.random.default_rng(4)
    model = ExtModel(D, Z, M, hidden=8)
    s, z = rng.standard_normal(D), rng.standard_normal(Z)
    a = model.transition(s, 2, z, mode="mean")
    b = model.transition(s, 2, z, mode="mean")
    assert a.tobytes() == b.tobytes()


def test_ext_transition_at_min_log_var_is_nearly_the_mean():
    rng = np.random.default_rng(5)
    model = ExtModel(D, Z, M, hidden=8)
    model.head_log_var.b.data[:] = -50.0   # clamps to -10
    s, z = rng.standard_normal(D), rng.standard_normal(Z)
    mean = model.transition(s, 1, z, mode="mean")
    sample = model.transition(s, 1, z, rng=rng, mode="sample")
    assert np.max(np.abs(sample - mean)) < 3 * np.exp(-5) * 5


def test_ext_transition_sample_moments():
    rng = np.random.default_rng(6)
    model = ExtModel(D, Z, M, hidden=8)
    randomise(dict(model.named_parameters()), rng, 0.3)
    s, z = rng.standard_normal(D), rng.standard_normal(Z)
    n = 10_000
    S = model.transition(np.tile(s, (n, 1)), np.full(n, 3), np.tile(z, (n, 1)), rng=rng)
    mu, lv = model.transition_graph(Tensor(s[None]), Tensor(one_hot([3], M)), Tensor(z[None]))
    sd = np.exp(0.5 * lv.data[0])
    assert np.all(np.abs(S.mean(axis=0) - mu.data[0]) < 3 * sd / np.sqrt(n) + 1e-12)
    var_se = sd ** 2 * np.sqrt(2 / (n - 1))
    assert np.all(np.abs(S.var(axis=0, ddof=1) - sd ** 2) < 3 * var_se)


def test_ext_transition_rejects_out_of_range_action():
    model = ExtModel(D, Z, M, hidden=8)
    with pytest.raises(ValueError):
        model.transition(np.zeros(D), M, np.zeros(Z), mode="mean")


def test_fresh_policy_is_uniform():
    for model in (IntModel(D, Z, M), ExtModel(D, Z, M, hidden=8)):
        np.testing.assert_allclose(policy_forward(model, np.ones(D)), 1 / M)


def test_policy_probs_sum_to_one_and_argmax_is_shift_invariant():
    rng = np.random.default_rng(7)
    model = ExtModel(D, Z, M, hidden=8, policy_hidden=8)
    randomise(dict(model.named_parameters()), rng)
    S = rng.standard_normal((1000, D))
    P = policy_forward(model, S)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    logits = model.policy_logits(Tensor(S)).data
    assert np.array_equal(np.argmax(logits, 1), np.argmax(logits + 7.5, 1))
    assert np.array_equal(np.argmax(P, 1), np.argmax(logits, 1))


def test_generated_states_live_in_observation_space():
    for model in (IntModel(D, Z, M), ExtModel(D, Z, M, hidden=8)):
        states, actions, probs = rollout_batch(model, np.zeros((2, Z)), 3, np.random.default_rng(0), "sample")
        assert states.shape == (2, 3, D) and actions.shape == (2, 3) and probs.shape == (2, 3, M)


def test_ext_mean_rollout_matches_sampling_with_vanishing_noise():
    rng = np.random.default_rng(8)
    model = ExtModel(D, Z, M, hidden=8, policy_hidden=8)
    randomise(dict(model.named_parameters()), rng, 0.3)
    model.head_log_var.W.data[...] = 0.0
    model.head_log_var.b.data[:] = -1e3
    z = rng.standard_normal((4, Z))
    g = rollout_batch(model, z, 4, rng, "greedy")
    # with sigma -> e^-5 the sampled path stays within a tiny tube of the mean path
    states = np.zeros((4, D))
    a = np.zeros((4, M))
    for t in range(4):
        states = model.next_state_for_action(states, g[1][:, t - 1], z) if t else \
            model.transition_graph(Tensor(states), Tensor(a), Tensor(z))[0].data
        np.testing.assert_allclose(states, g[0][:, t], atol=1e-12)


def test_behaviour_policy_untrained_is_uniform():
    beta = BehaviorPolicy(D, M)
    np.testing.assert_allclose(bc_forward(beta, np.ones((3, D))), 1 / M)


def test_behaviour_policy_overfits_single_pair(caplog):
    tr = Trajectory(0, np.array([[1.0] * D, [0.5] * D]), np.array([2, 2]))
    beta = bc_fit([tr], D, M, epochs=300)
    assert bc_forward(beta, tr.observations[0])[0, 2] > 0.99
    assert "never demonstrated" in caplog.text


def test_behaviour_policy_accuracy_on_noise_free_world():
    world = World(WorldConfig(num_tasks=4, noise_sigma=0.0, demos_per_task=50, interchangeable_fraction=0.0))
    data = sample_dataset(world)
    beta = BehaviorPolicy(world.config.obs_dim, world.config.num_actions)
    assert beta.fit(data, epochs=40) > 0.9


def test_ext_sampled_rollouts_show_several_valid_orders():
    cfg = WorldConfig(num_tasks=1, steps_per_task=(3, 3), num_actions=6, obs_dim=12,
                      interchangeable_fraction=1.0, demos_per_task=150, seed=1)
    world = World(cfg)
    data = sample_dataset(world)
    bundle, _ = train(data, (cfg.num_actions, cfg.obs_dim),
                      TrainConfig(epochs=40, z_dim=4, transition_hidden=32, policy_hidden=32, disc_hidden=16,
                                  her_fraction=0.0), "ext")
    task = world.tasks[0]
    z = bundle.context.encode(np.zeros(cfg.obs_dim), world.goal_observation(0)).mean
    rng = np.random.default_rng(0)
    orders = set()
    for _ in range(50):
        acts = [a for _, a, _ in rollout(bundle.generator, z, 3, rng, "sample")]
        if task.is_valid_order(acts):
            orders.add(tuple(acts))
    assert len(orders) >= 2
