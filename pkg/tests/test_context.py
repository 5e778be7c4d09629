import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from procplan import autodiff as ad
from procplan.context import (
    ContextPosterior, ContextTrainConfig, ContextVAE, elbo_loss, kl_to_standard_normal, sample_context,
    train_context,
)
from procplan.taskworld import World, WorldConfig, sample_dataset


def kl_value(mu, lv):
    return kl_to_standard_normal(ad.Tensor(np.atleast_2d(mu)), ad.Tensor(np.atleast_2d(lv))).data


def test_fresh_encoder_gives_zero_mean():
    vae = ContextVAE(6, 4, seed=1)
    o = np.random.default_rng(0).standard_normal(6)
    post = vae.encode(o, o)
    assert np.array_equal(post.mean, np.zeros(4))
    assert np.array_equal(post.log_var, np.zeros(4))


def test_encode_is_deterministic_and_batched():
    vae = ContextVAE(5, 3, seed=2)
    ad_rng = np.random.default_rng(1)
    for p in vae.named_parameters().values():
        p.data[...] = ad_rng.standard_normal(p.shape) * 0.5
    o1, oT = ad_rng.standard_normal((4, 5)), ad_rng.standard_normal((4, 5))
    a, b = vae.encode(o1, oT), vae.encode(o1, oT)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.log_var, b.log_var)
    single = vae.encode(o1[2], oT[2])
    np.testing.assert_allclose(single.mean, a.mean[2], rtol=0, atol=1e-14)


def test_encode_rejects_wrong_dimension():
    vae = ContextVAE(5, 3)
    with pytest.raises(ad.ShapeError):
        vae.encode(np.zeros(4), np.zeros(4))


def test_posterior_log_var_is_clamped():
    post = ContextPosterior(np.zeros(2), np.array([-50.0, 50.0]))
    assert post.log_var.tolist() == [-10.0, 10.0]


def test_standard_normal_sampling_moments():
    post = ContextPosterior(np.zeros((100_000, 3)), np.zeros((100_000, 3)))
    z = sample_context(post, np.random.default_rng(0))
    assert np.all(np.abs(z.mean(axis=0)) < 0.02)
    assert np.all(np.abs(z.var(axis=0) - 1) < 0.05)


def test_sampling_uses_mean_and_scale():
    post = ContextPosterior(np.full((50_000, 1), 2.0), np.full((50_000, 1), np.log(0.25)))
    z = sample_context(post, np.random.default_rng(1))
    assert abs(z.mean() - 2.0) < 0.01 and abs(z.std() - 0.5) < 0.01


def test_kl_closed_form_cases():
    assert kl_value([0.0], [0.0])[0] == 0.0
    assert kl_value([1.0], [0.0])[0] == pytest.approx(0.5)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(3)
    mu, lv = np.array([0.7, -0.3, 1.2]), np.array([-0.5, 0.4, 0.1])
    sd = np.exp(0.5 * lv)
    z = mu + sd * rng.standard_normal((1_000_000, 3))
    log_q = (-0.5 * ((z - mu) / sd) ** 2 - np.log(sd)).sum(axis=1)
    log_p = (-0.5 * z ** 2).sum(axis=1)
    mc = float((log_q - log_p).mean())
    assert abs(kl_value(mu, lv)[0] - mc) / mc < 0.01


@settings(max_examples=100, deadline=None)
@given(mu=hnp.arrays(np.float64, 4, elements=st.floats(-20, 20)),
       lv=hnp.arrays(np.float64, 4, elements=st.floats(-10, 10)))
def test_kl_is_non_negative(mu, lv):
    assert kl_value(mu, lv)[0] >= 0.0


def test_elbo_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    vae = ContextVAE(4, 2, hidden=5, seed=3)
    params = vae.named_parameters()
    for p in params.values():
        p.data[...] = 0.4 * rng.standard_normal(p.shape)
    o1, oT, eps = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 2))
    errs = ad.gradcheck(lambda: elbo_loss(vae, o1, oT, None, eps=eps), params)
    assert max(errs.values()) < 1e-6


def test_elbo_rejects_empty_batch():
    with pytest.raises(ValueError):
        elbo_loss(ContextVAE(3, 2), np.zeros((0, 3)), np.zeros((0, 3)), np.random.default_rng(0))


def test_zero_learning_rate_leaves_parameters_unchanged():
    world = World(WorldConfig(num_tasks=1, demos_per_task=1))
    data = sample_dataset(world)
    vae = ContextVAE(world.config.obs_dim, 4, seed=0)
    before = {k: p.data.copy() for k, p in vae.named_parameters().items()}
    train_context(data, ContextTrainConfig(epochs=1, lr=0.0), vae=vae)
    for k, p in vae.named_parameters().items():
        assert np.array_equal(before[k], p.data), k


@pytest.fixture(scope="module")
def default_world_data():
    return sample_dataset(World(WorldConfig()))


def test_training_reduces_loss_on_default_world(default_world_data):
    _, curve = train_context(default_world_data, ContextTrainConfig(epochs=50))
    assert len(curve) == 50
    assert curve[-1]["loss"] < curve[0]["loss"]
    assert all(c["kl_min"] >= 0 for c in curve)


def test_noise_free_goal_reconstruction_approaches_zero():
    world = World(WorldConfig(num_tasks=3, noise_sigma=0.0, demos_per_task=60, seed=2))
    data = sample_dataset(world)
    vae, _ = train_context(data, ContextTrainConfig(epochs=150, lr=3e-3))
    o1 = np.stack([t.observations[0] for t in data])
    oT = np.stack([t.observations[-1] for t in data])
    _, parts = elbo_loss(vae, o1, oT, np.random.default_rng(0), parts=True)
    baseline = 0.5 * ((oT - oT.mean(axis=0)) ** 2).sum(axis=1).mean()
    assert parts["goal_recon"] < 0.05 * baseline


def test_trained_posterior_separates_tasks(default_world_data):
    vae, _ = train_context(default_world_data, ContextTrainConfig(epochs=50))
    labels = np.array([t.task_id for t in default_world_data])
    o1 = np.stack([t.observations[0] for t in default_world_data])
    oT = np.stack([t.observations[-1] for t in default_world_data])
    Z = vae.encode(o1, oT).mean
    U = Z / np.linalg.norm(Z, axis=1, keepdims=True)
    C = U @ U.T
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    assert C[same].mean() > C[labels[:, None] != labels[None, :]].mean()


def test_divergence_restores_last_finite_parameters(default_world_data):
    vae = ContextVAE(40, 4, seed=0)
    bad = [default_world_data[0].window(0, 2)]
    bad[0].observations[0, 0] = np.inf
    before = {k: p.data.copy() for k, p in vae.named_parameters().items()}
    _, curve = train_context(bad, ContextTrainConfig(epochs=3), vae=vae)
    assert curve == []
    for k, p in vae.named_parameters().items():
        assert np.array_equal(before[k], p.data)
