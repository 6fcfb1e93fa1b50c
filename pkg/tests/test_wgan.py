import numpy as np
import pytest

from evogan.errors import ParameterError
from evogan.genome import (
    OP_NONE,
    Genome,
    discriminator_space,
    fixed_clswgan_discriminator,
    fixed_clswgan_generator,
    generator_space,
)
from evogan.numerics import OptimHyper, grad_check, make_rng
from evogan.supernet import Subnet, init_for_genome, init_supernet
from evogan.wgan import (
    CriticConfig,
    GanBatch,
    critic_loss,
    gan_step,
    generator_loss,
    gradient_penalty,
    gradient_penalty_with_grads,
)


def linear_critic(w_row, b=0.0, attr_dim=2):
    """D(a, u) = w . u + b via a single feature->output edge."""
    d = len(w_row)
    space = discriminator_space(attr_dim=attr_dim, feature_dim=d, node_dims=(1,))
    ops = [OP_NONE] * space.n_edges
    ops[space.edges.index((1, 3))] = 2   # output-node rule: plain affine
    g = Genome("discriminator", tuple(ops))
    store = init_for_genome(space, g, make_rng(0, "lin"))
    p = store.get(space.edges.index((1, 3)), 2)
    p.w[:] = np.asarray(w_row, dtype=np.float64).reshape(1, d)
    p.b[:] = b
    return Subnet(store, g)


def small_pair(seed=0, feature_dim=4, attr_dim=3, dropout=False):
    gspace = generator_space(attr_dim=attr_dim, noise_dim=attr_dim,
                             feature_dim=feature_dim,
                             node_dims=(8, feature_dim))
    dspace = discriminator_space(attr_dim=attr_dim, feature_dim=feature_dim,
                                 node_dims=(8, 1))
    op = 3 if dropout else 2
    g_ops = [OP_NONE] * gspace.n_edges
    g_ops[gspace.edges.index((2, 3))] = op
    g_ops[gspace.edges.index((3, 4))] = 0
    d_ops = [OP_NONE] * dspace.n_edges
    d_ops[dspace.edges.index((2, 3))] = op
    d_ops[dspace.edges.index((3, 4))] = 2
    gg = Genome("generator", tuple(g_ops))
    dg = Genome("discriminator", tuple(d_ops))
    rng = make_rng(seed, "pair")
    return (Subnet(init_for_genome(gspace, gg, rng), gg),
            Subnet(init_for_genome(dspace, dg, rng), dg), rng)


def toy_batch(rng, batch=64):
    labels = rng.integers(0, 2, size=batch)
    attrs = np.eye(2)[labels]
    means = np.array([[3.0, 1.0], [1.0, 3.0]])
    feats = np.maximum(means[labels] + 0.3 * rng.normal(size=(batch, 2)), 0.0)
    return GanBatch(feats, attrs, rng.normal(size=(batch, 2)))


# ---------------------------------------------------------------------------
# gradient penalty values


def test_gp_zero_for_unit_norm_linear_critic():
    d = linear_critic([0.6, 0.8])
    rng = make_rng(1)
    gp = gradient_penalty(d, rng.normal(size=(16, 2)), rng.normal(size=(16, 2)),
                          rng.normal(size=(16, 2)), rng)
    assert gp == pytest.approx(0.0, abs=1e-12)


def test_gp_one_for_zero_critic():
    d = linear_critic([0.0, 0.0])
    rng = make_rng(2)
    gp = gradient_penalty(d, rng.normal(size=(16, 2)), rng.normal(size=(16, 2)),
                          rng.normal(size=(16, 2)), rng)
    assert gp == pytest.approx(1.0)


def test_gp_hand_evaluated_slope_two():
    # D(a, u) = 2 * u_1  ->  (|grad| - 1)^2 = 1
    d = linear_critic([2.0, 0.0])
    rng = make_rng(3)
    gp = gradient_penalty(d, rng.normal(size=(16, 2)), rng.normal(size=(16, 2)),
                          rng.normal(size=(16, 2)), rng)
    assert gp == pytest.approx(1.0)


def test_gp_shape_mismatch():
    d = linear_critic([1.0, 0.0])
    with pytest.raises(ParameterError):
        gradient_penalty(d, np.zeros((4, 2)), np.zeros((3, 2)), np.zeros((4, 2)),
                         make_rng(4))


def test_gp_parameter_gradients_match_finite_differences():
    _, d, rng = small_pair(seed=5)
    real = rng.normal(size=(6, 4))
    fake = rng.normal(size=(6, 4))
    attrs = rng.normal(size=(6, 3))
    key = (d.space.edges.index((2, 3)), 2)
    p = d.store.get(key[0], key[1])

    def f(w_flat):
        p.w[:] = w_flat.reshape(p.w.shape)
        value, grads = gradient_penalty_with_grads(d, real, fake, attrs, make_rng(6))
        return value, grads.params[key][0].reshape(w_flat.shape)

    assert grad_check(f, p.w.reshape(1, -1).copy(), h=1e-6) < 1e-4


def test_gp_has_no_bias_gradient():
    _, d, rng = small_pair(seed=7)
    _, grads = gradient_penalty_with_grads(
        d, rng.normal(size=(5, 4)), rng.normal(size=(5, 4)),
        rng.normal(size=(5, 3)), rng)
    for _, gb in grads.params.values():
        assert not gb.any()


# ---------------------------------------------------------------------------
# critic loss


def test_critic_loss_constant_critic_reduces_to_gp():
    d = linear_critic([0.0, 0.0], b=3.0)   # D == 3 everywhere
    rng = make_rng(8)
    real = rng.normal(size=(16, 2))
    fake = rng.normal(size=(16, 2))
    attrs = rng.normal(size=(16, 2))
    cfg = CriticConfig(gp_weight=10.0)
    loss, _, metrics = critic_loss(d, real, fake, attrs, cfg, rng)
    # wasserstein terms cancel; gradient of a constant is 0 -> GP = 1
    assert metrics.w_estimate == pytest.approx(0.0, abs=1e-12)
    assert loss == pytest.approx(10.0)


def test_critic_loss_sign_convention_directional():
    # real/fake split along e1: raising w1 raises D(real) - D(fake),
    # and the critic loss must fall.
    rng = make_rng(9)
    real = np.abs(rng.normal(size=(32, 2))) + np.array([2.0, 0.0])
    fake = -np.abs(rng.normal(size=(32, 2)))
    attrs = rng.normal(size=(32, 2))
    cfg = CriticConfig(gp_weight=0.0)

    def loss_at(w1):
        d = linear_critic([w1, 0.0])
        loss, _, _ = critic_loss(d, real, fake, attrs, cfg, make_rng(10))
        return loss

    assert loss_at(0.3) < loss_at(0.2)


def test_critic_loss_descends_along_its_gradient():
    _, d, rng = small_pair(seed=11)
    real = np.abs(rng.normal(size=(32, 4)))
    fake = np.abs(rng.normal(size=(32, 4))) + 1.0
    attrs = rng.normal(size=(32, 3))
    cfg = CriticConfig(gp_weight=10.0)
    loss0, grads, _ = critic_loss(d, real, fake, attrs, cfg, make_rng(12))
    for (e, op), (gw, gb) in grads.params.items():
        p = d.store.get(e, op)
        p.w -= 1e-3 * gw
        p.b -= 1e-3 * gb
    loss1, _, _ = critic_loss(d, real, fake, attrs, cfg, make_rng(12))
    assert loss1 < loss0


def test_critic_trains_to_separate_toy_distribution():
    # 200 critic steps against a frozen generator must push D(real) above D(fake)
    gspace = generator_space(attr_dim=2, noise_dim=2, feature_dim=2, node_dims=(8, 2))
    dspace = discriminator_space(attr_dim=2, feature_dim=2, node_dims=(8, 1))
    rng = make_rng(13, "sep")
    G = Subnet(init_for_genome(gspace, fixed_clswgan_generator(gspace), rng),
               fixed_clswgan_generator(gspace))
    D = Subnet(init_for_genome(dspace, fixed_clswgan_discriminator(dspace), rng),
               fixed_clswgan_discriminator(dspace))
    cfg = CriticConfig()
    hyper = OptimHyper(learning_rate=5e-4)
    for _ in range(200):
        gan_step(D, G, toy_batch(rng), cfg, hyper, "train_d", rng)
    batch = toy_batch(rng, 256)
    fake, _ = G.forward(batch.attrs, batch.noise)
    real_scores, _ = D.forward(batch.attrs, batch.real_features)
    fake_scores, _ = D.forward(batch.attrs, fake)
    assert real_scores.mean() - fake_scores.mean() > 0.0


# ---------------------------------------------------------------------------
# generator loss


def test_generator_loss_constant_critic():
    d = linear_critic([0.0, 0.0], b=5.0, attr_dim=3)
    g, _, rng = small_pair(seed=14, feature_dim=2, attr_dim=3)
    loss, grads, _ = generator_loss(d, g, rng.normal(size=(8, 3)),
                                    rng.normal(size=(8, 3)), rng)
    assert loss == pytest.approx(-5.0)
    for gw, gb in grads.params.values():
        assert np.max(np.abs(gw)) < 1e-12 and np.max(np.abs(gb)) < 1e-12


def test_generator_loss_is_negated_mean_critic_score():
    g, d, rng = small_pair(seed=15)
    attrs = rng.normal(size=(16, 3))
    noise = rng.normal(size=(16, 3))
    loss, _, _ = generator_loss(d, g, attrs, noise, make_rng(16))
    # recompute the critic's mean score on the same samples (quality measure)
    fake, _ = g.forward(attrs, noise, mode="train", rng=make_rng(16))
    scores, _ = d.forward(attrs, fake, mode="train", rng=make_rng(16))
    assert loss == pytest.approx(-float(np.mean(scores)))


def test_generator_gradient_check_through_critic_composite():
    g, d, rng = small_pair(seed=17)
    attrs = rng.normal(size=(4, 3))
    noise = rng.normal(size=(4, 3))
    key = (g.space.edges.index((2, 3)), 2)
    p = g.store.get(*key)

    def f(w_flat):
        p.w[:] = w_flat.reshape(p.w.shape)
        loss, grads, _ = generator_loss(d, g, attrs, noise, make_rng(18))
        return loss, grads.params[key][0].reshape(w_flat.shape)

    assert grad_check(f, p.w.reshape(1, -1).copy(), h=1e-6) < 1e-4


def test_generator_loss_sign_convention():
    # raising D(fake) (via the critic's output bias) lowers the generator loss
    g, d, rng = small_pair(seed=19)
    attrs, noise = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    out_edge = d.space.edges.index((3, 4))
    loss0, _, _ = generator_loss(d, g, attrs, noise, make_rng(20))
    d.store.get(out_edge, 2).b += 1.0
    loss1, _, _ = generator_loss(d, g, attrs, noise, make_rng(20))
    assert loss1 == pytest.approx(loss0 - 1.0)


# ---------------------------------------------------------------------------
# gan_step


def test_gan_step_train_g_leaves_critic_untouched():
    g, d, rng = small_pair(seed=21)
    before = d.store.snapshot()
    gan_step(d, g, toy_gan_batch(rng), CriticConfig(), OptimHyper(), "train_g", rng)
    after = d.store.snapshot()
    for k in before:
        assert np.array_equal(before[k][0], after[k][0])
        assert np.array_equal(before[k][1], after[k][1])


def test_gan_step_train_d_leaves_generator_untouched():
    g, d, rng = small_pair(seed=22)
    before = g.store.snapshot()
    gan_step(d, g, toy_gan_batch(rng), CriticConfig(), OptimHyper(), "train_d", rng)
    after = g.store.snapshot()
    for k in before:
        assert np.array_equal(before[k][0], after[k][0])
        assert np.array_equal(before[k][1], after[k][1])


def toy_gan_batch(rng, batch=16):
    return GanBatch(np.abs(rng.normal(size=(batch, 4))),
                    rng.normal(size=(batch, 3)),
                    rng.normal(size=(batch, 3)))


def test_gan_step_metrics_finite_for_1000_steps():
    g, d, rng = small_pair(seed=23, dropout=True)
    cfg = CriticConfig()
    hyper = OptimHyper(learning_rate=5e-4)
    for step in range(1000):
        which = "train_g" if step % (cfg.n_critic + 1) == cfg.n_critic else "train_d"
        m = gan_step(d, g, toy_gan_batch(rng), cfg, hyper, which, rng)
        for v in (m.w_estimate, m.gp, m.d_loss) if which == "train_d" else (m.g_loss,):
            assert np.isfinite(v)


def test_gan_step_rejects_unknown_side():
    g, d, rng = small_pair(seed=24)
    with pytest.raises(ParameterError):
        gan_step(d, g, toy_gan_batch(rng), CriticConfig(), OptimHyper(), "both", rng)


# ---------------------------------------------------------------------------
# permutation invariance


def test_losses_invariant_to_batch_row_permutation():
    g, d, rng = small_pair(seed=25)   # dropout-free pair
    attrs = rng.normal(size=(32, 3))
    noise = rng.normal(size=(32, 3))
    real = np.abs(rng.normal(size=(32, 4)))
    fake = np.abs(rng.normal(size=(32, 4)))
    perm = make_rng(26).permutation(32)

    cfg = CriticConfig(gp_weight=0.0)
    l1, _, _ = critic_loss(d, real, fake, attrs, cfg, make_rng(27))
    l2, _, _ = critic_loss(d, real[perm], fake[perm], attrs[perm], cfg, make_rng(27))
    assert abs(l1 - l2) < 1e-9

    g1, _, _ = generator_loss(d, g, attrs, noise, make_rng(28))
    g2, _, _ = generator_loss(d, g, attrs[perm], noise[perm], make_rng(28))
    assert abs(g1 - g2) < 1e-9

    # identical real/fake rows make the interpolates row-wise fixed, so the
    # penalty term is permutation invariant too
    cfg_gp = CriticConfig(gp_weight=10.0)
    p1, _, _ = critic_loss(d, real, real.copy(), attrs, cfg_gp, make_rng(29))
    p2, _, _ = critic_loss(d, real[perm], real[perm].copy(), attrs[perm], cfg_gp,
                           make_rng(29))
    assert abs(p1 - p2) < 1e-9


# ---------------------------------------------------------------------------
# convergence trend on the 2-D conditional Gaussian toy problem


def test_wasserstein_estimate_converges_toward_zero():
    gspace = generator_space(attr_dim=2, noise_dim=2, feature_dim=2, node_dims=(8, 2))
    dspace = discriminator_space(attr_dim=2, feature_dim=2, node_dims=(8, 1))
    cfg = CriticConfig(n_critic=5, gp_weight=10.0)
    hyper = OptimHyper(learning_rate=5e-4)

    ratios = []
    for seed in range(5):
        rng = make_rng(seed, "trend")
        G = Subnet(init_for_genome(gspace, fixed_clswgan_generator(gspace), rng),
                   fixed_clswgan_generator(gspace))
        D = Subnet(init_for_genome(dspace, fixed_clswgan_discriminator(dspace), rng),
                   fixed_clswgan_discriminator(dspace))
        series = []
        for _ in range(2000):
            for _ in range(cfg.n_critic):
                m = gan_step(D, G, toy_batch(rng), cfg, hyper, "train_d", rng)
            series.append(abs(m.w_estimate))
            gan_step(D, G, toy_batch(rng), cfg, hyper, "train_g", rng)
        smooth = np.convolve(series, np.ones(25) / 25, mode="valid")
        ratios.append(np.mean(series[-100:]) / smooth.max())
    assert np.mean(ratios) < 0.25
