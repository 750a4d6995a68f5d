"""Neural component tests: layer gradients, models, training, checkpoints."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinoplan.environments import generate_scene, voxelize
from kinoplan.errors import ContractViolation
from kinoplan.neuro import (
    Adam, Affine, Conv2d, Discriminator, Encoder, Generator, Mlp,
    NeuralPolicy, SampleSet, config_hash, denormalize_states,
    discriminator_loss, dropout_mask, encode_scenes, generator_loss,
    gradient_check, load_models, normalize_states, save_models,
    select_min_cost, train_discriminator, train_generator,
)
from kinoplan.neuro.models import VOXEL_SIDE
from kinoplan.systems import get_system


def finite_diff(loss_fn, params, h=1e-6):
    """Dense central-difference gradients; only for tiny parameter counts."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat_p = p.reshape(-1)
        flat_g = g.reshape(-1)
        for j in range(flat_p.size):
            saved = flat_p[j]
            flat_p[j] = saved + h
            up = loss_fn()
            flat_p[j] = saved - h
            down = loss_fn()
            flat_p[j] = saved
            flat_g[j] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def toy_samples(rng, n, state_dim=3, n_scenes=2, scalar_targets=False):
    targets = rng.uniform(0.0, 5.0, n) if scalar_targets \
        else rng.uniform(-1.0, 1.0, (n, state_dim))
    return SampleSet(
        scene_ids=rng.integers(0, n_scenes, n),
        x_t=rng.uniform(-1.0, 1.0, (n, state_dim)),
        x_goal=rng.uniform(-1.0, 1.0, (n, state_dim)),
        targets=targets,
        weights=np.full(n, 1.0 / n),
    )


def toy_voxels(rng, n_scenes=2):
    out = [np.zeros((32, 32, 32))]
    for _ in range(n_scenes - 1):
        out.append((rng.random((32, 32, 32)) < 0.1).astype(float))
    return out


# -- layers -----------------------------------------------------------------

def test_affine_matches_manual():
    rng = np.random.default_rng(0)
    layer = Affine(rng, 4, 3)
    x = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(layer.forward(x), x @ layer.W + layer.b)


def test_affine_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    layer = Affine(rng, 4, 3)
    x = rng.normal(size=(6, 4))
    t = rng.normal(size=(6, 3))

    def loss():
        return float(np.sum((layer.forward(x) - t) ** 2))

    loss()
    layer.backward(2.0 * (layer.forward(x) - t))
    numeric = finite_diff(loss, layer.params)
    for a, n_ in zip(layer.grads, numeric):
        np.testing.assert_allclose(a, n_, rtol=1e-6, atol=1e-7)


def conv_oracle(x, W, b, kernel, stride, pad):
    """Naive nested-loop convolution; the independent reference."""
    n, c_in, h, w = x.shape
    c_out = W.shape[0]
    oh = (h + 2 * pad - kernel) // stride + 1
    ow = (w + 2 * pad - kernel) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Wk = W.reshape(c_out, c_in, kernel, kernel)
    out = np.zeros((n, c_out, oh, ow))
    for b_i in range(n):
        for co in range(c_out):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[b_i, :, i * stride:i * stride + kernel,
                               j * stride:j * stride + kernel]
                    out[b_i, co, i, j] = np.sum(patch * Wk[co]) + b[co]
    return out


def test_conv_forward_matches_naive_oracle():
    rng = np.random.default_rng(2)
    conv = Conv2d(rng, 3, 4, kernel=3, stride=2, pad=1)
    x = rng.normal(size=(2, 3, 8, 8))
    got = conv.forward(x)
    want = conv_oracle(x, conv.W, conv.b, 3, 2, 1)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
    assert got.shape == (2, 4, 4, 4)


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    conv = Conv2d(rng, 2, 2, kernel=3, stride=2, pad=1)
    x = rng.normal(size=(2, 2, 6, 6))
    t = rng.normal(size=(2, 2, 3, 3))

    def loss():
        return float(np.sum((conv.forward(x) - t) ** 2))

    loss()
    dx = conv.backward(2.0 * (conv.forward(x) - t))
    numeric = finite_diff(loss, conv.params)
    for a, n_ in zip(conv.grads, numeric):
        np.testing.assert_allclose(a, n_, rtol=1e-5, atol=1e-7)
    # input gradient via finite differences on x
    gx = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), gx.reshape(-1)
    for j in range(flat_x.size):
        saved = flat_x[j]
        flat_x[j] = saved + 1e-6
        up = loss()
        flat_x[j] = saved - 1e-6
        down = loss()
        flat_x[j] = saved
        flat_g[j] = (up - down) / 2e-6
    np.testing.assert_allclose(dx, gx, rtol=1e-5, atol=1e-7)


def test_conv_rejects_wrong_channel_count():
    conv = Conv2d(np.random.default_rng(0), 3, 4)
    with pytest.raises(ContractViolation):
        conv.forward(np.zeros((1, 2, 8, 8)))


def test_mlp_shapes_chain_and_validate():
    rng = np.random.default_rng(4)
    mlp = Mlp(rng, 5, 2, hidden=(7, 3))
    assert [l.W.shape for l in mlp.layers] == [(5, 7), (7, 3), (3, 2)]
    with pytest.raises(ContractViolation):
        mlp.forward(np.zeros((1, 4)))
    with pytest.raises(ContractViolation):
        Mlp(rng, 5, 2, hidden=(7,), p_drop=1.0)
    with pytest.raises(ContractViolation):
        Mlp(rng, 5, 2, hidden=())


def test_dropout_expectation_matches_deterministic():
    # inverted dropout: E[mask * a] = a, checked within a 3-sigma MC band
    rng = np.random.default_rng(5)
    a = rng.normal(size=8)
    p = 0.2
    n = 10_000
    masks = np.stack([dropout_mask(rng, a.shape, p) for _ in range(n)])
    mean = (masks * a).mean(axis=0)
    sigma = np.abs(a) * np.sqrt(p / (1.0 - p) / n)
    assert np.all(np.abs(mean - a) <= 3.0 * sigma + 1e-12)


def test_dropout_zero_probability_draws_nothing():
    rng = np.random.default_rng(6)
    mlp = Mlp(rng, 3, 2, hidden=(4,), p_drop=0.0)
    x = rng.normal(size=(2, 3))
    state_before = rng.bit_generator.state
    out = mlp.forward(x, rng)
    assert rng.bit_generator.state == state_before
    np.testing.assert_array_equal(out, mlp.forward(x))


def test_adam_first_step_matches_formula():
    rng = np.random.default_rng(7)
    p = rng.normal(size=(3, 2))
    p0 = p.copy()
    g = rng.normal(size=(3, 2))
    opt = Adam([p], lr=1e-3)
    opt.step([g])
    # t=1: m_hat = g, v_hat = g^2 regardless of betas
    want = p0 - 1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p, want, rtol=1e-12)


def test_adam_two_steps_match_reference_loop():
    rng = np.random.default_rng(8)
    p = rng.normal(size=4)
    ref = p.copy()
    g1, g2 = rng.normal(size=4), rng.normal(size=4)
    opt = Adam([p], lr=0.01)
    opt.step([g1.copy()])
    opt.step([g2.copy()])
    m = np.zeros(4)
    v = np.zeros(4)
    for t, g in [(1, g1), (2, g2)]:
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-12)


# -- normalization ----------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_normalization_round_trip(seed):
    rng = np.random.default_rng(seed)
    s = get_system("cartpole")
    x = rng.uniform(s.state_lo, s.state_hi)
    back = denormalize_states(normalize_states(x, s.state_lo, s.state_hi),
                              s.state_lo, s.state_hi)
    np.testing.assert_allclose(back, x, atol=1e-9)
    u = normalize_states(x, s.state_lo, s.state_hi)
    assert np.all(u >= -1.0 - 1e-12) and np.all(u <= 1.0 + 1e-12)


# -- encoder ----------------------------------------------------------------

def test_encoder_zero_voxel_gives_bias_constant():
    enc = Encoder(np.random.default_rng(9))
    z = enc.forward(np.zeros((2, 32, 32, 32)))
    # zero input + zero conv biases + ReLU leaves only the dense bias
    np.testing.assert_array_equal(z[0], enc.fc.b)
    np.testing.assert_array_equal(z[0], z[1])


def test_encoder_identical_voxels_identical_latents():
    rng = np.random.default_rng(10)
    enc = Encoder(rng, latent_dim=16, channels=(4, 4))
    v = (rng.random((32, 32, 32)) < 0.2).astype(float)
    z = enc.forward(np.stack([v, v]))
    np.testing.assert_array_equal(z[0], z[1])


def test_encoder_distinguishes_scenes():
    rng = np.random.default_rng(11)
    enc = Encoder(rng, latent_dim=16, channels=(4, 4))
    sys_ = get_system("car")
    env_a = generate_scene(sys_, seed=0)
    env_b = generate_scene(sys_, seed=1)
    za = enc.encode_grid(voxelize(env_a))
    zb = enc.encode_grid(voxelize(env_b))
    assert za.shape == (16,)
    assert np.all(np.isfinite(za))
    assert np.any(za != zb)


def test_encoder_rejects_wrong_shape():
    enc = Encoder(np.random.default_rng(12), latent_dim=8, channels=(2, 2))
    with pytest.raises(ContractViolation):
        enc.forward(np.zeros((1, 16, 16, 16)))


# -- generator / discriminator ----------------------------------------------

def test_generator_deterministic_without_rng():
    rng = np.random.default_rng(13)
    s = get_system("acrobot")
    gen = Generator.for_system(rng, s, latent_dim=8, hidden=(16, 16, 16))
    z = rng.normal(size=8)
    x = rng.uniform(s.state_lo, s.state_hi, (3, 4))
    goal = rng.uniform(s.state_lo, s.state_hi)
    np.testing.assert_array_equal(gen.sample(z, x, goal, None),
                                  gen.sample(z, x, goal, None))


def test_generator_dropout_produces_distinct_samples():
    rng = np.random.default_rng(14)
    s = get_system("car")
    gen = Generator.for_system(rng, s, latent_dim=8, hidden=(64, 64, 64))
    z = rng.normal(size=8)
    x = np.zeros((1, 3))
    goal = np.array([2.0, 1.0, 0.4])
    outs = {tuple(gen.sample(z, x, goal, rng)[0]) for _ in range(100)}
    assert len(outs) >= 2


def test_generator_outputs_respect_bounds_and_wrap():
    rng = np.random.default_rng(15)
    s = get_system("acrobot")
    gen = Generator.for_system(rng, s, latent_dim=8, hidden=(16, 16, 16))
    z = rng.normal(size=8) * 10.0          # exaggerate activations
    x = rng.uniform(s.state_lo, s.state_hi, (50, 4))
    goal = rng.uniform(s.state_lo, s.state_hi)
    out = gen.sample(z, x, goal, rng)
    assert np.all(out >= s.state_lo - 1e-12)
    assert np.all(out <= s.state_hi + 1e-12)
    ang = out[:, s.angular_mask]
    assert np.all(ang >= -np.pi) and np.all(ang < np.pi)


def test_discriminator_deterministic():
    rng = np.random.default_rng(16)
    s = get_system("car")
    disc = Discriminator.for_system(rng, s, latent_dim=8, hidden=(16, 16, 16))
    z = rng.normal(size=8)
    x = rng.uniform(s.state_lo, s.state_hi, (5, 3))
    goal = rng.uniform(s.state_lo, s.state_hi)
    np.testing.assert_array_equal(disc.predict(z, x, goal),
                                  disc.predict(z, x, goal))


def test_select_min_cost_contract():
    rng = np.random.default_rng(17)
    s = get_system("car")
    disc = Discriminator.for_system(rng, s, latent_dim=8, hidden=(16, 16, 16))
    z = rng.normal(size=8)
    goal = np.zeros(3)
    cands = rng.uniform(s.state_lo, s.state_hi, (6, 3))
    pick = select_min_cost(z, cands, goal, disc)
    costs = disc.predict(z, cands, goal)
    np.testing.assert_array_equal(pick, cands[int(np.argmin(costs))])
    # single candidate
    np.testing.assert_array_equal(select_min_cost(z, cands[:1], goal, disc),
                                  cands[0])
    # permutation leaves the chosen state unchanged (no ties here)
    perm = rng.permutation(6)
    pick2 = select_min_cost(z, cands[perm], goal, disc)
    np.testing.assert_array_equal(pick2, pick)
    with pytest.raises(ContractViolation):
        select_min_cost(z, np.empty((0, 3)), goal, disc)


# -- training ---------------------------------------------------------------

def test_generator_loss_matches_hand_computation():
    # two paths, two transitions each; weights 1/(N_p * T_i) = 1/4
    rng = np.random.default_rng(18)
    s = get_system("car")
    enc = Encoder(rng, latent_dim=4, channels=(2, 2))
    gen = Generator.for_system(rng, s, latent_dim=4, hidden=(8, 8, 8))
    vox = toy_voxels(rng)
    x_t = rng.uniform(-1, 1, (4, 3))
    x_goal = np.repeat(rng.uniform(-1, 1, (2, 3)), 2, axis=0)
    targets = rng.uniform(-1, 1, (4, 3))
    samples = SampleSet([0, 0, 1, 1], x_t, x_goal, targets, np.full(4, 0.25))

    got = generator_loss(enc, gen, vox, samples)

    total = 0.0
    for i in range(4):
        z = enc.forward(np.asarray(vox[samples.scene_ids[i]])[None])[0]
        xn = normalize_states(x_t[i], s.state_lo, s.state_hi)
        gn = normalize_states(x_goal[i], s.state_lo, s.state_hi)
        tn = normalize_states(targets[i], s.state_lo, s.state_hi)
        pred = gen.forward_normalized(z[None], xn[None], gn[None])[0]
        total += 0.25 * float(np.sum((pred - tn) ** 2))
    assert abs(got - total) < 1e-9


def test_generator_training_reduces_loss():
    rng = np.random.default_rng(19)
    s = get_system("car")
    enc = Encoder(rng, latent_dim=16, channels=(4, 4))
    gen = Generator.for_system(rng, s, latent_dim=16, hidden=(64, 64, 64))
    vox = toy_voxels(rng)
    n = 1000
    x_t = rng.uniform(s.state_lo, s.state_hi, (n, 3))
    # learnable structure: next state moves a fixed fraction toward the goal
    x_goal = rng.uniform(s.state_lo, s.state_hi, (n, 3))
    targets = x_t + 0.3 * (x_goal - x_t)
    samples = SampleSet(rng.integers(0, 2, n), x_t, x_goal, targets,
                        np.full(n, 1.0 / n))
    curve = train_generator(enc, gen, vox, samples, epochs=3, rng=rng)
    assert len(curve) == 3
    assert curve[-1] < curve[0] and curve[-1] < curve[1]


def test_generator_memorizes_single_sample():
    rng = np.random.default_rng(20)
    s = get_system("car")
    enc = Encoder(rng, latent_dim=8, channels=(2, 2))
    gen = Generator.for_system(rng, s, latent_dim=8, hidden=(64, 64, 64))
    vox = [np.zeros((32, 32, 32))]
    samples = SampleSet([0], np.array([[1.0, 2.0, 0.1]]),
                        np.array([[4.0, -1.0, 0.3]]),
                        np.array([[2.0, 1.0, 0.2]]), np.array([1.0]))
    curve = train_generator(enc, gen, vox, samples, epochs=2000, rng=rng,
                            dropout=False)
    assert curve[-1] < 1e-3


def test_generator_training_rejects_empty_dataset():
    rng = np.random.default_rng(21)
    s = get_system("car")
    enc = Encoder(rng, latent_dim=4, channels=(2, 2))
    gen = Generator.for_system(rng, s, latent_dim=4, hidden=(8,))
    empty = SampleSet(np.empty(0, int), np.empty((0, 3)), np.empty((0, 3)),
                      np.empty((0, 3)), np.empty(0))
    with pytest.raises(ContractViolation):
        train_generator(enc, gen, [np.zeros((32, 32, 32))], empty, 1,
                        np.random.default_rng(0))


def test_discriminator_training_reduces_loss():
    rng = np.random.default_rng(22)
    s = get_system("car")
    enc = Encoder(rng, latent_dim=8, channels=(2, 2))
    disc = Discriminator.for_system(rng, s, latent_dim=8, hidden=(32, 32, 32))
    vox = toy_voxels(rng)
    n = 400
    samples = toy_samples(rng, n, scalar_targets=True)
    curve = train_discriminator(disc, enc, vox, samples, epochs=5, rng=rng)
    assert curve[-1] < curve[0]


def test_sampleset_validation():
    with pytest.raises(ContractViolation):
        SampleSet([0, 1], np.zeros((3, 2)), np.zeros((2, 2)),
                  np.zeros((2, 2)), np.ones(2))
    with pytest.raises(ContractViolation):
        SampleSet([0], np.zeros((1, 2)), np.zeros((1, 2)),
                  np.zeros((1, 2)), np.zeros(1))       # zero weight


def jitter_biases(model, rng):
    """Move biases off zero so no ReLU sits exactly on its kink (the one
    point where analytic subgradients and finite differences may disagree)."""
    for p in model.params:
        if p.ndim == 1:
            p += rng.normal(0.0, 0.1, p.shape)


def test_gradient_check_full_objectives_miniature():
    # analytic gradients of both training objectives against central
    # differences, probed through the public helper
    rng = np.random.default_rng(23)
    s = get_system("car")
    enc = Encoder(rng, latent_dim=4, channels=(2, 2))
    gen = Generator.for_system(rng, s, latent_dim=4, hidden=(8, 8, 8))
    jitter_biases(enc, rng)
    jitter_biases(gen, rng)
    vox = [(rng.random((32, 32, 32)) < 0.1).astype(float) for _ in range(2)]
    samples = toy_samples(rng, 6)

    def gen_loss():
        return generator_loss(enc, gen, vox, samples)

    vb = np.stack(vox)
    uniq, inv = np.unique(samples.scene_ids, return_inverse=True)
    z_u = enc.forward(vb[uniq])
    xn = normalize_states(samples.x_t, gen.lo, gen.hi)
    gn = normalize_states(samples.x_goal, gen.lo, gen.hi)
    tn = normalize_states(samples.targets, gen.lo, gen.hi)
    err = gen.forward_normalized(z_u[inv], xn, gn) - tn
    dz = gen.backward(2.0 * samples.weights[:, None] * err)[:, :4]
    dz_u = np.zeros_like(z_u)
    np.add.at(dz_u, inv, dz)
    enc.backward(dz_u)
    params = enc.params + gen.params
    grads = [g.copy() for g in enc.grads + gen.grads]
    worst = gradient_check(gen_loss, params, grads,
                           np.random.default_rng(1), n_probes=40)
    assert worst < 1e-4

    disc = Discriminator.for_system(rng, s, latent_dim=4, hidden=(8, 8, 8))
    jitter_biases(disc, rng)
    dsamples = toy_samples(rng, 6, scalar_targets=True)
    z_table = encode_scenes(enc, vox)

    def disc_loss():
        return discriminator_loss(disc, z_table, dsamples)

    z = z_table[dsamples.scene_ids]
    xn = normalize_states(dsamples.x_t, disc.lo, disc.hi)
    gn = normalize_states(dsamples.x_goal, disc.lo, disc.hi)
    err = disc.forward_normalized(z, xn, gn)[:, 0] - dsamples.targets
    disc.backward((2.0 * dsamples.weights * err)[:, None])
    worst_d = gradient_check(disc_loss, disc.params,
                             [g.copy() for g in disc.grads],
                             np.random.default_rng(2), n_probes=40)
    assert worst_d < 1e-4


# -- checkpoints ------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(24)
    s = get_system("cartpole")
    enc = Encoder(rng, latent_dim=8, channels=(2, 2))
    gen = Generator.for_system(rng, s, latent_dim=8, hidden=(16, 16, 16))
    disc = Discriminator.for_system(rng, s, latent_dim=8, hidden=(16, 16, 16))
    meta = {"config_hash": config_hash({"lr": 1e-3}), "system": "cartpole"}
    path = tmp_path / "ckpt.npz"
    save_models(path, {"encoder": enc, "generator": gen,
                       "discriminator": disc}, meta)
    models, got_meta = load_models(path)
    assert got_meta == meta
    for name, orig in (("encoder", enc), ("generator", gen),
                       ("discriminator", disc)):
        for a, b in zip(models[name].params, orig.params):
            np.testing.assert_array_equal(a, b)
    # loaded generator reproduces outputs bitwise
    z = rng.normal(size=8)
    x = rng.uniform(s.state_lo, s.state_hi, (4, 4))
    goal = rng.uniform(s.state_lo, s.state_hi)
    np.testing.assert_array_equal(
        models["generator"].sample(z, x, goal, None),
        gen.sample(z, x, goal, None))
    assert models["generator"].mlp.p_drop == gen.mlp.p_drop


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, foo=np.zeros(3))
    with pytest.raises(ContractViolation):
        load_models(path)
    with pytest.raises(ContractViolation):
        save_models(tmp_path / "x.npz", {})
    with pytest.raises(ContractViolation):
        save_models(tmp_path / "y.npz",
                    {"mystery": Encoder(np.random.default_rng(0),
                                        latent_dim=4, channels=(2, 2))})


def test_config_hash_stable_and_order_free():
    a = config_hash({"lr": 1e-3, "epochs": 5})
    b = config_hash({"epochs": 5, "lr": 1e-3})
    assert a == b and len(a) == 16
    assert a != config_hash({"epochs": 6, "lr": 1e-3})


# -- policy adapter ---------------------------------------------------------

def test_neural_policy_protocol_and_load(tmp_path):
    rng = np.random.default_rng(25)
    s = get_system("car")
    enc = Encoder(rng, latent_dim=8, channels=(2, 2))
    gen = Generator.for_system(rng, s, latent_dim=8, hidden=(16, 16, 16))
    disc = Discriminator.for_system(rng, s, latent_dim=8, hidden=(16, 16, 16))
    gpath, dpath = tmp_path / "gen.npz", tmp_path / "disc.npz"
    save_models(gpath, {"encoder": enc, "generator": gen}, {})
    save_models(dpath, {"discriminator": disc}, {})

    policy = NeuralPolicy.load(s, gpath, dpath)
    env = generate_scene(s, seed=3)
    z = policy.encode(voxelize(env))
    assert z.shape == (8,)
    pts = policy.generate(z, np.zeros((3, 3)), np.array([1.0, 1.0, 0.0]),
                          np.random.default_rng(0))
    assert pts.shape == (3, 3)
    costs = policy.cost(z, pts, np.array([1.0, 1.0, 0.0]))
    assert costs.shape == (3,)

    bare = NeuralPolicy.load(s, gpath)
    with pytest.raises(ContractViolation):
        bare.cost(z, pts, np.array([1.0, 1.0, 0.0]))


def test_neural_policy_bounds_mismatch_raises(tmp_path):
    rng = np.random.default_rng(26)
    car, acro = get_system("car"), get_system("acrobot")
    enc = Encoder(rng, latent_dim=8, channels=(2, 2))
    gen = Generator.for_system(rng, acro, latent_dim=8, hidden=(8, 8, 8))
    path = tmp_path / "gen.npz"
    save_models(path, {"encoder": enc, "generator": gen}, {})
    with pytest.raises(ContractViolation):
        NeuralPolicy.load(car, path)
