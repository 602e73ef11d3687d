import math

import numpy as np
import pytest

from sgnet import autograd as ag
from sgnet.autograd import Tensor
from sgnet.gradcheck import check_function, model_gradcheck, tiny_model
from sgnet.model import (ConfigError, ForwardHooks, LatentGaussian, ModeError, ModelConfig, SGNet,
                         conv1d, conv_transpose1d)
from sgnet.nn import LinearParams

SMALL = dict(input_dim=6, output_dim=2, enc_hidden=8, dec_hidden=8, goal_hidden=4, latent_dim=3,
             obs_len=4, pred_len=5, k=3, embed_dim=5)


@pytest.fixture(autouse=True)
def _float64():
    with ag.precision(np.float64):
        yield


def small(**kw):
    return SGNet(ModelConfig(**{**SMALL, **kw}), seed=kw.pop("seed", 0) if "seed" in kw else 0,
                 dtype=np.float64)


def zero_all(model):
    for p in model.named_parameters().values():
        p.data[...] = 0


def rand_inputs(model, B=2, seed=0):
    c = model.config
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(B, c.obs_len, c.input_dim))
    T = rng.normal(size=(B, c.obs_len, c.pred_len, c.output_dim))
    return X, T


# ----------------------------------------------------------------------------
# configuration


def test_deterministic_forces_single_proposal():
    assert ModelConfig(mode="deterministic", k=20).k == 1


@pytest.mark.parametrize("field,value", [("sge_variant", "lstm"), ("mode", "fuzzy"), ("ablation", "X"),
                                         ("obs_len", 0), ("k", 0)])
def test_config_rejects_bad_fields(field, value):
    with pytest.raises(ConfigError, match=field):
        ModelConfig(**{field: value})


def test_defaults_follow_reported_sizes():
    c = ModelConfig()
    assert (c.enc_hidden, c.dec_hidden, c.goal_hidden, c.latent_dim) == (512, 512, 128, 32)


# ----------------------------------------------------------------------------
# encoder pieces


def test_embed_zero_input_zero_bias():
    m = small()
    out = m.embed_input(np.zeros((2, 6)))
    np.testing.assert_array_equal(out.data, 0)


def test_embed_negative_preactivation_rectified():
    m = small()
    m.embed_traj.bias.data[:] = -100
    np.testing.assert_array_equal(m.embed_input(np.ones((1, 6))).data, 0)


def test_embed_width_with_auxiliary_group():
    plain = small()
    flow = small(input_dim=8, aux_dim=2)
    assert plain.embed_input(np.ones((1, 6))).shape == (1, 5)
    assert flow.embed_input(np.ones((1, 8))).shape == (1, 10)
    assert flow.encoder.input_size == 10 + 4


def test_encoder_first_step_zero_parameters():
    m = small()
    zero_all(m)
    h = m.encoder_step(m.embed_input(np.ones((2, 6))), ag.zeros((2, 4)), ag.zeros((2, 8)))
    np.testing.assert_array_equal(h.data, 0)


def test_encoder_ablation_d_ignores_goal_input():
    m = small(ablation="D")
    x = m.embed_input(np.random.default_rng(0).normal(size=(2, 6)))
    h0 = Tensor(np.random.default_rng(1).uniform(-1, 1, size=(2, 8)))
    a = m.encoder_step(x, Tensor(np.zeros((2, 4))), h0).data
    b = m.encoder_step(x, Tensor(np.full((2, 4), 7.0)), h0).data
    assert a.tobytes() == b.tobytes()


# ----------------------------------------------------------------------------
# goal estimator


@pytest.mark.parametrize("variant", ["recurrent", "feedforward", "convolutional"])
@pytest.mark.parametrize("pred_len", [1, 2, 3, 5, 12])
def test_sge_sequence_length(variant, pred_len):
    m = small(sge_variant=variant, pred_len=pred_len)
    goals = m.sge_forward(Tensor(np.random.default_rng(0).normal(size=(3, 8))))
    assert goals.hiddens.shape == (3, pred_len, 4)
    assert goals.positions.shape == (3, pred_len, 2)


def test_sge_variants_differ_in_parameters_not_shape():
    counts = {v: small(sge_variant=v).parameter_count() for v in ("recurrent", "feedforward", "convolutional")}
    assert len(set(counts.values())) == 3


def test_sge_unknown_variant():
    with pytest.raises(ConfigError):
        small(sge_variant="transformer")


def test_recurrent_sge_zero_cell_halves_each_step():
    m = small()
    for p in list(m.sge_cell.named("c")) + list(m.sge_input.named("i")):
        p[1].data[...] = 0
    h = Tensor(np.random.default_rng(0).normal(size=(2, 8)))
    seed = np.maximum(h.data @ m.sge_init.weight.data + m.sge_init.bias.data, 0)
    goals = m.sge_forward(h).hiddens.data
    for j in range(m.config.pred_len):
        np.testing.assert_allclose(goals[:, j], seed * 0.5 ** (j + 1), atol=1e-12)


def test_conv_output_lengths():
    rng = np.random.default_rng(0)
    p = LinearParams(Tensor(rng.normal(size=(6, 2))), Tensor(np.zeros(2)))
    x = Tensor(rng.normal(size=(1, 7, 2)))
    assert conv1d(x, p, 3, 2, 1).shape == (1, 4, 2)
    assert conv_transpose1d(x, p, 3, 2, 1, 1).shape == (1, 14, 2)


def test_conv1d_matches_direct_sum():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(3 * 2, 3))
    x = rng.normal(size=(1, 5, 2))
    with ag.precision(np.float64):
        out = conv1d(Tensor(x), LinearParams(Tensor(W), Tensor(np.zeros(3))), 3, 2, 1).data
    padded = np.concatenate([np.zeros((1, 1, 2)), x, np.zeros((1, 1, 2))], axis=1)
    for t in range(out.shape[1]):
        expected = padded[0, 2 * t : 2 * t + 3].reshape(-1) @ W
        np.testing.assert_allclose(out[0, t], expected, atol=1e-12)


def test_goal_regressor_matches_affine():
    m = small()
    rng = np.random.default_rng(3)
    m.goal_reg.weight.data = rng.normal(size=(4, 2))
    m.goal_reg.bias.data = rng.normal(size=2)
    g = rng.normal(size=(2, 5, 4))
    np.testing.assert_allclose(m.regress_goal_positions(Tensor(g)).data,
                               g @ m.goal_reg.weight.data + m.goal_reg.bias.data, atol=1e-12)
    zero_all(m)
    out = m.regress_goal_positions(Tensor(g))
    assert out.shape == (2, 5, 2)
    np.testing.assert_array_equal(out.data, 0)


def test_faithful_relu_clips_negative_coordinates():
    m = small(output_activation="faithful-relu")
    m.goal_reg.bias.data[:] = -5
    assert np.all(m.regress_goal_positions(Tensor(np.zeros((1, 5, 4)))).data == 0)


# ----------------------------------------------------------------------------
# aggregators


def test_encoder_aggregator_uniform_for_identical_goals():
    m = small()
    goals = np.tile(np.random.default_rng(0).normal(size=(1, 1, 4)), (2, 5, 1))
    pooled, w = m.aggregate_goals_encoder(Tensor(goals))
    np.testing.assert_allclose(w.data, 1 / 5, atol=1e-12)
    np.testing.assert_allclose(pooled.data, goals[:, 0], atol=1e-12)


def test_encoder_aggregator_singleton():
    m = small(pred_len=1)
    g = np.random.default_rng(0).normal(size=(2, 1, 4))
    pooled, w = m.aggregate_goals_encoder(Tensor(g))
    np.testing.assert_array_equal(w.data, 1.0)
    np.testing.assert_allclose(pooled.data, g[:, 0], atol=1e-15)


def test_encoder_aggregator_permutation_equivariance():
    m = small()
    g = np.random.default_rng(4).normal(size=(1, 5, 4))
    perm = [1, 0, 2, 4, 3]
    _, w = m.aggregate_goals_encoder(Tensor(g))
    _, wp = m.aggregate_goals_encoder(Tensor(g[:, perm]))
    np.testing.assert_allclose(wp.data, w.data[:, perm], atol=1e-12)


def test_decoder_aggregator_suffix_lengths():
    m = small()
    g = Tensor(np.random.default_rng(0).normal(size=(2, 5, 4)))
    for i in range(1, 6):
        _, w = m.aggregate_goals_decoder(g, i)
        assert w.shape == (2, 5 - i + 1)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1, atol=1e-12)
    _, last = m.aggregate_goals_decoder(g, 5)
    np.testing.assert_array_equal(last.data, 1.0)
    with pytest.raises(ValueError):
        m.aggregate_goals_decoder(g, 0)
    with pytest.raises(ValueError):
        m.aggregate_goals_decoder(g, 6)


def test_masked_decoder_inputs_match_per_step_aggregation():
    m = small()
    g = Tensor(np.random.default_rng(2).normal(size=(3, 5, 4)))
    pooled, w = m.decoder_goal_inputs(g)
    for i in range(1, 6):
        p_i, w_i = m.aggregate_goals_decoder(g, i)
        np.testing.assert_allclose(pooled.data[:, i - 1], p_i.data, atol=1e-12)
        np.testing.assert_allclose(w.data[:, i - 1, i - 1 :], w_i.data, atol=1e-12)
        np.testing.assert_array_equal(w.data[:, i - 1, : i - 1], 0)


def test_decoder_aggregator_ablation_e_invariant():
    m = small(ablation="E")
    rng = np.random.default_rng(0)
    a, _ = m.decoder_goal_inputs(Tensor(rng.normal(size=(2, 5, 4))))
    b, _ = m.decoder_goal_inputs(Tensor(rng.normal(size=(2, 5, 4)) * 9))
    assert a.data.tobytes() == b.data.tobytes()


# ----------------------------------------------------------------------------
# CVAE


def test_recognition_and_prior_zero_weights():
    m = small()
    zero_all(m)
    h = Tensor(np.ones((2, 8)))
    for dist in (m.cvae_recognize(h, Tensor(np.ones((2, 4)))), m.cvae_prior(h)):
        assert dist.mu.shape == (2, 3)
        np.testing.assert_array_equal(dist.mu.data, 0)
        np.testing.assert_array_equal(dist.sigma, 1)


def test_recognition_is_training_only():
    m = small()
    with pytest.raises(ModeError):
        m.cvae_recognize(Tensor(np.ones((1, 8))), None)
    det = small(mode="deterministic")
    with pytest.raises(ModeError):
        det.cvae_prior(Tensor(np.ones((1, 8))))


@pytest.mark.parametrize("which", ["recognition", "prior"])
def test_latent_networks_pass_gradient_to_encoder_hidden(which):
    with ag.precision(np.float64):
        m = small()
        rng = np.random.default_rng(0)
        h = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
        hy = Tensor(rng.normal(size=(2, 4)))
        w = rng.normal(size=(2, 3))

        def f():
            d = m.cvae_recognize(h, hy) if which == "recognition" else m.cvae_prior(h)
            return ag.sum(ag.tanh(d.mu) * w + d.logvar * d.logvar)

        assert check_function(f, [h]) <= 1e-4
        assert np.abs(h.grad).sum() > 0


def test_sample_latent_degenerate_sigma():
    mu = Tensor([[0.3, -1.0]])
    dist = LatentGaussian(mu, Tensor([[-1e3, -1e3]]))
    z = SGNet.sample_latent(dist, np.random.default_rng(0).normal(size=(1, 4, 2)))
    np.testing.assert_allclose(z.data, np.broadcast_to(mu.data[:, None], (1, 4, 2)), atol=0)


def test_sample_latent_monte_carlo_mean():
    dist = LatentGaussian(Tensor([[0.7, -0.2]], dtype=np.float64), Tensor([[0.0, 0.0]], dtype=np.float64))
    z = SGNet.sample_latent(dist, np.random.default_rng(11).standard_normal((1, 100_000, 2))).data
    assert np.all(np.abs(z.mean(axis=1) - dist.mu.data) < 0.02)


def test_from_sigma_rejects_nonpositive():
    with pytest.raises(ag.NumericError):
        LatentGaussian.from_sigma([0.0], [0.0])


def test_generation_zero_weights_and_distinct_samples():
    m = small()
    h = Tensor(np.random.default_rng(0).normal(size=(2, 8)))
    dist = m.cvae_prior(h)
    z = m.sample_latent(dist, np.random.default_rng(1).normal(size=(2, 3, 3)))
    hd = m.cvae_generate(h, z).data
    assert hd.shape == (6, 8)
    assert len({row.tobytes() for row in hd}) == 6
    zero_all(m)
    np.testing.assert_array_equal(m.cvae_generate(h, z).data, 0)


def test_deterministic_generation_single_hidden():
    m = small(mode="deterministic")
    assert m.cvae_generate(Tensor(np.ones((2, 8))), None).shape == (2, 8)


# ----------------------------------------------------------------------------
# decoder


def test_decoder_zero_parameters_emit_zero():
    m = small()
    zero_all(m)
    h, y = m.decoder_step(Tensor(np.ones((2, 8))), Tensor(np.ones((2, 4))))
    np.testing.assert_array_equal(y.data, 0)
    np.testing.assert_array_equal(h.data, 0.5)


def test_scalar_decoder_hand_evaluation():
    cfg = ModelConfig(input_dim=1, output_dim=1, enc_hidden=1, dec_hidden=1, goal_hidden=1, latent_dim=1,
                      obs_len=1, pred_len=1, k=1, embed_dim=1)
    m = SGNet(cfg, dtype=np.float64)
    vals = {"dec_input.weight": 0.9, "dec_input.bias": 0.1, "traj_reg.weight": 1.5, "traj_reg.bias": -0.2}
    params = m.named_parameters()
    for k, v in vals.items():
        params[k].data[...] = v
    gru = {k: 0.3 * (i + 1) * (-1) ** i for i, k in enumerate(
        ["w_xz", "w_xr", "w_xh", "w_hz", "w_hr", "w_hh", "b_z", "b_r", "b_h"])}
    w_x = {k: 0.25 for k in ("z", "r", "h")}  # weight on the goal input row
    for k, v in gru.items():
        arr = params[f"decoder.{k}"].data
        arr[...] = v
        if k.startswith("w_x"):
            arr[1, 0] = w_x[k[-1]]
    hd, goal = 0.4, -0.7
    sig = lambda v: 1 / (1 + math.exp(-v))  # noqa: E731
    xd = max(0.0, 0.9 * hd + 0.1)
    z = sig(gru["w_xz"] * xd + w_x["z"] * goal + gru["w_hz"] * hd + gru["b_z"])
    r = sig(gru["w_xr"] * xd + w_x["r"] * goal + gru["w_hr"] * hd + gru["b_r"])
    c = math.tanh(gru["w_xh"] * xd + w_x["h"] * goal + gru["w_hh"] * r * hd + gru["b_h"])
    h_new = (1 - z) * hd + z * c
    y = 1.5 * h_new - 0.2
    out_h, out_y = m.decoder_step(Tensor([[hd]], dtype=np.float64), Tensor([[goal]], dtype=np.float64))
    assert abs(out_h.item() - h_new) < 1e-12
    assert abs(out_y.item() - y) < 1e-12


# ----------------------------------------------------------------------------
# full pass


def test_forward_shapes_reference_protocol():
    cfg = ModelConfig(input_dim=6, output_dim=2, enc_hidden=16, dec_hidden=16, goal_hidden=8, latent_dim=4,
                      obs_len=8, pred_len=12, k=20)
    m = SGNet(cfg)
    X = np.random.default_rng(0).normal(size=(1, 8, 6))
    outs = m.forward(X)
    assert len(outs) == 8
    assert outs[-1].trajectories.shape == (1, 20, 12, 2)
    det = SGNet(ModelConfig(**{**cfg.to_dict(), "mode": "deterministic"}))
    assert det.forward(X)[-1].trajectories.shape == (1, 1, 12, 2)


def test_forward_deterministic_given_seed():
    m = small()
    X, T = rand_inputs(m)
    a = m.forward(X, T, train=True, rng=np.random.default_rng(3))
    b = m.forward(X, T, train=True, rng=np.random.default_rng(3))
    for x, y in zip(a, b):
        assert x.trajectories.data.tobytes() == y.trajectories.data.tobytes()


def test_attention_invariants_in_forward():
    m = small()
    X, _ = rand_inputs(m, B=3)
    for out in m.forward(X):
        np.testing.assert_allclose(out.enc_attention.data.sum(-1), 1, atol=1e-6)
        w = out.dec_attention.data
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(-1), 1, atol=1e-6)
        L = m.config.pred_len
        for i in range(L):
            assert np.count_nonzero(w[:, i], axis=-1).tolist() == [L - i] * 3


def perturb(scale):
    rng = np.random.default_rng(99)
    return lambda g: g + rng.normal(scale=scale, size=g.shape)


def test_ablation_e_trajectories_ignore_decoder_goals():
    m = small(ablation="E")
    X, _ = rand_inputs(m)
    noise = np.random.default_rng(0).normal(size=(4, 2, 3, 3))
    a = m.forward(X, noise=noise)
    b = m.forward(X, noise=noise, hooks=ForwardHooks(decoder_goals=perturb(5.0)))
    for x, y in zip(a, b):
        assert x.trajectories.data.tobytes() == y.trajectories.data.tobytes()


def test_ablation_d_encoder_ignores_goals():
    m = small(ablation="D")
    X, _ = rand_inputs(m)
    a = m.forward(X)
    b = m.forward(X, hooks=ForwardHooks(encoder_goals=perturb(5.0)))
    for x, y in zip(a, b):
        assert x.encoder_hidden.data.tobytes() == y.encoder_hidden.data.tobytes()


def test_ed_uses_both_goal_paths():
    m = small(ablation="ED")
    X, _ = rand_inputs(m)
    noise = np.zeros((4, 2, 3, 3))
    base = m.forward(X, noise=noise)
    enc = m.forward(X, noise=noise, hooks=ForwardHooks(encoder_goals=perturb(1.0)))
    dec = m.forward(X, noise=noise, hooks=ForwardHooks(decoder_goals=perturb(1.0)))
    assert not np.array_equal(base[-1].encoder_hidden.data, enc[-1].encoder_hidden.data)
    assert not np.array_equal(base[0].trajectories.data, dec[0].trajectories.data)


def test_zero_noise_gives_identical_proposals():
    m = small()
    X, _ = rand_inputs(m)
    out = m.forward(X, noise=np.zeros((4, 2, 3, 3)))[-1].trajectories.data
    for k in range(1, 3):
        np.testing.assert_array_equal(out[:, k], out[:, 0])


def test_stochastic_training_needs_targets():
    m = small()
    X, _ = rand_inputs(m)
    with pytest.raises(ModeError):
        m.forward(X, train=True)


def test_forward_rejects_wrong_width():
    m = small()
    with pytest.raises(ag.ShapeError):
        m.forward(np.zeros((1, 4, 5)))


def test_state_dict_round_trip():
    a, b = small(), SGNet(ModelConfig(**SMALL), seed=5, dtype=np.float64)
    b.load_state_dict(a.state_dict())
    X, _ = rand_inputs(a)
    noise = np.zeros((4, 2, 3, 3))
    assert a.forward(X, noise=noise)[-1].trajectories.data.tobytes() == \
        b.forward(X, noise=noise)[-1].trajectories.data.tobytes()


# ----------------------------------------------------------------------------
# end-to-end gradients


@pytest.mark.parametrize("overrides", [
    {},
    {"mode": "deterministic"},
    {"sge_variant": "feedforward"},
    {"sge_variant": "convolutional"},
    {"ablation": "E"},
    {"ablation": "D"},
    {"input_dim": 8, "aux_dim": 2},
])
def test_end_to_end_gradcheck(overrides):
    report = model_gradcheck(tiny_model(seed=3, **overrides), probes=60, seed=3)
    assert report.passed, "\n".join(report.lines())


def test_gradcheck_mutation_is_caught():
    with ag.inject_fault("tanh"):
        report = model_gradcheck(tiny_model(seed=3), probes=60, seed=3)
    assert not report.passed
