"""Model assembly, bound reductions, identities, and a replay oracle.

The replay oracle re-implements the entire L=2 forward math in straight-line
numpy from the extracted weights, independently of the layer/tape classes,
and must agree with the packaged bounds to 1e-10.
"""

import math

import numpy as np
import pytest

from hvaeood.autodiff import no_grad
from hvaeood.checkpoint import load_checkpoint, save_checkpoint
from hvaeood.distributions import FreeBitsSchedule
from hvaeood.model import (
    BoundNoise,
    HvaeConfig,
    InvalidK,
    InvalidL,
    bound_gt_k,
    bound_lt_l,
    build,
    draw_bound_noise,
    elbo,
    kl_decomposition,
    reconstruct,
)

rng = np.random.default_rng(40)


def tiny_config(L=3, dims=(4, 3, 2), input_dim=16, seed=1):
    return HvaeConfig(
        num_layers=L,
        latent_dims=dims[:L],
        hidden_dim=8,
        blocks_per_transform=1,
        input_dim=input_dim,
        seed=seed,
        free_bits=FreeBitsSchedule(0.0, 0, 1),
        warmup_epochs=1,
        epochs=4,
        batch_size=8,
    )


def binary_batch(n, d, seed=0):
    local = np.random.default_rng(seed)
    return (local.random((n, d)) < 0.4).astype(np.float64)


@pytest.fixture(scope="module")
def tiny_model():
    cfg = tiny_config()
    x = binary_batch(32, cfg.input_dim, seed=3)
    return build(cfg, x, np.random.default_rng(0)), x


def test_build_init_statistics():
    cfg = tiny_config(dims=(6, 4, 3), input_dim=20)
    x = binary_batch(64, cfg.input_dim, seed=5)
    model = build(cfg, x, np.random.default_rng(0))
    from hvaeood.autodiff import Tensor
    from hvaeood.model import inference_pass

    with no_grad():
        records = inference_pass(model, Tensor(x), 0, draw_bound_noise(model, 64, np.random.default_rng(1)).posterior)
    q1 = records[0].params
    assert np.max(np.abs(q1.mean.data.mean(axis=0))) < 0.1
    mean_var = np.exp(q1.log_variance.data).mean()
    assert 0.5 < mean_var < 2.0


def test_build_determinism():
    cfg = tiny_config()
    x = binary_batch(16, cfg.input_dim, seed=2)
    a = build(cfg, x, np.random.default_rng(9))
    b = build(cfg, x, np.random.default_rng(9))
    for (name_a, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data, err_msg=name_a)


def test_build_rejects_single_example():
    cfg = tiny_config()
    with pytest.raises(ValueError):
        build(cfg, binary_batch(1, cfg.input_dim), np.random.default_rng(0))


def test_checkpoint_roundtrip_bit_exact(tiny_model, tmp_path):
    model, x = tiny_model
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    clone = load_checkpoint(path)
    for (name, pa), (_, pb) in zip(model.named_parameters(), clone.named_parameters()):
        np.testing.assert_array_equal(pa.data, pb.data, err_msg=name)
    noise = draw_bound_noise(model, 4, np.random.default_rng(4))
    with no_grad():
        a = elbo(model, x[:4], noise=noise).per_example_value
        b = elbo(clone, x[:4], noise=noise).per_example_value
    np.testing.assert_array_equal(a, b)
    assert (tmp_path / "model.ckpt.manifest.json").exists()


def test_gt0_equals_elbo_bit_exact(tiny_model):
    model, x = tiny_model
    noise = draw_bound_noise(model, 8, np.random.default_rng(11))
    with no_grad():
        base = elbo(model, x[:8], noise=noise)
        zero = bound_gt_k(model, x[:8], 0, noise=noise)
    np.testing.assert_array_equal(zero.per_example_value, base.per_example_value)
    np.testing.assert_array_equal(zero.per_layer_terms, base.per_layer_terms)


def test_ltL_equals_elbo_bit_exact(tiny_model):
    model, x = tiny_model
    noise = draw_bound_noise(model, 8, np.random.default_rng(12))
    with no_grad():
        base = elbo(model, x[:8], noise=noise)
        top = bound_lt_l(model, x[:8], 3, noise=noise)
    np.testing.assert_array_equal(top.per_example_value, base.per_example_value)


def test_invalid_k_and_l(tiny_model):
    model, x = tiny_model
    with pytest.raises(InvalidK):
        bound_gt_k(model, x[:2], 4, rng=np.random.default_rng(0))
    with pytest.raises(InvalidK):
        bound_gt_k(model, x[:2], -1, rng=np.random.default_rng(0))
    with pytest.raises(InvalidL):
        bound_lt_l(model, x[:2], 0, rng=np.random.default_rng(0))
    with pytest.raises(InvalidL):
        bound_lt_l(model, x[:2], 4, rng=np.random.default_rng(0))


def test_per_layer_terms_row_sum_identity(tiny_model):
    model, x = tiny_model
    for maker in (
        lambda noise: elbo(model, x[:8], noise=noise),
        lambda noise: bound_gt_k(model, x[:8], 1, noise=noise),
        lambda noise: bound_gt_k(model, x[:8], 2, noise=noise),
        lambda noise: bound_lt_l(model, x[:8], 1, noise=noise),
        lambda noise: bound_lt_l(model, x[:8], 2, noise=noise),
    ):
        noise = draw_bound_noise(model, 8, np.random.default_rng(13))
        with no_grad():
            result = maker(noise)
        np.testing.assert_allclose(
            result.per_layer_terms.sum(axis=1), result.per_example_value, atol=1e-10
        )


def test_kl_decomposition_sum_identity(tiny_model):
    model, x = tiny_model
    noise = draw_bound_noise(model, 8, np.random.default_rng(14))
    with no_grad():
        base = elbo(model, x[:8], noise=noise)
        terms = kl_decomposition(model, x[:8], noise=noise)
    assert terms.shape == (8, 3)
    reconstructed = base.per_layer_terms[:, 0] + terms.sum(axis=1)
    np.testing.assert_allclose(reconstructed, base.per_example_value, atol=1e-10)


def test_kl_decomposition_single_layer_is_negative_kl_estimate():
    cfg = tiny_config(L=1, dims=(3,), input_dim=12)
    x = binary_batch(16, cfg.input_dim, seed=8)
    model = build(cfg, x, np.random.default_rng(2))
    noise = draw_bound_noise(model, 4, np.random.default_rng(3))
    with no_grad():
        terms = kl_decomposition(model, x[:4], noise=noise)
    assert terms.shape == (4, 1)
    # one term log p(z) - log q(z|x): its negation estimates KL(q || p)
    assert np.isfinite(terms).all()


def test_deterministic_given_noise(tiny_model):
    model, x = tiny_model
    noise = draw_bound_noise(model, 4, np.random.default_rng(15))
    with no_grad():
        a = bound_gt_k(model, x[:4], 1, noise=noise).per_example_value
        b = bound_gt_k(model, x[:4], 1, noise=noise).per_example_value
    np.testing.assert_array_equal(a, b)


def test_iwae_monotone_in_samples(tiny_model):
    model, x = tiny_model
    with no_grad():
        one = elbo(model, x[:16], S=1, rng=np.random.default_rng(16)).per_example_value
        many = elbo(model, x[:16], S=64, rng=np.random.default_rng(17)).per_example_value
    assert many.mean() >= one.mean() - 0.5


def test_reconstruct_output_range(tiny_model):
    model, x = tiny_model
    probs = reconstruct(model, x[:4], 1, np.random.default_rng(18))
    assert probs.shape == (4, 16)
    assert np.all(probs > 0) and np.all(probs < 1)
    with pytest.raises(InvalidK):
        reconstruct(model, x[:4], 7, np.random.default_rng(0))


def test_lt_meta_flags_integrand():
    cfg = tiny_config()
    x = binary_batch(8, cfg.input_dim, seed=9)
    model = build(cfg, x, np.random.default_rng(1))
    with no_grad():
        result = bound_lt_l(model, x[:4], 1, rng=np.random.default_rng(2))
    assert "integrand_note" in result.meta


# ---------------------------------------------------------------------------
# straight-line replay oracle (L=2)
# ---------------------------------------------------------------------------


def _wn(layer):
    v, g, b = layer.v.data, layer.g.data, layer.b.data
    w = g * v / np.sqrt((v**2).sum(axis=0))
    return w, b


def _np_dense(layer, x):
    w, b = _wn(layer)
    return x @ w + b


def _np_transform(transform, x):
    h = _np_dense(transform.entry, x)
    for block in transform.blocks:
        inner = _np_dense(block.first, np.maximum(h, 0.0))
        h = _np_dense(block.second, np.maximum(inner, 0.0)) + h
    return h


def _np_head(layer, primary, skip):
    if layer.skip_proj is not None:
        primary = np.concatenate([primary, _np_dense(layer.skip_proj, skip)], axis=1)
    h = _np_transform(layer.transform, primary)
    mu = _np_dense(layer.mean_head, h)
    raw = _np_dense(layer.rawvar_head, h)
    beta = math.log(2.0)
    bx = beta * raw
    sp = np.maximum(raw, 0.0) + np.log1p(np.exp(-np.abs(bx))) / beta
    lv = np.where(bx < -30.0, bx - math.log(beta), np.log(np.where(bx < -30.0, 1.0, sp)))
    return mu, np.clip(lv, -14.0, 14.0)


def _np_logits(decoder, primary, skip):
    if decoder.skip_proj is not None:
        primary = np.concatenate([primary, _np_dense(decoder.skip_proj, skip)], axis=1)
    return _np_dense(decoder.logits_head, _np_transform(decoder.transform, primary))


def _np_gauss(z, mu, lv):
    return -0.5 * (math.log(2 * math.pi) + lv + (z - mu) ** 2 / np.exp(lv)).sum(axis=1)


def _np_bern(logits, x):
    soft_pos = np.maximum(-logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
    soft_neg = np.maximum(logits, 0.0) + np.log1p(np.exp(-np.abs(logits)))
    return (x * (-soft_pos) + (1 - x) * (-soft_neg)).sum(axis=1)


@pytest.fixture(scope="module")
def two_layer_setup():
    cfg = tiny_config(L=2, dims=(3, 2), input_dim=10, seed=6)
    x = binary_batch(12, cfg.input_dim, seed=21)
    model = build(cfg, x, np.random.default_rng(5))
    local = np.random.default_rng(33)
    noise = BoundNoise(
        posterior=[local.standard_normal((5, 3)), local.standard_normal((5, 2))],
        prior=[local.standard_normal((5, 3)), local.standard_normal((5, 2))],
    )
    return model, x[:5], noise


def test_replay_oracle_elbo(two_layer_setup):
    model, x, noise = two_layer_setup
    with no_grad():
        got = elbo(model, x, noise=noise).per_example_value

    mu1, lv1 = _np_head(model.inference[0], x, None)
    z1 = mu1 + np.exp(lv1 / 2) * noise.posterior[0]
    mu2, lv2 = _np_head(model.inference[1], z1, x)
    z2 = mu2 + np.exp(lv2 / 2) * noise.posterior[1]
    pmu1, plv1 = _np_head(model.cond_prior_layer(1), z2, None)
    logits = _np_logits(model.decoder, z1, z2)
    want = (
        _np_bern(logits, x)
        + (_np_gauss(z1, pmu1, plv1) - _np_gauss(z1, mu1, lv1))
        + (_np_gauss(z2, np.zeros_like(z2), np.zeros_like(z2)) - _np_gauss(z2, mu2, lv2))
    )
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_replay_oracle_gt1(two_layer_setup):
    model, x, noise = two_layer_setup
    with no_grad():
        got = bound_gt_k(model, x, 1, noise=noise).per_example_value

    mu1, _ = _np_head(model.inference[0], x, None)
    d1 = mu1  # mode forwarding
    mu2, lv2 = _np_head(model.inference[1], d1, x)
    z2 = mu2 + np.exp(lv2 / 2) * noise.posterior[1]
    pmu1, plv1 = _np_head(model.cond_prior_layer(1), z2, None)
    z1 = pmu1 + np.exp(plv1 / 2) * noise.prior[0]
    logits = _np_logits(model.decoder, z1, z2)
    want = (
        _np_bern(logits, x)
        + _np_gauss(z2, np.zeros_like(z2), np.zeros_like(z2))
        - _np_gauss(z2, mu2, lv2)
    )
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_replay_oracle_lt1(two_layer_setup):
    model, x, noise = two_layer_setup
    with no_grad():
        got = bound_lt_l(model, x, 1, noise=noise).per_example_value

    mu1, lv1 = _np_head(model.inference[0], x, None)
    z1 = mu1 + np.exp(lv1 / 2) * noise.posterior[0]
    z2 = noise.prior[1]  # standard-normal top prior draw
    pmu1, plv1 = _np_head(model.cond_prior_layer(1), z2, None)
    logits = _np_logits(model.decoder, z1, z2)
    want = _np_bern(logits, x) + _np_gauss(z1, pmu1, plv1) - _np_gauss(z1, mu1, lv1)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_full_elbo_gradient_matches_finite_differences():
    """Tape gradient of the full 3-layer bound vs central differences."""
    from hvaeood.autodiff import finite_diff_check
    from hvaeood.optim import Adam
    from hvaeood.training import training_step

    cfg = tiny_config()
    local = np.random.default_rng(0)
    xtrain = (local.random((64, cfg.input_dim)) < local.random((1, cfg.input_dim))).astype(np.float64)
    model = build(cfg, xtrain[:32], local)
    optimizer = Adam(model.parameters(), learning_rate=3e-3)
    srng = np.random.default_rng(2)
    for step in range(60):  # settle into a sane regime first
        lo = (step * 8) % 56
        loss, _, _ = training_step(model, xtrain[lo : lo + 8], 1.0, 5, srng)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

    x = xtrain[:2]
    noise = draw_bound_noise(model, 2, np.random.default_rng(5))

    def f():
        _, value = elbo(model, x, S=1, noise=noise, keep_graph=True)
        return value.sum()

    err = finite_diff_check(f, model.parameters(), epsilon=1e-5)
    assert err < 1e-4
