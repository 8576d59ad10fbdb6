"""Rotary encoding algebra, attention mechanics, and the assembled denoiser."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import fd_grad_check
from matchdiff import denoiser, dsm, pipeline, tensor
from matchdiff.denoiser import DenoiserConfig
from matchdiff.errors import ConfigError, DimensionError


def small_cfg(**kw):
    defaults = dict(d_model=6, n_layers=2, sinkhorn_iters_inner=4, procrustes_k=4)
    defaults.update(kw)
    return DenoiserConfig(**defaults)


def zero_layer_params(d, prefix="denoiser.layer0"):
    shapes = {
        f"{prefix}.wq": (d, d),
        f"{prefix}.wk": (d, d),
        f"{prefix}.wv": (d, d),
        f"{prefix}.mlp.w1": (2 * d, d),
        f"{prefix}.mlp.b1": (1, d),
        f"{prefix}.mlp.w2": (d, d),
        f"{prefix}.mlp.b2": (1, d),
        f"{prefix}.mlp.w3": (d, d),
        f"{prefix}.mlp.b3": (1, d),
    }
    return {name: tensor.value(np.zeros(shape)) for name, shape in shapes.items()}


def test_config_validation():
    with pytest.raises(ConfigError):
        DenoiserConfig(d_model=64)  # not a multiple of 6
    with pytest.raises(ConfigError):
        DenoiserConfig(d_model=0)
    with pytest.raises(ConfigError):
        DenoiserConfig(n_layers=-1)
    with pytest.raises(ConfigError):
        DenoiserConfig(n_heads=2)
    with pytest.raises(ConfigError):
        DenoiserConfig(sinkhorn_iters_inner=0)
    with pytest.raises(ConfigError):
        DenoiserConfig(sinkhorn_mode_inner="fast")
    with pytest.raises(ConfigError):
        DenoiserConfig(procrustes_k=2)


def test_rotary_validation():
    with pytest.raises(ConfigError):
        denoiser.rotary_encode(np.zeros((2, 3)), 8)
    with pytest.raises(DimensionError):
        denoiser.rotary_encode(np.zeros((2, 2)), 6)


def test_rotary_identity_at_origin():
    rot = denoiser.rotary_encode(np.zeros((3, 3)), 12)
    np.testing.assert_array_equal(rot.cos, np.ones((3, 6)))
    np.testing.assert_array_equal(rot.sin, np.zeros((3, 6)))
    feats = np.random.default_rng(0).normal(size=(3, 12))
    np.testing.assert_array_equal(denoiser.apply_rotary(feats, rot), feats)


def test_rotary_frequency_ladder():
    """Channel pair i rotates by coords[i % 3] * base^(-2i/(d/3))."""
    coords = np.array([[0.5, -1.0, 2.0]])
    d, base = 12, 100.0
    rot = denoiser.rotary_encode(coords, d, base)
    i = np.arange(6)
    theta = coords[0, i % 3] * base ** (-2.0 * i / (d / 3.0))
    np.testing.assert_allclose(rot.cos[0], np.cos(theta), atol=1e-15)
    np.testing.assert_allclose(rot.sin[0], np.sin(theta), atol=1e-15)


@given(st.integers(0, 10_000))
def test_rotary_preserves_norms(seed):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-2, 2, size=(4, 3))
    feats = rng.normal(size=(4, 12))
    rotated = denoiser.apply_rotary(feats, denoiser.rotary_encode(coords, 12))
    np.testing.assert_allclose(
        np.linalg.norm(rotated, axis=1), np.linalg.norm(feats, axis=1), atol=1e-12
    )


@given(st.integers(0, 10_000))
def test_rotary_scores_are_relative(seed):
    """<rot(u, a), rot(v, b)> equals <u, rot(v, b - a)>: scores depend only on
    coordinate differences, hence are invariant to joint translation."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, size=(1, 3))
    b = rng.uniform(-1, 1, size=(1, 3))
    u = rng.normal(size=(1, 12))
    v = rng.normal(size=(1, 12))
    lhs = np.dot(
        denoiser.apply_rotary(u, denoiser.rotary_encode(a, 12))[0],
        denoiser.apply_rotary(v, denoiser.rotary_encode(b, 12))[0],
    )
    rhs = np.dot(u[0], denoiser.apply_rotary(v, denoiser.rotary_encode(b - a, 12))[0])
    assert lhs == pytest.approx(rhs, abs=1e-10)


def test_attention_zero_qk_is_uniform_average():
    """With wq = wk = 0 attention weights are uniform, so the message is the
    column mean of the values; an identity-shaped MLP exposes it."""
    d, n, m = 6, 3, 5
    rng = np.random.default_rng(2)
    f_src = tensor.value(rng.uniform(0.1, 1.0, size=(n, d)))
    f_ctx = tensor.value(rng.uniform(0.1, 1.0, size=(m, d)))
    params = zero_layer_params(d)
    params["denoiser.layer0.wv"] = tensor.value(np.eye(d))
    # w1 reads the message half of [f, msg]; values are positive so relu is inert
    w1 = np.zeros((2 * d, d))
    w1[d:] = np.eye(d)
    params["denoiser.layer0.mlp.w1"] = tensor.value(w1)
    params["denoiser.layer0.mlp.w2"] = tensor.value(np.eye(d))
    params["denoiser.layer0.mlp.w3"] = tensor.value(np.eye(d))
    rot_src = denoiser.rotary_encode(np.zeros((n, 3)), d)
    rot_ctx = denoiser.rotary_encode(np.zeros((m, 3)), d)
    out = denoiser.attention_layer(f_src, f_ctx, rot_src, rot_ctx, params, "denoiser.layer0")
    want = f_src.data + np.tile(f_ctx.data.mean(axis=0), (n, 1))
    np.testing.assert_allclose(out.data, want, atol=1e-12)


def test_attention_zero_mlp_is_identity():
    d, n = 6, 4
    rng = np.random.default_rng(3)
    f = tensor.value(rng.normal(size=(n, d)))
    params = zero_layer_params(d)
    params["denoiser.layer0.wq"] = tensor.value(rng.normal(size=(d, d)))
    params["denoiser.layer0.wk"] = tensor.value(rng.normal(size=(d, d)))
    params["denoiser.layer0.wv"] = tensor.value(rng.normal(size=(d, d)))
    rot = denoiser.rotary_encode(rng.normal(size=(n, 3)), d)
    out = denoiser.attention_layer(f, f, rot, rot, params, "denoiser.layer0", mode="self")
    np.testing.assert_array_equal(out.data, f.data)


def test_attention_single_context_point():
    """With one key, softmax weight is exactly 1 regardless of parameters."""
    d = 6
    rng = np.random.default_rng(4)
    params = zero_layer_params(d)
    for name in ("wq", "wk", "wv"):
        params[f"denoiser.layer0.{name}"] = tensor.value(rng.normal(size=(d, d)))
    w1 = np.zeros((2 * d, d))
    w1[d:] = np.eye(d)
    params["denoiser.layer0.mlp.w1"] = tensor.value(w1)
    params["denoiser.layer0.mlp.w2"] = tensor.value(np.eye(d))
    params["denoiser.layer0.mlp.w3"] = tensor.value(np.eye(d))
    f_src = tensor.value(rng.normal(size=(3, d)))
    f_ctx = tensor.value(rng.uniform(0.1, 1.0, size=(1, d)))
    rot_src = denoiser.rotary_encode(np.zeros((3, 3)), d)
    rot_ctx = denoiser.rotary_encode(np.zeros((1, 3)), d)
    out = denoiser.attention_layer(f_src, f_ctx, rot_src, rot_ctx, params, "denoiser.layer0")
    v = f_ctx.data @ params["denoiser.layer0.wv"].data
    want = f_src.data + np.maximum(np.maximum(v, 0.0), 0.0)  # relu twice on the same row
    np.testing.assert_allclose(out.data, np.broadcast_to(want, out.data.shape), atol=1e-12)


def test_attention_mode_validation():
    d = 6
    f = tensor.value(np.zeros((2, d)))
    rot = denoiser.rotary_encode(np.zeros((2, 3)), d)
    with pytest.raises(ConfigError):
        denoiser.attention_layer(f, f, rot, rot, zero_layer_params(d), "denoiser.layer0", mode="bi")


def test_f_theta_zero_layers_is_identity():
    cfg = small_cfg(n_layers=0)
    rng = np.random.default_rng(5)
    f_p = tensor.value(rng.normal(size=(4, 6)))
    f_q = tensor.value(rng.normal(size=(3, 6)))
    rot_p = denoiser.rotary_encode(rng.normal(size=(4, 3)), 6)
    rot_q = denoiser.rotary_encode(rng.normal(size=(3, 3)), 6)
    h_p, h_q = denoiser.f_theta(f_p, f_q, rot_p, rot_q, {}, cfg)
    assert h_p is f_p and h_q is f_q


def test_f_theta_shapes_and_layer_count():
    cfg = small_cfg(n_layers=3)
    rng = np.random.default_rng(6)
    params = pipeline.init_params(cfg, rng)
    f_p = tensor.value(rng.normal(size=(5, 6)))
    f_q = tensor.value(rng.normal(size=(4, 6)))
    rot_p = denoiser.rotary_encode(rng.normal(size=(5, 3)), 6)
    rot_q = denoiser.rotary_encode(rng.normal(size=(4, 3)), 6)
    h_p, h_q = denoiser.f_theta(f_p, f_q, rot_p, rot_q, params, cfg)
    assert h_p.data.shape == (5, 6)
    assert h_q.data.shape == (4, 6)
    assert any(name.startswith("denoiser.layer2.") for name in params)


def test_matching_logits_gram_at_origin():
    """With identity projections and zero coordinates the logits reduce to the
    scaled feature Gram matrix."""
    d = 6
    rng = np.random.default_rng(7)
    f_p = tensor.value(rng.normal(size=(4, d)))
    f_q = tensor.value(rng.normal(size=(3, d)))
    rot = denoiser.rotary_encode(np.zeros((4, 3)), d)
    rot_q = denoiser.rotary_encode(np.zeros((3, 3)), d)
    params = {"denoiser.match.wp": tensor.value(np.eye(d)), "denoiser.match.wq": tensor.value(np.eye(d))}
    logits = denoiser.matching_logits(f_p, f_q, rot, rot_q, params)
    np.testing.assert_allclose(logits.data, f_p.data @ f_q.data.T / np.sqrt(d), atol=1e-12)


def make_g_theta_inputs(seed, n=6, m=6, d=6, n_layers=2):
    rng = np.random.default_rng(seed)
    cfg = small_cfg(d_model=d, n_layers=n_layers, procrustes_k=max(3, min(n, m)))
    params = pipeline.init_params(cfg, rng)
    p = rng.uniform(-1, 1, size=(n, 3))
    q = rng.uniform(-1, 1, size=(m, 3))
    f_p = tensor.value(rng.normal(size=(n, d)))
    f_q = tensor.value(rng.normal(size=(m, d)))
    e_t = rng.standard_normal((n, m))
    return cfg, params, p, q, f_p, f_q, e_t


@pytest.mark.parametrize("seed", range(5))
def test_g_theta_output_is_sub_stochastic(seed):
    cfg, params, p, q, f_p, f_q, e_t = make_g_theta_inputs(seed)
    out = denoiser.g_theta(e_t, p, q, f_p, f_q, params, cfg)
    assert out.data.shape == (6, 6)
    assert dsm.is_doubly_stochastic(out.data, tol=1e-9, mode="relaxed")


def test_g_theta_deterministic():
    cfg, params, p, q, f_p, f_q, e_t = make_g_theta_inputs(11)
    a = denoiser.g_theta(e_t, p, q, f_p, f_q, params, cfg).data
    b = denoiser.g_theta(e_t, p, q, f_p, f_q, params, cfg).data
    np.testing.assert_array_equal(a, b)


def test_g_theta_joint_translation_invariance():
    """Shifting both clouds by one offset leaves the estimate unchanged:
    rotary scores see only coordinate differences and the warp follows the
    clouds."""
    cfg, params, p, q, f_p, f_q, e_t = make_g_theta_inputs(12)
    base = denoiser.g_theta(e_t, p, q, f_p, f_q, params, cfg).data
    offset = np.array([0.7, -1.3, 0.4])
    shifted = denoiser.g_theta(e_t, p + offset, q + offset, f_p, f_q, params, cfg).data
    np.testing.assert_allclose(shifted, base, atol=1e-9)


def test_g_theta_shape_validation():
    cfg, params, p, q, f_p, f_q, _ = make_g_theta_inputs(13)
    with pytest.raises(DimensionError):
        denoiser.g_theta(np.zeros((3, 3)), p, q, f_p, f_q, params, cfg)


@pytest.mark.parametrize("seed", range(3))
def test_g_theta_end_to_end_gradients(seed):
    """FD check through attention, matching logits, and the unrolled
    projection; the warp branch is parameter-independent so analytic gradients
    are exact despite the SVD being constant under differentiation."""
    cfg, params, p, q, f_p, f_q, e_t = make_g_theta_inputs(seed, n=5, m=4)
    target = (np.random.default_rng(seed).uniform(size=(5, 4)) < 0.3).astype(float)
    leaves = dict(params)
    leaves["f_p"] = f_p
    leaves["f_q"] = f_q

    def build():
        out = denoiser.g_theta(e_t, p, q, f_p, f_q, params, cfg)
        return pipeline.focal_loss(out, target)

    fd_grad_check(build, leaves, tol=1e-3)
