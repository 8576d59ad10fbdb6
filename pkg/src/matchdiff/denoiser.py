"""Matching-matrix denoiser: coordinate-rotary attention over two clouds.

One denoising call refines a noisy matching matrix in five stages: project the
squashed iterate onto the relaxed doubly stochastic set, fit a rigid warp from
its top-weighted correspondences, re-encode the warped source coordinates with
the rotary position map, run interleaved self/cross attention symmetrically
over both feature sets, and project the resulting matching logits again. The
current timestep is deliberately not an input; all conditioning enters through
the iterate itself. The warp fit (SVD) is constant under differentiation, so
gradients reach parameters only through the attention/logit path.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import sqrt

import numpy as np

from . import dsm, geometry, tensor
from .errors import ConfigError, DegenerateGeometryError, DimensionError
from .tensor import DiffValue


@dataclass(frozen=True)
class DenoiserConfig:
    """Model shape and in-loop projection settings.

    d_model must be divisible by 6 (three coordinate axes, two channels per
    rotation pair). n_layers counts individual interleaved attention layers
    (self, cross, self, ...), each applied to both clouds with shared
    parameters. Only single-head attention is supported.
    """

    d_model: int = 66
    n_layers: int = 2
    n_heads: int = 1
    rotary_freq_base: float = 10000.0
    sinkhorn_iters_inner: int = 5
    sinkhorn_mode_inner: str = "relaxed"
    procrustes_k: int = 128

    def __post_init__(self):
        if self.d_model <= 0 or self.d_model % 6 != 0:
            raise ConfigError(f"d_model must be a positive multiple of 6, got {self.d_model}")
        if self.n_layers < 0:
            raise ConfigError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.n_heads != 1:
            raise ConfigError(f"only single-head attention is supported, got n_heads={self.n_heads}")
        if self.sinkhorn_iters_inner < 1:
            raise ConfigError(f"sinkhorn_iters_inner must be >= 1, got {self.sinkhorn_iters_inner}")
        if self.sinkhorn_mode_inner not in dsm.MODES:
            raise ConfigError(f"unknown sinkhorn mode {self.sinkhorn_mode_inner!r}")
        if self.procrustes_k < 3:
            raise ConfigError(f"procrustes_k must be >= 3, got {self.procrustes_k}")


@dataclass(frozen=True)
class RotaryEncoding:
    """Per-point cos/sin of the channel-pair rotation angles, shape (n, d/2)."""

    cos: np.ndarray
    sin: np.ndarray


def rotary_encode(coords: np.ndarray, d_model: int, freq_base: float = 10000.0) -> RotaryEncoding:
    """Angles for channel pair i: theta_i = c_{i mod 3} * freq_base^(-2i/(d/3)),
    cycling the point's x, y, z coordinates through the frequency ladder."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise DimensionError(f"expected (n, 3) coords, got {coords.shape}")
    if d_model % 6 != 0:
        raise ConfigError(f"d_model must be a multiple of 6, got {d_model}")
    half = d_model // 2
    i = np.arange(half)
    freqs = freq_base ** (-2.0 * i / (d_model / 3.0))
    theta = coords[:, i % 3] * freqs
    return RotaryEncoding(cos=np.cos(theta), sin=np.sin(theta))


def apply_rotary(feats: np.ndarray, rot: RotaryEncoding) -> np.ndarray:
    """Plain-ndarray rotation of channel pairs (test/analysis helper)."""
    out = np.empty_like(np.asarray(feats, dtype=np.float64))
    ev, od = feats[:, 0::2], feats[:, 1::2]
    out[:, 0::2] = rot.cos * ev - rot.sin * od
    out[:, 1::2] = rot.sin * ev + rot.cos * od
    return out


def _mlp3(x: DiffValue, params: dict[str, DiffValue], prefix: str) -> DiffValue:
    h = tensor.relu(tensor.add(tensor.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    h = tensor.relu(tensor.add(tensor.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"]))
    return tensor.add(tensor.matmul(h, params[f"{prefix}.w3"]), params[f"{prefix}.b3"])


def attention_layer(
    f_src: DiffValue,
    f_ctx: DiffValue,
    rot_src: RotaryEncoding,
    rot_ctx: RotaryEncoding,
    params: dict[str, DiffValue],
    prefix: str,
    mode: str = "cross",
) -> DiffValue:
    """Single-head attention of f_src over f_ctx with rotary-rotated queries
    and keys, followed by a residual 3-layer MLP over [f_i, message_i]."""
    if mode not in ("self", "cross"):
        raise ConfigError(f"mode must be 'self' or 'cross', got {mode!r}")
    if mode == "self":
        f_ctx, rot_ctx = f_src, rot_src
    d = f_src.data.shape[1]
    q = tensor.rotate_channel_pairs(tensor.matmul(f_src, params[f"{prefix}.wq"]), rot_src.cos, rot_src.sin)
    k = tensor.rotate_channel_pairs(tensor.matmul(f_ctx, params[f"{prefix}.wk"]), rot_ctx.cos, rot_ctx.sin)
    v = tensor.matmul(f_ctx, params[f"{prefix}.wv"])
    att = tensor.softmax_rows(tensor.scale(tensor.matmul(q, tensor.transpose(k)), 1.0 / sqrt(d)))
    msg = tensor.matmul(att, v)
    return tensor.add(f_src, _mlp3(tensor.concat_channels(f_src, msg), params, f"{prefix}.mlp"))


def f_theta(
    f_p: DiffValue,
    f_q: DiffValue,
    rot_p: RotaryEncoding,
    rot_q: RotaryEncoding,
    params: dict[str, DiffValue],
    cfg: DenoiserConfig,
) -> tuple[DiffValue, DiffValue]:
    """Interleaved attention stack applied symmetrically to both clouds.

    Even layers are self-attention on each cloud, odd layers cross-attention
    in both directions; each layer's parameters are shared between the two
    sides, and cross updates read the pre-update features of both."""
    for i in range(cfg.n_layers):
        prefix = f"denoiser.layer{i}"
        if i % 2 == 0:
            f_p = attention_layer(f_p, f_p, rot_p, rot_p, params, prefix, mode="self")
            f_q = attention_layer(f_q, f_q, rot_q, rot_q, params, prefix, mode="self")
        else:
            new_p = attention_layer(f_p, f_q, rot_p, rot_q, params, prefix, mode="cross")
            new_q = attention_layer(f_q, f_p, rot_q, rot_p, params, prefix, mode="cross")
            f_p, f_q = new_p, new_q
    return f_p, f_q


def matching_logits(
    f_p: DiffValue,
    f_q: DiffValue,
    rot_p: RotaryEncoding,
    rot_q: RotaryEncoding,
    params: dict[str, DiffValue],
    prefix: str = "denoiser.match",
) -> DiffValue:
    """Scaled inner products of rotary-rotated projections:
    logits[i, j] = <rot_p(W_p f_p_i), rot_q(W_q f_q_j)> / sqrt(d)."""
    d = f_p.data.shape[1]
    mp = tensor.rotate_channel_pairs(tensor.matmul(f_p, params[f"{prefix}.wp"]), rot_p.cos, rot_p.sin)
    mq = tensor.rotate_channel_pairs(tensor.matmul(f_q, params[f"{prefix}.wq"]), rot_q.cos, rot_q.sin)
    return tensor.scale(tensor.matmul(mp, tensor.transpose(mq)), 1.0 / sqrt(d))


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    """log(sigmoid(x)) without overflow for large |x|."""
    return np.where(x < 0, x - np.log1p(np.exp(-np.abs(x))), -np.log1p(np.exp(-np.abs(x))))


def g_theta(
    e_t: np.ndarray,
    p: np.ndarray,
    q: np.ndarray,
    f_p: DiffValue,
    f_q: DiffValue,
    params: dict[str, DiffValue],
    cfg: DenoiserConfig,
) -> DiffValue:
    """Denoise one raw iterate into a matching-matrix estimate.

    e_t is the unprojected iterate; the squash-and-project confinement
    (sigmoid then Sinkhorn) happens here, so callers pass pre-sigmoid values
    from both the forward draw and the reverse chain. The projected iterate
    only steers the rigid warp; gradients flow through attention and the
    final unrolled projection.
    """
    e_t = np.asarray(e_t, dtype=np.float64)
    n, m = len(p), len(q)
    if e_t.shape != (n, m):
        raise DimensionError(f"iterate {e_t.shape} inconsistent with clouds {n}x{m}")
    e_proj = dsm.sinkhorn_project_log(
        _log_sigmoid(e_t), iters=cfg.sinkhorn_iters_inner, mode=cfg.sinkhorn_mode_inner
    )
    try:
        rt = geometry.soft_procrustes(e_proj, p, q, k=min(cfg.procrustes_k, n, m))
        p_warped = geometry.rigid_warp(p, rt)
    except DegenerateGeometryError:
        # an uninformative iterate can concentrate its top entries on too few
        # distinct points to pin a rotation; steer with the unwarped source
        p_warped = p
    rot_p = rotary_encode(p_warped, cfg.d_model, cfg.rotary_freq_base)
    rot_q = rotary_encode(q, cfg.d_model, cfg.rotary_freq_base)
    h_p, h_q = f_theta(f_p, f_q, rot_p, rot_q, params, cfg)
    logits = matching_logits(h_p, h_q, rot_p, rot_q, params)
    return dsm.sinkhorn_unrolled(logits, iters=cfg.sinkhorn_iters_inner, mode=cfg.sinkhorn_mode_inner)
