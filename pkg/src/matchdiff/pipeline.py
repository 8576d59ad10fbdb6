"""Training and sampling loops tying the modules together.

Training draws one timestep per scene pair, forms the closed-form forward
iterate of the ground-truth matching matrix, denoises it, and optimizes a
focal objective weighted by (T - t + 1) / T, so low-noise timesteps (the late
end of the reverse chain) count most, plus a focal term on the backbone's
initial matching. A third monitored term, the mean warp
residual over ground-truth pairs, is reported but carries no gradient (the
rigid fit is constant under differentiation). Batches accumulate gradients
sequentially and take one Adam step.

Reverse sampling walks the tau subsequence from T down, denoising and
stepping; with eta=0 it is fully deterministic given the starting iterate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from math import sqrt

import numpy as np

from . import denoiser, dsm, encoder, geometry, schedule as schedule_mod, tensor
from .data import ScenePair, gt_matching_matrix, mutual_nn_pairs, rng_for
from .denoiser import DenoiserConfig
from .encoder import EncoderConfig
from .errors import ConfigError, DimensionError, NumericError
from .geometry import RigidTransform
from .schedule import DiffusionSchedule, TauSubsequence
from .tensor import DiffValue

logger = logging.getLogger("matchdiff")

INIT_MODES = ("gaussian", "backbone")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 2
    learning_rate: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    lambda_simple: float = 1.0
    lambda_m: float = 1.0
    lambda_w: float = 1.0
    freeze_encoder: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(f"epochs and batch_size must be >= 1, got {self.epochs}, {self.batch_size}")
        if self.learning_rate <= 0.0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        b1, b2 = self.adam_betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ConfigError(f"adam betas must lie in [0, 1), got {self.adam_betas}")
        if self.focal_gamma < 0.0 or not 0.0 <= self.focal_alpha <= 1.0:
            raise ConfigError(
                f"need focal_gamma >= 0 and focal_alpha in [0, 1], got {self.focal_gamma}, {self.focal_alpha}"
            )


@dataclass(frozen=True)
class SampleConfig:
    init_mode: str = "gaussian"
    steps: int = 20
    eta: float = 0.0
    formula: str = "standard"
    top_k: int = 128

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise ConfigError(f"init_mode must be one of {INIT_MODES}, got {self.init_mode!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.eta < 0.0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        if self.formula not in schedule_mod.FORMULAS:
            raise ConfigError(f"formula must be one of {schedule_mod.FORMULAS}, got {self.formula!r}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")


def focal_loss(e0_hat: DiffValue, e0: np.ndarray, gamma: float = 2.0, alpha: float = 0.25) -> DiffValue:
    """Mean focal objective over all entries of a predicted matching matrix.

    Positives (e0 == 1) contribute -alpha (1-p)^gamma log p, negatives
    -(1-alpha) p^gamma log(1-p), with p clamped to [1e-7, 1 - 1e-7].
    gamma=0, alpha=0.5 reduces to half the mean binary cross-entropy.
    """
    e0 = np.asarray(e0, dtype=np.float64)
    if e0_hat.data.shape != e0.shape:
        raise DimensionError(f"prediction {e0_hat.data.shape} vs target {e0.shape}")
    if not np.all((e0 == 0.0) | (e0 == 1.0)):
        raise NumericError("target matrix must be binary")
    p = tensor.clamp(e0_hat, 1e-7, 1.0 - 1e-7)
    one_m_p = tensor.add_const(tensor.neg(p), 1.0)
    pos = tensor.scale(tensor.mul(tensor.pow_const(one_m_p, gamma), tensor.log(p)), -alpha)
    neg = tensor.scale(tensor.mul(tensor.pow_const(p, gamma), tensor.log(one_m_p)), -(1.0 - alpha))
    per_entry = tensor.add(tensor.mul(tensor.value(e0), pos), tensor.mul(tensor.value(1.0 - e0), neg))
    return tensor.mean_all(per_entry)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adam_update(
    params: dict[str, DiffValue],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam step, in place on params."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def init_params(den_cfg: DenoiserConfig, rng: np.random.Generator) -> dict[str, DiffValue]:
    """Fresh parameter set for the denoiser stack and the encoder backbone."""
    d = den_cfg.d_model

    def mat(rows: int, cols: int, scl: float) -> DiffValue:
        return tensor.value(rng.standard_normal((rows, cols)) * scl)

    params: dict[str, DiffValue] = {}
    for i in range(den_cfg.n_layers):
        pre = f"denoiser.layer{i}"
        params[f"{pre}.wq"] = mat(d, d, 1.0 / sqrt(d))
        params[f"{pre}.wk"] = mat(d, d, 1.0 / sqrt(d))
        params[f"{pre}.wv"] = mat(d, d, 1.0 / sqrt(d))
        params[f"{pre}.mlp.w1"] = mat(2 * d, d, sqrt(2.0 / (2 * d)))
        params[f"{pre}.mlp.b1"] = tensor.value(np.zeros((1, d)))
        params[f"{pre}.mlp.w2"] = mat(d, d, sqrt(2.0 / d))
        params[f"{pre}.mlp.b2"] = tensor.value(np.zeros((1, d)))
        params[f"{pre}.mlp.w3"] = mat(d, d, sqrt(2.0 / d))
        params[f"{pre}.mlp.b3"] = tensor.value(np.zeros((1, d)))
    params["denoiser.match.wp"] = mat(d, d, 1.0 / sqrt(d))
    params["denoiser.match.wq"] = mat(d, d, 1.0 / sqrt(d))
    params["encoder.mlp.w1"] = mat(encoder.STAT_DIM, d, sqrt(2.0 / encoder.STAT_DIM))
    params["encoder.mlp.b1"] = tensor.value(np.zeros((1, d)))
    params["encoder.mlp.w2"] = mat(d, d, sqrt(2.0 / d))
    params["encoder.mlp.b2"] = tensor.value(np.zeros((1, d)))
    params["encoder.mlp.w3"] = mat(d, d, sqrt(2.0 / d))
    params["encoder.mlp.b3"] = tensor.value(np.zeros((1, d)))
    params["encoder.match.wp"] = mat(d, d, 1.0 / sqrt(d))
    params["encoder.match.wq"] = mat(d, d, 1.0 / sqrt(d))
    return params


@dataclass(frozen=True)
class PreparedPair:
    """A scene pair lifted to superpoint level with everything reusable across
    epochs precomputed: coordinates, local statistics, rotary encodings of the
    unwarped clouds, the ground-truth matrix, and the ground-truth pairs."""

    p_coords: np.ndarray
    q_coords: np.ndarray
    stats_p: np.ndarray
    stats_q: np.ndarray
    rot_p: denoiser.RotaryEncoding
    rot_q: denoiser.RotaryEncoding
    e0: np.ndarray
    gt_pairs: np.ndarray
    sigma: float


def prepare_pair(pair: ScenePair, den_cfg: DenoiserConfig, enc_cfg: EncoderConfig) -> PreparedPair:
    """Subsample if configured and recompute ground truth at superpoint level."""
    if enc_cfg.voxel is not None:
        p_coords, _ = encoder.voxel_subsample(pair.src.coords, enc_cfg.voxel)
        q_coords, _ = encoder.voxel_subsample(pair.tgt.coords, enc_cfg.voxel)
        gt_pairs = mutual_nn_pairs(pair.warp_src(p_coords), q_coords, pair.sigma)
        e0 = np.zeros((len(p_coords), len(q_coords)))
        if len(gt_pairs):
            e0[gt_pairs[:, 0], gt_pairs[:, 1]] = 1.0
    else:
        p_coords, q_coords = pair.src.coords, pair.tgt.coords
        gt_pairs = pair.gt_pairs
        e0 = gt_matching_matrix(pair)
    return PreparedPair(
        p_coords=p_coords,
        q_coords=q_coords,
        stats_p=encoder.local_stats(p_coords, enc_cfg.k_neighbors),
        stats_q=encoder.local_stats(q_coords, enc_cfg.k_neighbors),
        rot_p=denoiser.rotary_encode(p_coords, den_cfg.d_model, den_cfg.rotary_freq_base),
        rot_q=denoiser.rotary_encode(q_coords, den_cfg.d_model, den_cfg.rotary_freq_base),
        e0=e0,
        gt_pairs=np.asarray(gt_pairs, dtype=np.int64).reshape(-1, 2),
        sigma=pair.sigma,
    )


def _features(stats: np.ndarray, params: dict[str, DiffValue], freeze: bool) -> DiffValue:
    f = encoder.apply_feature_mlp(stats, params)
    if freeze:
        return tensor.value(f.data)
    return f


def _warp_residual(e0_hat: np.ndarray, pp: PreparedPair, k: int) -> float | None:
    """Mean distance between warped source and target over ground-truth pairs
    (monitored term; no gradient by design)."""
    if len(pp.gt_pairs) == 0:
        logger.warning("pair has no ground-truth correspondences; skipping warp residual")
        return None
    try:
        rt = geometry.soft_procrustes(e0_hat, pp.p_coords, pp.q_coords, k=k)
    except NumericError:
        return None
    warped = geometry.rigid_warp(pp.p_coords[pp.gt_pairs[:, 0]], rt)
    return float(np.mean(np.linalg.norm(warped - pp.q_coords[pp.gt_pairs[:, 1]], axis=1)))


def train_step(
    batch: ScenePair | PreparedPair | list,
    params: dict[str, DiffValue],
    s: DiffusionSchedule,
    cfg: TrainConfig,
    den_cfg: DenoiserConfig,
    enc_cfg: EncoderConfig,
    rng: np.random.Generator,
    state: AdamState,
) -> dict[str, float]:
    """One optimization step over a pair or a list of pairs.

    Per pair: draw t ~ Uniform(1..T) and Gaussian noise, denoise the raw
    forward iterate, backpropagate the reweighted focal loss plus the backbone
    matching loss, then apply a single averaged Adam update for the batch.
    """
    if isinstance(batch, (ScenePair, PreparedPair)):
        batch = [batch]
    if not batch:
        raise NumericError("empty batch")
    tensor.zero_grad(params.values())
    sums = {"l_simple": 0.0, "l_m": 0.0, "l_w": 0.0, "total": 0.0}
    n_w = 0
    for item in batch:
        pp = item if isinstance(item, PreparedPair) else prepare_pair(item, den_cfg, enc_cfg)
        f_p = _features(pp.stats_p, params, cfg.freeze_encoder)
        f_q = _features(pp.stats_q, params, cfg.freeze_encoder)
        t = int(rng.integers(1, s.T + 1))
        noise = rng.standard_normal(pp.e0.shape)
        raw = schedule_mod.forward_diffuse(pp.e0, t, noise, s).raw
        e0_hat = denoiser.g_theta(raw, pp.p_coords, pp.q_coords, f_p, f_q, params, den_cfg)
        l_simple = tensor.scale(
            focal_loss(e0_hat, pp.e0, cfg.focal_gamma, cfg.focal_alpha), (s.T - t + 1) / s.T
        )
        init_logits = encoder.initial_matching(f_p, f_q, pp.rot_p, pp.rot_q, params)
        init_proj = dsm.sinkhorn_unrolled(
            init_logits, iters=den_cfg.sinkhorn_iters_inner, mode=den_cfg.sinkhorn_mode_inner
        )
        l_m = focal_loss(init_proj, pp.e0, cfg.focal_gamma, cfg.focal_alpha)
        loss = tensor.add(tensor.scale(l_simple, cfg.lambda_simple), tensor.scale(l_m, cfg.lambda_m))
        tensor.backward(loss)
        l_w = _warp_residual(e0_hat.data, pp, k=min(den_cfg.procrustes_k, len(pp.p_coords), len(pp.q_coords)))
        sums["l_simple"] += float(l_simple.data)
        sums["l_m"] += float(l_m.data)
        if l_w is not None:
            sums["l_w"] += l_w
            n_w += 1
    b = len(batch)
    grads = {name: p.grad / b for name, p in params.items()}
    adam_update(params, grads, state, cfg.learning_rate, cfg.adam_betas)
    tensor.zero_grad(params.values())
    out = {
        "l_simple": sums["l_simple"] / b,
        "l_m": sums["l_m"] / b,
        "l_w": sums["l_w"] / n_w if n_w else 0.0,
    }
    out["total"] = (
        cfg.lambda_simple * out["l_simple"] + cfg.lambda_m * out["l_m"] + cfg.lambda_w * out["l_w"]
    )
    return out


def train(
    pairs: list[ScenePair],
    params: dict[str, DiffValue],
    s: DiffusionSchedule,
    cfg: TrainConfig,
    den_cfg: DenoiserConfig,
    enc_cfg: EncoderConfig,
) -> list[dict[str, float]]:
    """Epoch loop with deterministic shuffling; returns the loss curve."""
    prepared = [prepare_pair(p, den_cfg, enc_cfg) for p in pairs]
    rng = rng_for(cfg.seed, stream=2)
    state = AdamState()
    curve: list[dict[str, float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(prepared))
        for start in range(0, len(prepared), cfg.batch_size):
            batch = [prepared[i] for i in order[start : start + cfg.batch_size]]
            losses = train_step(batch, params, s, cfg, den_cfg, enc_cfg, rng, state)
            step += 1
            curve.append({"step": step, "epoch": epoch, **losses})
        logger.info(
            "epoch %d/%d: total %.4f (simple %.4f, match %.4f, warp %.4f)",
            epoch + 1,
            cfg.epochs,
            curve[-1]["total"],
            curve[-1]["l_simple"],
            curve[-1]["l_m"],
            curve[-1]["l_w"],
        )
    return curve


@dataclass(frozen=True)
class SampleResult:
    """Final matching-matrix estimate with its rigid fit and top matches."""

    e0_hat: np.ndarray
    transform: RigidTransform
    matches: list[tuple[int, int, float]]


def _standardize(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean()
    std = centered.std()
    return centered / std if std > 1e-12 else centered


def reverse_sample(
    pp: PreparedPair,
    params: dict[str, DiffValue],
    s: DiffusionSchedule,
    tau: TauSubsequence,
    cfg: SampleConfig,
    den_cfg: DenoiserConfig,
    rng: np.random.Generator,
    denoise_override=None,
) -> SampleResult:
    """Walk the reverse chain over tau (descending, final hop to step 0).

    Features are computed once and stay fixed; the raw iterate is never
    re-projected between steps. denoise_override, if given, replaces the
    denoiser with a callable (e_t, t) -> matrix (test harnesses).
    """
    n, m = len(pp.p_coords), len(pp.q_coords)
    f_p = tensor.value(_features(pp.stats_p, params, freeze=True).data)
    f_q = tensor.value(_features(pp.stats_q, params, freeze=True).data)
    if cfg.init_mode == "gaussian":
        e_t = rng.standard_normal((n, m))
    else:
        logits = encoder.initial_matching(f_p, f_q, pp.rot_p, pp.rot_q, params)
        e_t = _standardize(logits.data)
    ts = sorted(tau.indices, reverse=True)
    targets = list(ts[1:]) + [0]
    e0_hat = None
    for t, t_prev in zip(ts, targets):
        if denoise_override is not None:
            e0_hat = np.asarray(denoise_override(e_t, t), dtype=np.float64)
        else:
            e0_hat = denoiser.g_theta(e_t, pp.p_coords, pp.q_coords, f_p, f_q, params, den_cfg).data
        z = np.zeros((n, m)) if t_prev == 0 else rng.standard_normal((n, m))
        e_t = schedule_mod.ddim_step(e_t, e0_hat, t, t_prev, tau.eta, z, s, cfg.formula)
    transform = geometry.soft_procrustes(
        e0_hat, pp.p_coords, pp.q_coords, k=min(den_cfg.procrustes_k, n, m)
    )
    matches = dsm.top_k_matches(e0_hat, min(cfg.top_k, e0_hat.size))
    return SampleResult(e0_hat=e0_hat, transform=transform, matches=matches)
