"""
Named finite-difference checks at toy dimensions, run by `cli.py grad-check`.

Each check returns the worst relative error over every input and parameter it
covers. Max-pooling, relu and the hinge loss have kinks, so every check draws
its inputs until each kink sits at least MARGIN away from the point being
differenced. SMSDC paths use tanh so only the pooling max is kinked.
"""

import logging
from collections.abc import Callable

import numpy as np

from encoders import BiGRU, EncoderConfig, TextEncoder, TransformerEncoder, VideoEncoder, positional_encoding
from errors import ConfigError
from joint_space import (JointEmbedder, fuse_global_local, hard_negative_ranking_loss, hardest_negatives,
                         similarity_tensor)
from tensor import (BatchNormState, Tensor, activation, batch_norm, concat, grad_check, layer_norm_rows,
                    normalize_rows, softmax_rows, take_rows)
from temporal_conv import SMSDC, DilatedKernel, SmsdcConfig, activate_and_pool, dilated_conv1d, msdc

logger = logging.getLogger(__name__)

THRESHOLD = 1e-4
STEP = 1e-3
MARGIN = 50 * STEP
ATTEMPTS = 500
CHECKS: dict[str, Callable[[int], float]] = {}


def register(name: str):
    def wrap(fn: Callable[[int], float]) -> Callable[[int], float]:
        CHECKS[name] = fn
        return fn
    return wrap


def _t(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.standard_normal(shape))


# ============================================================
# Kink margins
# ============================================================

def max_margin(values: np.ndarray, axis: int) -> float:
    """Smallest gap between the max along `axis` and the next distinct value.
    Exact ties at the max are skipped."""
    s = np.sort(values, axis=axis)
    top = np.take(s, [-1], axis=axis)
    below = np.where(s < top, s, -np.inf).max(axis=axis)
    gaps = np.squeeze(top, axis=axis) - below
    return float(gaps.min()) if gaps.size else np.inf


def smsdc_margin(module: SMSDC, F: Tensor) -> float:
    """Pooling margin over both stages of `module` at input F."""
    cfg = module.cfg
    S1 = msdc(F, cfg, module.stage1)
    margin = max_margin(activation(cfg.sigma, S1).data, axis=1)
    if cfg.stacked:
        S2 = msdc(activate_and_pool(S1, cfg.sigma), cfg, module.stage2)
        margin = min(margin, max_margin(activation(cfg.sigma, S2).data, axis=1))
    return margin


def ffn_margin(encoder: TransformerEncoder, T: Tensor) -> float:
    """Smallest |pre-activation| feeding any FFN relu."""
    x = T + Tensor(positional_encoding(T.shape[0], encoder.dim)) if encoder.positional else T
    margin = np.inf
    for layer in encoder.layers:
        y = layer.ln1(x + layer.attn(x))
        margin = min(margin, float(np.abs(layer.ff.up(y).data).min()))
        x = layer.ln2(y + layer.ff(y))
    return margin


def loss_margin(S: np.ndarray, alpha: float) -> float:
    """Distance of every hinge from zero and of every hardest negative from the runner-up."""
    B = len(S)
    idx = np.arange(B)
    t_neg, v_neg = hardest_negatives(S)
    hinges = np.concatenate([alpha - S[idx, idx] + S[idx, t_neg], alpha - S[idx, idx] + S[v_neg, idx]])
    off = np.where(np.eye(B, dtype=bool), -np.inf, S)
    return min(float(np.abs(hinges).min()), max_margin(off, axis=1), max_margin(off, axis=0))


def well_separated(draw: Callable[[], Tensor], margin_of: Callable[[Tensor], float]) -> Tensor:
    """First draw whose kink margin clears MARGIN, else the widest one seen."""
    best, best_margin = None, -np.inf
    for _ in range(ATTEMPTS):
        x = draw()
        margin = margin_of(x)
        if margin > MARGIN:
            return x
        if margin > best_margin:
            best, best_margin = x, margin
    logger.warning("no draw cleared kink margin %.3g, using the widest (%.3g)", MARGIN, best_margin)
    return best


# ============================================================
# Checks
# ============================================================

@register("primitives")
def check_primitives(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    a, b, c = _t(rng, 3, 4), _t(rng, 4, 2), _t(rng, 3, 4)
    gamma, beta = _t(rng, 4), _t(rng, 4)
    p = well_separated(lambda: _t(rng, 3, 4), lambda p: max_margin(p.data, axis=0))
    cases = [
        (lambda a, b: (a @ b).tanh(), [a, b]),
        (lambda a, c: a * c.sigmoid() - a / (c * c + 1.0), [a, c]),
        (lambda a: softmax_rows(a), [a]),
        (lambda a, g, be: layer_norm_rows(a, g, be), [a, gamma, beta]),
        (lambda a, g, be: batch_norm(a, g, be, BatchNormState.fresh(4), "train"), [a, gamma, beta]),
        (lambda a: normalize_rows(a)[0], [a]),
        (lambda p: p.max(axis=0) + p.mean(axis=1).sum(), [p]),
        (lambda a, c: take_rows(concat([a, c], axis=1), np.array([2, 0, 5, 1])), [a, c]),
    ]
    return max(grad_check(f, inputs, STEP, seed) for f, inputs in cases)


@register("dilated_conv")
def check_dilated_conv(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    F = _t(rng, 5, 3)
    worst = 0.0
    for centered in (False, True):
        k = DilatedKernel(3, 2, 3, rng, centered)
        error = grad_check(lambda F, W, b: dilated_conv1d(F, k), [F, k.weights, k.bias], STEP, seed)
        worst = max(worst, error)
    return worst


@register("smsdc")
def check_smsdc(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    module = SMSDC(SmsdcConfig(2, 2, 3, sigma="tanh"), rng)
    F = well_separated(lambda: _t(rng, 6, 3), lambda F: smsdc_margin(module, F))
    return grad_check(lambda F, *ps: module(F), [F, *module.parameters()], STEP, seed)


@register("bigru")
def check_bigru(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    module = BiGRU(3, 2, rng)
    V = _t(rng, 4, 3)
    return grad_check(lambda V, *ps: module(V), [V, *module.parameters()], STEP, seed)


@register("transformer")
def check_transformer(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    module = TransformerEncoder(4, 2, 8, 2, rng)
    T = well_separated(lambda: _t(rng, 3, 4), lambda T: ffn_margin(module, T))
    return grad_check(lambda T, *ps: module(T), [T, *module.parameters()], STEP, seed)


def _toy_encoders(seed: int) -> tuple[EncoderConfig, VideoEncoder, TextEncoder]:
    cfg = EncoderConfig(video_d_in=3, video_hidden=2, video_n=2, video_m=2, text_d_model=4,
                        text_heads=2, text_ffn=6, text_layers=1, text_n=2, text_m=1, sigma="tanh")
    return cfg, VideoEncoder(cfg, seed), TextEncoder(cfg, seed)


@register("video_encoder")
def check_video_encoder(seed: int = 0) -> float:
    _, video, _ = _toy_encoders(seed)
    rng = np.random.default_rng(seed)
    V = well_separated(lambda: _t(rng, 5, 3), lambda V: smsdc_margin(video.smsdc, video.gru(V)))

    def f(*_):
        out = video(V)
        return fuse_global_local(out.global_vec, out.local_vec)

    return grad_check(f, video.parameters(), STEP, seed)


@register("text_encoder")
def check_text_encoder(seed: int = 0) -> float:
    _, _, text = _toy_encoders(seed)
    rng = np.random.default_rng(seed)
    T = well_separated(lambda: _t(rng, 4, 4),
                       lambda T: min(ffn_margin(text.context, T), smsdc_margin(text.smsdc, text.context(T))))

    def f(*_):
        out = text(T)
        return fuse_global_local(out.global_vec, out.local_vec)

    return grad_check(f, text.parameters(), STEP, seed)


@register("joint")
def check_joint(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    joint = JointEmbedder(5, 3, 4, seed)
    fv, ft = _t(rng, 8, 5), _t(rng, 8, 3)

    def f(fv, ft, *ps):
        return similarity_tensor(joint.embed(fv, "video"), joint.embed(ft, "text"))

    return grad_check(f, [fv, ft, *joint.parameters()], STEP, seed)


@register("loss")
def check_loss(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    S = well_separated(lambda: Tensor(rng.uniform(-1, 1, size=(4, 4))), lambda S: loss_margin(S.data, 0.2))
    return grad_check(lambda S: hard_negative_ranking_loss(S, 0.2), [S], STEP, seed)


def run_checks(names: list[str] | None = None, seed: int = 0) -> dict[str, float]:
    selected = list(CHECKS) if not names else names
    results = {}
    for name in selected:
        if name not in CHECKS:
            raise ConfigError(f"unknown grad-check module '{name}' (have {', '.join(CHECKS)})")
        results[name] = CHECKS[name](seed)
        logger.info("grad-check %-14s max rel err %.2e %s", name, results[name],
                    "ok" if results[name] < THRESHOLD else "FAIL")
    return results
