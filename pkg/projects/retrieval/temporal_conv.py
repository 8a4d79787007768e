"""
Stacked multi-scale dilated temporal convolution.

A dilated conv reads w taps ahead of each position t, at offsets r, 2r, ..., wr,
with rows past the end of the sequence read as zeros. MSDC runs one dilated conv
per (r, w) on the grid r in 1..m, w in 2..n+1, activates and max-pools each
branch over time, giving nm vectors. SMSDC runs a second MSDC over those nm
vectors (as a length-nm sequence) and concatenates the pooled branches.
"""

import logging
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, DimensionError
from layers import Module, uniform_init
from tensor import Tensor, activation, concat, expand_rows, stack, take_rows

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SmsdcConfig:
    n: int
    m: int
    d: int
    sigma: str = "relu"
    centered: bool = False
    stacked: bool = True

    def __post_init__(self):
        if self.n < 1 or self.m < 1 or self.d < 1:
            raise ConfigError(f"SMSDC needs n, m, d >= 1, got n={self.n} m={self.m} d={self.d}")
        if self.sigma not in ("relu", "tanh", "identity"):
            raise ConfigError(f"unknown SMSDC activation '{self.sigma}'")

    def grid(self) -> list[tuple[int, int]]:
        """(r, w) pairs, r ascending outer, w ascending inner. Concatenation follows this order."""
        return [(r, w) for r in range(1, self.m + 1) for w in range(2, self.n + 2)]

    @property
    def branches(self) -> int:
        return self.n * self.m

    @property
    def out_width(self) -> int:
        return self.n * self.m * self.d


def tap_offsets(w: int, r: int, centered: bool = False) -> np.ndarray:
    i = np.arange(1, w + 1)
    if centered:
        return r * (i - (w + 1) // 2)
    return r * i


def receptive_field(w: int, r: int, centered: bool = False) -> tuple[int, int]:
    """Inclusive (min, max) offset from t of the taps feeding output position t."""
    if w < 1 or r < 1:
        raise ConfigError(f"receptive_field needs w, r >= 1, got w={w} r={r}")
    offsets = tap_offsets(w, r, centered)
    return int(offsets.min()), int(offsets.max())


class DilatedKernel(Module):
    def __init__(self, w: int, r: int, d: int, rng: np.random.Generator, centered: bool = False):
        if w < 1 or r < 1:
            raise ConfigError(f"kernel needs w, r >= 1, got w={w} r={r}")
        self.w, self.r, self.d = w, r, d
        self.centered = centered
        # weights[i] is the d x d matrix applied to tap i+1
        self.weights = uniform_init(rng, (w, d, d), w * d)
        self.bias = uniform_init(rng, (d,), w * d)

    def __call__(self, F: Tensor) -> Tensor:
        return dilated_conv1d(F, self)


def dilated_conv1d(F: Tensor, k: DilatedKernel) -> Tensor:
    if F.ndim != 2 or F.shape[1] != k.d:
        raise DimensionError(f"dilated_conv1d: kernel width {k.d}, feature map {F.shape}")
    L = F.shape[0]
    positions = np.arange(L)
    taps = [take_rows(F, positions + off) for off in tap_offsets(k.w, k.r, k.centered)]
    x = taps[0] if len(taps) == 1 else concat(taps, axis=1)
    return x @ k.weights.reshape(k.w * k.d, k.d) + expand_rows(k.bias, L)


def _check_bank(cfg: SmsdcConfig, kernels: list[DilatedKernel]) -> None:
    got = [(k.r, k.w) for k in kernels]
    if got != cfg.grid():
        raise ConfigError(f"kernel bank {got} does not match the (r, w) grid {cfg.grid()}")
    if any(k.d != cfg.d for k in kernels):
        raise ConfigError(f"kernel bank width does not match d={cfg.d}")


def msdc(F: Tensor, cfg: SmsdcConfig, kernels: list[DilatedKernel]) -> Tensor:
    """nm x L x d stack of dilated conv outputs in grid order."""
    _check_bank(cfg, kernels)
    return stack([dilated_conv1d(F, k) for k in kernels], axis=0)


def activate_and_pool(S: Tensor, sigma: str = "relu") -> Tensor:
    """Per branch and channel, max over time of sigma(S). nm x L x d -> nm x d."""
    if S.ndim != 3 or S.shape[1] < 1:
        raise DimensionError(f"activate_and_pool needs nm x L x d with L >= 1, got {S.shape}")
    return activation(sigma, S).max(axis=1)


def smsdc(F_g: Tensor, cfg: SmsdcConfig, stage1: list[DilatedKernel],
          stage2: list[DilatedKernel]) -> Tensor:
    pooled = activate_and_pool(msdc(F_g, cfg, stage1), cfg.sigma)
    if cfg.stacked:
        pooled = activate_and_pool(msdc(pooled, cfg, stage2), cfg.sigma)
    return pooled.reshape(cfg.out_width)


class SMSDC(Module):
    def __init__(self, cfg: SmsdcConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.stage1 = [DilatedKernel(w, r, cfg.d, rng, cfg.centered) for r, w in cfg.grid()]
        self.stage2 = ([DilatedKernel(w, r, cfg.d, rng, cfg.centered) for r, w in cfg.grid()]
                       if cfg.stacked else [])
        logger.debug("SMSDC n=%d m=%d d=%d -> width %d", cfg.n, cfg.m, cfg.d, cfg.out_width)

    def __call__(self, F_g: Tensor) -> Tensor:
        return smsdc(F_g, self.cfg, self.stage1, self.stage2)
