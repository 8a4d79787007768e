"""
Global-context encoders and the two modality encoders built on them.

Video: bi-GRU over frame features, mean-pooled. Text: K post-norm Transformer
layers over frozen word embeddings, mean-pooled. Each side then runs SMSDC over
its global feature map for the local vector.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from data_io import FeatureItem, read_features, write_features
from errors import ConfigError, ContractError, DimensionError, FormatError
from layers import LayerNorm, Linear, Module, uniform_init
from tensor import Tensor, concat, expand_rows, softmax_rows, take_rows
from temporal_conv import SMSDC, SmsdcConfig

logger = logging.getLogger(__name__)


# ============================================================
# GRU
# ============================================================

class GRUCell(Module):
    """z = sigmoid(W_z x + U_z h + b_z), r = sigmoid(W_r x + U_r h + b_r),
    h~ = tanh(W_h x + U_h (r * h) + b_h), h' = (1 - z) * h + z * h~."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.d_in, self.hidden = d_in, hidden
        self.W_z = uniform_init(rng, (d_in, hidden), d_in)
        self.W_r = uniform_init(rng, (d_in, hidden), d_in)
        self.W_h = uniform_init(rng, (d_in, hidden), d_in)
        self.U_z = uniform_init(rng, (hidden, hidden), hidden)
        self.U_r = uniform_init(rng, (hidden, hidden), hidden)
        self.U_h = uniform_init(rng, (hidden, hidden), hidden)
        self.b_z = uniform_init(rng, (hidden,), hidden)
        self.b_r = uniform_init(rng, (hidden,), hidden)
        self.b_h = uniform_init(rng, (hidden,), hidden)

    def input_projection(self, X: Tensor) -> Tensor:
        """X @ [W_z | W_r | W_h] + biases, for every row at once."""
        W = concat([self.W_z, self.W_r, self.W_h], axis=1)
        b = concat([self.b_z, self.b_r, self.b_h], axis=0)
        return X @ W + expand_rows(b, X.shape[0])

    def step(self, h_prev: Tensor, gx: Tensor) -> Tensor:
        """One step from a precomputed 1 x 3h input projection; h_prev is 1 x h."""
        n = self.hidden
        gh = h_prev @ concat([self.U_z, self.U_r], axis=1)
        z = (gx[:, :n] + gh[:, :n]).sigmoid()
        r = (gx[:, n:2 * n] + gh[:, n:]).sigmoid()
        cand = (gx[:, 2 * n:] + (r * h_prev) @ self.U_h).tanh()
        return h_prev + z * (cand - h_prev)


def gru_cell(h_prev: Tensor, x: Tensor, p: GRUCell) -> Tensor:
    if x.shape != (p.d_in,) or h_prev.shape != (p.hidden,):
        raise DimensionError(f"gru_cell: x {x.shape}, h {h_prev.shape} vs d_in={p.d_in} h={p.hidden}")
    gx = p.input_projection(x.reshape(1, p.d_in))
    return p.step(h_prev.reshape(1, p.hidden), gx).reshape(p.hidden)


def _run_direction(X: Tensor, cell: GRUCell) -> list[Tensor]:
    gx = cell.input_projection(X)
    h = Tensor(np.zeros((1, cell.hidden)))
    states = []
    for t in range(X.shape[0]):
        h = cell.step(h, gx[t:t + 1])
        states.append(h)
    return states


class BiGRU(Module):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.d_in, self.hidden = d_in, hidden
        self.forward = GRUCell(d_in, hidden, rng)
        self.backward = GRUCell(d_in, hidden, rng)

    def __call__(self, V: Tensor) -> Tensor:
        return bigru_encode(V, self)


def bigru_encode(V: Tensor, p: BiGRU) -> Tensor:
    """Row i = [forward state after v_1..v_i | backward state after v_N..v_i]."""
    if V.ndim != 2 or V.shape[1] != p.d_in:
        raise DimensionError(f"bigru_encode expects N x {p.d_in}, got {V.shape}")
    N = V.shape[0]
    if N < 1:
        raise ContractError("bigru_encode needs at least one step")
    fwd = _run_direction(V, p.forward)
    bwd = _run_direction(take_rows(V, np.arange(N)[::-1]), p.backward)[::-1]
    return concat([concat(fwd, axis=0), concat(bwd, axis=0)], axis=1)


# ============================================================
# Transformer
# ============================================================

def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    div = np.power(10000.0, np.arange(0, dim, 2) / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos / div)
    pe[:, 1::2] = np.cos(pos / div[: dim // 2])
    return pe


class MultiHeadAttention(Module):
    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        if num_heads < 1 or dim % num_heads != 0:
            raise ConfigError(f"width {dim} does not split into {num_heads} heads")
        self.dim, self.num_heads = dim, num_heads
        self.head_dim = dim // num_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self._last_weights: list[np.ndarray] = []

    def __call__(self, x: Tensor) -> Tensor:
        Q, K, V = self.q(x), self.k(x), self.v(x)
        scale = 1.0 / np.sqrt(self.head_dim)
        heads, weights = [], []
        for h in range(self.num_heads):
            cols = slice(h * self.head_dim, (h + 1) * self.head_dim)
            scores = (Q[:, cols] @ K[:, cols].T) * scale
            attn = softmax_rows(scores)
            weights.append(attn.data)
            heads.append(attn @ V[:, cols])
        self._last_weights = weights
        return self.o(heads[0] if len(heads) == 1 else concat(heads, axis=1))


class FeedForward(Module):
    def __init__(self, dim: int, ff_dim: int, rng: np.random.Generator):
        self.up = Linear(dim, ff_dim, rng)
        self.down = Linear(ff_dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.down(self.up(x).relu())


class TransformerLayer(Module):
    """Post-norm: y = LN(x + MHSA(x)); out = LN(y + FFN(y)). No mask."""

    def __init__(self, dim: int, num_heads: int, ff_dim: int, rng: np.random.Generator):
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.ln1 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, rng)
        self.ln2 = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.ln1(x + self.attn(x))
        return self.ln2(y + self.ff(y))


def transformer_layer(X: Tensor, layer: TransformerLayer) -> Tensor:
    return layer(X)


class TransformerEncoder(Module):
    def __init__(self, dim: int, num_heads: int, ff_dim: int, num_layers: int,
                 rng: np.random.Generator, positional: bool = True):
        self.dim = dim
        self.positional = positional
        self.layers = [TransformerLayer(dim, num_heads, ff_dim, rng) for _ in range(num_layers)]

    def __call__(self, T: Tensor) -> Tensor:
        return transformer_encode(T, self)


def transformer_encode(T: Tensor, params: TransformerEncoder) -> Tensor:
    if T.ndim != 2 or T.shape[1] != params.dim:
        raise DimensionError(f"transformer_encode expects M x {params.dim}, got {T.shape}")
    if T.shape[0] < 1:
        raise ContractError("transformer_encode needs at least one token")
    x = T + Tensor(positional_encoding(T.shape[0], params.dim)) if params.positional else T
    for layer in params.layers:
        x = layer(x)
    return x


def mean_pool(F: Tensor) -> Tensor:
    if F.ndim != 2 or F.shape[0] == 0:
        raise ContractError(f"mean_pool needs a non-empty L x d map, got {F.shape}")
    return F.mean(axis=0)


# ============================================================
# Frozen embeddings
# ============================================================

@dataclass
class EmbeddingTable:
    ids: np.ndarray
    vectors: np.ndarray
    frozen: bool = True

    def __post_init__(self):
        self._row = {int(i): n for n, i in enumerate(self.ids)}

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def vocab_size(self) -> int:
        return len(self.ids)

    def embed(self, token_ids: list[int]) -> Tensor:
        """M x width; unknown tokens map to the zero vector. Never requires grad."""
        out = np.zeros((len(token_ids), self.width))
        for n, tok in enumerate(token_ids):
            row = self._row.get(int(tok))
            if row is not None:
                out[n] = self.vectors[row]
        return Tensor(out)

    @classmethod
    def synthetic(cls, vocab_size: int, width: int, seed: int) -> "EmbeddingTable":
        rng = np.random.default_rng(seed)
        vectors = rng.standard_normal((vocab_size, width)).astype(np.float32).astype(np.float64)
        return cls(np.arange(vocab_size, dtype=np.uint64), vectors)


def save_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    items = [FeatureItem(int(i), table.vectors[n:n + 1]) for n, i in enumerate(table.ids)]
    write_features(items, path, width=table.width)


def load_embeddings(path: str | Path, d_model: int | None = None) -> EmbeddingTable:
    ff = read_features(path)
    for item in ff.items:
        if item.length != 1:
            raise FormatError(f"token {item.id} length", item.offset, 1, item.length)
    if d_model is not None and ff.width != d_model:
        raise ConfigError(f"embedding width {ff.width} does not match d_model={d_model}")
    vectors = (np.stack([item.values[0] for item in ff.items]).astype(np.float64)
               if ff.items else np.zeros((0, ff.width)))
    ids = np.array([item.id for item in ff.items], dtype=np.uint64)
    logger.info("loaded %d frozen embeddings of width %d from %s", len(ids), ff.width, path)
    return EmbeddingTable(ids, vectors, frozen=True)


# ============================================================
# Modality encoders
# ============================================================

@dataclass(frozen=True)
class EncoderConfig:
    video_d_in: int = 2048
    video_hidden: int = 512
    video_n: int = 4
    video_m: int = 2
    text_d_model: int = 768
    text_heads: int = 8
    text_ffn: int = 3072
    text_layers: int = 3
    text_encoder: str = "transformer"
    text_hidden: int = 384
    text_positional: bool = True
    text_n: int = 3
    text_m: int = 2
    sigma: str = "relu"
    stacked: bool = True
    centered: bool = False
    local: bool = True

    def __post_init__(self):
        if self.text_encoder not in ("transformer", "bigru"):
            raise ConfigError(f"unknown text encoder '{self.text_encoder}'")

    @property
    def video_global_width(self) -> int:
        return 2 * self.video_hidden

    @property
    def text_global_width(self) -> int:
        return self.text_d_model if self.text_encoder == "transformer" else 2 * self.text_hidden

    def video_smsdc(self) -> SmsdcConfig:
        return SmsdcConfig(self.video_n, self.video_m, self.video_global_width,
                           self.sigma, self.centered, self.stacked)

    def text_smsdc(self) -> SmsdcConfig:
        return SmsdcConfig(self.text_n, self.text_m, self.text_global_width,
                           self.sigma, self.centered, self.stacked)

    @property
    def video_fused_width(self) -> int:
        return self.video_global_width + (self.video_smsdc().out_width if self.local else 0)

    @property
    def text_fused_width(self) -> int:
        return self.text_global_width + (self.text_smsdc().out_width if self.local else 0)


@dataclass
class DualFeatures:
    global_vec: Tensor
    local_vec: Tensor | None
    full_map: Tensor


class VideoEncoder(Module):
    def __init__(self, cfg: EncoderConfig, seed: int):
        self.gru = BiGRU(cfg.video_d_in, cfg.video_hidden, np.random.default_rng([seed, 1]))
        self.smsdc = SMSDC(cfg.video_smsdc(), np.random.default_rng([seed, 2])) if cfg.local else None

    def __call__(self, V: Tensor) -> DualFeatures:
        F_vg = self.gru(V)
        local = self.smsdc(F_vg) if self.smsdc is not None else None
        return DualFeatures(mean_pool(F_vg), local, F_vg)


class TextEncoder(Module):
    def __init__(self, cfg: EncoderConfig, seed: int):
        self.d_in = cfg.text_d_model
        if cfg.text_encoder == "transformer":
            self.context = TransformerEncoder(cfg.text_d_model, cfg.text_heads, cfg.text_ffn,
                                              cfg.text_layers, np.random.default_rng([seed, 3]),
                                              cfg.text_positional)
        else:
            self.context = BiGRU(cfg.text_d_model, cfg.text_hidden, np.random.default_rng([seed, 3]))
        self.smsdc = SMSDC(cfg.text_smsdc(), np.random.default_rng([seed, 4])) if cfg.local else None

    def __call__(self, T: Tensor) -> DualFeatures:
        if T.ndim != 2 or T.shape[1] != self.d_in:
            raise DimensionError(f"text encoder expects M x {self.d_in}, got {T.shape}")
        F_tg = self.context(T)
        local = self.smsdc(F_tg) if self.smsdc is not None else None
        return DualFeatures(mean_pool(F_tg), local, F_tg)
