import logging
from collections import Counter
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, ContractError, DimensionError
from layers import BatchNorm1d, Linear, Module
from tensor import Tensor, as_tensor, concat, normalize_rows

logger = logging.getLogger(__name__)

# zero-norm inputs seen by cosine similarity, process-wide
degenerate_counter: Counter[str] = Counter()


def fuse_global_local(g: Tensor, l: Tensor | None) -> Tensor:
    """Global first, then local."""
    return g if l is None else concat([g, l], axis=0)


class JointEmbedder(Module):
    """Per-branch FC followed by BatchNorm into the shared space."""

    def __init__(self, video_width: int, text_width: int, embed_dim: int, seed: int):
        self.embed_dim = embed_dim
        self.video_fc = Linear(video_width, embed_dim, np.random.default_rng([seed, 5]))
        self.video_bn = BatchNorm1d(embed_dim)
        self.text_fc = Linear(text_width, embed_dim, np.random.default_rng([seed, 6]))
        self.text_bn = BatchNorm1d(embed_dim)

    def embed(self, f_gl: Tensor, branch: str, mode: str = "train") -> Tensor:
        return embed_joint(f_gl, branch, self, mode)


def embed_joint(f_gl: Tensor, branch: str, params: JointEmbedder, mode: str = "train") -> Tensor:
    """BatchNorm(W f_gl + b) for a batch (B x width) or a single vector (width,)."""
    if branch == "video":
        fc, bn = params.video_fc, params.video_bn
    elif branch == "text":
        fc, bn = params.text_fc, params.text_bn
    else:
        raise ConfigError(f"unknown branch '{branch}'")
    single = f_gl.ndim == 1
    x = f_gl.reshape(1, f_gl.shape[0]) if single else f_gl
    if x.shape[1] != fc.d_in:
        raise DimensionError(f"{branch} branch expects width {fc.d_in}, got {x.shape[1]}")
    out = bn(fc(x), mode)
    return out.reshape(params.embed_dim) if single else out


def cosine_similarity(a, b) -> float:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        degenerate_counter["zero_norm"] += 1
        logger.warning("cosine similarity of a zero-norm vector, scoring 0")
        return 0.0
    return float(np.dot(a, b) / (na * nb))


@dataclass
class SimilarityMatrix:
    scores: np.ndarray
    row_ids: list[int]
    col_ids: list[int]

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape

    def transpose(self) -> "SimilarityMatrix":
        return SimilarityMatrix(self.scores.T.copy(), self.col_ids, self.row_ids)


def similarity_tensor(V: Tensor, T: Tensor) -> Tensor:
    """Differentiable B_v x B_t cosine scores; zero rows score 0 against everything."""
    V, T = as_tensor(V), as_tensor(T)
    if V.ndim != 2 or T.ndim != 2 or V.shape[1] != T.shape[1]:
        raise DimensionError(f"similarity needs equal-width batches, got {V.shape} and {T.shape}")
    Vn, v_zero = normalize_rows(V)
    Tn, t_zero = normalize_rows(T)
    zeros = int(v_zero.sum() + t_zero.sum())
    if zeros:
        degenerate_counter["zero_norm"] += zeros
        logger.warning("%d zero-norm embeddings in similarity batch, scoring 0", zeros)
    return Vn @ Tn.T


def similarity_matrix(V, T, row_ids: list[int] | None = None,
                      col_ids: list[int] | None = None) -> SimilarityMatrix:
    S = similarity_tensor(as_tensor(np.asarray(V.data if isinstance(V, Tensor) else V)),
                          as_tensor(np.asarray(T.data if isinstance(T, Tensor) else T)))
    rows = list(range(S.shape[0])) if row_ids is None else list(row_ids)
    cols = list(range(S.shape[1])) if col_ids is None else list(col_ids)
    return SimilarityMatrix(S.data, rows, cols)


def hardest_negatives(scores: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per row the hardest negative column, per column the hardest negative row.
    Ties go to the lowest index."""
    masked = scores.astype(np.float64, copy=True)
    np.fill_diagonal(masked, -np.inf)
    return np.argmax(masked, axis=1), np.argmax(masked, axis=0)


def hard_negative_ranking_loss(S: Tensor, alpha: float = 0.2) -> Tensor:
    """Mean over the batch of max(0, a - S[i,i] + S[i,t-]) + max(0, a - S[i,i] + S[v-,i]),
    positives on the diagonal, negatives mined from the same matrix."""
    S = as_tensor(S)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise DimensionError(f"ranking loss needs a square matrix, got {S.shape}")
    B = S.shape[0]
    if B < 2:
        raise ContractError("ranking loss needs at least 2 pairs for a negative")
    t_neg, v_neg = hardest_negatives(S.data)
    idx = np.arange(B)
    pos = S[idx, idx]
    text_term = (alpha - pos + S[idx, t_neg]).relu()
    video_term = (alpha - pos + S[v_neg, idx]).relu()
    return (text_term + video_term).mean()
