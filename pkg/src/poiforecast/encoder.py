"""Visit-sequence encoder with social (neighbour) context.

A window of recent visits is embedded per position (POI, category and
hour-of-week embeddings, concatenated), run through a masked self-attention
encoder, and the last real position is taken as the user's representation.
Representations of behaviourally similar users, found by cosine similarity of
rows of the user-POI co-location matrix, are then fused in by attention.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
import torch
from torch import nn

from ._order import descending_order
from .data import PoiSet, UserHistory
from .errors import ConfigError

PAD = 0
UNK = 1
HOURS_PER_WEEK = 168


@dataclass(frozen=True)
class EncoderConfig:
    window_length: int = 20
    hidden_dim: int = 128
    poi_embed_dim: int = 80
    category_embed_dim: int = 24
    temporal_embed_dim: int = 24
    num_attention_heads: int = 4
    num_layers: int = 2
    neighbor_count: int = 8
    feedforward_dim: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        dims = self.poi_embed_dim + self.category_embed_dim + self.temporal_embed_dim
        if dims != self.hidden_dim:
            raise ConfigError(f"embedding dims sum to {dims}, hidden_dim is {self.hidden_dim}")
        if self.hidden_dim % self.num_attention_heads:
            raise ConfigError("hidden_dim must be divisible by num_attention_heads")
        if self.window_length < 1 or self.num_layers < 1 or self.neighbor_count < 0:
            raise ConfigError(f"invalid encoder config {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)


class Vocabulary:
    """Token -> row index, with rows 0 and 1 reserved for PAD and UNK."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens = tuple(sorted(set(tokens)))
        self._index = {t: i + 2 for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens) + 2

    def __contains__(self, token) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def index(self, token: str) -> int:
        return self._index.get(token, UNK)

    def to_json(self) -> list[str]:
        return ["<pad>", "<unk>", *self.tokens]

    @classmethod
    def from_json(cls, rows: Sequence[str]) -> "Vocabulary":
        if list(rows[:2]) != ["<pad>", "<unk>"]:
            raise ValueError("vocabulary rows must start with <pad>, <unk>")
        return cls(rows[2:])


@dataclass(frozen=True)
class VisitWindow:
    poi_indices: np.ndarray
    category_indices: np.ndarray
    temporal_indices: np.ndarray
    mask: np.ndarray  # True at real positions


def build_window(history: UserHistory, end_index: int, poi_vocab: Vocabulary,
                 category_vocab: Vocabulary, pois: PoiSet, config: EncoderConfig) -> VisitWindow:
    """Window over visits ``end_index - window_length + 1 .. end_index`` (1-based), left-padded."""
    if not 1 <= end_index <= len(history):
        raise IndexError(f"end_index {end_index} outside 1..{len(history)}")
    w = config.window_length
    visits = history.visits[max(0, end_index - w):end_index]
    pad = w - len(visits)
    poi = np.full(w, PAD, dtype=np.int64)
    cat = np.full(w, PAD, dtype=np.int64)
    tim = np.full(w, PAD, dtype=np.int64)
    mask = np.zeros(w, dtype=bool)
    for i, v in enumerate(visits, start=pad):
        poi[i] = poi_vocab.index(v.poi_id)
        cat[i] = category_vocab.index(pois[v.poi_id].category_id)
        tim[i] = v.hour_of_week + 1  # row 0 is PAD
        mask[i] = True
    return VisitWindow(poi, cat, tim, mask)


def stack_windows(windows: Sequence[VisitWindow]) -> tuple[torch.Tensor, ...]:
    return (torch.from_numpy(np.stack([w.poi_indices for w in windows])),
            torch.from_numpy(np.stack([w.category_indices for w in windows])),
            torch.from_numpy(np.stack([w.temporal_indices for w in windows])),
            torch.from_numpy(np.stack([w.mask for w in windows])))


def sinusoidal_encoding(length: int, dim: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe


class ContextEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, n_poi_rows: int, n_category_rows: int):
        super().__init__()
        self.config = config
        self.poi_embedding = nn.Embedding(n_poi_rows, config.poi_embed_dim, padding_idx=PAD)
        self.category_embedding = nn.Embedding(n_category_rows, config.category_embed_dim, padding_idx=PAD)
        self.temporal_embedding = nn.Embedding(HOURS_PER_WEEK + 1, config.temporal_embed_dim, padding_idx=PAD)
        self.register_buffer("positional", sinusoidal_encoding(config.window_length, config.hidden_dim).float(),
                             persistent=False)
        layer = nn.TransformerEncoderLayer(config.hidden_dim, config.num_attention_heads,
                                           dim_feedforward=config.feedforward_dim,
                                           dropout=config.dropout, batch_first=True)
        self.layers = nn.TransformerEncoder(layer, config.num_layers, enable_nested_tensor=False)

    def forward(self, poi: torch.Tensor, category: torch.Tensor, temporal: torch.Tensor,
                mask: torch.Tensor) -> torch.Tensor:
        """(B, W) index tensors and real-position mask -> (B, hidden_dim)."""
        if not bool(mask[:, -1].all()):
            raise ValueError("every window needs a real visit in its last position")
        x = torch.cat([self.poi_embedding(poi), self.category_embedding(category),
                       self.temporal_embedding(temporal)], dim=-1)
        x = x + self.positional.to(x.dtype)
        h = self.layers(x, src_key_padding_mask=~mask)
        # windows are left-padded, so the last real position is always the last slot
        return h[:, -1, :]


def encode_sequence(window: VisitWindow, encoder: ContextEncoder) -> torch.Tensor:
    """Encode one window in inference mode; returns a (hidden_dim,) vector."""
    if not window.mask.any():
        raise ValueError("cannot encode an all-PAD window")
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            out = encoder(*stack_windows([window]))[0]
    finally:
        encoder.train(was_training)
    if not torch.isfinite(out).all():
        raise FloatingPointError("non-finite context vector")
    return out


class SocialFusion(nn.Module):
    """Attention with the user's own vector as query over itself plus its neighbours."""

    def __init__(self, hidden_dim: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.attention = nn.MultiheadAttention(hidden_dim, num_heads, dropout=dropout, batch_first=True)
        self.norm = nn.LayerNorm(hidden_dim)

    def forward(self, own: torch.Tensor, neighbors: torch.Tensor | None = None,
                neighbor_mask: torch.Tensor | None = None) -> torch.Tensor:
        """own: (B, H); neighbors: (B, K, H); neighbor_mask: (B, K), True = real neighbour."""
        query = own.unsqueeze(1)
        if neighbors is None or neighbors.shape[1] == 0:
            keys = query
            pad = torch.zeros(own.shape[0], 1, dtype=torch.bool, device=own.device)
        else:
            if neighbors.shape[0] != own.shape[0] or neighbors.shape[2] != own.shape[1]:
                raise ValueError(f"neighbour tensor {tuple(neighbors.shape)} does not match own {tuple(own.shape)}")
            if neighbor_mask is None:
                neighbor_mask = torch.ones(neighbors.shape[:2], dtype=torch.bool, device=own.device)
            keys = torch.cat([query, neighbors], dim=1)
            own_slot = torch.zeros(own.shape[0], 1, dtype=torch.bool, device=own.device)
            pad = torch.cat([own_slot, ~neighbor_mask], dim=1)
        fused, _ = self.attention(query, keys, keys, key_padding_mask=pad, need_weights=False)
        return self.norm(own + fused.squeeze(1))


def fuse_social(own: torch.Tensor, neighbors: Sequence[torch.Tensor], fusion: SocialFusion) -> torch.Tensor:
    """Single-user convenience wrapper around :class:`SocialFusion`."""
    h = own.shape[-1]
    if any(n.shape[-1] != h for n in neighbors):
        raise ValueError("neighbour vectors must match the own vector's dimension")
    nb = torch.stack(list(neighbors)).unsqueeze(0) if neighbors else None
    return fusion(own.unsqueeze(0), nb)[0]


# --- co-location ----------------------------------------------------------

@dataclass(frozen=True)
class CoLocationMatrix:
    counts: sp.csr_matrix  # users x POIs
    user_ids: tuple[str, ...]
    poi_ids: tuple[str, ...]

    def user_index(self, user_id: str) -> int:
        return self.user_ids.index(user_id)

    def dense(self) -> np.ndarray:
        return self.counts.toarray()


def build_colocation(train: Iterable[UserHistory], pois: PoiSet,
                     users: Iterable[str] = ()) -> CoLocationMatrix:
    """User x POI training visit counts; rows for ``users`` without training visits are zero."""
    train = list(train)
    user_ids = tuple(sorted({h.user_id for h in train} | set(users)))
    uidx = {u: i for i, u in enumerate(user_ids)}
    rows, cols = [], []
    for h in train:
        for v in h.visits:
            rows.append(uidx[h.user_id])
            cols.append(pois.position(v.poi_id))
    data = np.ones(len(rows), dtype=np.int64)
    m = sp.csr_matrix((data, (rows, cols)), shape=(len(user_ids), len(pois)), dtype=np.int64)
    m.sum_duplicates()
    return CoLocationMatrix(m, user_ids, pois.ids)


def _similarity_matrix(matrix: CoLocationMatrix) -> np.ndarray:
    """Dense users x users cosine similarity; zero-norm rows score 0 against everyone."""
    x = matrix.counts.astype(np.float64)
    norms = np.sqrt(np.asarray(x.multiply(x).sum(axis=1)).ravel())
    inv = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
    xn = sp.diags(inv) @ x
    return np.asarray((xn @ xn.T).todense())


def cosine_similarities(matrix: CoLocationMatrix, user: int) -> np.ndarray:
    """Cosine similarity of row ``user`` to every row; zero-norm rows score 0."""
    return _similarity_matrix(matrix)[user]


def _top_neighbors(sims: np.ndarray, user: int, k: int, min_similarity: float | None) -> np.ndarray:
    order = descending_order(sims)
    order = order[order != user]
    if min_similarity is not None:
        order = order[sims[order] > min_similarity]
    return order[:k]


def select_neighbors(matrix: CoLocationMatrix, user: int, k: int,
                     min_similarity: float | None = None) -> list[int]:
    """Top-``k`` other users by cosine similarity, ties (up to rounding) by ascending index.

    With ``min_similarity`` set, only users scoring strictly above it qualify.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    return [int(i) for i in _top_neighbors(cosine_similarities(matrix, user), user, k, min_similarity)]


def neighbor_table(matrix: CoLocationMatrix, k: int, min_similarity: float | None = 0.0) -> np.ndarray:
    """(n_users, k) neighbour indices for every user, -1 where fewer exist."""
    table = np.full((len(matrix.user_ids), k), -1, dtype=np.int64)
    if k == 0 or len(matrix.user_ids) == 0:
        return table
    sims = _similarity_matrix(matrix)
    for u in range(sims.shape[0]):
        chosen = _top_neighbors(sims[u], u, k, min_similarity)
        table[u, :len(chosen)] = chosen
    return table
