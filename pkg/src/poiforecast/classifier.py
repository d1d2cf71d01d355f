"""Category classifier on top of the context encoder, and the training loop.

The same loop also trains the direct-POI baseline: only the output head and
the target labels differ.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
import pickle
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .data import DatasetSplit, PoiSet, Target, UserHistory
from .encoder import (ContextEncoder, EncoderConfig, SocialFusion, Vocabulary, build_colocation,
                      build_window, neighbor_table, stack_windows)
from .errors import ConfigError, NumericError, TrainingError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
JOINT = "joint"
BASELINE = "baseline"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class CategoryDistribution:
    probabilities: np.ndarray
    categories: tuple[str, ...]

    def __post_init__(self):
        if len(self.probabilities) != len(self.categories):
            raise ValueError("probability vector and category index disagree in length")

    def __getitem__(self, category_id: str) -> float:
        return float(self.probabilities[self.categories.index(category_id)])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.categories, map(float, self.probabilities)))


class CategoryHead(nn.Module):
    """Two-layer perceptron producing category logits."""

    def __init__(self, hidden_dim: int, n_categories: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
                                 nn.Linear(hidden_dim, n_categories))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return self.net(f)


def softmax64(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_category(f: torch.Tensor, head: nn.Module, categories: Sequence[str]) -> CategoryDistribution:
    """softmax(MLP(f)) for a single context vector."""
    with torch.no_grad():
        logits = head(f.unsqueeze(0) if f.dim() == 1 else f).reshape(-1)
    if not torch.isfinite(logits).all():
        raise NumericError(f"non-finite category logits: {logits.tolist()[:8]}... "
                           f"(|f|max={float(f.abs().max()):.3g})")
    return CategoryDistribution(softmax64(logits.double().numpy()), tuple(categories))


def category_loss(predicted: CategoryDistribution, true_category: int) -> float:
    if not 0 <= true_category < len(predicted.probabilities):
        raise IndexError(f"category index {true_category} out of range")
    return -math.log(max(float(predicted.probabilities[true_category]), PROB_FLOOR))


def floored_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-example -log(max(softmax, 1e-12)) evaluated in log space."""
    logp = torch.log_softmax(logits, dim=-1).gather(1, target.unsqueeze(1)).squeeze(1)
    return -logp.clamp_min(math.log(PROB_FLOOR))


class NextVisitModel(nn.Module):
    """Encoder + social fusion + an output head.

    ``neighbor_cache`` holds one context vector per user (computed from the
    user's most recent training window); neighbour lookups read it.
    """

    def __init__(self, config: EncoderConfig, n_poi_rows: int, n_category_rows: int, head: nn.Module):
        super().__init__()
        self.config = config
        self.encoder = ContextEncoder(config, n_poi_rows, n_category_rows)
        self.fusion = SocialFusion(config.hidden_dim, config.num_attention_heads, config.dropout)
        self.head = head
        self.register_buffer("neighbor_cache", torch.zeros(0, config.hidden_dim), persistent=False)

    def context(self, poi, category, temporal, mask, neighbors: torch.Tensor | None = None) -> torch.Tensor:
        own = self.encoder(poi, category, temporal, mask)
        if neighbors is None or neighbors.shape[1] == 0 or self.neighbor_cache.shape[0] == 0:
            return self.fusion(own)
        valid = neighbors >= 0
        nb = self.neighbor_cache[neighbors.clamp_min(0)]
        return self.fusion(own, nb, valid)

    def forward(self, poi, category, temporal, mask, neighbors=None) -> torch.Tensor:
        return self.head(self.context(poi, category, temporal, mask, neighbors))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    patience: int = 5
    max_epochs: int = 50
    min_neighbor_similarity: float = 0.0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.patience < 1 or self.max_epochs < 1:
            raise ConfigError(f"invalid training config {self}")

    def to_json(self) -> dict:
        return asdict(self)


class Featurizer:
    """Turns (history, position) pairs into model input tensors for one split."""

    def __init__(self, split: DatasetSplit, pois: PoiSet, config: EncoderConfig,
                 poi_vocab: Vocabulary | None = None, category_vocab: Vocabulary | None = None,
                 min_similarity: float | None = 0.0):
        self.split = split
        self.pois = pois
        self.config = config
        self.poi_vocab = poi_vocab or Vocabulary(split.train_poi_ids)
        self.category_vocab = category_vocab or Vocabulary(pois.category_vocabulary)
        self.train_by_user = {h.user_id: h for h in split.train}
        users = sorted(split.histories)
        self.colocation = build_colocation(split.train, pois, users)
        self.user_index = {u: i for i, u in enumerate(self.colocation.user_ids)}
        self.neighbors = neighbor_table(self.colocation, config.neighbor_count, min_similarity)

    @property
    def categories(self) -> tuple[str, ...]:
        return self.category_vocab.tokens

    def category_class(self, poi_id: str) -> int:
        return self.category_vocab.index(self.pois[poi_id].category_id) - 2

    def poi_class(self, poi_id: str) -> int:
        """Baseline class index; -1 for POIs outside the training vocabulary."""
        return self.poi_vocab.index(poi_id) - 2

    def tensors(self, items: Sequence[tuple[UserHistory, int]]):
        windows = [build_window(h, end, self.poi_vocab, self.category_vocab, self.pois, self.config)
                   for h, end in items]
        nb = torch.from_numpy(np.stack([self.neighbors[self.user_index[h.user_id]] for h, _ in items]))
        return (*stack_windows(windows), nb)

    def training_items(self) -> list[tuple[UserHistory, int, str]]:
        """(history, end_index, target poi) for every position after the first of each training history."""
        return [(h, j, h.visits[j].poi_id) for h in self.split.train for j in range(1, len(h.visits))]

    def target_items(self, targets: Sequence[Target]) -> list[tuple[UserHistory, int, str]]:
        return [(self.split.histories[t.user_id], t.index, self.split.visit(t).poi_id) for t in targets]

    def latest_windows(self):
        """Most recent training window of every user that has one; returns (user rows, tensors)."""
        rows = [self.user_index[u] for u in sorted(self.train_by_user)]
        items = [(self.train_by_user[u], len(self.train_by_user[u])) for u in sorted(self.train_by_user)]
        windows = [build_window(h, end, self.poi_vocab, self.category_vocab, self.pois, self.config)
                   for h, end in items]
        return rows, stack_windows(windows)


def refresh_neighbor_cache(model: NextVisitModel, feats: Featurizer, batch_size: int = 256) -> None:
    was_training = model.training
    model.eval()
    cache = torch.zeros(len(feats.user_index), model.config.hidden_dim)
    rows, (poi, cat, tim, mask) = feats.latest_windows()
    with torch.no_grad():
        for s in range(0, len(rows), batch_size):
            sl = slice(s, s + batch_size)
            cache[rows[sl]] = model.encoder(poi[sl], cat[sl], tim[sl], mask[sl])
    model.neighbor_cache = cache
    model.train(was_training)


@dataclass
class TrainState:
    method: str
    model: NextVisitModel
    featurizer: Featurizer
    train_config: TrainConfig
    seed: int
    optimizer: torch.optim.Optimizer | None = None
    epoch: int = 0
    best_metric: float = -1.0
    best_epoch: int = -1
    history: list[dict] = field(default_factory=list)
    resumed_metric: float | None = None

    @property
    def labels(self):
        return self.featurizer.category_class if self.method == JOINT else self.featurizer.poi_class

    def context_vectors(self, items, batch_size: int = 256) -> torch.Tensor:
        """Fused context vectors for (history, end_index, ...) items, inference mode."""
        self.model.eval()
        out = []
        with torch.no_grad():
            for s in range(0, len(items), batch_size):
                chunk = [(h, e) for h, e, *_ in items[s:s + batch_size]]
                out.append(self.model.context(*self.featurizer.tensors(chunk)))
        return torch.cat(out) if out else torch.zeros(0, self.model.config.hidden_dim)

    def logits(self, items, batch_size: int = 256) -> torch.Tensor:
        f = self.context_vectors(items, batch_size)
        with torch.no_grad():
            return self.model.head(f)

    def validation_accuracy(self, targets: Sequence[Target] | None = None) -> float:
        """Acc@1 of the head's own task (category for joint, POI for baseline)."""
        targets = self.featurizer.split.validation if targets is None else targets
        items = self.featurizer.target_items(targets)
        if not items:
            return 0.0
        pred = self.logits(items).argmax(dim=1).numpy()
        truth = np.array([self.labels(p) for _, _, p in items])
        return float(np.mean(pred == truth))


def build_model(method: str, config: EncoderConfig, feats: Featurizer) -> NextVisitModel:
    if method == JOINT:
        head = CategoryHead(config.hidden_dim, len(feats.categories))
    elif method == BASELINE:
        from .ranking import BaselineHead
        head = BaselineHead(config.hidden_dim, feats.poi_vocab.tokens)
    else:
        raise ConfigError(f"unknown method {method!r}")
    return NextVisitModel(config, len(feats.poi_vocab), len(feats.category_vocab), head)


def configure_determinism(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def train(split: DatasetSplit, pois: PoiSet, method: str = JOINT,
          config: EncoderConfig | None = None, train_config: TrainConfig | None = None,
          seed: int = 0, resume: TrainState | None = None,
          metrics_path: str | os.PathLike | None = None) -> TrainState:
    """Train the joint category classifier (or the POI baseline) end to end.

    One example per training-history position after the first. Validation
    accuracy is tracked every epoch, the best weights are kept, and training
    stops after ``patience`` epochs without improvement.
    """
    config = config or EncoderConfig()
    train_config = train_config or TrainConfig()
    if resume is not None:
        state = resume
        state.train_config = train_config
        refresh_neighbor_cache(state.model, state.featurizer)
        state.resumed_metric = state.validation_accuracy()
        log.info("resumed %s at epoch %d; validation %.6f (stored best %.6f)",
                 state.method, state.epoch, state.resumed_metric, state.best_metric)
    else:
        configure_determinism(seed)
        feats = Featurizer(split, pois, config, min_similarity=train_config.min_neighbor_similarity)
        model = build_model(method, config, feats)
        state = TrainState(method, model, feats, train_config, seed)
        state.optimizer = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)

    model, feats = state.model, state.featurizer
    items = feats.training_items()
    if not items:
        raise ConfigError("no training examples (every training history has a single visit)")
    labels = torch.tensor([state.labels(p) for _, _, p in items], dtype=torch.int64)
    inputs = feats.tensors([(h, e) for h, e, _ in items])
    rng = np.random.default_rng([state.seed, state.epoch])
    if resume is not None:
        torch.manual_seed(state.seed + state.epoch)
    best_weights = copy.deepcopy(model.state_dict())
    stale = 0
    writer = None
    if metrics_path is not None:
        fh = open(metrics_path, "a" if resume is not None else "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if resume is None:
            writer.writerow(["epoch", "train_loss", "val_category_acc1" if state.method == JOINT else "val_poi_acc1",
                             "wall_seconds"])

    try:
        while state.epoch < train_config.max_epochs:
            t0 = time.perf_counter()
            refresh_neighbor_cache(model, feats)
            model.train()
            perm = rng.permutation(len(items))
            total, seen = 0.0, 0
            for s in range(0, len(perm), train_config.batch_size):
                idx = perm[s:s + train_config.batch_size]
                sel = torch.from_numpy(idx)
                batch = [t[sel] for t in inputs]
                y = labels[sel]
                loss = floored_cross_entropy(model(*batch), y).mean()
                if not torch.isfinite(loss):
                    bad = [(items[i][0].user_id, items[i][1]) for i in idx[:10]]
                    raise TrainingError(f"loss diverged at epoch {state.epoch}; batch starts {bad}")
                state.optimizer.zero_grad()
                loss.backward()
                state.optimizer.step()
                total += loss.item() * len(idx)
                seen += len(idx)
            refresh_neighbor_cache(model, feats)
            val = state.validation_accuracy()
            row = {"epoch": state.epoch, "train_loss": total / seen, "val_acc1": val,
                   "wall_seconds": time.perf_counter() - t0}
            state.history.append(row)
            if writer is not None:
                writer.writerow([row["epoch"], f"{row['train_loss']:.6f}", f"{val:.6f}", f"{row['wall_seconds']:.3f}"])
            log.info("%s epoch %d loss %.4f val %.4f", state.method, state.epoch, row["train_loss"], val)
            state.epoch += 1
            if val > state.best_metric:
                state.best_metric, state.best_epoch = val, state.epoch - 1
                best_weights = copy.deepcopy(model.state_dict())
                stale = 0
            else:
                stale += 1
                if stale >= train_config.patience:
                    break
    finally:
        if writer is not None:
            fh.close()

    model.load_state_dict(best_weights)
    refresh_neighbor_cache(model, feats)
    model.eval()
    return state


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(state: TrainState, path: str | os.PathLike) -> None:
    feats = state.featurizer
    torch.save({
        "version": CHECKPOINT_VERSION,
        "method": state.method,
        "encoder_config": feats.config.to_json(),
        "train_config": state.train_config.to_json(),
        "seed": state.seed,
        "epoch": state.epoch,
        "best_metric": state.best_metric,
        "best_epoch": state.best_epoch,
        "history": state.history,
        "poi_vocabulary": feats.poi_vocab.to_json(),
        "category_vocabulary": feats.category_vocab.to_json(),
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict() if state.optimizer is not None else None,
    }, path)


def load_checkpoint(path: str | os.PathLike, split: DatasetSplit, pois: PoiSet) -> TrainState:
    try:
        ck = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, pickle.UnpicklingError, EOFError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc
    if ck.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {ck.get('version')}")
    config = EncoderConfig(**ck["encoder_config"])
    train_config = TrainConfig(**ck["train_config"])
    feats = Featurizer(split, pois, config, Vocabulary.from_json(ck["poi_vocabulary"]),
                       Vocabulary.from_json(ck["category_vocabulary"]), train_config.min_neighbor_similarity)
    model = build_model(ck["method"], config, feats)
    model.load_state_dict(ck["model"])
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.learning_rate)
    if ck.get("optimizer") is not None:
        optimizer.load_state_dict(ck["optimizer"])
    refresh_neighbor_cache(model, feats)
    model.eval()
    return TrainState(ck["method"], model, feats, train_config, ck["seed"], optimizer, ck["epoch"],
                      ck["best_metric"], ck["best_epoch"], list(ck["history"]))
