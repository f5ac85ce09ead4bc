"""Estimator facade over the training pipeline.

NeuralProcessRecommender follows the scikit-learn protocol: constructor
arguments mirror the run configuration, fit(X) consumes raw interaction
rows, and the fitted object exposes catalog_, model_, history_, and
splits_. Ranking helpers accept item-id histories and return item ids, so
callers never touch dense indices.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .corpus import Catalog, CorpusError, Interaction, build_sequences, \
    split_users, window
from .decoder import top_k
from .evalkit import ModelRanker, evaluate_sequences, prefix_windows
from .model import Model
from .trainer import TrainConfig, train

__all__ = ["NeuralProcessRecommender"]


def _as_interactions(X) -> list[Interaction]:
    """Rows of (user, item[, rating[, timestamp]]) in time order per user."""
    out = []
    for pos, row in enumerate(X):
        parts = list(row)
        if len(parts) < 2 or len(parts) > 4:
            raise ValueError(
                f"row {pos}: expected (user, item[, rating[, timestamp]]), "
                f"got {len(parts)} fields")
        user, item = str(parts[0]), str(parts[1])
        rating = float(parts[2]) if len(parts) >= 3 else None
        ts = int(parts[3]) if len(parts) == 4 else pos
        out.append(Interaction(user, item, rating, ts))
    return out


def _normalize_ratings(interactions, rating_max) -> list[Interaction]:
    """Scale explicit ratings into [0, 1] the same way file ingestion does:
    divide by rating_max, or by the observed maximum when unset."""
    if any(it.rating is None for it in interactions):
        raise ValueError("explicit feedback needs a rating in every row")
    top = rating_max if rating_max is not None else \
        max(it.rating for it in interactions)
    if top <= 0:
        return interactions
    return [Interaction(it.user_id, it.item_id, it.rating / top, it.timestamp)
            for it in interactions]


class NeuralProcessRecommender(BaseEstimator):
    """Sequential recommender trained on episodic context/target splits.

    Parameters mirror TrainConfig; see that class for semantics. X for
    fit() is an iterable of (user, item[, rating[, timestamp]]) rows;
    rows without timestamps are taken in the given order.
    """

    def __init__(self, window=5, cap=20, basket=1, embed_dim=64, channels=32,
                 attn_dim=64, latent_dim=64, heads=1, context_min=1,
                 context_max=10, target_size=15, batch_size=32,
                 learning_rate=3e-4, max_epochs=100, patience=10,
                 min_improve=1e-5, seed=1234, feedback="implicit",
                 rating_max=None, use_dilation=True, use_attention=True,
                 use_np=True, use_wasserstein=True, wass_impl="closed_form",
                 sinkhorn_samples=64, sinkhorn_lam=0.05, sinkhorn_iters=100,
                 train_ratio=0.8, val_ratio=0.1, test_ratio=0.1,
                 cutoffs=(1, 5, 10), eval_context_mode="clamped-episode",
                 eval_context_size=10, exclude_seen=True,
                 new_user_embedding="zero"):
        self.window = window
        self.cap = cap
        self.basket = basket
        self.embed_dim = embed_dim
        self.channels = channels
        self.attn_dim = attn_dim
        self.latent_dim = latent_dim
        self.heads = heads
        self.context_min = context_min
        self.context_max = context_max
        self.target_size = target_size
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.min_improve = min_improve
        self.seed = seed
        self.feedback = feedback
        self.rating_max = rating_max
        self.use_dilation = use_dilation
        self.use_attention = use_attention
        self.use_np = use_np
        self.use_wasserstein = use_wasserstein
        self.wass_impl = wass_impl
        self.sinkhorn_samples = sinkhorn_samples
        self.sinkhorn_lam = sinkhorn_lam
        self.sinkhorn_iters = sinkhorn_iters
        self.train_ratio = train_ratio
        self.val_ratio = val_ratio
        self.test_ratio = test_ratio
        self.cutoffs = cutoffs
        self.eval_context_mode = eval_context_mode
        self.eval_context_size = eval_context_size
        self.exclude_seen = exclude_seen
        self.new_user_embedding = new_user_embedding

    # plumbing -------------------------------------------------------------

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            window=self.window, cap=self.cap, basket=self.basket,
            embed_dim=self.embed_dim, channels=self.channels,
            attn_dim=self.attn_dim, latent_dim=self.latent_dim,
            heads=self.heads, context_min=self.context_min,
            context_max=self.context_max, target_size=self.target_size,
            batch_size=self.batch_size, learning_rate=self.learning_rate,
            max_epochs=self.max_epochs, patience=self.patience,
            min_improve=self.min_improve, seed=self.seed,
            feedback=self.feedback, rating_max=self.rating_max,
            use_dilation=self.use_dilation, use_attention=self.use_attention,
            use_np=self.use_np, use_wasserstein=self.use_wasserstein,
            wass_impl=self.wass_impl, sinkhorn_samples=self.sinkhorn_samples,
            sinkhorn_lam=self.sinkhorn_lam,
            sinkhorn_iters=self.sinkhorn_iters,
            train_ratio=self.train_ratio, val_ratio=self.val_ratio,
            test_ratio=self.test_ratio, cutoffs=tuple(self.cutoffs),
            eval_context_mode=self.eval_context_mode,
            eval_context_size=self.eval_context_size,
            exclude_seen=self.exclude_seen,
            new_user_embedding=self.new_user_embedding).validate()

    def _require_fitted(self):
        if not hasattr(self, "model_"):
            raise RuntimeError("this estimator is not fitted yet; call fit")

    def _history_to_windows(self, items) -> tuple[np.ndarray, np.ndarray]:
        indices = []
        for item in items:
            idx = self.catalog_.item_to_index.get(str(item))
            if idx is None:
                raise KeyError(f"unknown item id: {item!r}")
            indices.append(idx)
        if not indices:
            raise ValueError("history must name at least one item")
        windows = prefix_windows(np.asarray(indices, dtype=np.int64),
                                 self.window)
        take = min(self.eval_context_size, windows.shape[0]) \
            if self.eval_context_mode == "clamped-episode" else 1
        return windows[-take:], windows[-1]

    def _user_vector(self, user=None) -> np.ndarray:
        if user is not None:
            idx = self.catalog_.user_to_index.get(str(user))
            if idx is not None and idx in self.trained_users_:
                return self.model_.tables.user_table.data[idx]
        return self._ranker().fallback

    def _ranker(self) -> ModelRanker:
        return ModelRanker(self.model_, self.trained_users_,
                           self.new_user_embedding)

    # estimator API --------------------------------------------------------

    def fit(self, X, y=None):
        cfg = self._train_config()
        interactions = _as_interactions(X)
        if not interactions:
            raise ValueError("fit needs at least one interaction row")
        if cfg.feedback == "explicit":
            interactions = _normalize_ratings(interactions, cfg.rating_max)
        catalog = Catalog()
        sequences = build_sequences(interactions, catalog, cfg.cap)
        splits = split_users(catalog, cfg.ratios(),
                             np.random.default_rng(cfg.seed))
        by_user = {s.user_index: s for s in sequences}
        user_windows = []
        for u in splits["train"]:
            if u in by_user:
                subs = window(by_user[u], cfg.window, cfg.basket)
                if subs:
                    user_windows.append((int(u), subs))
        if not user_windows:
            raise CorpusError("training split holds no usable sequences")

        model = Model(cfg, catalog.item_count, catalog.user_count,
                      np.random.default_rng(cfg.seed))
        trained_users = set(u for u, _ in user_windows)
        val_seqs = [by_user[u] for u in splits["validation"] if u in by_user]
        val_eval = None
        if val_seqs:
            def val_eval(m):
                ranker = ModelRanker(m, trained_users, cfg.new_user_embedding)
                report = evaluate_sequences(
                    ranker, val_seqs, cfg.window, cfg.basket, (10,),
                    cfg.eval_context_mode, cfg.eval_context_size,
                    cfg.exclude_seen)
                return report.metrics[10]["ndcg"]

        history = train(model, user_windows, cfg,
                        np.random.default_rng(cfg.seed), val_eval=val_eval)

        self.config_ = cfg
        self.catalog_ = catalog
        self.model_ = model
        self.history_ = history
        self.splits_ = {k: np.asarray(v) for k, v in splits.items()}
        self.sequences_ = sequences
        self.trained_users_ = trained_users
        return self

    def score_items(self, items, user=None) -> np.ndarray:
        """Per-item interaction probabilities over the catalog for one
        item-id history, ordered by dense index 1..|I|."""
        self._require_fitted()
        context, query = self._history_to_windows(items)
        score = self.model_.score_query(context, query,
                                        self._user_vector(user))
        return score.y

    def predict_topk(self, X, k=10, user=None) -> list:
        """Top-k item ids for each item-id history in X."""
        self._require_fitted()
        out = []
        for items in X:
            context, query = self._history_to_windows(items)
            score = self.model_.score_query(context, query,
                                            self._user_vector(user))
            exclude = tuple(int(i) for i in query if i != 0) \
                if self.exclude_seen else ()
            ranked = top_k(score.y, k, exclude=exclude)
            out.append([self.catalog_.index_to_item[int(i)] for i in ranked])
        return out

    def predict(self, X) -> np.ndarray:
        """Most likely next item id for each item-id history in X."""
        return np.asarray([row[0] for row in self.predict_topk(X, k=1)],
                          dtype=object)

    def evaluate(self, split="test") -> "EvalReport":
        """Ranking metrics on one of the fitted splits."""
        self._require_fitted()
        if split not in self.splits_:
            raise ValueError(f"split must be one of {sorted(self.splits_)}")
        by_user = {s.user_index: s for s in self.sequences_}
        seqs = [by_user[u] for u in self.splits_[split] if u in by_user]
        if not seqs:
            raise ValueError(f"split {split!r} holds no sequences")
        return evaluate_sequences(self._ranker(), seqs, self.window,
                                  self.basket, tuple(self.cutoffs),
                                  self.eval_context_mode,
                                  self.eval_context_size, self.exclude_seen)
