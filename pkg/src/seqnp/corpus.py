"""Interaction logs, dense catalogs, sliding windows, episode sampling, and a
genre-structured synthetic generator.

Dense item indices start at 1; index 0 is reserved for left-padding short
histories and never appears as a real item. User indices start at 0.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

__all__ = [
    "PAD_INDEX",
    "CorpusError",
    "FormatError",
    "Interaction",
    "Catalog",
    "UserSequence",
    "Subsequence",
    "Episode",
    "SynthConfig",
    "load_interactions",
    "build_sequences",
    "window",
    "split_users",
    "sample_episode",
    "synth_generate",
    "write_interactions",
    "save_sequences",
    "load_sequences",
]

PAD_INDEX = 0


class CorpusError(ValueError):
    """Data-level failure (malformed input, impossible request)."""


class FormatError(CorpusError):
    """Too many malformed lines; carries the offending line numbers."""

    def __init__(self, message: str, lines: list[int]):
        super().__init__(message)
        self.lines = lines


@dataclasses.dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    rating: float | None
    timestamp: int


class Catalog:
    """Bidirectional id/index maps. Items are dense 1..|I| (0 is padding),
    users are dense 0..|U|-1."""

    def __init__(self):
        self.item_to_index: dict[str, int] = {}
        self.index_to_item: list[str | None] = [None]
        self.user_to_index: dict[str, int] = {}
        self.index_to_user: list[str] = []

    @property
    def item_count(self) -> int:
        return len(self.index_to_item) - 1

    @property
    def user_count(self) -> int:
        return len(self.index_to_user)

    def add_item(self, item_id: str) -> int:
        idx = self.item_to_index.get(item_id)
        if idx is None:
            idx = len(self.index_to_item)
            self.item_to_index[item_id] = idx
            self.index_to_item.append(item_id)
        return idx

    def add_user(self, user_id: str) -> int:
        idx = self.user_to_index.get(user_id)
        if idx is None:
            idx = len(self.index_to_user)
            self.user_to_index[user_id] = idx
            self.index_to_user.append(user_id)
        return idx

    def to_dict(self) -> dict:
        return {"items": self.index_to_item[1:], "users": self.index_to_user}

    @classmethod
    def from_dict(cls, payload: dict) -> "Catalog":
        cat = cls()
        for item in payload["items"]:
            cat.add_item(item)
        for user in payload["users"]:
            cat.add_user(user)
        return cat


@dataclasses.dataclass
class UserSequence:
    user_index: int
    items: np.ndarray                 # dense indices, time order, length >= 1
    ratings: np.ndarray | None        # parallel to items when feedback is explicit
    feedback: str = "implicit"

    def __len__(self) -> int:
        return len(self.items)


@dataclasses.dataclass
class Subsequence:
    user_index: int
    start: int                        # offset of the first (possibly padded) slot
    items: np.ndarray                 # exactly L entries, zero-padded on the left
    next_items: np.ndarray            # up to k following items (may be empty)
    next_ratings: np.ndarray | None = None


@dataclasses.dataclass
class Episode:
    user_index: int
    context: list[Subsequence]
    target: list[Subsequence]
    context_indices: list[int]        # positions of context inside target


def load_interactions(path, feedback: str = "implicit",
                      rating_max: float | None = None) -> list[Interaction]:
    """Read a tab-separated log: user, item, optional rating, optional timestamp.

    Lines starting with '#' and blank lines are skipped. Ratings are divided
    by ``rating_max`` (observed maximum when None) to land in [0, 1]; implicit
    logs never carry ratings. More than 1% malformed lines raises
    FormatError naming them.
    """
    if feedback not in ("implicit", "explicit"):
        raise ValueError(f"unknown feedback kind {feedback!r}")
    rows: list[list] = []
    bad_lines: list[int] = []
    considered = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            considered += 1
            fields = line.split("\t")
            if len(fields) < 2 or not fields[0].strip() or not fields[1].strip():
                bad_lines.append(lineno)
                continue
            user, item = fields[0].strip(), fields[1].strip()
            rating: float | None = None
            timestamp = 0
            try:
                if feedback == "explicit":
                    if len(fields) < 3:
                        raise ValueError("missing rating")
                    rating = float(fields[2])
                if len(fields) >= 4:
                    timestamp = int(fields[3])
            except ValueError:
                bad_lines.append(lineno)
                continue
            rows.append([user, item, rating, timestamp])
    if considered and len(bad_lines) / considered > 0.01:
        shown = ", ".join(str(x) for x in bad_lines[:20])
        more = "" if len(bad_lines) <= 20 else f" (+{len(bad_lines) - 20} more)"
        raise FormatError(
            f"{len(bad_lines)}/{considered} malformed lines in {path}: {shown}{more}",
            bad_lines,
        )
    if feedback == "explicit" and rows:
        top = rating_max if rating_max is not None else max(r[2] for r in rows)
        if top > 0:
            for r in rows:
                r[2] = r[2] / top
    return [Interaction(u, i, r, t) for u, i, r, t in rows]


def build_sequences(interactions: list[Interaction], catalog: Catalog,
                    cap: int) -> list[UserSequence]:
    """Group interactions per user (stable-sorted by timestamp), truncate each
    history to its first ``cap`` events, and extend the catalog with any new
    ids along the way."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    per_user: dict[int, list[tuple[int, int, int, float | None]]] = {}
    for order, inter in enumerate(interactions):
        u = catalog.add_user(inter.user_id)
        i = catalog.add_item(inter.item_id)
        per_user.setdefault(u, []).append((inter.timestamp, order, i, inter.rating))
    sequences = []
    explicit = any(inter.rating is not None for inter in interactions)
    for u in sorted(per_user):
        events = sorted(per_user[u], key=lambda e: (e[0], e[1]))[:cap]
        items = np.array([e[2] for e in events], dtype=np.int64)
        ratings = None
        if explicit:
            ratings = np.array([0.0 if e[3] is None else e[3] for e in events])
        sequences.append(UserSequence(u, items, ratings,
                                      "explicit" if explicit else "implicit"))
    return sequences


def window(seq: UserSequence, length: int, basket: int) -> list[Subsequence]:
    """Slide a width-``length`` window with step 1; each window records up to
    ``basket`` following items as ground truth. Histories shorter than the
    window produce a single left-padded view with no following items."""
    if length < 1:
        raise ValueError("window length must be >= 1")
    if basket < 0:
        raise ValueError("basket size must be >= 0")
    n = len(seq.items)
    if n == 0:
        raise CorpusError(f"user {seq.user_index} has an empty sequence")
    subs = []
    if n < length:
        items = np.concatenate([
            np.full(length - n, PAD_INDEX, dtype=np.int64), seq.items])
        subs.append(Subsequence(seq.user_index, n - length, items,
                                np.empty(0, dtype=np.int64),
                                None if seq.ratings is None else np.empty(0)))
        return subs
    for start in range(n - length + 1):
        nxt = seq.items[start + length: start + length + basket]
        nxt_r = None
        if seq.ratings is not None:
            nxt_r = seq.ratings[start + length: start + length + basket].copy()
        subs.append(Subsequence(seq.user_index, start,
                                seq.items[start: start + length].copy(),
                                nxt.copy(), nxt_r))
    return subs


def split_users(catalog: Catalog, ratios: tuple[float, float, float],
                rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Disjoint train/validation/test user index sets covering every user."""
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError("ratios must be three nonnegative numbers")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1 (got {sum(ratios)})")
    total = catalog.user_count
    if total < 3:
        raise CorpusError(f"need at least 3 users to split, have {total}")
    order = rng.permutation(total)
    n_train = int(np.floor(ratios[0] * total))
    n_val = int(np.floor(ratios[1] * total))
    return {
        "train": np.sort(order[:n_train]),
        "validation": np.sort(order[n_train:n_train + n_val]),
        "test": np.sort(order[n_train + n_val:]),
    }


def sample_episode(subsequences: list[Subsequence], n_context: int,
                   n_target: int, rng: np.random.Generator) -> Episode:
    """Draw a target set of up to ``n_target`` windows without replacement,
    then a context subset of up to ``n_context`` of those. Context is always
    contained in target."""
    if not subsequences:
        raise CorpusError("cannot sample an episode from zero subsequences")
    if n_context < 1 or n_target < 1:
        raise ValueError("context and target sizes must be >= 1")
    m = len(subsequences)
    tgt_idx = rng.choice(m, size=min(n_target, m), replace=False)
    ctx_positions = rng.choice(len(tgt_idx), size=min(n_context, len(tgt_idx)),
                               replace=False)
    target = [subsequences[i] for i in tgt_idx]
    context = [target[i] for i in ctx_positions]
    return Episode(subsequences[0].user_index, context, target,
                   [int(i) for i in ctx_positions])


@dataclasses.dataclass
class SynthConfig:
    users: int = 200
    items: int = 60
    genres: int = 5
    seq_len: int = 20
    p_stay: float = 0.8
    concentration: float = 1.0
    popularity_skew: float = 1.0
    feedback: str = "implicit"

    def validate(self):
        if self.users < 0 or self.items < 1 or self.seq_len < 1:
            raise ValueError("users must be >= 0, items and seq_len >= 1")
        if self.genres < 1 or self.genres > self.items:
            raise ValueError("genres must lie in [1, items]")
        if not 0.0 <= self.p_stay <= 1.0:
            raise ValueError("p_stay must lie in [0, 1]")
        if self.concentration <= 0:
            raise ValueError("concentration must be positive")
        if self.feedback not in ("implicit", "explicit"):
            raise ValueError(f"unknown feedback kind {self.feedback!r}")


def genre_of(item: int, cfg: SynthConfig) -> int:
    """Genre block of a 1-based synthetic item id."""
    bounds = _genre_bounds(cfg)
    return int(np.searchsorted(bounds, item, side="right") - 1)


def _genre_bounds(cfg: SynthConfig) -> np.ndarray:
    sizes = np.full(cfg.genres, cfg.items // cfg.genres, dtype=np.int64)
    sizes[: cfg.items % cfg.genres] += 1
    return 1 + np.concatenate([[0], np.cumsum(sizes)[:-1]])


def synth_generate(cfg: SynthConfig, rng: np.random.Generator) -> list[Interaction]:
    """Generate drifting-interest interaction logs.

    Each user draws a long-term genre distribution from a symmetric Dirichlet;
    at every step the short-term genre persists with probability ``p_stay``
    and otherwise re-draws from the long-term distribution. Items are drawn
    within the active genre under a power-law popularity profile, so a few
    items per genre dominate globally.
    """
    cfg.validate()
    bounds = _genre_bounds(cfg)
    sizes = np.diff(np.concatenate([bounds, [cfg.items + 1]]))
    genre_items = [np.arange(bounds[gi], bounds[gi] + sizes[gi])
                   for gi in range(cfg.genres)]
    genre_weights = []
    for gi in range(cfg.genres):
        w = 1.0 / np.arange(1, sizes[gi] + 1) ** cfg.popularity_skew
        genre_weights.append(w / w.sum())
    out: list[Interaction] = []
    width = max(4, len(str(cfg.users)))
    for u in range(cfg.users):
        theta = rng.dirichlet(np.full(cfg.genres, cfg.concentration))
        genre = int(rng.choice(cfg.genres, p=theta))
        user_id = f"u{u:0{width}d}"
        for t in range(cfg.seq_len):
            item = int(rng.choice(genre_items[genre], p=genre_weights[genre]))
            rating = None
            if cfg.feedback == "explicit":
                rating = float(theta[genre] / theta.max())
            out.append(Interaction(user_id, str(item), rating, t))
            if rng.random() >= cfg.p_stay:
                genre = int(rng.choice(cfg.genres, p=theta))
    return out


def write_interactions(path, interactions: list[Interaction]):
    """Write the same tab-separated layout ``load_interactions`` reads.

    Rating-free rows have no slot for a timestamp (columns are positional),
    so they serialize as two fields and rely on file order, which the
    stable sort in ``build_sequences`` preserves on reload.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for it in interactions:
            if it.rating is None:
                fh.write(f"{it.user_id}\t{it.item_id}\n")
            else:
                fh.write(f"{it.user_id}\t{it.item_id}\t{it.rating:.6g}\t{it.timestamp}\n")


def save_sequences(path, catalog: Catalog, sequences: list[UserSequence]):
    payload = {
        "catalog": catalog.to_dict(),
        "sequences": [
            {
                "user": seq.user_index,
                "items": seq.items.tolist(),
                "ratings": None if seq.ratings is None else seq.ratings.tolist(),
                "feedback": seq.feedback,
            }
            for seq in sequences
        ],
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_sequences(path) -> tuple[Catalog, list[UserSequence]]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    catalog = Catalog.from_dict(payload["catalog"])
    sequences = []
    for row in payload["sequences"]:
        ratings = row["ratings"]
        sequences.append(UserSequence(
            row["user"], np.array(row["items"], dtype=np.int64),
            None if ratings is None else np.array(ratings, dtype=np.float64),
            row["feedback"]))
    return catalog, sequences
