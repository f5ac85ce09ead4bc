"""Training loop, optimizer, and checkpointing.

Episodes are drawn per user with a context size resampled uniformly each
visit; gradients are averaged across a batch of episodes before each Adam
step. Early stopping watches validation NDCG@10 when a validation split
exists, otherwise training runs for the configured number of epochs.

Checkpoints are a single binary file: magic, format version, payload
length, a SHA-256 digest of the payload, then a JSON header (config echo,
epoch, optimizer step, generator state, array directory) followed by raw
little-endian float64 array data. Loading re-verifies the digest and the
config echo, so resuming continues the exact run or fails loudly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct

import numpy as np

from .corpus import Subsequence, sample_episode
from .engine import NumericError, ParamStore
from .model import Model
from .objective import divergence_term, nll_bce, nll_mae, total_loss

__all__ = [
    "TrainConfig", "TrainingError", "CheckpointError", "IntegrityError",
    "VersionError", "ConfigMismatchError", "EpochRow", "TrainHistory",
    "adam_step", "train_epoch", "train", "early_stop_check",
    "save_checkpoint", "load_checkpoint", "model_from_checkpoint",
    "config_echo", "config_hash",
]

FEEDBACK_MODES = ("implicit", "explicit")
WASS_IMPLS = ("closed_form", "sinkhorn")
EVAL_CONTEXT_MODES = ("single-window", "clamped-episode")
NEW_USER_MODES = ("zero", "mean")


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class IntegrityError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


@dataclasses.dataclass
class TrainConfig:
    """Flat bag of every knob a run needs.

    Defaults are the reference settings; validate() is the single place
    that enforces cross-field consistency.
    """

    window: int = 5
    cap: int = 20
    basket: int = 1
    embed_dim: int = 64
    channels: int = 32
    attn_dim: int = 64
    latent_dim: int = 64
    heads: int = 1
    context_min: int = 1
    context_max: int = 10
    target_size: int = 15
    batch_size: int = 32
    learning_rate: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 100
    patience: int = 10
    min_improve: float = 1e-5
    seed: int = 1234
    feedback: str = "implicit"
    rating_max: float | None = None
    use_dilation: bool = True
    use_attention: bool = True
    use_np: bool = True
    use_wasserstein: bool = True
    wass_impl: str = "closed_form"
    sinkhorn_samples: int = 64
    sinkhorn_lam: float = 0.05
    sinkhorn_iters: int = 100
    train_ratio: float = 0.8
    val_ratio: float = 0.1
    test_ratio: float = 0.1
    cutoffs: tuple[int, ...] = (1, 5, 10)
    eval_context_mode: str = "clamped-episode"
    eval_context_size: int = 10
    exclude_seen: bool = True
    new_user_embedding: str = "zero"
    workers: int = 1

    def validate(self) -> "TrainConfig":
        problems = []
        if self.window < 1:
            problems.append("window must be >= 1")
        if self.cap < self.window:
            problems.append("cap must be >= window")
        if self.basket < 1:
            problems.append("basket must be >= 1")
        for name in ("embed_dim", "channels", "attn_dim", "latent_dim", "heads",
                     "target_size", "batch_size", "max_epochs", "patience",
                     "sinkhorn_samples", "sinkhorn_iters", "eval_context_size",
                     "workers"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if not (1 <= self.context_min <= self.context_max):
            problems.append("need 1 <= context_min <= context_max")
        if self.attn_dim % self.heads != 0:
            problems.append("heads must divide attn_dim")
        for name in ("learning_rate", "adam_eps", "sinkhorn_lam"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be > 0")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must be in [0, 1)")
        if self.min_improve < 0:
            problems.append("min_improve must be >= 0")
        if self.feedback not in FEEDBACK_MODES:
            problems.append(f"feedback must be one of {FEEDBACK_MODES}")
        if self.rating_max is not None and self.rating_max <= 0:
            problems.append("rating_max must be > 0 when set")
        if self.wass_impl not in WASS_IMPLS:
            problems.append(f"wass_impl must be one of {WASS_IMPLS}")
        if self.eval_context_mode not in EVAL_CONTEXT_MODES:
            problems.append(f"eval_context_mode must be one of {EVAL_CONTEXT_MODES}")
        if self.new_user_embedding not in NEW_USER_MODES:
            problems.append(f"new_user_embedding must be one of {NEW_USER_MODES}")
        ratios = (self.train_ratio, self.val_ratio, self.test_ratio)
        if min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
            problems.append("split ratios must be non-negative and sum to 1")
        if any(k < 1 for k in self.cutoffs) or not self.cutoffs:
            problems.append("cutoffs must be positive")
        if problems:
            raise ValueError("bad configuration: " + "; ".join(problems))
        return self

    def divergence_kind(self) -> str | None:
        if not self.use_np:
            return None
        if not self.use_wasserstein:
            return "kl"
        return "w2" if self.wass_impl == "closed_form" else "sinkhorn"

    def ratios(self) -> tuple[float, float, float]:
        return (self.train_ratio, self.val_ratio, self.test_ratio)


def config_echo(cfg: TrainConfig) -> dict[str, str]:
    """Canonical string form of every field, suitable for hashing and for
    byte-stable echo files."""
    out = {}
    for field in dataclasses.fields(cfg):
        value = getattr(cfg, field.name)
        if isinstance(value, tuple):
            text = ",".join(repr(v) for v in value)
        elif value is None:
            text = "none"
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        out[field.name] = text
    return out


def config_hash(cfg: TrainConfig) -> str:
    echo = config_echo(cfg)
    blob = "\n".join(f"{k} = {echo[k]}" for k in sorted(echo))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# optimizer ----------------------------------------------------------------


def adam_step(store: ParamStore, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update from the gradients sitting in the
    store. Parameters with no gradient this step still advance their
    moment decay through the zero vector, matching a dense implementation.
    """
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m, v = store.moments(name)
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# epoch loop ---------------------------------------------------------------


@dataclasses.dataclass
class EpochRow:
    epoch: int
    nll: float
    wass: float
    total: float
    val_ndcg: float    # nan when no validation split exists


@dataclasses.dataclass
class TrainHistory:
    rows: list
    best_epoch: int          # 1-based; 0 when never validated
    stopped_early: bool

    def best_val(self) -> float:
        vals = [r.val_ndcg for r in self.rows if np.isfinite(r.val_ndcg)]
        return max(vals) if vals else float("nan")


def early_stop_check(val_scores, patience: int, min_improve: float) -> bool:
    """True once the latest score is `patience` or more epochs past the
    last improvement of at least min_improve."""
    best = -np.inf
    best_at = -1
    for i, v in enumerate(val_scores):
        if v >= best + min_improve or best_at < 0:
            best = max(best, v)
            best_at = i
    return len(val_scores) - 1 - best_at >= patience


def _episode_loss(model: Model, user: int, windows: list, cfg: TrainConfig,
                  rng: np.random.Generator):
    """Forward/backward for one sampled episode. Returns (nll, wass) floats
    or None when the episode has no scoreable query."""
    n_c = int(rng.integers(cfg.context_min, cfg.context_max + 1))
    episode = sample_episode(windows, n_c, cfg.target_size, rng)
    eps = rng.standard_normal(cfg.latent_dim) if model.uses_np else None
    query_pos = [i for i, s in enumerate(episode.target) if len(s.next_items)]
    if not query_pos:
        return None
    target_windows = np.stack([s.items for s in episode.target])
    fwd = model.episode_forward(target_windows, episode.context_indices,
                                query_pos, user, eps)
    if cfg.feedback == "explicit":
        items = [s.next_items[0] for s in episode.target if len(s.next_items)]
        ratings = [s.next_ratings[0] for s in episode.target if len(s.next_items)]
        per_query = nll_mae(fwd.y, items, ratings)
    else:
        items = [s.next_items[0] for s in episode.target if len(s.next_items)]
        per_query = nll_bce(fwd.y, items)
    kind = cfg.divergence_kind()
    div = None
    if kind is not None:
        sk_cfg = {"samples": cfg.sinkhorn_samples, "lam": cfg.sinkhorn_lam,
                  "iters": cfg.sinkhorn_iters}
        div = divergence_term(fwd.state_t, fwd.state_c, kind,
                              sinkhorn_cfg=sk_cfg, rng=rng)
    report, total = total_loss(per_query, div)
    total.backward()
    return report.nll, report.wass


def train_epoch(model: Model, user_windows: list, cfg: TrainConfig,
                rng: np.random.Generator) -> tuple[float, float, float, int]:
    """One pass over the users in a fresh shuffled order.

    user_windows: list of (user_index, [Subsequence, ...]) pairs.
    Returns (mean nll, mean wass, mean total, skipped episodes).
    """
    order = rng.permutation(len(user_windows))
    sums = np.zeros(2)
    counted = 0
    skipped = 0
    pending = 0

    def flush():
        nonlocal pending
        if pending == 0:
            return
        model.freeze_padding_row()
        model.store.scale_grads(1.0 / pending)
        adam_step(model.store, cfg.learning_rate, cfg.adam_beta1,
                  cfg.adam_beta2, cfg.adam_eps)
        model.store.zero_grad()
        pending = 0

    for idx in order:
        user, windows = user_windows[idx]
        try:
            out = _episode_loss(model, user, windows, cfg, rng)
        except NumericError as exc:
            raise TrainingError(
                f"non-finite loss for user index {user}: {exc}") from exc
        if out is None:
            skipped += 1
            continue
        sums += out
        counted += 1
        pending += 1
        if pending == cfg.batch_size:
            flush()
    flush()
    if counted == 0:
        raise TrainingError("no scoreable episode in the whole epoch")
    nll, wass = sums / counted
    return float(nll), float(wass), float(nll + wass), skipped


def train(model: Model, user_windows: list, cfg: TrainConfig,
          rng: np.random.Generator, val_eval=None, on_epoch=None,
          start_epoch: int = 0, history: list | None = None) -> TrainHistory:
    """Run epochs until the budget or the early-stopping patience is spent.

    val_eval: optional callable(model) -> float, evaluated after every
    epoch; enables early stopping. on_epoch: optional callable(EpochRow).
    start_epoch/history resume a checkpointed run mid-stream.
    """
    rows = list(history) if history else []
    stopped = False
    for epoch in range(start_epoch, cfg.max_epochs):
        try:
            nll, wass, total, _ = train_epoch(model, user_windows, cfg, rng)
        except TrainingError as exc:
            raise TrainingError(f"epoch {epoch + 1}: {exc}") from exc
        val = float(val_eval(model)) if val_eval is not None else float("nan")
        row = EpochRow(epoch + 1, nll, wass, total, val)
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
        if val_eval is not None:
            scores = [r.val_ndcg for r in rows]
            if early_stop_check(scores, cfg.patience, cfg.min_improve):
                stopped = True
                break
    best_epoch = 0
    best = -np.inf
    for row in rows:
        if np.isfinite(row.val_ndcg) and row.val_ndcg > best:
            best = row.val_ndcg
            best_epoch = row.epoch
    return TrainHistory(rows=rows, best_epoch=best_epoch, stopped_early=stopped)


# checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"IDNP"
CHECKPOINT_VERSION = 1


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _history_payload(rows) -> list:
    return [[r.epoch, r.nll, r.wass, r.total, r.val_ndcg] for r in rows]


def _history_rows(payload) -> list:
    return [EpochRow(int(e), n, w, t, v) for e, n, w, t, v in payload]


def save_checkpoint(path, model: Model, cfg: TrainConfig,
                    rng: np.random.Generator, epoch: int,
                    history_rows=()) -> None:
    """Serialize parameters, optimizer moments, generator state, and the
    training curve so a run can resume bit-for-bit."""
    store = model.store
    directory = []
    chunks = []
    for name, p in store.items():
        m, v = store.moments(name)
        for suffix, arr in (("", p.data), (".m", m), (".v", v)):
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            directory.append({"name": name + suffix,
                              "shape": list(arr.shape),
                              "bytes": len(raw)})
            chunks.append(raw)
    header = {
        "config": config_echo(cfg),
        "config_hash": config_hash(cfg),
        "item_count": model.item_count,
        "user_count": model.user_count,
        "epoch": int(epoch),
        "step": int(store.step),
        "rng_state": _rng_state(rng),
        "history": _history_payload(history_rows),
        "arrays": directory,
    }
    header_raw = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = struct.pack("<I", len(header_raw)) + header_raw + b"".join(chunks)
    digest = hashlib.sha256(payload).digest()
    blob = (CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
            + struct.pack("<Q", len(payload)) + digest + payload)
    with open(path, "wb") as fh:
        fh.write(blob)


@dataclasses.dataclass
class Checkpoint:
    config: dict
    config_hash: str
    item_count: int
    user_count: int
    epoch: int
    step: int
    rng_state: dict
    history: list
    arrays: dict


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 48 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = struct.unpack_from("<I", blob, 4)[0]
    if version != CHECKPOINT_VERSION:
        raise VersionError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    length = struct.unpack_from("<Q", blob, 8)[0]
    digest = blob[16:48]
    payload = blob[48:48 + length]
    if len(payload) != length:
        raise IntegrityError(f"{path}: truncated payload")
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch")
    header_len = struct.unpack_from("<I", payload, 0)[0]
    header = json.loads(payload[4:4 + header_len].decode("utf-8"))
    arrays = {}
    offset = 4 + header_len
    for entry in header["arrays"]:
        n = entry["bytes"]
        arr = np.frombuffer(payload[offset:offset + n], dtype="<f8")
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
        offset += n
    if offset != len(payload):
        raise IntegrityError(f"{path}: array data length mismatch")
    return Checkpoint(
        config=header["config"], config_hash=header["config_hash"],
        item_count=int(header["item_count"]), user_count=int(header["user_count"]),
        epoch=int(header["epoch"]), step=int(header["step"]),
        rng_state=header["rng_state"], history=_history_rows(header["history"]),
        arrays=arrays)


# keys that decide parameter shapes and wiring; everything else can vary
# between training and later evaluation without invalidating the arrays
ARCHITECTURE_KEYS = ("window", "embed_dim", "channels", "attn_dim",
                     "latent_dim", "heads", "use_dilation", "use_attention",
                     "use_np", "feedback")


def check_config_match(ckpt: Checkpoint, cfg: TrainConfig,
                       keys=None) -> None:
    ours = config_echo(cfg)
    names = keys if keys is not None else sorted(set(ours) | set(ckpt.config))
    diffs = []
    for key in names:
        a = ckpt.config.get(key, "<absent>")
        b = ours.get(key, "<absent>")
        if a != b:
            diffs.append(f"{key}: checkpoint={a} current={b}")
    if diffs:
        raise ConfigMismatchError("configuration differs from checkpoint: "
                                  + "; ".join(diffs))


def restore_model(ckpt: Checkpoint, model: Model) -> None:
    store = model.store
    for name, p in store.items():
        m, v = store.moments(name)
        for key, dest in ((name, p.data), (name + ".m", m), (name + ".v", v)):
            if key not in ckpt.arrays:
                raise IntegrityError(f"checkpoint missing array {key}")
            src = ckpt.arrays[key]
            if src.shape != dest.shape:
                raise IntegrityError(
                    f"array {key}: checkpoint shape {src.shape}, "
                    f"model expects {dest.shape}")
            dest[...] = src
    store.step = ckpt.step


def model_from_checkpoint(ckpt: Checkpoint, cfg: TrainConfig,
                          strict: bool = True) -> Model:
    """Rebuild a model with the checkpoint's shapes and load its arrays.

    strict compares the full config echo (resuming training); non-strict
    compares only the architecture keys (evaluating or predicting later
    with different run settings).
    """
    check_config_match(ckpt, cfg, None if strict else ARCHITECTURE_KEYS)
    scratch = np.random.default_rng(cfg.seed)
    model = Model(cfg, ckpt.item_count, ckpt.user_count, scratch)
    restore_model(ckpt, model)
    return model


def restore_rng(ckpt: Checkpoint, rng: np.random.Generator) -> None:
    rng.bit_generator.state = ckpt.rng_state
