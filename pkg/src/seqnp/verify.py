"""Self-contained correctness battery.

Every check here recomputes its expectation from scratch (loop oracles,
closed forms, replays) rather than trusting the code under test. The CLI
`verify` command runs the battery and fails the process if any check
fails; the test suite reuses the same oracles with larger case counts.
"""

from __future__ import annotations

import dataclasses
import io
import time

import numpy as np

from . import numerics
from .corpus import Catalog, SynthConfig, build_sequences, synth_generate, window
from .decoder import top_k
from .dynamics import latent_summary, parameterize
from .engine import Tensor, grad_check, logistic, matmul, relu, softmax, tmax, tsum
from .evalkit import hit_at_k, ndcg_at_k, recall_at_k
from .model import Model
from .objective import divergence_term, gaussian_w2, nll_bce, total_loss
from .trainer import (TrainConfig, load_checkpoint, model_from_checkpoint,
                      restore_rng, save_checkpoint, train)

__all__ = ["CheckResult", "run_battery", "conv_oracle", "features_oracle",
           "rank_scan_metrics", "tiny_config", "tiny_episode",
           "episode_loss_closure"]


@dataclasses.dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


# independent oracles ------------------------------------------------------


def conv_oracle(window_emb: np.ndarray, kernel: np.ndarray, gap: int) -> np.ndarray:
    """Quadruple-loop dilated convolution, no vectorization anywhere."""
    length, dim = window_emb.shape
    h, dim_k, channels = kernel.shape
    assert dim == dim_k
    t_out = length - (h - 1) * (gap + 1)
    out = np.zeros((t_out, channels))
    for t in range(t_out):
        for c in range(channels):
            acc = 0.0
            for a in range(h):
                for b in range(dim):
                    acc += window_emb[t + a * (gap + 1), b] * kernel[a, b, c]
            out[t, c] = acc
    return out


def features_oracle(items: np.ndarray, item_table: np.ndarray,
                    kernels: dict[int, list[np.ndarray]]) -> np.ndarray:
    """Multi-scale feature vector rebuilt with loops: per kernel, convolve
    and max-pool over time; average kernels within a gap; concatenate."""
    emb = item_table[np.asarray(items, dtype=np.int64)]
    parts = []
    for gap in sorted(kernels):
        pooled = []
        for kern in kernels[gap]:
            conv = conv_oracle(emb, kern, gap)
            pooled.append(conv.max(axis=0))
        parts.append(np.mean(pooled, axis=0))
    return np.concatenate(parts)


def rank_scan_metrics(ranked, truth, k: int) -> tuple[float, float, float]:
    """(hit, recall, ndcg) computed by scanning for each truth item's rank.

    Discount terms are summed in ascending rank order so a correct
    implementation can match bit for bit.
    """
    ranked = list(ranked)
    positions = []
    for item in truth:
        if item in ranked:
            positions.append(ranked.index(item) + 1)
    inside = sorted(p for p in positions if p <= k)
    hit = 1.0 if inside else 0.0
    recall = len(inside) / len(truth)
    dcg = sum(1.0 / np.log2(p + 1) for p in inside)
    ideal = sum(1.0 / np.log2(r + 1) for r in range(1, min(k, len(truth)) + 1))
    return hit, recall, dcg / ideal


# tiny end-to-end fixture --------------------------------------------------


def tiny_config(**overrides) -> TrainConfig:
    base = dict(window=3, cap=12, embed_dim=4, channels=2, attn_dim=4,
                latent_dim=4, heads=1, context_min=2, context_max=2,
                target_size=3, batch_size=2, max_epochs=2, seed=1234,
                eval_context_size=3)
    base.update(overrides)
    return TrainConfig(**base).validate()


def tiny_episode(rng: np.random.Generator, item_count: int = 10,
                 n_target: int = 3, length: int = 3):
    """Random target windows, context rows, query rows, and next items."""
    windows = rng.integers(1, item_count + 1, size=(n_target, length))
    ctx = rng.choice(n_target, size=2, replace=False)
    queries = list(range(n_target))
    targets = [int(rng.integers(1, item_count + 1)) for _ in queries]
    return windows, [int(i) for i in ctx], queries, targets


def episode_loss_closure(model: Model, windows, ctx, queries, targets,
                         user: int, eps: np.ndarray):
    """(closure, inputs) pair for grad_check over every model parameter."""
    names = model.store.names()
    inputs = [model.store[n].data.copy() for n in names]

    def fn(leaves):
        model.bind_parameters(dict(zip(names, leaves)))
        fwd = model.episode_forward(windows, ctx, queries, user, eps)
        per_q = nll_bce(fwd.y, targets)
        div = divergence_term(fwd.state_t, fwd.state_c, "w2")
        _, total = total_loss(per_q, div)
        return total

    return fn, inputs


# checks -------------------------------------------------------------------


def _check_engine_grads(rng):
    worst = 0.0
    cases = [
        ("matmul-chain", lambda ts: tsum(matmul(ts[0], ts[1]) * ts[2]),
         [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)),
          rng.normal(size=(3, 2))]),
        ("relu", lambda ts: tsum(relu(ts[0]) * ts[1]),
         [rng.normal(size=7) + 0.3, rng.normal(size=7)]),
        ("logistic", lambda ts: tsum(logistic(ts[0])),
         [rng.normal(size=5) * 3]),
        ("softmax", lambda ts: tsum(softmax(ts[0]) * ts[1]),
         [rng.normal(size=6), rng.normal(size=6)]),
        ("maxpool", lambda ts: tsum(tmax(ts[0], axis=0)),
         [rng.normal(size=(4, 3)) + np.arange(12).reshape(4, 3) * 0.1]),
    ]
    for name, fn, inputs in cases:
        err = grad_check(fn, inputs)
        worst = max(worst, err)
        if err >= 1e-4:
            return False, f"{name}: relative error {err:.2e}"
    return True, f"worst relative error {worst:.2e}"


def _check_episode_grad(rng):
    cfg = tiny_config()
    model = Model(cfg, 10, 3, rng)
    windows, ctx, queries, targets = tiny_episode(rng)
    eps = rng.standard_normal(cfg.latent_dim)
    fn, inputs = episode_loss_closure(model, windows, ctx, queries, targets,
                                      user=1, eps=eps)
    err = grad_check(fn, inputs)
    ok = err < 1e-4
    return ok, f"end-to-end relative error {err:.2e} over {sum(x.size for x in inputs)} values"


def _check_conv_oracle(rng):
    worst = 0.0
    for _ in range(200):
        length = int(rng.integers(1, 9))
        dim = int(rng.integers(1, 5))
        gap = int(rng.integers(0, 4))
        max_h = (length + gap) // (gap + 1)
        h = int(rng.integers(1, max_h + 1))
        channels = int(rng.integers(1, 4))
        emb = rng.normal(size=(length, dim))
        kern = rng.normal(size=(h, dim, channels))
        got = numerics.dilated_conv(Tensor(emb), Tensor(kern), gap).data
        want = conv_oracle(emb, kern, gap)
        worst = max(worst, float(np.abs(got - want).max()))
    ok = worst <= 1e-12
    return ok, f"200 instances, max abs deviation {worst:.2e}"


def _check_feature_oracle(rng):
    from .encoder import (EmbeddingTables, KernelBank, init_embedding_arrays,
                          kernel_shapes, multiscale_features_batch)
    worst = 0.0
    for _ in range(60):
        item_count = int(rng.integers(4, 12))
        dim = int(rng.integers(2, 5))
        length = int(rng.integers(2, 7))
        channels = int(rng.integers(1, 4))
        items_arr, _ = init_embedding_arrays(item_count, 1, dim, rng)
        table = Tensor(items_arr)
        dilations = (0, 1, 2)
        kernels = {s: [] for s in dilations}
        raw = {s: [] for s in dilations}
        for s, h, shape in kernel_shapes(length, dim, channels, dilations):
            arr = rng.normal(size=shape)
            kernels[s].append(Tensor(arr))
            raw[s].append(arr)
        bank = KernelBank(length, channels, dilations, kernels)
        windows = rng.integers(0, item_count + 1, size=(3, length))
        got = multiscale_features_batch(windows, table, bank).data
        for row, win in zip(got, windows):
            want = features_oracle(win, items_arr, raw)
            worst = max(worst, float(np.abs(row - want).max()))
    ok = worst <= 1e-12
    return ok, f"60 instances x 3 windows, max abs deviation {worst:.2e}"


def _check_metric_oracle(rng):
    for _ in range(2000):
        item_count = int(rng.integers(3, 30))
        k = int(rng.integers(1, item_count + 1))
        ranked = list(rng.permutation(item_count) + 1)
        truth = set(int(i) for i in
                    rng.choice(item_count, size=int(rng.integers(1, 4)),
                               replace=False) + 1)
        want = rank_scan_metrics(ranked, truth, k)
        got = (hit_at_k(ranked, truth, k), recall_at_k(ranked, truth, k),
               ndcg_at_k(ranked, truth, k))
        if got != want:
            return False, f"mismatch: ranked={ranked} truth={truth} k={k}"
    return True, "2000 cases, exact agreement"


def _check_permutation(rng):
    cfg = tiny_config()
    model = Model(cfg, 10, 3, rng)
    windows = rng.integers(1, 11, size=(5, cfg.window))
    query = rng.integers(1, 11, size=cfg.window)
    e_u = np.zeros(cfg.embed_dim)
    base = model.score_query(windows, query, e_u)
    worst = 0.0
    for _ in range(4):
        perm = rng.permutation(windows.shape[0])
        other = model.score_query(windows[perm], query, e_u)
        worst = max(worst,
                    float(np.abs(base.y - other.y).max()),
                    float(np.abs(base.mu - other.mu).max()),
                    float(np.abs(base.sigma - other.sigma).max()))
    ok = worst <= 1e-9
    return ok, f"context permutations move outputs by at most {worst:.2e}"


def _check_context_sizes(rng):
    cfg = tiny_config()
    model = Model(cfg, 10, 3, rng)
    query = rng.integers(1, 11, size=cfg.window)
    for n_c in range(1, 11):
        windows = rng.integers(1, 11, size=(n_c, cfg.window))
        score = model.score_query(windows, query, np.zeros(cfg.embed_dim))
        if not np.isfinite(score.y).all():
            return False, f"non-finite output at context size {n_c}"
    return True, "finite outputs for context sizes 1 through 10"


def _check_sigma_bounds(rng):
    cfg = tiny_config()
    model = Model(cfg, 10, 3, rng)
    params = model.latent_params()
    for scale in (0.0, 1.0, 1e3, 1e6):
        r = Tensor(rng.normal(size=model.rep_dim) * scale)
        _, sigma = parameterize(latent_summary(Tensor(np.stack([r.data] * 3))),
                                params)
        s = sigma.data
        if not ((s > 0.1).all() and (s < 1.0).all()):
            return False, f"sigma left (0.1, 1.0) at input scale {scale:g}"
    return True, "sigma strictly inside (0.1, 1.0) up to input scale 1e6"


def _check_transport(rng):
    worst = 0.0
    for _ in range(3):
        d = int(rng.integers(1, 5))
        mu_a, mu_b = rng.normal(size=(2, d)) * 1.5
        sg_a, sg_b = rng.uniform(0.3, 1.2, size=(2, d))
        closed = gaussian_w2(Tensor(mu_a), Tensor(sg_a),
                             Tensor(mu_b), Tensor(sg_b)).item()
        xs = mu_a + sg_a * rng.standard_normal((2000, d))
        ys = mu_b + sg_b * rng.standard_normal((2000, d))
        cost = ((xs[:, None, :] - ys[None, :, :]) ** 2).sum(axis=2)
        weights = np.full(2000, 1.0 / 2000)
        res = numerics.sinkhorn(weights, weights, cost, lam=0.05, iters=200)
        est = float(np.sqrt(max(res.value, 0.0)))
        worst = max(worst, abs(est - closed) / closed)
    ok = worst <= 0.05
    return ok, f"3 Gaussian pairs, worst relative gap {worst:.3f}"


def _check_kernel_geometry(rng):
    from .encoder import kernel_plan, kernel_shapes
    for length in range(1, 13):
        for gap in range(0, 4):
            n = kernel_plan(length, gap)
            if n != (length + gap) // (gap + 1):
                return False, f"bad kernel count at L={length} s={gap}"
            for h in range(1, n + 1):
                if (h - 1) * (gap + 1) + 1 > length:
                    return False, f"kernel h={h} cannot fit at L={length} s={gap}"
        shapes = kernel_shapes(length, 4, 2, (0, 1, 2))
        heights = {}
        for s, h, shape in shapes:
            heights.setdefault(s, []).append(h)
            if shape != (h, 4, 2):
                return False, f"bad kernel shape {shape}"
        for s, hs in heights.items():
            if hs != list(range(1, kernel_plan(length, s) + 1)):
                return False, f"kernel heights wrong at L={length} s={s}"
    return True, "kernel counts, heights, and fits agree for L 1..12, s 0..3"


def _check_topk(rng):
    import warnings
    for _ in range(100):
        n = int(rng.integers(3, 20))
        y = rng.random(n)
        k = int(rng.integers(1, n + 1))
        exclude = set(int(i) for i in
                      rng.choice(n, size=int(rng.integers(0, n // 2 + 1)),
                                 replace=False) + 1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            got = [int(i) for i in top_k(y, k, exclude=tuple(exclude))]
        pool = [i for i in range(1, n + 1) if i not in exclude]
        pool.sort(key=lambda i: (-y[i - 1], i))
        if got != pool[:min(k, len(pool))]:
            return False, f"ranking mismatch: y={y} k={k} exclude={exclude}"
    return True, "100 cases match sort-based oracle, exclusion respected"


def _synth_fixture(rng, users=24, items=15):
    cfg = SynthConfig(users=users, items=items, genres=3, seq_len=10,
                      p_stay=0.7)
    catalog = Catalog()
    seqs = build_sequences(synth_generate(cfg, rng), catalog, cap=10)
    return catalog, seqs


def _run_tiny_training(seed: int):
    rng = np.random.default_rng(seed)
    catalog, seqs = _synth_fixture(rng)
    cfg = tiny_config(context_min=1, context_max=3, max_epochs=2, seed=seed)
    users = [(s.user_index, window(s, cfg.window, cfg.basket)) for s in seqs]
    model = Model(cfg, catalog.item_count, catalog.user_count,
                  np.random.default_rng(cfg.seed))
    hist = train(model, users, cfg, np.random.default_rng(cfg.seed))
    return model, hist, cfg, catalog, users


def _check_determinism(rng):
    model_a, hist_a, _, _, _ = _run_tiny_training(77)
    model_b, hist_b, _, _, _ = _run_tiny_training(77)
    for ra, rb in zip(hist_a.rows, hist_b.rows):
        if abs(ra.total - rb.total) > 1e-12:
            return False, f"epoch {ra.epoch} totals differ: {ra.total} vs {rb.total}"
    for name in model_a.store.names():
        if not np.array_equal(model_a.store[name].data, model_b.store[name].data):
            return False, f"parameter {name} differs between same-seed runs"
    return True, "same-seed replay: identical traces and parameters"


def _check_checkpoint(rng):
    import tempfile
    model, hist, cfg, catalog, users = _run_tiny_training(78)
    gen = np.random.default_rng(123)
    with tempfile.NamedTemporaryFile(suffix=".bin", delete=False) as fh:
        path = fh.name
    save_checkpoint(path, model, cfg, gen, epoch=len(hist.rows),
                    history_rows=hist.rows)
    ckpt = load_checkpoint(path)
    clone = model_from_checkpoint(ckpt, cfg)
    gen2 = np.random.default_rng(0)
    restore_rng(ckpt, gen2)
    for name in model.store.names():
        if not np.array_equal(model.store[name].data, clone.store[name].data):
            return False, f"round trip changed parameter {name}"
    if gen2.bit_generator.state != gen.bit_generator.state:
        return False, "generator state did not round-trip"
    return True, "checkpoint round trip is lossless"


_CHECKS = [
    ("operation gradients", _check_engine_grads),
    ("end-to-end gradient", _check_episode_grad),
    ("convolution oracle", _check_conv_oracle),
    ("feature oracle", _check_feature_oracle),
    ("metric oracle", _check_metric_oracle),
    ("context permutation invariance", _check_permutation),
    ("context size flexibility", _check_context_sizes),
    ("sigma bounds", _check_sigma_bounds),
    ("transport agreement", _check_transport),
    ("kernel geometry", _check_kernel_geometry),
    ("ranking cutoff contract", _check_topk),
    ("determinism replay", _check_determinism),
    ("checkpoint round trip", _check_checkpoint),
]


def run_battery(log=None) -> list[CheckResult]:
    results = []
    for name, fn in _CHECKS:
        rng = np.random.default_rng(20260822)
        start = time.time()
        try:
            ok, detail = fn(rng)
        except Exception as exc:   # a crash is a failure, not an abort
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        elapsed = time.time() - start
        results.append(CheckResult(name, ok, detail, elapsed))
        if log is not None:
            mark = "ok" if ok else "FAIL"
            log(f"[{mark:>4}] {name}: {detail} ({elapsed:.1f}s)")
    return results


def battery_report(results) -> str:
    buf = io.StringIO()
    failed = [r for r in results if not r.ok]
    for r in results:
        mark = "ok" if r.ok else "FAIL"
        buf.write(f"[{mark:>4}] {r.name}: {r.detail} ({r.seconds:.1f}s)\n")
    buf.write(f"{len(results) - len(failed)}/{len(results)} checks passed\n")
    return buf.getvalue()
