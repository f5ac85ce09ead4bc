"""Release gates: one test per gate, one summary line per gate.

Each test records a PASS/FAIL line through ``conftest.record_gate`` before
asserting, so the terminal summary always shows the full scoreboard even
when a gate goes red.  Gates 6 to 8 share one trained-model fixture; the
rest run standalone and fast.
"""

import numpy as np
import pytest

import seqnp.cli as cli
import seqnp.numerics as numerics
from conftest import record_gate
from seqnp.corpus import Catalog, SynthConfig, build_sequences, split_users, \
    synth_generate, window
from seqnp.encoder import KernelBank, init_embedding_arrays, kernel_shapes, \
    multiscale_features_batch
from seqnp.engine import Tensor, grad_check
from seqnp.evalkit import PopularityRanker, evaluate_sequences, hit_at_k, \
    ndcg_at_k, popularity_counts, prefix_windows, recall_at_k
from seqnp.model import Model
from seqnp.objective import gaussian_w2
from seqnp.trainer import TrainConfig, load_checkpoint, train
from seqnp.verify import conv_oracle, episode_loss_closure, features_oracle, \
    rank_scan_metrics, tiny_config, tiny_episode

SEED = 1234


# shared synthetic workload for gates 6, 7, 8 -------------------------------


def shipped_config(**overrides) -> TrainConfig:
    base = dict(window=5, cap=20, embed_dim=32, channels=16, attn_dim=64,
                latent_dim=64, batch_size=2, learning_rate=3e-3,
                max_epochs=30, seed=SEED, train_ratio=0.5, val_ratio=0.0,
                test_ratio=0.5, exclude_seen=False)
    base.update(overrides)
    return TrainConfig(**base).validate()


def train_variant(cfg, catalog, seqs):
    splits = split_users(catalog, cfg.ratios(), np.random.default_rng(cfg.seed))
    by_user = {s.user_index: s for s in seqs}
    uw = [(int(u), window(by_user[u], cfg.window, cfg.basket))
          for u in splits["train"] if u in by_user]
    model = Model(cfg, catalog.item_count, catalog.user_count,
                  np.random.default_rng(cfg.seed))
    history = train(model, uw, cfg, np.random.default_rng(cfg.seed))
    test_seqs = [by_user[u] for u in splits["test"] if u in by_user]
    trained = set(u for u, _ in uw)
    return model, history, test_seqs, trained, by_user


def held_out_report(model, cfg, test_seqs, trained):
    from seqnp.evalkit import ModelRanker
    ranker = ModelRanker(model, trained, cfg.new_user_embedding)
    return evaluate_sequences(ranker, test_seqs, cfg.window, cfg.basket,
                              (10,), cfg.eval_context_mode,
                              cfg.eval_context_size, cfg.exclude_seen)


@pytest.fixture(scope="module")
def workload():
    scfg = SynthConfig(users=200, items=60, genres=5, seq_len=20, p_stay=0.8)
    catalog = Catalog()
    seqs = build_sequences(synth_generate(scfg, np.random.default_rng(SEED)),
                           catalog, cap=20)
    out = {"catalog": catalog, "seqs": seqs}
    for name, cfg in (("full", shipped_config()),
                      ("kl", shipped_config(use_wasserstein=False)),
                      ("enc", shipped_config(use_np=False))):
        model, history, test_seqs, trained, by_user = \
            train_variant(cfg, catalog, seqs)
        report = held_out_report(model, cfg, test_seqs, trained)
        out[name] = dict(cfg=cfg, model=model, history=history,
                         test_seqs=test_seqs, trained=trained,
                         by_user=by_user, report=report)
    return out


# rank statistics with tie handling -----------------------------------------


def average_ranks(values) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    order = np.argsort(arr, kind="stable")
    ranks = np.empty(arr.size)
    i = 0
    while i < arr.size:
        j = i
        while j + 1 < arr.size and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    rx = average_ranks(xs) - np.mean(average_ranks(xs))
    ry = average_ranks(ys) - np.mean(average_ranks(ys))
    denom = float(np.sqrt(np.sum(rx * rx) * np.sum(ry * ry)))
    return float(np.sum(rx * ry) / denom) if denom > 0 else 0.0


# gates ---------------------------------------------------------------------


def test_gate1_battery_scope():
    detail = ("published benchmark figures need the full public datasets and "
              "long training runs; this battery asserts behavioral "
              "properties at desk scale instead")
    assert record_gate(1, "scope: property suite stands in for benchmark "
                          "reproduction", True, detail)


def test_gate2_end_to_end_gradients():
    worst = 0.0
    sizes = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        cfg = tiny_config()
        model = Model(cfg, 10, 3, rng)
        windows, ctx, queries, targets = tiny_episode(rng)
        eps = rng.standard_normal(cfg.latent_dim)
        fn, inputs = episode_loss_closure(model, windows, ctx, queries,
                                          targets, user=1, eps=eps)
        worst = max(worst, grad_check(fn, inputs))
        sizes = sum(x.size for x in inputs)
    ok = worst < 1e-4
    detail = (f"10 seeds, {sizes} parameter values each, "
              f"worst relative error {worst:.2e}")
    assert record_gate(2, "full-loss gradients match central differences",
                       ok, detail), detail


def test_gate3_oracle_equivalence():
    rng = np.random.default_rng(20260822)
    worst_conv = 0.0
    for _ in range(1000):
        length = int(rng.integers(1, 9))
        dim = int(rng.integers(1, 5))
        gap = int(rng.integers(0, 4))
        h = int(rng.integers(1, (length + gap) // (gap + 1) + 1))
        channels = int(rng.integers(1, 4))
        emb = rng.normal(size=(length, dim))
        kern = rng.normal(size=(h, dim, channels))
        got = numerics.dilated_conv(Tensor(emb), Tensor(kern), gap).data
        worst_conv = max(worst_conv,
                         float(np.abs(got - conv_oracle(emb, kern, gap)).max()))

    worst_feat = 0.0
    for _ in range(1000):
        item_count = int(rng.integers(4, 12))
        dim = int(rng.integers(2, 5))
        length = int(rng.integers(2, 7))
        channels = int(rng.integers(1, 4))
        items_arr, _ = init_embedding_arrays(item_count, 1, dim, rng)
        dilations = (0, 1, 2)
        kernels = {s: [] for s in dilations}
        raw = {s: [] for s in dilations}
        for s, h, shape in kernel_shapes(length, dim, channels, dilations):
            arr = rng.normal(size=shape)
            kernels[s].append(Tensor(arr))
            raw[s].append(arr)
        bank = KernelBank(length, channels, dilations, kernels)
        windows = rng.integers(0, item_count + 1, size=(2, length))
        got = multiscale_features_batch(windows, Tensor(items_arr), bank).data
        for row, win in zip(got, windows):
            want = features_oracle(win, items_arr, raw)
            worst_feat = max(worst_feat, float(np.abs(row - want).max()))

    mismatches = 0
    for _ in range(10000):
        item_count = int(rng.integers(3, 30))
        k = int(rng.integers(1, item_count + 1))
        ranked = list(rng.permutation(item_count) + 1)
        truth = set(int(i) + 1 for i in
                    rng.choice(item_count, size=int(rng.integers(1, 4)),
                               replace=False))
        got = (hit_at_k(ranked, truth, k), recall_at_k(ranked, truth, k),
               ndcg_at_k(ranked, truth, k))
        if got != rank_scan_metrics(ranked, truth, k):
            mismatches += 1

    ok = worst_conv <= 1e-12 and worst_feat <= 1e-12 and mismatches == 0
    detail = (f"conv max dev {worst_conv:.2e}, features max dev "
              f"{worst_feat:.2e} over 1000 instances each; "
              f"{mismatches}/10000 metric mismatches")
    assert record_gate(3, "convolution, features, and ranking metrics match "
                          "brute-force oracles", ok, detail), detail


def test_gate4_latent_structure():
    rng = np.random.default_rng(3)
    cfg = tiny_config()
    model = Model(cfg, 10, 3, rng)
    windows = rng.integers(1, 11, size=(10, cfg.window))

    # (a) permuting the conditioning set moves nothing downstream of it
    eps = rng.standard_normal(cfg.latent_dim)
    ctx = [0, 1, 2, 3]
    perm = [2, 0, 3, 1]
    base = model.episode_forward(windows[:6], ctx, [4, 5], None, eps)
    swapped = model.episode_forward(windows[:6], perm, [4, 5], None, eps)
    gap_mu = float(np.abs(base.state_c.mu.data - swapped.state_c.mu.data).max())
    gap_sg = float(np.abs(base.state_c.sigma.data
                          - swapped.state_c.sigma.data).max())
    gap_rd = float(np.abs(base.det.r_d.data - swapped.det.r_d.data).max())
    perm_gap = max(gap_mu, gap_sg, gap_rd)

    # (b) one trained architecture must accept any conditioning-set size
    sizes_ok = True
    e_u = np.zeros(cfg.embed_dim)
    for n_c in range(1, 11):
        score = model.score_query(windows[:n_c], windows[-1], e_u)
        sizes_ok &= bool(np.isfinite(score.y).all())
        mu, sg = model.context_latent(windows[:n_c])
        sizes_ok &= bool(np.isfinite(mu).all() and np.isfinite(sg).all())

    # (c) scale bounds must hold no matter how hard the inputs push
    lo, hi = np.inf, -np.inf
    for scale in (1.0, 10.0, 1000.0):
        wild = Model(cfg, 10, 3, np.random.default_rng(5))
        for name in wild.store.names():
            wild.store[name].data *= scale
        for ctx_windows in (windows[:4], np.zeros((3, cfg.window), np.int64),
                            np.full((5, cfg.window), 7, np.int64)):
            _, sg = wild.context_latent(ctx_windows)
            lo = min(lo, float(sg.min()))
            hi = max(hi, float(sg.max()))

    ok = perm_gap <= 1e-9 and sizes_ok and 0.1 < lo and hi < 1.0
    detail = (f"permutation gap {perm_gap:.2e}; sizes 1..10 "
              f"{'finite' if sizes_ok else 'BROKEN'}; scale stays "
              f"{lo - 0.1:.1e} above 0.1 and {1.0 - hi:.1e} below 1.0 "
              f"under x1000 weights")
    assert record_gate(4, "latent path is set-invariant, size-agnostic, and "
                          "scale-bounded", ok, detail), detail


def _entropic_cost(xs, ys):
    cost = ((xs[:, None, :] - ys[None, :, :]) ** 2).sum(axis=2)
    weights = np.full(xs.shape[0], 1.0 / xs.shape[0])
    return numerics.sinkhorn(weights, weights, cost, lam=0.05, iters=200).value


def test_gate5_transport_agreement():
    rng = np.random.default_rng(100)
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(1, 9))
        mu_a, mu_b = rng.normal(size=(2, d)) * 1.5
        sg_a, sg_b = rng.uniform(0.3, 1.2, size=(2, d))
        closed = gaussian_w2(Tensor(mu_a), Tensor(sg_a),
                             Tensor(mu_b), Tensor(sg_b)).item()
        xs = mu_a + sg_a * rng.standard_normal((2000, d))
        ys = mu_b + sg_b * rng.standard_normal((2000, d))
        # the self-transport terms cancel the entropic blur, which would
        # otherwise swamp the tolerance for close pairs at these dimensions
        val = _entropic_cost(xs, ys) - 0.5 * _entropic_cost(xs, xs) \
            - 0.5 * _entropic_cost(ys, ys)
        est = float(np.sqrt(max(val, 0.0)))
        worst = max(worst, abs(est - closed) / closed)

    mu = Tensor(rng.normal(size=6))
    sg = Tensor(rng.uniform(0.2, 1.0, size=6))
    self_dist = gaussian_w2(mu, sg, mu, sg).item()

    ok = worst <= 0.05 and self_dist == 0.0
    detail = (f"20 Gaussian pairs, worst relative gap {worst:.4f}; "
              f"self-distance {self_dist!r}")
    assert record_gate(5, "closed-form distance agrees with sampled "
                          "transport within 5%", ok, detail), detail


def test_gate6_synthetic_learning(workload):
    full = workload["full"]
    totals = [r.total for r in full["history"].rows]
    smooth1 = float(np.mean(totals[0:3]))
    smooth5 = float(np.mean(totals[4:7]))

    cfg = full["cfg"]
    counts = popularity_counts([full["by_user"][u] for u in full["trained"]],
                               workload["catalog"].item_count)
    pop = evaluate_sequences(PopularityRanker(counts), full["test_seqs"],
                             cfg.window, cfg.basket, (10,),
                             cfg.eval_context_mode, cfg.eval_context_size,
                             cfg.exclude_seen)
    hit = full["report"].metrics[10]["hit"]
    pop_hit = pop.metrics[10]["hit"]
    chance = 10.0 / workload["catalog"].item_count

    ok = smooth1 > smooth5 and hit > pop_hit > chance
    detail = (f"loss {smooth1:.5f} -> {smooth5:.5f} (3-epoch means); "
              f"hit@10 model {hit:.4f} > popularity {pop_hit:.4f} > "
              f"chance {chance:.4f}")
    assert record_gate(6, "synthetic workload: loss falls and the model "
                          "beats both baselines", ok, detail), detail


def test_gate7_uncertainty_shrinks_with_context(workload):
    full = workload["full"]
    model, cfg = full["model"], full["cfg"]
    held = full["test_seqs"][:100]
    sizes = [1, 2, 4, 8, 10]
    probe = np.random.default_rng(3)
    means = []
    for n_c in sizes:
        norms = []
        for seq in held:
            wins = prefix_windows(seq.items[:-1], cfg.window)
            take = min(n_c, wins.shape[0])
            for _ in range(100):
                idx = probe.choice(wins.shape[0], size=take, replace=False)
                _, sg = model.context_latent(wins[np.sort(idx)])
                norms.append(float(np.linalg.norm(sg)))
        means.append(float(np.mean(norms)))

    rho = spearman(sizes, means)
    ok = rho <= -0.5
    detail = (f"mean |sigma| {means[0]:.6f} -> {means[-1]:.6f} over "
              f"sizes {sizes}, spearman {rho:.2f}")
    assert record_gate(7, "latent scale is non-increasing in conditioning-set "
                          "size", ok, detail), detail


def test_gate8_ablation_ordering(workload):
    full = workload["full"]["report"].metrics[10]["ndcg"]
    kl = workload["kl"]["report"].metrics[10]["ndcg"]
    enc = workload["enc"]["report"].metrics[10]["ndcg"]

    first = full >= kl - 0.005
    second = kl >= enc
    ok = first and second
    detail = (f"ndcg@10 full {full:.6f} / no-transport {kl:.6f} / "
              f"encoder-only {enc:.6f}; full>=no-transport-0.005 "
              f"{'holds' if first else 'FAILS'}, no-transport>=encoder-only "
              f"{'holds' if second else 'FAILS'}")
    assert record_gate(8, "ablation ordering on held-out ndcg@10",
                       ok, detail), detail


def test_gate9_training_is_deterministic(tmp_path):
    data = tmp_path / "synth.tsv"
    base = [
        "window = 3", "cap = 10", "embed_dim = 4", "channels = 2",
        "attn_dim = 4", "latent_dim = 4", "batch_size = 4",
        "max_epochs = 4", f"seed = {SEED}", "train_ratio = 0.6",
        "val_ratio = 0.2", "test_ratio = 0.2", "synth_users = 30",
        "synth_items = 20", "synth_genres = 3", "synth_seq_len = 12",
        f"data = {data}",
    ]
    cfg_synth = tmp_path / "synth.cfg"
    cfg_synth.write_text("\n".join(base + [f"outdir = {tmp_path}"]) + "\n",
                         encoding="utf-8")
    assert cli.main(["synth", "--config", str(cfg_synth)]) == 0

    curves, blobs = [], []
    for run in ("a", "b"):
        outdir = tmp_path / run
        cfg = tmp_path / f"{run}.cfg"
        cfg.write_text("\n".join(base + [f"outdir = {outdir}"]) + "\n",
                       encoding="utf-8")
        assert cli.main(["train", "--config", str(cfg)]) == 0
        curves.append((outdir / "curve.csv").read_text(encoding="utf-8"))
        blobs.append((outdir / "model.ckpt").read_bytes())

    rows = [[[float(v) for v in line.split(",")[1:]]
             for line in text.splitlines()[1:]] for text in curves]
    trace_gap = float(np.nanmax(np.abs(np.asarray(rows[0])
                                       - np.asarray(rows[1]))))
    same_bytes = blobs[0] == blobs[1]
    epochs = load_checkpoint(tmp_path / "a" / "model.ckpt").epoch

    ok = trace_gap <= 1e-12 and same_bytes
    detail = (f"two seed-{SEED} runs, {epochs} epochs: max trace gap "
              f"{trace_gap:.1e}, checkpoints "
              f"{'byte-equal' if same_bytes else 'DIFFER'}")
    assert record_gate(9, "seeded reruns reproduce traces and checkpoints "
                          "exactly", ok, detail), detail
