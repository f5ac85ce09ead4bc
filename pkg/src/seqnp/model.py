"""Parameter construction and forward passes for the full predictor.

A Model owns a ParamStore laid out from the run configuration: embedding
tables (item row 0 frozen at zero for padding), the dilated-convolution
kernel bank, encoder self-attention projections, the dual-path inference
parameters, and the decoder. Architecture toggles prune whole blocks: no
dilation keeps only gap 0, no attention passes features through as set
representations, no latent/deterministic inference decodes from the query
features alone.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .engine import (
    ParamStore,
    Tensor,
    add,
    matmul,
    no_grad,
    relu,
    repeat_rows,
    reshape,
    take_rows,
)
from .encoder import (
    DEFAULT_DILATIONS,
    EmbeddingTables,
    KernelBank,
    init_embedding_arrays,
    kernel_shapes,
    multiscale_features_batch,
    self_attend,
)
from .dynamics import (
    DeterministicContext,
    LatentParams,
    LatentState,
    deterministic_path,
    latent_summary,
    parameterize,
    sample_z,
)
from .decoder import predict_preferences, reconstruct

__all__ = ["Model", "EpisodeForward", "QueryScore"]


@dataclasses.dataclass
class EpisodeForward:
    y: Tensor                      # [n_queries, item_count]
    state_t: LatentState | None
    state_c: LatentState | None
    det: DeterministicContext | None


@dataclasses.dataclass
class QueryScore:
    y: np.ndarray                  # [item_count]
    mu: np.ndarray | None
    sigma: np.ndarray | None


class Model:
    def __init__(self, cfg, item_count: int, user_count: int,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.item_count = int(item_count)
        self.user_count = int(user_count)
        self.uses_np = bool(cfg.use_np)
        self.store = ParamStore()
        d = cfg.embed_dim

        items, users = init_embedding_arrays(item_count, user_count, d, rng)
        self.tables = EmbeddingTables(
            item_table=self.store.add("embed.item", items),
            user_table=self.store.add("embed.user", users),
            dim=d,
        )

        dilations = DEFAULT_DILATIONS if cfg.use_dilation else (0,)
        kernels: dict[int, list[Tensor]] = {s: [] for s in dilations}
        for s, h, shape in kernel_shapes(cfg.window, d, cfg.channels, dilations):
            # 4/sqrt(fan_in) rather than the usual 1/sqrt(fan_in): the taps
            # contract over h*d products of two small uniforms, which leaves
            # channel activations an order of magnitude below the embeddings
            # they feed on and stalls feature learning on short windows.
            bound = 4.0 / np.sqrt(h * d)
            kernels[s].append(self.store.add(
                f"encoder.conv.g{s}.h{h}", rng.uniform(-bound, bound, size=shape)))
        self.bank = KernelBank(cfg.window, cfg.channels, dilations, kernels)
        f_dim = self.bank.feature_width

        if cfg.use_attention:
            self.rep_dim = cfg.attn_dim
            for name in ("encoder.attn.wq", "encoder.attn.wk", "encoder.attn.wv"):
                self.store.add(name, self._linear(rng, f_dim, cfg.attn_dim))
        else:
            self.rep_dim = f_dim

        if self.uses_np:
            self.store.add("dynamics.det.wq", self._linear(rng, f_dim, cfg.attn_dim))
            self.store.add("dynamics.det.wk", self._linear(rng, f_dim, cfg.attn_dim))
            hid = cfg.attn_dim
            self.store.add("dynamics.latent.wh", self._linear(rng, self.rep_dim, hid))
            self.store.add("dynamics.latent.bh", np.zeros(hid))
            self.store.add("dynamics.latent.wmu", self._linear(rng, hid, cfg.latent_dim))
            self.store.add("dynamics.latent.bmu", np.zeros(cfg.latent_dim))
            self.store.add("dynamics.latent.wsigma", self._linear(rng, hid, cfg.latent_dim))
            # Start the scale head below the squash midpoint: sampled-path
            # noise at sigma ~ 0.55 per coordinate swamps the decoder input
            # early in training; -1 puts it near 0.34 while keeping the
            # logistic far from saturation.
            self.store.add("dynamics.latent.bsigma",
                           np.full(cfg.latent_dim, -1.0))
            dec_in = self.rep_dim + cfg.latent_dim + f_dim
        else:
            dec_in = f_dim
        self.store.add("decoder.wd", self._linear(rng, dec_in, d))
        self.store.add("decoder.bd", np.zeros(d))
        self.store.add("decoder.wp", self._linear(rng, 2 * d, item_count))
        self.store.add("decoder.bp", np.zeros(item_count))

    @staticmethod
    def _linear(rng, fan_in: int, fan_out: int) -> np.ndarray:
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    # pieces ---------------------------------------------------------------

    def latent_params(self) -> LatentParams:
        s = self.store
        return LatentParams(s["dynamics.latent.wh"], s["dynamics.latent.bh"],
                            s["dynamics.latent.wmu"], s["dynamics.latent.bmu"],
                            s["dynamics.latent.wsigma"], s["dynamics.latent.bsigma"])

    def features(self, windows: np.ndarray) -> Tensor:
        return multiscale_features_batch(windows, self.tables.item_table, self.bank)

    def encode_set(self, f_set: Tensor) -> Tensor:
        if not self.cfg.use_attention:
            return f_set
        s = self.store
        return self_attend(f_set, s["encoder.attn.wq"], s["encoder.attn.wk"],
                           s["encoder.attn.wv"], heads=self.cfg.heads)

    def _user_rows(self, user_index: int | None, count: int) -> Tensor:
        if user_index is None:
            return Tensor(np.zeros((count, self.tables.dim)))
        idx = np.full(count, user_index, dtype=np.int64)
        return take_rows(self.tables.user_table, idx)

    def _decode(self, det_r, z_rows, f_q, e_u) -> Tensor:
        s = self.store
        if self.uses_np:
            d_q = reconstruct(det_r, z_rows, f_q, s["decoder.wd"], s["decoder.bd"])
        else:
            d_q = relu(add(matmul(f_q, s["decoder.wd"]), s["decoder.bd"]))
        return predict_preferences(d_q, e_u, s["decoder.wp"], s["decoder.bp"])

    # training forward -----------------------------------------------------

    def episode_forward(self, target_windows: np.ndarray, context_indices,
                        query_indices, user_index: int | None,
                        eps: np.ndarray | None) -> EpisodeForward:
        """Score ``query_indices`` rows of the target set against the whole
        catalog, conditioning on the ``context_indices`` rows.

        The latent draw uses the target-conditioned Gaussian (training
        semantics) via the provided noise.
        """
        query_indices = np.asarray(query_indices, dtype=np.int64)
        f_all = self.features(target_windows)
        f_q = take_rows(f_all, query_indices)
        state_t = state_c = det = None
        if self.uses_np:
            ctx = np.asarray(context_indices, dtype=np.int64)
            f_ctx = take_rows(f_all, ctx)
            r_ctx = self.encode_set(f_ctx)
            r_tgt = self.encode_set(f_all)
            mu_c, sg_c = parameterize(latent_summary(r_ctx), self.latent_params())
            mu_t, sg_t = parameterize(latent_summary(r_tgt), self.latent_params())
            z = sample_z(mu_t, sg_t, eps)
            state_c = LatentState(mu_c, sg_c, None, "context")
            state_t = LatentState(mu_t, sg_t, z, "target-sample")
            det = deterministic_path(f_ctx, r_ctx, f_q,
                                     self.store["dynamics.det.wq"],
                                     self.store["dynamics.det.wk"])
            z_rows = repeat_rows(z, len(query_indices))
            y = self._decode(det.r_d, z_rows, f_q,
                             self._user_rows(user_index, len(query_indices)))
        else:
            y = self._decode(None, None, f_q,
                             self._user_rows(user_index, len(query_indices)))
        return EpisodeForward(y=y, state_t=state_t, state_c=state_c, det=det)

    # evaluation forward ---------------------------------------------------

    def score_query(self, context_windows: np.ndarray, query_window: np.ndarray,
                    e_u: np.ndarray, eps: np.ndarray | None = None) -> QueryScore:
        """Catalog scores for one query window given observed context windows.

        The latent enters through the context-conditioned mean (or a
        reparameterized draw when noise is passed). Runs off the tape.
        """
        query_window = np.asarray(query_window, dtype=np.int64).reshape(1, -1)
        with no_grad():
            if self.uses_np:
                ctx = np.asarray(context_windows, dtype=np.int64)
                batch = np.concatenate([ctx, query_window], axis=0)
                f_all = self.features(batch)
                n_c = ctx.shape[0]
                f_ctx = take_rows(f_all, np.arange(n_c))
                f_q = take_rows(f_all, np.array([n_c]))
                r_ctx = self.encode_set(f_ctx)
                mu_c, sg_c = parameterize(latent_summary(r_ctx), self.latent_params())
                z = sample_z(mu_c, sg_c, eps) if eps is not None else mu_c
                det = deterministic_path(f_ctx, r_ctx, f_q,
                                         self.store["dynamics.det.wq"],
                                         self.store["dynamics.det.wk"])
                y = self._decode(det.r_d, reshape(z, (1, z.shape[0])), f_q,
                                 Tensor(np.asarray(e_u).reshape(1, -1)))
                return QueryScore(y=y.data.ravel().copy(), mu=mu_c.data.copy(),
                                  sigma=sg_c.data.copy())
            f_q = self.features(query_window)
            y = self._decode(None, None, f_q, Tensor(np.asarray(e_u).reshape(1, -1)))
            return QueryScore(y=y.data.ravel().copy(), mu=None, sigma=None)

    def context_latent(self, context_windows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Context-conditioned (mu, sigma) without decoding."""
        if not self.uses_np:
            raise ValueError("model built without latent inference")
        with no_grad():
            f_ctx = self.features(np.asarray(context_windows, dtype=np.int64))
            r_ctx = self.encode_set(f_ctx)
            mu, sigma = parameterize(latent_summary(r_ctx), self.latent_params())
        return mu.data.copy(), sigma.data.copy()

    # rebinding ------------------------------------------------------------

    def bind_parameters(self, tensors: dict[str, Tensor]):
        """Swap in replacement tensors by name and refresh every cached
        reference. Finite-difference checks drive the real forward pass
        through this hook."""
        for name, t in tensors.items():
            if name not in self.store:
                raise KeyError(f"unknown parameter {name!r}")
            if t.shape != self.store[name].shape:
                raise ValueError(f"parameter {name!r}: shape {t.shape} "
                                 f"does not match {self.store[name].shape}")
            self.store._params[name] = t
        self.tables = EmbeddingTables(self.store["embed.item"],
                                      self.store["embed.user"],
                                      self.tables.dim)
        kernels = {s: [] for s in self.bank.dilations}
        for s, h, _ in kernel_shapes(self.cfg.window, self.tables.dim,
                                     self.cfg.channels, self.bank.dilations):
            kernels[s].append(self.store[f"encoder.conv.g{s}.h{h}"])
        self.bank = KernelBank(self.cfg.window, self.cfg.channels,
                               self.bank.dilations, kernels)

    # constraints ----------------------------------------------------------

    def freeze_padding_row(self):
        """Clear any gradient that reached the padding embedding; with zero
        moments it then never moves."""
        grad = self.tables.item_table.grad
        if grad is not None:
            grad[0, :] = 0.0
