"""Sequence model: ItemDNN features -> HSTU(+MoE) stack -> H, h_T -> heads.

The model owns its parameters and a gradient dict; backward methods are exact
adjoints of the forwards and accumulate into ``model.grads``.
"""

from dataclasses import dataclass, field

import numpy as np

from ..data import ItemCatalog, PaddedRow
from . import layers
from .config import ModelConfig
from .params import Parameters


class ItemFeatureBank:
    """Per-item model inputs aligned to dense row indices; the last row is PAD.

    hot features are log1p(popularity_count) and must come from the training
    split only.
    """

    def __init__(self, catalog: ItemCatalog, cfg: ModelConfig, pad_id: int):
        items = sorted(catalog.items, key=lambda it: it.item_id)
        n = len(items)
        self.item_ids = np.asarray([it.item_id for it in items], dtype=np.int64)
        self.pad_id = pad_id
        self.pad_index = n
        self.n_items = n
        static = np.zeros((n + 1, cfg.static_dim), dtype=np.float32)
        hot = np.zeros((n + 1, cfg.hot_dim), dtype=np.float32)
        for row, it in enumerate(items):
            s = np.asarray(it.static_features, dtype=np.float32)
            if s.shape[0] != cfg.static_dim:
                raise ValueError(
                    f"item {it.item_id}: static dim {s.shape[0]} != config static_dim {cfg.static_dim}"
                )
            static[row] = s
            if cfg.hot_dim:
                hot[row, 0] = np.log1p(it.popularity_count)
        self.static = static
        self.time = np.zeros((n + 1, cfg.time_dim), dtype=np.float32)
        self.hot = hot
        max_id = int(self.item_ids.max()) if n else 0
        if max_id <= 10 * max(n, 1):
            lut = np.full(max(max_id, pad_id) + 2, -1, dtype=np.int64)
            lut[self.item_ids] = np.arange(n)
            if pad_id < lut.shape[0]:
                lut[pad_id] = self.pad_index
            self._lut = lut
            self._map = None
        else:
            self._lut = None
            self._map = {int(i): r for r, i in enumerate(self.item_ids)}
            self._map[pad_id] = self.pad_index

    @property
    def vocab_size(self) -> int:
        return self.n_items + 1

    def map_tokens(self, token_ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(token_ids, dtype=np.int64)
        if self._lut is not None:
            if ids.size and (ids.max() >= self._lut.shape[0] or ids.min() < 0):
                raise KeyError("token id outside catalog")
            out = self._lut[ids]
            if (out < 0).any():
                raise KeyError("token id not present in catalog")
            return out
        flat = [self._map[int(i)] for i in ids.ravel()]
        return np.asarray(flat, dtype=np.int64).reshape(ids.shape)

    def features(self, idx: np.ndarray, id_emb: np.ndarray, dtype) -> np.ndarray:
        """Concat(static, time, hot, id embedding) rows for bank indices."""
        parts = [self.static[idx], self.time[idx], self.hot[idx], id_emb[idx]]
        return np.concatenate([p.astype(dtype, copy=False) for p in parts], axis=-1)


@dataclass
class EncodeCache:
    """Activations needed for the backward pass plus the encoder outputs."""

    token_idx: np.ndarray
    valid: np.ndarray
    first_valid: np.ndarray
    last_pos: np.ndarray
    mask_f: np.ndarray
    dnn_cache: tuple
    layer_caches: list
    lnf_cache: tuple
    H: np.ndarray
    h_T: np.ndarray
    moe_usage: list[np.ndarray] = field(default_factory=list)
    moe_balance: list[float] = field(default_factory=list)
    routing: list[np.ndarray] = field(default_factory=list)


@dataclass
class MoEStats:
    usage_counts: np.ndarray  # [n_layers, n_experts]

    def gini_per_layer(self) -> list[float]:
        return [layers.gini(row) for row in self.usage_counts]


class SequenceModel:
    def __init__(self, cfg: ModelConfig, params: Parameters, bank: ItemFeatureBank, dtype=np.float32):
        if cfg.vocab_size != bank.vocab_size:
            raise ValueError("config vocab_size must equal bank vocab_size")
        self.cfg = cfg
        self.params = params
        self.bank = bank
        self.dtype = dtype
        self.grads: dict[str, np.ndarray] = {}

    def zero_grads(self) -> None:
        self.grads = self.params.zeros_like()

    # ---------------- encoder ----------------

    def encode(self, token_idx: np.ndarray, valid: np.ndarray, routing=None) -> EncodeCache:
        cfg, p = self.cfg, self.params
        if not valid.any(axis=1).all():
            raise ValueError("encode: a sequence has zero valid tokens")
        first_valid = valid.argmax(axis=1).astype(np.int64)
        lrange = np.arange(valid.shape[1])
        last_pos = (valid * lrange[None, :]).max(axis=1).astype(np.int64)
        mask_f = valid[..., None].astype(self.dtype)

        feats = self.bank.features(token_idx, p["id_emb"], self.dtype)
        x0, dnn_cache = layers.item_dnn_forward(feats, p)
        x = x0 * mask_f

        layer_caches = []
        moe_usage, moe_balance, kept_routes = [], [], []
        for i in range(cfg.n_layers):
            prefix = f"layers.{i}"
            x, hc = layers.hstu_block_forward(x, first_valid, p, prefix, cfg.n_heads, cfg.l_max)
            x = x * mask_f
            moe_cache = None
            tok_pos = None
            if cfg.use_moe:
                bi, ti = np.nonzero(valid)
                tok_pos = (bi, ti)
                mn, ln3_cache = layers.layernorm_forward(
                    x[bi, ti], p[f"{prefix}.ln3.g"], p[f"{prefix}.ln3.b"]
                )
                route = None if routing is None else routing[i]
                y_tok, mcache, usage, balance = layers.moe_forward(
                    mn, p, prefix, cfg.n_experts, cfg.moe_top_k,
                    routing=route, balance_weight=cfg.balance_weight,
                )
                x = x.copy()
                x[bi, ti] += y_tok
                moe_cache = (ln3_cache, mcache)
                moe_usage.append(usage)
                moe_balance.append(balance)
                kept_routes.append(mcache[2])
            layer_caches.append((hc, moe_cache, tok_pos))

        H, lnf_cache = layers.layernorm_forward(x, p["ln_f.g"], p["ln_f.b"])
        h_T = H[np.arange(H.shape[0]), last_pos]
        return EncodeCache(
            token_idx, valid, first_valid, last_pos, mask_f,
            dnn_cache, layer_caches, lnf_cache, H, h_T,
            moe_usage, moe_balance, kept_routes,
        )

    def backward_encode(self, cache: EncodeCache, dH: np.ndarray | None, dh_T: np.ndarray | None) -> None:
        cfg, p, g = self.cfg, self.params, self.grads
        b, l, d = cache.H.shape
        dH_full = np.zeros_like(cache.H) if dH is None else dH.copy()
        if dh_T is not None:
            dH_full[np.arange(b), cache.last_pos] += dh_T

        dx, dgf, dbf = layers.layernorm_backward(dH_full, cache.lnf_cache)
        g["ln_f.g"] += dgf
        g["ln_f.b"] += dbf

        for i in reversed(range(cfg.n_layers)):
            prefix = f"layers.{i}"
            hc, moe_cache, tok_pos = cache.layer_caches[i]
            if moe_cache is not None:
                bi, ti = tok_pos
                ln3_cache, mcache = moe_cache
                dmn = layers.moe_backward(
                    dx[bi, ti], mcache, p, g, prefix, cfg.n_experts, cfg.moe_top_k,
                    balance_weight=cfg.balance_weight,
                )
                dm_in, dg3, db3 = layers.layernorm_backward(dmn, ln3_cache)
                g[f"{prefix}.ln3.g"] += dg3
                g[f"{prefix}.ln3.b"] += db3
                dx = dx.copy()
                dx[bi, ti] += dm_in
            dx = dx * cache.mask_f
            dx = layers.hstu_block_backward(dx, hc, p, g, prefix, cfg.n_heads, cfg.l_max)

        dx = dx * cache.mask_f
        dfeats = layers.item_dnn_backward(dx, cache.dnn_cache, p, g)
        d_id = dfeats[..., -d:]
        np.add.at(g["id_emb"], cache.token_idx.ravel(), d_id.reshape(-1, d))

    # ---------------- item tower ----------------

    def item_embeddings(self, item_idx: np.ndarray):
        """Unnormalized ItemDNN outputs for bank indices [N] -> ([N, D], cache)."""
        feats = self.bank.features(item_idx, self.params["id_emb"], self.dtype)
        emb, dnn_cache = layers.item_dnn_forward(feats, self.params)
        return emb, (item_idx, dnn_cache)

    def backward_item_embeddings(self, cache, demb: np.ndarray) -> None:
        item_idx, dnn_cache = cache
        dfeats = layers.item_dnn_backward(demb, dnn_cache, self.params, self.grads)
        d = self.cfg.hidden_dim
        np.add.at(self.grads["id_emb"], item_idx.ravel(), dfeats[..., -d:].reshape(-1, d))

    def export_index_embeddings(self, item_idx: np.ndarray) -> np.ndarray:
        """L2-normalized item-tower matrix for index building / cosine scoring."""
        emb, _ = self.item_embeddings(item_idx)
        norms = np.maximum(np.linalg.norm(emb, axis=-1, keepdims=True), 1e-12)
        return (emb / norms).astype(np.float32)

    # ---------------- decoder heads ----------------

    def sid1_logits(self, cache: EncodeCache):
        """Cross-attention head: query W_q h_T over the valid positions of H."""
        p, d = self.params, self.cfg.hidden_dim
        q = cache.h_T @ p["sid1.W_q"]
        keys = layers._mm(cache.H, p["sid1.W_k"])
        vals = layers._mm(cache.H, p["sid1.W_v"])
        scores = np.einsum("bld,bd->bl", keys, q) / np.sqrt(d)
        scores = np.where(cache.valid, scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=-1, keepdims=True)
        ctx = np.einsum("bl,bld->bd", att, vals)
        logits = ctx @ p["sid1.W_p"] + p["sid1.b_p"]
        return logits, (cache, q, keys, vals, att, ctx)

    def backward_sid1(self, head_cache, dlogits: np.ndarray):
        """Returns (dH, dh_T) and accumulates head parameter grads."""
        p, g = self.params, self.grads
        cache, q, keys, vals, att, ctx = head_cache
        d = self.cfg.hidden_dim
        g["sid1.W_p"] += ctx.T @ dlogits
        g["sid1.b_p"] += dlogits.sum(axis=0)
        dctx = dlogits @ p["sid1.W_p"].T
        datt = np.einsum("bld,bd->bl", vals, dctx)
        dvals = att[..., None] * dctx[:, None, :]
        dscores = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) / np.sqrt(d)
        dkeys = dscores[..., None] * q[:, None, :]
        dq = np.einsum("bl,bld->bd", dscores, keys)
        g["sid1.W_k"] += layers._mm_t(cache.H, dkeys)
        g["sid1.W_v"] += layers._mm_t(cache.H, dvals)
        g["sid1.W_q"] += cache.h_T.T @ dq
        dH = layers._mm(dkeys, p["sid1.W_k"].T) + layers._mm(dvals, p["sid1.W_v"].T)
        dh_T = dq @ p["sid1.W_q"].T
        return dH, dh_T

    def sid2_logits(self, h_T: np.ndarray, c1: np.ndarray):
        """Teacher-forcing head: fuse h_T with the level-1 code embedding."""
        p = self.params
        c1 = np.asarray(c1, dtype=np.int64)
        if (c1 < 0).any() or (c1 >= self.cfg.codebook_size).any():
            raise ValueError("c1 code out of range")
        e1 = p["sid2.code_emb"][c1]
        f_in = np.concatenate([h_T, e1], axis=-1)
        pre = f_in @ p["sid2.W_f"] + p["sid2.b_f"]
        fh = layers.silu(pre)
        logits = fh @ p["sid2.W_p"] + p["sid2.b_p"]
        return logits, (c1, f_in, pre, fh)

    def backward_sid2(self, head_cache, dlogits: np.ndarray) -> np.ndarray:
        p, g = self.params, self.grads
        c1, f_in, pre, fh = head_cache
        d = self.cfg.hidden_dim
        g["sid2.W_p"] += fh.T @ dlogits
        g["sid2.b_p"] += dlogits.sum(axis=0)
        dfh = dlogits @ p["sid2.W_p"].T
        dpre = dfh * layers.silu_grad(pre)
        g["sid2.W_f"] += f_in.T @ dpre
        g["sid2.b_f"] += dpre.sum(axis=0)
        df_in = dpre @ p["sid2.W_f"].T
        dh_T, de1 = df_in[:, :d], df_in[:, d:]
        np.add.at(g["sid2.code_emb"], c1, de1)
        return dh_T

    def moe_stats(self, cache: EncodeCache) -> MoEStats | None:
        if not cache.moe_usage:
            return None
        return MoEStats(np.stack(cache.moe_usage))


def encode_sequence(model: SequenceModel, row: PaddedRow, routing=None) -> EncodeCache:
    """Single-sequence wrapper: raw item ids in, EncodeCache (batch of 1) out."""
    idx = model.bank.map_tokens(row.token_ids)[None, :]
    return model.encode(idx, row.valid_mask[None, :], routing=routing)


def decode_sid1_logits(model: SequenceModel, cache: EncodeCache) -> np.ndarray:
    logits, _ = model.sid1_logits(cache)
    return logits[0] if logits.shape[0] == 1 else logits


def decode_sid2_logits(model: SequenceModel, h_T: np.ndarray, c1) -> np.ndarray:
    squeeze = h_T.ndim == 1
    h = h_T[None, :] if squeeze else h_T
    c = np.atleast_1d(np.asarray(c1, dtype=np.int64))
    logits, _ = model.sid2_logits(h, c)
    return logits[0] if squeeze else logits
