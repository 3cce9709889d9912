#!/usr/bin/env python3
"""Calibration for the MoE-balance and depth-sweep acceptance runs."""

import time

import numpy as np

from cascaderec import data, evaluation, tokenizer, training
from cascaderec.model import ItemFeatureBank, ModelConfig, SequenceModel, init_parameters


def world(n_items=2000, n_users=1500, windows=4, k=64, seed=77, noise=0.15, clusters=30):
    cat, seqs = data.generate_synthetic(
        n_items=n_items, n_users=n_users, n_modalities=2, dim=16,
        n_latent_clusters=clusters, seq_len_range=(6, 24),
        missing_rate_per_modality=[0.1, 0.2], seed=seed,
        sequences_per_user=windows, cluster_noise=noise,
    )
    counts = data.interaction_counts(seqs)
    data.attach_popularity(cat, counts)
    emb = tokenizer.fuse_embeddings(cat)
    cb, _ = tokenizer.residual_kmeans_fit(emb, k, 8, seed=seed)
    table = tokenizer.greedy_reassign(tokenizer.assign(emb, cb), emb, cb, 50)
    pop = training.estimate_popularity(seqs, item_ids=[it.item_id for it in cat.items])
    return cat, seqs, table, pop, k


def moe_balance():
    t0 = time.time()
    cat, seqs, table, pop, k = world()
    cfg = ModelConfig(hidden_dim=32, n_heads=4, n_layers=2, codebook_size=k, l_max=24,
                      vocab_size=cat.total_items + 1, static_dim=4, use_moe=True,
                      n_experts=8, moe_top_k=2, expert_hidden=64,
                      balance_weight=0.01, temperature=0.05)
    bank = ItemFeatureBank(cat, cfg, pad_id=cat.total_items)
    model = SequenceModel(cfg, init_parameters(cfg, 77), bank)
    tcfg = training.TrainConfig(lr=5e-3, warmup_steps=20, batch_size=32, epochs=5, seed=77)
    res = training.train_model(model, seqs, table, pop, tcfg, max_steps=500)
    for layer in range(cfg.n_layers):
        tail = np.mean([r[f"gini_layer_{layer}"] for r in res.metric_rows[-10:]])
        print(f"moe layer {layer}: tail-10 gini={tail:.3f}")
    print(f"moe_balance {res.steps} steps in {time.time()-t0:.1f}s")


def depth_sweep():
    t0 = time.time()
    cat, seqs, table, pop, k = world(n_items=1500, n_users=1000, windows=3, seed=55)
    cfg = ModelConfig(hidden_dim=32, n_heads=4, n_layers=1, codebook_size=k, l_max=24,
                      vocab_size=cat.total_items + 1, static_dim=4, use_moe=False,
                      temperature=0.05)
    bank = ItemFeatureBank(cat, cfg, pad_id=cat.total_items)
    tcfg = training.TrainConfig(lr=5e-3, warmup_steps=10, batch_size=32, epochs=1, seed=0)
    rows = evaluation.layer_sweep(bank, seqs, table, pop, cfg, tcfg, [1, 2, 4], seeds=(0, 1, 2))
    for r in rows:
        print(f"layers={r.layers} params={r.params} hit={r.hitrate:.4f} loss={r.loss:.4f}")
    inv = sum(1 for a, b in zip(rows, rows[1:]) if b.loss > a.loss)
    print(f"depth_sweep inversions={inv} in {time.time()-t0:.1f}s")


if __name__ == "__main__":
    moe_balance()
    depth_sweep()
