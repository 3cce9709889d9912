"""Shared test world construction."""

from types import SimpleNamespace

import numpy as np

from cascaderec import data, tokenizer, training
from cascaderec.model import ItemFeatureBank, ModelConfig, SequenceModel, init_parameters


def make_world(
    n_items=60,
    n_users=30,
    k=8,
    hidden=8,
    heads=2,
    layers=2,
    l_max=6,
    use_moe=True,
    seed=0,
    dtype=np.float32,
    balance_weight=0.0,
    n_clusters=6,
    seq_len_range=(3, 8),
    sequences_per_user=1,
    **cfg_kw,
):
    """Small but complete pipeline state: catalog, tokenizer artifacts, model."""
    catalog, seqs = data.generate_synthetic(
        n_items=n_items,
        n_users=n_users,
        n_modalities=2,
        dim=8,
        n_latent_clusters=n_clusters,
        seq_len_range=seq_len_range,
        missing_rate_per_modality=[0.1, 0.3],
        seed=seed,
        sequences_per_user=sequences_per_user,
    )
    counts = data.interaction_counts(seqs)
    data.attach_popularity(catalog, counts)
    emb = tokenizer.fuse_embeddings(catalog)
    cb, fit = tokenizer.residual_kmeans_fit(emb, k, 5, seed=seed)
    table = tokenizer.greedy_reassign(tokenizer.assign(emb, cb), emb, cb, top_n=min(8, k))
    cfg = ModelConfig(
        hidden_dim=hidden,
        n_heads=heads,
        n_layers=layers,
        codebook_size=k,
        l_max=l_max,
        vocab_size=catalog.total_items + 1,
        static_dim=4,
        use_moe=use_moe,
        n_experts=4,
        moe_top_k=2,
        expert_hidden=2 * hidden,
        balance_weight=balance_weight,
        **cfg_kw,
    )
    pad_id = max(it.item_id for it in catalog.items) + 1
    bank = ItemFeatureBank(catalog, cfg, pad_id)
    model = SequenceModel(cfg, init_parameters(cfg, seed, dtype), bank, dtype)
    pop = training.estimate_popularity(seqs, item_ids=[it.item_id for it in catalog.items])
    return SimpleNamespace(
        catalog=catalog,
        seqs=seqs,
        counts=counts,
        emb=emb,
        codebook=cb,
        fit=fit,
        table=table,
        cfg=cfg,
        bank=bank,
        model=model,
        pop=pop,
        log_q=pop.log_q_array(bank),
        sid_targets=training.sid_target_arrays(table, bank),
    )


def batch_from(world, seqs):
    return training.prepare_examples(seqs, world.bank, world.cfg.l_max)
