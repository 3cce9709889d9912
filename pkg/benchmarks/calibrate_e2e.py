#!/usr/bin/env python3
"""Calibration driver for the end-to-end acceptance run (not part of the suite)."""

import sys
import time

import numpy as np

from cascaderec import data, evaluation, tokenizer, training
from cascaderec.inference import EmbeddingIndex, Recommender
from cascaderec.model import ItemFeatureBank, ModelConfig, SequenceModel, init_parameters


def main(tau=0.05, lr=5e-3, lmax=32, batch=48, windows=5, clusters=50, skew=0.3,
         noise=0.15, warmup=15):
    t_all = time.time()
    t0 = time.time()
    cat, seqs = data.generate_synthetic(
        n_items=10_000, n_users=5_000, n_modalities=3, dim=24, n_latent_clusters=clusters,
        seq_len_range=(8, 32), missing_rate_per_modality=[0.1, 0.1, 0.3], seed=1234,
        sequences_per_user=windows, popularity_skew=skew, cluster_noise=noise,
    )
    splits = data.split_users(seqs, seed=1234)
    counts = data.interaction_counts(splits["train"])
    data.attach_popularity(cat, counts)
    print(f"gen+split {time.time()-t0:.1f}s train={len(splits['train'])} test={len(splits['test'])}")

    t0 = time.time()
    emb = tokenizer.fuse_embeddings(cat)
    cb, fit = tokenizer.residual_kmeans_fit(emb, 256, 8, seed=1234)
    table = tokenizer.greedy_reassign(tokenizer.assign(emb, cb), emb, cb, 50)
    rep = tokenizer.collision_report(table, cat.total_items)
    print(f"tokenize {time.time()-t0:.1f}s conflict_rate={rep.conflict_rate:.3f}")

    cfg = ModelConfig(hidden_dim=64, n_heads=4, n_layers=2, codebook_size=256, l_max=lmax,
                      vocab_size=cat.total_items + 1, static_dim=4, use_moe=False,
                      temperature=tau)
    bank = ItemFeatureBank(cat, cfg, pad_id=10_000)
    model = SequenceModel(cfg, init_parameters(cfg, 1234), bank)
    pop = training.estimate_popularity(splits["train"], item_ids=[it.item_id for it in cat.items])
    tcfg = training.TrainConfig(lr=lr, warmup_steps=warmup, batch_size=batch, epochs=1, seed=1234)
    t0 = time.time()
    res = training.train_model(model, splits["train"], table, pop, tcfg)
    rows = res.metric_rows
    l10, lend = rows[10]["L_total"], rows[-1]["L_total"]
    tail = float(np.mean([r["L_total"] for r in rows[-10:]]))
    print(f"train {res.steps} steps {time.time()-t0:.1f}s  L@10={l10:.3f} L@end={lend:.3f} "
          f"tail10={tail:.3f} ratio={lend/l10:.3f} hit_end={rows[-1]['hitrate']:.3f}")
    print(f"  comps@10  con={rows[10]['L_con']:.2f} c1={rows[10]['L_c1']:.2f} c2={rows[10]['L_c2']:.2f}")
    print(f"  comps@end con={rows[-1]['L_con']:.2f} c1={rows[-1]['L_c1']:.2f} c2={rows[-1]['L_c2']:.2f}")

    t0 = time.time()
    seen = sorted(i for i, c in counts.items() if c > 0)
    embx = EmbeddingIndex(np.asarray(seen), model.export_index_embeddings(bank.map_tokens(np.asarray(seen))))
    cold = {it.item_id for it in cat.items if counts.get(it.item_id, 0) == 0}
    rec = Recommender(model, table, embx, cold, beam_width=20, k_prime=384, topn=10)
    row = evaluation.evaluate_split(rec, splits["test"], mode="cascade")
    row_d = evaluation.evaluate_split(rec, splits["test"], mode="dual")
    hr_base, _ = evaluation.popularity_baseline(counts, splits["test"])
    print(f"eval {time.time()-t0:.1f}s  HR={row.hr_at_10:.4f} dualHR={row_d.hr_at_10:.4f} "
          f"NDCG={row.ndcg_at_10:.4f} baseline={hr_base:.4f} "
          f"ratio={row.hr_at_10/max(hr_base,1e-9):.1f}x")
    print(f"TOTAL {time.time()-t_all:.1f}s")


if __name__ == "__main__":
    kwargs = {}
    for arg in sys.argv[1:]:
        k, v = arg.split("=")
        kwargs[k] = float(v) if "." in v else int(v)
    main(**kwargs)
