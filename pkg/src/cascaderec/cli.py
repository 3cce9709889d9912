"""Pipeline entry point: gen-data, tokenize, train, infer, eval, sweep.

One JSON config file carries every tunable; any field can be overridden by
the matching CLI flag (flags win). All randomness funnels through the
portable RNG seeded from --seed, so every subcommand is deterministic under
a fixed seed (byte-identical artifacts in single-thread mode).
"""

import argparse
import json
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from . import data as data_mod
from . import evaluation, io, tokenizer, training
from .inference import EmbeddingIndex, Recommender
from .model import (
    ItemFeatureBank,
    ModelConfig,
    SequenceModel,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
)

_THREAD_LIMITER = None


def set_threads(n: int | None) -> None:
    global _THREAD_LIMITER
    if n is None or n <= 0:
        return
    try:
        from threadpoolctl import threadpool_limits

        _THREAD_LIMITER = threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


@dataclass
class RunConfig:
    # synthetic data
    n_items: int = 2000
    n_users: int = 1000
    n_modalities: int = 3
    dim: int = 16
    n_latent_clusters: int = 40
    seq_len_min: int = 4
    seq_len_max: int = 20
    missing_rates: str = "0.1,0.1,0.3"
    static_dim: int = 4
    sequences_per_user: int = 1
    cluster_noise: float = 0.25
    popularity_skew: float = 0.4
    # model
    hidden_dim: int = 64
    n_heads: int = 4
    n_layers: int = 2
    codebook_size: int = 256
    l_max: int = 48
    time_dim: int = 0
    hot_dim: int = 1
    use_moe: bool = False
    n_experts: int = 8
    moe_top_k: int = 2
    expert_hidden: int = 0
    temperature: float = 0.02
    lambda1: float = 1.0
    lambda2: float = 1.0
    balance_weight: float = 0.0
    # tokenizer
    kmeans_iters: int = 12
    top_n: int = 50
    # training
    lr: float = 1e-3
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 100
    batch_size: int = 64
    epochs: int = 1
    eps_smoothing: float = 1.0
    popularity_source: str = "all"  # all | targets
    # inference
    beam_width: int = 20
    k_prime: int = 384
    topn: int = 10
    constrain_to_index: bool = False
    # shared
    seed: int = 0

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)

    def missing_rate_list(self) -> list[float]:
        return [float(x) for x in self.missing_rates.split(",") if x != ""]

    def model_config(self, vocab_size: int, static_dim: int) -> ModelConfig:
        return ModelConfig(
            hidden_dim=self.hidden_dim,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            codebook_size=self.codebook_size,
            l_max=self.l_max,
            vocab_size=vocab_size,
            static_dim=static_dim,
            time_dim=self.time_dim,
            hot_dim=self.hot_dim,
            use_moe=self.use_moe,
            n_experts=self.n_experts,
            moe_top_k=self.moe_top_k,
            expert_hidden=self.expert_hidden,
            temperature=self.temperature,
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            balance_weight=self.balance_weight,
        )

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(
            lr=self.lr,
            lr_min=self.lr_min,
            beta1=self.beta1,
            beta2=self.beta2,
            adam_eps=self.adam_eps,
            weight_decay=self.weight_decay,
            warmup_steps=self.warmup_steps,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
        )


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    updates = {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            updates[f.name] = v
    return replace(cfg, **updates)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its fields")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="BLAS thread cap (1 = deterministic golden mode)")
    p.add_argument("--out-dir", required=True)
    for f in fields(RunConfig):
        if f.name == "seed":
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            p.add_argument(flag, dest=f.name, action="store_true", default=None)
        else:
            p.add_argument(flag, dest=f.name, type=type(f.default), default=None)


def _require(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# ---------------- subcommands ----------------


def cmd_gen_data(cfg: RunConfig, args) -> list[str]:
    if cfg.n_items <= 0 or cfg.n_users <= 0:
        raise ValueError("n_items and n_users must be positive")
    catalog, seqs = data_mod.generate_synthetic(
        n_items=cfg.n_items,
        n_users=cfg.n_users,
        n_modalities=cfg.n_modalities,
        dim=cfg.dim,
        n_latent_clusters=cfg.n_latent_clusters,
        seq_len_range=(cfg.seq_len_min, cfg.seq_len_max),
        missing_rate_per_modality=cfg.missing_rate_list(),
        seed=cfg.seed,
        static_dim=cfg.static_dim,
        cluster_noise=cfg.cluster_noise,
        popularity_skew=cfg.popularity_skew,
        sequences_per_user=cfg.sequences_per_user,
    )
    out = io.ensure_dir(args.out_dir)
    items_path = os.path.join(out, "items.jsonl")
    seqs_path = os.path.join(out, "sequences.jsonl")
    data_mod.write_catalog(items_path, catalog)
    data_mod.write_sequences(seqs_path, seqs)
    cov = data_mod.coverage_report(catalog)
    io.write_csv(
        os.path.join(out, "coverage.csv"),
        ["modality", "covered_items", "total_items", "coverage_rate"],
        ([m, c, t, f"{r:.3f}"] for m, c, t, r in cov),
    )
    return [items_path, seqs_path, os.path.join(out, "coverage.csv")]


def cmd_tokenize(cfg: RunConfig, args) -> list[str]:
    catalog = data_mod.load_catalog(_require(args.catalog, "catalog"))
    if args.embeddings:
        mat = io.load_matrix(args.embeddings).astype(np.float64)
        norms = np.maximum(np.linalg.norm(mat, axis=1, keepdims=True), 1e-12)
        ids = sorted(it.item_id for it in catalog.items)
        if mat.shape[0] != len(ids):
            raise ValueError("external embedding row count != catalog size")
        emb = tokenizer.FusedEmbeddingMatrix(mat / norms, ids)
        source = "external"
    else:
        emb = tokenizer.fuse_embeddings(catalog)
        source = "collaborative"
    cb, fit = tokenizer.residual_kmeans_fit(emb, cfg.codebook_size, cfg.kmeans_iters, cfg.seed)
    table = tokenizer.assign(emb, cb)
    report_std = tokenizer.collision_report(table, catalog.total_items)
    table2 = tokenizer.greedy_reassign(table, emb, cb, cfg.top_n)
    report_re = tokenizer.collision_report(table2, catalog.total_items)

    out = io.ensure_dir(args.out_dir)
    cb_path = os.path.join(out, "codebook.bin")
    asg_path = os.path.join(out, "assignments.csv")
    col_path = os.path.join(out, "collisions.csv")
    cb.save(cb_path)
    table2.save_csv(asg_path)
    tokenizer.write_collision_csv(
        col_path,
        [
            {
                "modality": source, "variant": "standard",
                "loss1": fit.loss1, "loss2": fit.loss2,
                "conflicts": report_std.conflicts,
                "conflict_rate": report_std.conflict_rate,
                "unique_pairs": report_std.unique_pairs,
            },
            {
                "modality": source, "variant": "reassigned",
                "loss1": fit.loss1, "loss2": fit.loss2,
                "conflicts": report_re.conflicts,
                "conflict_rate": report_re.conflict_rate,
                "unique_pairs": report_re.unique_pairs,
            },
        ],
    )
    if report_re.conflict_rate > report_std.conflict_rate:
        raise AssertionError("invariant violated: re-assignment increased the conflict rate")
    return [cb_path, asg_path, col_path]


def _load_training_world(cfg: RunConfig, args):
    catalog = data_mod.load_catalog(_require(args.catalog, "catalog"))
    sequences = data_mod.load_sequences(_require(args.sequences, "sequences"))
    table = tokenizer.AssignmentTable.load_csv(_require(args.assignments, "assignments"))
    splits = data_mod.split_users(sequences, cfg.seed)
    counts = data_mod.interaction_counts(splits["train"])
    data_mod.attach_popularity(catalog, counts)
    return catalog, sequences, table, splits, counts


def _build_bank(catalog, cfg: RunConfig):
    static_dim = len(catalog.items[0].static_features)
    pad_id = max(it.item_id for it in catalog.items) + 1
    mcfg = cfg.model_config(catalog.total_items + 1, static_dim)
    bank = ItemFeatureBank(catalog, mcfg, pad_id)
    return mcfg, bank


def cmd_train(cfg: RunConfig, args) -> list[str]:
    catalog, _, table, splits, counts = _load_training_world(cfg, args)
    mcfg, bank = _build_bank(catalog, cfg)
    popularity = training.estimate_popularity(
        splits["train"],
        item_ids=[it.item_id for it in catalog.items],
        eps=cfg.eps_smoothing,
        targets_only=cfg.popularity_source == "targets",
    )
    if args.init_from:
        ck_cfg, params = load_checkpoint(_require(args.init_from, "init checkpoint"))
        if ck_cfg != mcfg:
            raise ValueError("--init-from checkpoint config does not match the run config")
    else:
        params = init_parameters(mcfg, cfg.seed)
    model = SequenceModel(mcfg, params, bank)
    out = io.ensure_dir(args.out_dir)
    metrics_path = os.path.join(out, "metrics.csv")
    result = training.train_model(
        model, splits["train"], table, popularity, cfg.train_config(),
        metrics_path=metrics_path, max_steps=args.max_steps,
    )
    ckpt = os.path.join(out, "checkpoint")
    save_checkpoint(ckpt, mcfg, model.params)
    pop_path = os.path.join(out, "popularity.json")
    with open(pop_path, "w", encoding="utf-8") as f:
        json.dump(
            {"eps": cfg.eps_smoothing, "counts": {str(k): v for k, v in sorted(counts.items())}},
            f, sort_keys=True,
        )
        f.write("\n")
    seen = sorted(i for i, c in counts.items() if c > 0)
    idx = bank.map_tokens(np.asarray(seen, dtype=np.int64))
    emb_path = os.path.join(out, "item_embeddings.bin")
    io.save_matrix(emb_path, model.export_index_embeddings(idx))
    ids_path = os.path.join(out, "item_embedding_ids.json")
    with open(ids_path, "w", encoding="utf-8") as f:
        json.dump(seen, f)
        f.write("\n")
    print(
        f"trained {result.steps} steps; last-100 L_total="
        f"{result.last100.get('L_total', float('nan')):.4f} "
        f"hitrate={result.last100.get('hitrate', float('nan')):.4f}"
    )
    return [metrics_path, os.path.join(ckpt, "manifest.json"), pop_path, emb_path, ids_path]


def _load_serving_state(cfg: RunConfig, args):
    mcfg, params = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    catalog = data_mod.load_catalog(_require(args.catalog, "catalog"))
    with open(_require(args.popularity, "popularity table"), "r", encoding="utf-8") as f:
        pop = json.load(f)
    counts = {int(k): int(v) for k, v in pop["counts"].items()}
    data_mod.attach_popularity(catalog, counts)
    pad_id = max(it.item_id for it in catalog.items) + 1
    bank = ItemFeatureBank(catalog, mcfg, pad_id)
    model = SequenceModel(mcfg, params, bank)
    table = tokenizer.AssignmentTable.load_csv(_require(args.assignments, "assignments"))
    ids = json.load(open(_require(args.item_embedding_ids, "embedding ids"), "r", encoding="utf-8"))
    vecs = io.load_matrix(_require(args.item_embeddings, "embedding matrix"))
    emb_index = EmbeddingIndex(np.asarray(ids, dtype=np.int64), vecs)
    cold = {it.item_id for it in catalog.items if counts.get(it.item_id, 0) == 0}
    rec = Recommender(
        model, table, emb_index, cold,
        beam_width=cfg.beam_width, k_prime=cfg.k_prime, topn=cfg.topn,
        constrain_to_index=cfg.constrain_to_index,
    )
    return rec


def _serving_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--catalog", required=True)
    p.add_argument("--assignments", required=True)
    p.add_argument("--popularity", required=True)
    p.add_argument("--item-embeddings", dest="item_embeddings", required=True)
    p.add_argument("--item-embedding-ids", dest="item_embedding_ids", required=True)


def cmd_infer(cfg: RunConfig, args) -> list[str]:
    rec = _load_serving_state(cfg, args)
    seqs = data_mod.load_sequences(_require(args.sequences, "request sequences"))
    out = io.ensure_dir(args.out_dir)
    out_path = os.path.join(out, "recommendations.jsonl")
    with open(out_path, "w", encoding="utf-8") as f:
        for lo in range(0, len(seqs), 256):
            batch = seqs[lo : lo + 256]
            for seq, entries in zip(batch, rec.recommend_batch(batch)):
                f.write(
                    json.dumps(
                        {
                            "user_id": seq.user_id,
                            "items": [i for i, _ in entries],
                            "scores": [round(float(np.float32(s)), 6) for _, s in entries],
                        },
                        separators=(",", ":"),
                    )
                    + "\n"
                )
    return [out_path]


def cmd_eval(cfg: RunConfig, args) -> list[str]:
    rec = _load_serving_state(cfg, args)
    sequences = data_mod.load_sequences(_require(args.sequences, "sequences"))
    splits = data_mod.split_users(sequences, cfg.seed)
    modes = ["cascade", "dual", "sid"] if args.mode == "all" else [args.mode]
    rows = []
    for split_name in args.splits.split(","):
        seqs = splits[split_name]
        for mode in modes:
            rows.append(
                evaluation.evaluate_split(
                    rec, seqs, split=split_name, mode=mode,
                    epoch=cfg.epochs, sid2_mode=args.sid2_mode,
                )
            )
    out = io.ensure_dir(args.out_dir)
    path = os.path.join(out, "eval.csv")
    evaluation.write_metric_rows(path, rows)
    for r in rows:
        print(
            f"{r.split}/{r.mode}: HR@10={r.hr_at_10:.4f} NDCG@10={r.ndcg_at_10:.4f}"
            + (f" SID1={r.sid1_hr:.4f} SID2={r.sid2_hr:.4f}" if r.sid1_hr is not None else "")
        )
    return [path]


def cmd_sweep(cfg: RunConfig, args) -> list[str]:
    catalog, _, table, splits, _ = _load_training_world(cfg, args)
    mcfg, bank = _build_bank(catalog, cfg)
    popularity = training.estimate_popularity(
        splits["train"],
        item_ids=[it.item_id for it in catalog.items],
        eps=cfg.eps_smoothing,
        targets_only=cfg.popularity_source == "targets",
    )
    layer_counts = [int(x) for x in args.layers.split(",")]
    seeds = tuple(int(x) for x in args.sweep_seeds.split(","))
    rows = evaluation.layer_sweep(
        bank, splits["train"], table, popularity, mcfg, cfg.train_config(),
        layer_counts, seeds=seeds, max_steps=args.max_steps,
    )
    out = io.ensure_dir(args.out_dir)
    sweep_path = os.path.join(out, "sweep.csv")
    evaluation.write_sweep_csv(sweep_path, rows)
    artifacts = [sweep_path]
    if len(rows) >= 3:
        fit = evaluation.fit_from_sweep(rows)
        fit_path = os.path.join(out, "sweep_fit.csv")
        evaluation.write_fit_csv(fit_path, fit)
        print(f"power-law fit: a={fit.a:.6f} b={fit.b:.6f} r2={fit.r2:.6f}")
        artifacts.append(fit_path)
    else:
        print("fewer than 3 depths: skipping the power-law fit")
    return artifacts


# ---------------- driver ----------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cascaderec", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic item/sequence dataset")
    _add_config_flags(p)

    p = sub.add_parser("tokenize", help="fit codebooks, assign SIDs, emit collision reports")
    _add_config_flags(p)
    p.add_argument("--catalog", required=True)
    p.add_argument("--embeddings", help="optional external embedding matrix (repo binary format)")

    p = sub.add_parser("train", help="train the joint objective on the train split")
    _add_config_flags(p)
    p.add_argument("--catalog", required=True)
    p.add_argument("--sequences", required=True)
    p.add_argument("--assignments", required=True)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--init-from", dest="init_from", help="warm-start parameters from a checkpoint")

    p = sub.add_parser("infer", help="run the cascade over request sequences")
    _add_config_flags(p)
    _serving_args(p)
    p.add_argument("--sequences", required=True)

    p = sub.add_parser("eval", help="HR@10/NDCG@10 over held-out splits")
    _add_config_flags(p)
    _serving_args(p)
    p.add_argument("--sequences", required=True)
    p.add_argument("--splits", default="valid,test")
    p.add_argument("--mode", default="cascade", choices=["cascade", "dual", "sid", "all"])
    p.add_argument("--sid2-mode", dest="sid2_mode", default="joint", choices=["joint", "conditional"])

    p = sub.add_parser("sweep", help="depth sweep feeding the power-law fitter")
    _add_config_flags(p)
    p.add_argument("--catalog", required=True)
    p.add_argument("--sequences", required=True)
    p.add_argument("--assignments", required=True)
    p.add_argument("--layers", default="1,2,4")
    p.add_argument("--sweep-seeds", dest="sweep_seeds", default="0")
    p.add_argument("--max-steps", type=int, default=None)
    return ap


COMMANDS = {
    "gen-data": cmd_gen_data,
    "tokenize": cmd_tokenize,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    set_threads(args.threads)
    try:
        cfg = RunConfig.load(args.config)
        cfg = _apply_overrides(cfg, args)
        artifacts = COMMANDS[args.command](cfg, args)
        missing = [a for a in artifacts if not os.path.exists(a)]
        if missing:
            raise RuntimeError(f"artifacts not written: {missing}")
    except Exception as exc:  # machine-readable failure line
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
