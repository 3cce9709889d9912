"""Offline metrics, split evaluation, depth sweeps and the power-law fitter."""

import math
from dataclasses import dataclass, replace

import numpy as np

from . import io
from .data import UserSequence, pad_truncate
from .inference import Recommender, beam_search_batch, dual_tower_rank
from .model import SequenceModel, init_parameters
from .tokenizer import AssignmentTable
from .training import PopularityTable, TrainConfig, train_model


def hr_at_k(ranked_items, target, k: int) -> int:
    """1 iff the target appears in the top-k of the ranked list."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return 1 if target in list(ranked_items)[:k] else 0


def ndcg_at_k(ranked_items, target, k: int) -> float:
    """Single-relevant-item NDCG: 1/log2(rank+1) within top-k, else 0."""
    top = list(ranked_items)[:k]
    if target not in top:
        return 0.0
    rank = top.index(target) + 1
    return 1.0 / math.log2(rank + 1.0)


@dataclass
class MetricRow:
    split: str
    epoch: int
    hr_at_10: float
    ndcg_at_10: float
    model_size_params: int
    mode: str = "cascade"
    sid1_hr: float | None = None
    sid2_hr: float | None = None


@dataclass
class PowerLawFit:
    a: float
    b: float  # exponent: loss ~ a * size^(-b)
    r2: float


def power_law_fit(model_sizes, losses) -> PowerLawFit:
    """Least squares on (log size, log loss): log L = log a - b log N.

    R^2 is computed on the log-loss residuals; zero total variance (constant
    losses) is defined as R^2 = 1.
    """
    sizes = np.asarray(model_sizes, dtype=np.float64)
    ls = np.asarray(losses, dtype=np.float64)
    if sizes.size < 3:
        raise ValueError("power_law_fit needs at least 3 points")
    if (sizes <= 0).any() or (ls <= 0).any():
        raise ValueError("sizes and losses must be positive")
    x = np.log(sizes)
    y = np.log(ls)
    xm, ym = x.mean(), y.mean()
    var = ((x - xm) ** 2).sum()
    if var == 0:
        raise ValueError("model sizes must not all be equal")
    slope = ((x - xm) * (y - ym)).sum() / var
    intercept = ym - slope * xm
    resid = y - (intercept + slope * x)
    ss_res = float((resid**2).sum())
    ss_tot = float(((y - ym) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return PowerLawFit(a=float(np.exp(intercept)), b=float(-slope), r2=float(r2))


def popularity_baseline(
    counts: dict[int, int], sequences: list[UserSequence], top: int = 10
) -> tuple[float, float]:
    """HR@top / NDCG@top of the rank-by-training-popularity recommender."""
    if not sequences:
        raise ValueError("empty split")
    ranked_all = [i for i, _ in sorted(counts.items(), key=lambda t: (-t[1], t[0]))]
    hrs, ndcgs = [], []
    for s in sequences:
        hist = set(s.history)
        ranked = [i for i in ranked_all if i not in hist][:top]
        hrs.append(hr_at_k(ranked, s.target, top))
        ndcgs.append(ndcg_at_k(ranked, s.target, top))
    return float(np.mean(hrs)), float(np.mean(ndcgs))


def evaluate_split(
    rec: Recommender,
    sequences: list[UserSequence],
    split: str = "test",
    mode: str = "cascade",
    epoch: int = 0,
    k: int = 10,
    chunk: int = 128,
    sid2_mode: str = "joint",
) -> MetricRow:
    """Mean HR@k / NDCG@k over users.

    cascade: the full recommend pipeline. dual: pure two-tower ranking over
    the indexed items. sid: SID1 HR@k over level-1 logits plus SID2 HR@k,
    either membership of the true pair in the top-k joint beam pairs
    ("joint") or of the true c2 in the top-k of p(c2 | c1_gt) ("conditional").
    """
    if not sequences:
        raise ValueError("evaluate_split: empty split")
    model, bank = rec.model, rec.model.bank
    n_params = model.params.n_params
    hrs, ndcgs, hr1s, hr2s = [], [], [], []
    col = np.arange(model.cfg.codebook_size)
    sid_of = {int(i): rec.table.forward[int(i)] for i in bank.item_ids} if mode == "sid" else None

    for lo in range(0, len(sequences), chunk):
        batch = sequences[lo : lo + chunk]
        if mode == "cascade":
            for seq, entries in zip(batch, rec.recommend_batch(batch)):
                ranked = [i for i, _ in entries]
                hrs.append(hr_at_k(ranked, seq.target, k))
                ndcgs.append(ndcg_at_k(ranked, seq.target, k))
            continue
        rows = [pad_truncate(s, model.cfg.l_max, bank.pad_id) for s in batch]
        token_idx = bank.map_tokens(np.stack([r.token_ids for r in rows]))
        valid = np.stack([r.valid_mask for r in rows])
        cache = model.encode(token_idx, valid)
        if mode == "dual":
            for u, seq in enumerate(batch):
                ranked = [
                    i for i, _ in dual_tower_rank(
                        cache.h_T[u], rec.emb_index, set(seq.history), rec.cold_start, k
                    )
                ]
                hrs.append(hr_at_k(ranked, seq.target, k))
                ndcgs.append(ndcg_at_k(ranked, seq.target, k))
        elif mode == "sid":
            logits1, _ = model.sid1_logits(cache)
            top1 = np.stack([np.lexsort((col, -logits1[u]))[:k] for u in range(len(batch))])
            if sid2_mode == "joint":
                pairs = beam_search_batch(model, cache, rec.beam_width, k)
            else:
                c1_gt = np.asarray([sid_of[s.target].c1 for s in batch], dtype=np.int64)
                logits2, _ = model.sid2_logits(cache.h_T, c1_gt)
            for u, seq in enumerate(batch):
                true_sid = sid_of[seq.target]
                hr1s.append(1.0 if true_sid.c1 in top1[u] else 0.0)
                if sid2_mode == "joint":
                    hr2s.append(1.0 if any(p == true_sid for p, _ in pairs[u]) else 0.0)
                else:
                    top2 = np.lexsort((col, -logits2[u]))[:k]
                    hr2s.append(1.0 if true_sid.c2 in top2 else 0.0)
        else:
            raise ValueError(f"unknown eval mode: {mode}")

    if mode == "sid":
        return MetricRow(
            split, epoch, float(np.mean(hr1s)), 0.0, n_params, mode,
            sid1_hr=float(np.mean(hr1s)), sid2_hr=float(np.mean(hr2s)),
        )
    return MetricRow(split, epoch, float(np.mean(hrs)), float(np.mean(ndcgs)), n_params, mode)


def write_metric_rows(path: str, rows: list[MetricRow]) -> None:
    header = ["split", "mode", "epoch", "hr_at_10", "ndcg_at_10", "model_size_params", "sid1_hr", "sid2_hr"]
    io.write_csv(
        path,
        header,
        (
            [
                r.split, r.mode, r.epoch, f"{r.hr_at_10:.6f}", f"{r.ndcg_at_10:.6f}",
                r.model_size_params,
                "" if r.sid1_hr is None else f"{r.sid1_hr:.6f}",
                "" if r.sid2_hr is None else f"{r.sid2_hr:.6f}",
            ]
            for r in rows
        ),
    )


@dataclass
class SweepRow:
    layers: int
    params: int
    hitrate: float  # last-100-batch in-batch HR@10, seed-averaged
    ndcg: float
    loss: float  # last-100-batch InfoNCE loss, seed-averaged


def layer_sweep(
    bank,
    sequences: list[UserSequence],
    table: AssignmentTable,
    popularity: PopularityTable,
    model_cfg,
    train_cfg: TrainConfig,
    layer_counts: list[int],
    seeds: tuple[int, ...] = (0,),
    max_steps: int | None = None,
) -> list[SweepRow]:
    """One-epoch training per depth on identical data; last-100-batch averages,
    averaged over seeds."""
    if not layer_counts:
        raise ValueError("layer_counts must be non-empty")
    rows = []
    for depth in layer_counts:
        cfg = replace(model_cfg, n_layers=depth)
        hits, ndcgs, losses = [], [], []
        n_params = None
        for seed in seeds:
            params = init_parameters(cfg, seed)
            n_params = params.n_params
            model = SequenceModel(cfg, params, bank)
            res = train_model(
                model, sequences, table, popularity,
                replace(train_cfg, seed=seed), max_steps=max_steps,
            )
            hits.append(res.last100["hitrate"])
            ndcgs.append(res.last100["ndcg"])
            losses.append(res.last100["L_con"])
        rows.append(
            SweepRow(depth, n_params, float(np.mean(hits)), float(np.mean(ndcgs)), float(np.mean(losses)))
        )
    return rows


def write_sweep_csv(path: str, rows: list[SweepRow]) -> None:
    io.write_csv(
        path,
        ["layers", "params", "metric_a", "metric_b", "loss"],
        ([r.layers, r.params, f"{r.hitrate:.8f}", f"{r.ndcg:.8f}", f"{r.loss:.8f}"] for r in rows),
    )


def fit_from_sweep(rows: list[SweepRow]) -> PowerLawFit:
    return power_law_fit([r.params for r in rows], [r.loss for r in rows])


def write_fit_csv(path: str, fit: PowerLawFit) -> None:
    io.write_csv(path, ["a", "b", "r2"], [[f"{fit.a:.10f}", f"{fit.b:.10f}", f"{fit.r2:.10f}"]])
