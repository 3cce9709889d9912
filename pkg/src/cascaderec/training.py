"""Joint optimization: LogQ-debiased InfoNCE + hierarchical SID cross-entropy.

The total objective is L_con + lambda1 * L_c1 + lambda2 * L_c2 (plus the
optional MoE balance term when enabled). Backward passes are exact adjoints;
``grad_check`` validates every parameter tensor against central finite
differences in 64-bit mode.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .data import UserSequence, pad_truncate
from .model import ItemFeatureBank, Parameters, SequenceModel
from .model.layers import gini
from .tokenizer import AssignmentTable


@dataclass
class PopularityTable:
    q: dict[int, float]  # item_id -> probability, smoothed, sums to 1
    smoothing_eps: float

    def log_q_array(self, bank: ItemFeatureBank) -> np.ndarray:
        """log Q aligned to bank rows; the pad row gets 0 (never a candidate)."""
        out = np.zeros(bank.vocab_size, dtype=np.float64)
        for row, item_id in enumerate(bank.item_ids):
            out[row] = math.log(self.q[int(item_id)])
        return out


def estimate_popularity(
    sequences: list[UserSequence],
    item_ids=None,
    eps: float = 1.0,
    targets_only: bool = False,
) -> PopularityTable:
    """Q(i) = (count(i) + eps) / sum_j (count(j) + eps) over training interactions."""
    counts: dict[int, int] = {}
    total_seen = 0
    for s in sequences:
        items = ([] if targets_only else list(s.history)) + (
            [s.target] if s.target is not None else []
        )
        total_seen += len(items)
        for i in items:
            counts[i] = counts.get(i, 0) + 1
    if total_seen == 0:
        raise ValueError("estimate_popularity: no interactions")
    vocab = sorted(counts) if item_ids is None else [int(i) for i in item_ids]
    denom = sum(counts.get(i, 0) + eps for i in vocab)
    if denom <= 0:
        raise ValueError("estimate_popularity: smoothing eps must be positive when counts are zero")
    return PopularityTable({i: (counts.get(i, 0) + eps) / denom for i in vocab}, eps)


# ---------------- losses ----------------


def infonce_logq_loss(h_T: np.ndarray, item_embs: np.ndarray, targets: np.ndarray,
                      log_q: np.ndarray, tau: float):
    """In-batch sampled softmax with LogQ correction on cosine similarity.

    h_T [B, D] and item_embs [B, D] come in unnormalized; targets [B] are the
    batch's positive item keys (used for duplicate masking), log_q [B] the
    per-target log-popularity. Returns (L_con, corrected logits [B, B],
    cache, (hitrate@10, ndcg@10)).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    b = h_T.shape[0]
    hn_norm = np.maximum(np.linalg.norm(h_T, axis=-1, keepdims=True), 1e-12)
    en_norm = np.maximum(np.linalg.norm(item_embs, axis=-1, keepdims=True), 1e-12)
    hn = h_T / hn_norm
    en = item_embs / en_norm
    sim = hn @ en.T / tau
    logits = sim - np.asarray(log_q)[None, :]
    targets = np.asarray(targets)
    dup = (targets[None, :] == targets[:, None]) & ~np.eye(b, dtype=bool)
    logits = np.where(dup, -np.inf, logits)

    m = logits.max(axis=-1, keepdims=True)
    ex = np.exp(logits - m)
    denom = ex.sum(axis=-1, keepdims=True)
    probs = ex / denom
    diag = np.arange(b)
    logp_pos = (logits[diag, diag] - m[:, 0]) - np.log(denom[:, 0])
    loss = float(-logp_pos.mean())

    pos = logits[diag, diag][:, None]
    rank = 1 + (logits > pos).sum(axis=-1)
    hit = float((rank <= 10).mean())
    ndcg = float(np.where(rank <= 10, 1.0 / np.log2(rank + 1.0), 0.0).mean())
    cache = (hn, en, hn_norm, en_norm, probs, tau)
    return loss, logits, cache, (hit, ndcg)


def infonce_logq_backward(cache):
    hn, en, hn_norm, en_norm, probs, tau = cache
    b = hn.shape[0]
    dlogits = (probs - np.eye(b, dtype=probs.dtype)) / b
    dsim = dlogits / tau
    dhn = dsim @ en
    den = dsim.T @ hn
    dh = (dhn - hn * (dhn * hn).sum(axis=-1, keepdims=True)) / hn_norm
    de = (den - en * (den * en).sum(axis=-1, keepdims=True)) / en_norm
    return dh, de


def softmax_ce(logits: np.ndarray, targets: np.ndarray):
    """Mean cross-entropy and its logits gradient; targets must be in range."""
    k = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    if (targets < 0).any() or (targets >= k).any():
        raise ValueError(f"cross-entropy target out of [0, {k})")
    b = logits.shape[0]
    m = logits.max(axis=-1, keepdims=True)
    ex = np.exp(logits - m)
    denom = ex.sum(axis=-1, keepdims=True)
    diag = np.arange(b)
    loss = float(-np.mean(logits[diag, targets] - m[:, 0] - np.log(denom[:, 0])))
    dlogits = ex / denom
    dlogits[diag, targets] -= 1.0
    return loss, dlogits / b


def sid_ce_losses(logits1: np.ndarray, logits2: np.ndarray, sid_targets: np.ndarray):
    """Per-level mean cross-entropy; level 2 logits are teacher-forced."""
    l1, _ = softmax_ce(logits1, sid_targets[:, 0])
    l2, _ = softmax_ce(logits2, sid_targets[:, 1])
    return l1, l2


def total_loss(l_con: float, l_c1: float, l_c2: float, lambda1: float, lambda2: float) -> float:
    return l_con + lambda1 * l_c1 + lambda2 * l_c2


# ---------------- schedule & optimizer ----------------


def lr_at_step(step: int, lr: float, warmup_steps: int, total_steps: int, lr_min: float = 0.0) -> float:
    """Linear warmup to lr, then cosine decay to lr_min at total_steps."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if warmup_steps > 0 and step < warmup_steps:
        return lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return lr
    t = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return lr_min + 0.5 * (lr - lr_min) * (1.0 + math.cos(math.pi * t))


class AdamWState:
    def __init__(self, params: Parameters):
        self.m = params.zeros_like()
        self.v = params.zeros_like()
        self.t = 0


def adamw_step(
    params: Parameters,
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Bias-corrected AdamW with decoupled weight decay; aborts on non-finite grads."""
    for name in params.names():
        if not np.isfinite(grads[name]).all():
            raise FloatingPointError(f"non-finite gradient in tensor '{name}'")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            update = update + weight_decay * p
        p -= (lr * update).astype(p.dtype, copy=False)


# ---------------- training loop ----------------


@dataclass
class TrainConfig:
    optimizer: str = "adamw"
    lr: float = 1e-3
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_steps: int = 100
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.optimizer != "adamw":
            raise ValueError("only the adamw optimizer is supported")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")


@dataclass
class LossBreakdown:
    l_con: float
    l_c1: float
    l_c2: float
    l_total: float
    hitrate_inbatch: float
    ndcg_inbatch: float
    l_balance: float = 0.0


@dataclass
class TrainResult:
    metric_rows: list[dict]
    last100: dict[str, float]
    steps: int


def sid_target_arrays(table: AssignmentTable, bank: ItemFeatureBank) -> np.ndarray:
    """[vocab, 2] SID targets aligned to bank rows (pad row zeros, unused)."""
    out = np.zeros((bank.vocab_size, 2), dtype=np.int64)
    for row, item_id in enumerate(bank.item_ids):
        sid = table.forward[int(item_id)]
        out[row, 0] = sid.c1
        out[row, 1] = sid.c2
    return out


def prepare_examples(sequences: list[UserSequence], bank: ItemFeatureBank, l_max: int):
    """Pad/truncate + map to bank row indices -> (token_idx, valid, target_idx)."""
    rows = [pad_truncate(s, l_max, bank.pad_id) for s in sequences]
    token_idx = bank.map_tokens(np.stack([r.token_ids for r in rows]))
    valid = np.stack([r.valid_mask for r in rows])
    targets = bank.map_tokens(np.asarray([r.target for r in rows], dtype=np.int64))
    return token_idx, valid, targets


def train_step(
    model: SequenceModel,
    token_idx: np.ndarray,
    valid: np.ndarray,
    target_idx: np.ndarray,
    log_q: np.ndarray,
    sid_targets: np.ndarray,
    routing=None,
):
    """One forward/backward over a batch; grads land in model.grads.

    Returns (LossBreakdown, encode cache). sid_targets is the [vocab, 2]
    lookup; log_q the [vocab] aligned log-popularity.
    """
    cfg = model.cfg
    model.zero_grads()
    cache = model.encode(token_idx, valid, routing=routing)
    e_items, item_cache = model.item_embeddings(target_idx)
    l_con, _, nce_cache, (hit, ndcg) = infonce_logq_loss(
        cache.h_T, e_items, target_idx, log_q[target_idx], cfg.temperature
    )
    sid_t = sid_targets[target_idx]
    logits1, h1_cache = model.sid1_logits(cache)
    l1, dlogits1 = softmax_ce(logits1, sid_t[:, 0])
    logits2, h2_cache = model.sid2_logits(cache.h_T, sid_t[:, 0])
    l2, dlogits2 = softmax_ce(logits2, sid_t[:, 1])
    l_bal = float(sum(cache.moe_balance))
    l_tot = total_loss(l_con, l1, l2, cfg.lambda1, cfg.lambda2)

    dh_nce, de = infonce_logq_backward(nce_cache)
    model.backward_item_embeddings(item_cache, de)
    dh_T = dh_nce
    dH = None
    if cfg.lambda1 != 0.0:
        dH, dh1 = model.backward_sid1(h1_cache, cfg.lambda1 * dlogits1)
        dh_T = dh_T + dh1
    if cfg.lambda2 != 0.0:
        dh_T = dh_T + model.backward_sid2(h2_cache, cfg.lambda2 * dlogits2)
    model.backward_encode(cache, dH, dh_T)
    return LossBreakdown(l_con, l1, l2, l_tot, hit, ndcg, l_bal), cache


def metrics_header(n_moe_layers: int) -> list[str]:
    cols = ["step", "epoch", "L_con", "L_c1", "L_c2", "L_total", "hitrate", "ndcg", "lr"]
    cols += [f"gini_layer_{i}" for i in range(n_moe_layers)]
    return cols


def train_model(
    model: SequenceModel,
    sequences: list[UserSequence],
    table: AssignmentTable,
    popularity: PopularityTable,
    tcfg: TrainConfig,
    metrics_path: str | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Shuffled mini-batch epochs over held-out-last-item sequences.

    Emits one metrics row per step (losses, in-batch hitrate/NDCG@10, lr and
    per-layer MoE Gini) and the last-100-batch averages.
    """
    cfg = model.cfg
    token_idx, valid, target_idx = prepare_examples(sequences, model.bank, cfg.l_max)
    log_q = popularity.log_q_array(model.bank)
    sid_targets = sid_target_arrays(table, model.bank)
    n = token_idx.shape[0]
    steps_per_epoch = (n + tcfg.batch_size - 1) // tcfg.batch_size
    total_steps = tcfg.epochs * steps_per_epoch if max_steps is None else max_steps
    state = AdamWState(model.params)
    n_moe = cfg.n_layers if cfg.use_moe else 0

    rows: list[dict] = []
    step = 0
    f = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    header = metrics_header(n_moe)
    if f:
        f.write(",".join(header) + "\n")
    try:
        for epoch in range(tcfg.epochs):
            if step >= total_steps:
                break
            order = rng.make_rng(tcfg.seed, rng.SHUFFLE, epoch).permutation(n)
            for lo in range(0, n, tcfg.batch_size):
                if step >= total_steps:
                    break
                sel = order[lo : lo + tcfg.batch_size]
                lr = lr_at_step(step, tcfg.lr, tcfg.warmup_steps, total_steps, tcfg.lr_min)
                breakdown, cache = train_step(
                    model, token_idx[sel], valid[sel], target_idx[sel], log_q, sid_targets
                )
                adamw_step(
                    model.params, model.grads, state, lr,
                    tcfg.beta1, tcfg.beta2, tcfg.adam_eps, tcfg.weight_decay,
                )
                row = {
                    "step": step,
                    "epoch": epoch,
                    "L_con": breakdown.l_con,
                    "L_c1": breakdown.l_c1,
                    "L_c2": breakdown.l_c2,
                    "L_total": breakdown.l_total,
                    "hitrate": breakdown.hitrate_inbatch,
                    "ndcg": breakdown.ndcg_inbatch,
                    "lr": lr,
                }
                for i in range(n_moe):
                    row[f"gini_layer_{i}"] = gini(cache.moe_usage[i])
                rows.append(row)
                if f:
                    f.write(",".join(_fmt(row[c]) for c in header) + "\n")
                step += 1
    finally:
        if f:
            f.close()

    tail = rows[-100:]
    last100 = {
        k: float(np.mean([r[k] for r in tail]))
        for k in ("L_con", "L_c1", "L_c2", "L_total", "hitrate", "ndcg")
    } if tail else {}
    return TrainResult(rows, last100, step)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.8f}"
    return str(v)


# ---------------- gradient checking ----------------


@dataclass
class GradCheckReport:
    max_rel_err: dict[str, float]
    tolerance: float
    passed: bool = field(init=False)
    failures: list[str] = field(init=False)

    def __post_init__(self):
        self.failures = [n for n, e in self.max_rel_err.items() if e > self.tolerance]
        self.passed = not self.failures

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_err, key=self.max_rel_err.get)
        return name, self.max_rel_err[name]


def grad_check(
    model: SequenceModel,
    token_idx: np.ndarray,
    valid: np.ndarray,
    target_idx: np.ndarray,
    log_q: np.ndarray,
    sid_targets: np.ndarray,
    tolerance: float = 1e-4,
    samples_per_tensor: int = 4,
    seed: int = 0,
    fd_step: float = 1e-5,
) -> GradCheckReport:
    """Central finite differences vs analytic grads on a sampled subset of
    every tensor; MoE routing is pinned to the baseline decision (the correct
    subgradient). Requires a float64 model."""
    if model.dtype != np.float64:
        raise ValueError("grad_check requires a float64 model")
    breakdown, cache = train_step(
        model, token_idx, valid, target_idx, log_q, sid_targets
    )
    routing = list(cache.routing) if cache.routing else None
    analytic = {k: v.copy() for k, v in model.grads.items()}
    cfg = model.cfg

    def loss_only() -> float:
        c = model.encode(token_idx, valid, routing=routing)
        e_items, _ = model.item_embeddings(target_idx)
        l_con, _, _, _ = infonce_logq_loss(
            c.h_T, e_items, target_idx, log_q[target_idx], cfg.temperature
        )
        sid_t = sid_targets[target_idx]
        logits1, _ = model.sid1_logits(c)
        l1, _ = softmax_ce(logits1, sid_t[:, 0])
        logits2, _ = model.sid2_logits(c.h_T, sid_t[:, 0])
        l2, _ = softmax_ce(logits2, sid_t[:, 1])
        return (
            total_loss(l_con, l1, l2, cfg.lambda1, cfg.lambda2)
            + cfg.balance_weight * float(sum(c.moe_balance))
        )

    g = rng.make_rng(seed, rng.GRADCHECK)
    max_err: dict[str, float] = {}
    for name, tensor in model.params.items():
        flat = tensor.reshape(-1)
        n_samp = min(samples_per_tensor, flat.size)
        positions = g.choice(flat.size, size=n_samp, replace=False)
        worst = 0.0
        for pos in positions:
            orig = flat[pos]
            h = fd_step * max(1.0, abs(orig))
            flat[pos] = orig + h
            lp = loss_only()
            flat[pos] = orig - h
            lm = loss_only()
            flat[pos] = orig
            fd = (lp - lm) / (2.0 * h)
            an = analytic[name].reshape(-1)[pos]
            denom = max(abs(fd), abs(an), 1e-8)
            worst = max(worst, abs(fd - an) / denom)
        max_err[name] = worst
    return GradCheckReport(max_err, tolerance)
