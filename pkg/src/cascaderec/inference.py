"""Three-stage cascade: SID beam search, index expansion, cosine re-rank.

Stage 1 decodes the top joint-probability (c1, c2) pairs by beam search and
reverse-maps them through the inverted index; Stage 2 re-ranks the candidate
items by cosine similarity against the user embedding (beam scores are
discarded); Stage 3 filters history and cold-start items and emits Top-N.
"""

from dataclasses import dataclass, field

import numpy as np

from .data import UserSequence, pad_truncate
from .model import EncodeCache, SequenceModel
from .tokenizer import AssignmentTable, SemanticID, inverted_index


@dataclass
class CandidateSet:
    item_ids: list[int]
    provenance: dict[int, SemanticID]


RecEntry = tuple[int, float]  # (item_id, score)


@dataclass
class EmbeddingIndex:
    """L2-normalized candidate matrix over training-seen items."""

    item_ids: np.ndarray  # [N] int64
    vectors: np.ndarray  # [N, D] float32, unit rows
    row_of: dict[int, int] = field(init=False)

    def __post_init__(self):
        self.row_of = {int(i): r for r, i in enumerate(self.item_ids)}


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def beam_search_batch(
    model: SequenceModel,
    cache: EncodeCache,
    beam_width: int,
    k_prime: int,
    allowed: set[SemanticID] | None = None,
) -> list[list[tuple[SemanticID, float]]]:
    """Per user: top-k_prime complete (c1, c2) pairs by joint log-probability.

    Keeps the top beam_width c1 hypotheses by log p(c1), extends each with
    the full conditional log p(c2 | c1), and returns the globally best pairs
    sorted by logp descending, ties by (c1, c2) ascending. With ``allowed``
    set, pairs outside it are dropped before the top-k_prime cut.
    """
    if beam_width < 1 or k_prime < 1:
        raise ValueError("beam_width and k_prime must be >= 1")
    k = model.cfg.codebook_size
    b_eff = min(beam_width, k)
    logits1, _ = model.sid1_logits(cache)
    logp1 = _log_softmax(logits1)  # [U, K]
    n_users = logp1.shape[0]

    col = np.arange(k)
    hyp = np.empty((n_users, b_eff), dtype=np.int64)
    for u in range(n_users):
        hyp[u] = np.lexsort((col, -logp1[u]))[:b_eff]

    h_rep = np.repeat(cache.h_T, b_eff, axis=0)  # [U*B, D]
    logits2, _ = model.sid2_logits(h_rep, hyp.ravel())
    logp2 = _log_softmax(logits2).reshape(n_users, b_eff, k)
    joint = logp1[np.arange(n_users)[:, None], hyp][..., None] + logp2  # [U, B, K]

    out = []
    c1_flat = np.repeat(hyp, k, axis=1)  # [U, B*K]
    c2_flat = np.tile(col, b_eff)
    for u in range(n_users):
        flat = joint[u].ravel()
        order = np.lexsort((c2_flat, c1_flat[u], -flat))
        pairs = []
        for i in order:
            sid = SemanticID(int(c1_flat[u, i]), int(c2_flat[i]))
            if allowed is not None and sid not in allowed:
                continue
            pairs.append((sid, float(flat[i])))
            if len(pairs) == k_prime:
                break
        out.append(pairs)
    return out


def beam_search_sids(
    model: SequenceModel,
    cache: EncodeCache,
    beam_width: int,
    k_prime: int,
    allowed: set[SemanticID] | None = None,
) -> list[tuple[SemanticID, float]]:
    """Single-user wrapper over beam_search_batch."""
    return beam_search_batch(model, cache, beam_width, k_prime, allowed)[0]


def expand_candidates(
    sid_pairs: list[tuple[SemanticID, float]],
    index: dict[SemanticID, list[int]],
) -> CandidateSet:
    """Union of the index buckets, deduplicated; first (best-logp) SID wins provenance."""
    items: list[int] = []
    provenance: dict[int, SemanticID] = {}
    for sid, _ in sid_pairs:
        for item in index.get(sid, ()):
            if item not in provenance:
                provenance[item] = sid
                items.append(item)
    return CandidateSet(items, provenance)


def score_candidates(
    q_u: np.ndarray,
    candidates: list[int],
    emb: EmbeddingIndex,
) -> tuple[list[int], np.ndarray]:
    """Cosine scores for candidates; items without an embedding row (cold) drop out."""
    rows, kept = [], []
    for item in candidates:
        r = emb.row_of.get(item)
        if r is not None:
            rows.append(r)
            kept.append(item)
    if not rows:
        return [], np.zeros(0, dtype=np.float64)
    qn = q_u / max(np.linalg.norm(q_u), 1e-12)
    scores = emb.vectors[rows].astype(np.float64) @ qn.astype(np.float64)
    return kept, scores


def filter_and_rank(
    item_ids: list[int],
    scores: np.ndarray,
    history: set[int],
    cold_start: set[int],
    top: int = 10,
) -> list[RecEntry]:
    """History scores to -inf (never emitted), cold-start removed, Top-N by
    score with item-id ascending tie-break."""
    entries = [
        (float(s), int(i))
        for i, s in zip(item_ids, scores)
        if i not in cold_start and i not in history
    ]
    entries.sort(key=lambda t: (-t[0], t[1]))
    return [(i, s) for s, i in entries[:top]]


class Recommender:
    """Bundles the immutable inference state: model, index, embeddings, filters."""

    def __init__(
        self,
        model: SequenceModel,
        table: AssignmentTable,
        emb_index: EmbeddingIndex,
        cold_start: set[int] | None = None,
        beam_width: int = 20,
        k_prime: int = 384,
        topn: int = 10,
        constrain_to_index: bool = False,
    ):
        self.model = model
        self.table = table
        self.index = inverted_index(table)
        self.emb_index = emb_index
        self.cold_start = cold_start or set()
        self.beam_width = beam_width
        self.k_prime = k_prime
        self.topn = topn
        self.allowed = set(self.index) if constrain_to_index else None

    def recommend_batch(self, seqs: list[UserSequence]) -> list[list[RecEntry]]:
        bank, cfg = self.model.bank, self.model.cfg
        rows = [pad_truncate(s, cfg.l_max, bank.pad_id) for s in seqs]
        token_idx = bank.map_tokens(np.stack([r.token_ids for r in rows]))
        valid = np.stack([r.valid_mask for r in rows])
        cache = self.model.encode(token_idx, valid)
        all_pairs = beam_search_batch(
            self.model, cache, self.beam_width, self.k_prime, self.allowed
        )
        out = []
        for u, seq in enumerate(seqs):
            cands = expand_candidates(all_pairs[u], self.index)
            kept, scores = score_candidates(cache.h_T[u], cands.item_ids, self.emb_index)
            out.append(
                filter_and_rank(kept, scores, set(seq.history), self.cold_start, self.topn)
            )
        return out

    def recommend(self, seq: UserSequence) -> list[RecEntry]:
        return self.recommend_batch([seq])[0]

    def stage1_pairs(self, seq: UserSequence) -> list[tuple[SemanticID, float]]:
        """The Stage-1 SID selection for one user (used by invariant checks)."""
        bank, cfg = self.model.bank, self.model.cfg
        row = pad_truncate(seq, cfg.l_max, bank.pad_id)
        cache = self.model.encode(
            bank.map_tokens(row.token_ids)[None, :], row.valid_mask[None, :]
        )
        return beam_search_batch(self.model, cache, self.beam_width, self.k_prime, self.allowed)[0]


def dual_tower_rank(
    h_T: np.ndarray,
    emb: EmbeddingIndex,
    history: set[int],
    cold_start: set[int],
    top: int = 10,
) -> list[RecEntry]:
    """Pure two-tower reference path: rank every indexed item by cosine."""
    ids = [int(i) for i in emb.item_ids]
    qn = h_T / max(np.linalg.norm(h_T), 1e-12)
    scores = emb.vectors.astype(np.float64) @ qn.astype(np.float64)
    return filter_and_rank(ids, scores, history, cold_start, top)
