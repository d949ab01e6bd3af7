"""Verification metrics, the informativeness diagnostic, and rank testing.

* FPR at fixed recall over matching/non-matching distance samples.
* Retrieval mean average precision with deterministic tie handling.
* A probe that compares, per class, the positive-sampling probabilities
  induced by descriptor distance against the ones induced by the true
  per-sample full-parameter gradient norm of the mined triplet loss, and
  reports their Pearson correlation.
* A one-sided Mann-Whitney U test (alternative: sample a is stochastically
  smaller than sample b) with an exact branch for small pooled sizes and a
  tie-corrected normal approximation otherwise.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import ndtr

from .data import ClassGroup, to_input_matrix
from .errors import UndefinedCorrelationError
from .metricspace import MetricKind, distance_grad, pairwise_distances
from .miner import NegMode, loss_grads, mine_triplets
from .tensornet import ModelParams, backward, forward

EXACT_MW_LIMIT = 20


@dataclass
class EvalReport:
    fpr95: float
    retrieval_map: float
    pearson_info_dist: float | None = None

    def to_kv_text(self) -> str:
        lines = [f"fpr95 = {self.fpr95:.6f}",
                 f"retrieval_map = {self.retrieval_map:.6f}"]
        if self.pearson_info_dist is not None:
            lines.append(f"pearson_info_dist = {self.pearson_info_dist:.6f}")
        return "\n".join(lines) + "\n"

    def csv_row(self) -> dict:
        return {"fpr95": self.fpr95, "retrieval_map": self.retrieval_map,
                "pearson_info_dist": "" if self.pearson_info_dist is None
                else self.pearson_info_dist}


def fpr_at_recall(pos_distances: np.ndarray, neg_distances: np.ndarray,
                  recall: float = 0.95) -> float:
    """False positive rate at the smallest threshold reaching the recall.

    The threshold is the smallest observed positive distance t such that
    the fraction of positives with distance <= t is at least ``recall``;
    the return value is the fraction of negatives <= t.
    """
    pos = np.asarray(pos_distances, dtype=np.float64)
    neg = np.asarray(neg_distances, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both distance samples must be nonempty")
    if not 0.0 < recall <= 1.0:
        raise ValueError(f"recall must be in (0, 1], got {recall}")
    pos_sorted = np.sort(pos)
    need = int(np.ceil(recall * pos.size))
    threshold = pos_sorted[need - 1]
    return float(np.mean(neg <= threshold))


class RetrievalResult(NamedTuple):
    mean_ap: float
    num_queries: int
    num_excluded: int


def retrieval_map(query_descs: np.ndarray, query_labels: Sequence[int],
                  gallery_descs: np.ndarray, gallery_labels: Sequence[int],
                  kind: MetricKind) -> RetrievalResult:
    """Mean average precision of distance-ranked galleries.

    Ranking ties are broken by gallery index. Queries without any gallery
    match are excluded from the mean and counted in the result.
    """
    Q = np.atleast_2d(np.asarray(query_descs, dtype=np.float64))
    G = np.atleast_2d(np.asarray(gallery_descs, dtype=np.float64))
    ql = np.asarray(query_labels)
    gl = np.asarray(gallery_labels)
    if Q.shape[0] != ql.size or G.shape[0] != gl.size:
        raise ValueError("descriptor/label counts do not match")
    if Q.shape[0] == 0 or G.shape[0] == 0:
        raise ValueError("queries and gallery must be nonempty")
    dists = pairwise_distances(Q, G, kind)
    aps = []
    excluded = 0
    for qi in range(Q.shape[0]):
        relevant = gl == ql[qi]
        if not np.any(relevant):
            excluded += 1
            continue
        order = np.argsort(dists[qi], kind="stable")
        hits = relevant[order]
        ranks = np.nonzero(hits)[0] + 1
        precision_at_hits = np.cumsum(hits)[hits.nonzero()] / ranks
        aps.append(float(np.mean(precision_at_hits)))
    mean_ap = float(np.mean(aps)) if aps else float("nan")
    return RetrievalResult(mean_ap, len(aps), excluded)


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Sample Pearson correlation coefficient."""
    xv = np.asarray(x, dtype=np.float64)
    yv = np.asarray(y, dtype=np.float64)
    if xv.shape != yv.shape or xv.ndim != 1 or xv.size < 2:
        raise ValueError("inputs must be equal-length vectors of size >= 2")
    xc = xv - xv.mean()
    yc = yv - yv.mean()
    sx = float(np.sqrt(xc @ xc))
    sy = float(np.sqrt(yc @ yc))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("an input has zero variance")
    return float((xc @ yc) / (sx * sy))


class InfoProbeResult(NamedTuple):
    p_dist: np.ndarray
    p_info: np.ndarray
    pearson: float
    degenerate: bool


def _relative_spread(v: np.ndarray) -> float:
    scale = float(np.abs(v).max())
    return float(v.std() / scale) if scale > 0 else 0.0


def info_correlation_probe(dataset: list[ClassGroup], params: ModelParams,
                           kind: MetricKind, rng: np.random.Generator,
                           sample_classes: int = 32, margin: float = 1.0,
                           neg_mode: NegMode = NegMode.SAME_ROLE,
                           pair_term_only: bool = False) -> InfoProbeResult:
    """Compare distance-induced and gradient-norm-induced probabilities.

    Per sampled class, one anchor is fixed and every remaining patch plays
    the positive of a mined triplet against context pairs from the other
    sampled classes. Candidate probabilities are formed within the class
    (a) from descriptor distances and (b) from the exact full-parameter
    gradient norms of the loss; the pooled vectors and their Pearson
    correlation are returned.

    With ``pair_term_only`` the loss is just the squared matching distance,
    the regime where the gradient norm is provably close to proportional to
    the distance itself.

    A probe without usable spread in either vector (identical views, a
    network that maps every candidate to the same point, all hinges
    inactive) is flagged degenerate instead of raising.
    """
    usable = [g for g in dataset if len(g.patches) >= 2]
    if len(usable) < 2:
        raise ValueError("probe needs at least 2 classes with k >= 2")
    m = min(sample_classes, len(usable))
    picked = [usable[int(i)] for i in rng.choice(len(usable), size=m,
                                                 replace=False)]
    anchor_idx = [int(rng.integers(len(g.patches))) for g in picked]
    context_idx = []
    for g, a in zip(picked, anchor_idx):
        others = [i for i in range(len(g.patches)) if i != a]
        context_idx.append(others[int(rng.integers(len(others)))])

    p_dist_parts: list[np.ndarray] = []
    p_info_parts: list[np.ndarray] = []
    for slot in range(m):
        group = picked[slot]
        cand_ids = [i for i in range(len(group.patches))
                    if i != anchor_idx[slot]]
        dists = np.empty(len(cand_ids))
        infos = np.empty(len(cand_ids))
        for ci, cand in enumerate(cand_ids):
            anchors = []
            positives = []
            for other in range(m):
                anchors.append(picked[other].patches[anchor_idx[other]])
                pos_id = cand if other == slot else context_idx[other]
                positives.append(picked[other].patches[pos_id])
            inputs = to_input_matrix(anchors + positives)
            descs, cache = forward(params, inputs)
            desc_a, desc_p = descs[:m], descs[m:]
            mined = mine_triplets(desc_a, desc_p, kind, margin, neg_mode)
            dists[ci] = mined[slot].d_pos
            onehot = np.zeros(m)
            onehot[slot] = 1.0
            if pair_term_only:
                d_pos = mined[slot].d_pos
                ga, gb, _ = distance_grad(desc_a[slot], desc_p[slot], kind)
                out_grads = np.zeros_like(descs)
                out_grads[slot] = 2.0 * d_pos * ga
                out_grads[m + slot] = 2.0 * d_pos * gb
            elif mined[slot].loss > 0.0:
                grad_a, grad_p = loss_grads(desc_a, desc_p, mined, kind,
                                            onehot)
                out_grads = np.vstack([grad_a, grad_p])
            else:
                infos[ci] = 0.0
                continue
            grads, _ = backward(params, cache, out_grads)
            infos[ci] = grads.norm()
        d_sum, i_sum = dists.sum(), infos.sum()
        p_dist_parts.append(dists / d_sum if d_sum > 0
                            else np.full(dists.size, 1.0 / dists.size))
        p_info_parts.append(infos / i_sum if i_sum > 0
                            else np.zeros(infos.size))

    p_dist = np.concatenate(p_dist_parts)
    p_info = np.concatenate(p_info_parts)
    # Spread below ~1e-6 of the magnitude is floating-point residue, not an
    # ordering signal (identical views still differ in the last few ulps).
    if _relative_spread(p_dist) < 1e-6 or _relative_spread(p_info) < 1e-6:
        return InfoProbeResult(p_dist, p_info, float("nan"), True)
    try:
        r = pearson(p_dist, p_info)
        return InfoProbeResult(p_dist, p_info, r, False)
    except UndefinedCorrelationError:
        return InfoProbeResult(p_dist, p_info, float("nan"), True)


class MannWhitneyResult(NamedTuple):
    u: float
    p_value: float
    exact: bool


def _u_statistic(a: np.ndarray, b: np.ndarray) -> float:
    gt = (a[:, None] > b[None, :]).sum()
    ties = (a[:, None] == b[None, :]).sum()
    return float(gt) + 0.5 * float(ties)


def _exact_distribution_no_ties(n1: int, n2: int) -> np.ndarray:
    """Counts of rank arrangements per U value.

    Recurrence on the largest pooled rank: it belongs either to sample a
    (beating all j b's, so U shifts by j) or to sample b:
    f(i, j, u) = f(i-1, j, u-j) + f(i, j-1, u).
    """
    prev = [np.ones(1) for _ in range(n2 + 1)]          # f(0, j, .) = [1]
    for i in range(1, n1 + 1):
        cur = [np.ones(1)]                              # f(i, 0, .) = [1]
        for j in range(1, n2 + 1):
            arr = np.zeros(i * j + 1)
            arr[:cur[j - 1].size] += cur[j - 1]
            arr[j:j + prev[j].size] += prev[j]
            cur.append(arr)
        prev = cur
    return prev[n2]


def _exact_p_no_ties(n1: int, n2: int, u_obs: float) -> float:
    counts = _exact_distribution_no_ties(n1, n2)
    total = counts.sum()
    us = np.arange(counts.size)
    return float(counts[us <= u_obs + 1e-12].sum() / total)


def _exact_p_enumeration(pooled: np.ndarray, n1: int, u_obs: float) -> float:
    """P(U <= u_obs) over all assignments of pooled values to sample a."""
    n = pooled.size
    cmp = (pooled[:, None] > pooled[None, :]).astype(np.float64)
    cmp += 0.5 * (pooled[:, None] == pooled[None, :])
    np.fill_diagonal(cmp, 0.0)
    rowsums = cmp.sum(axis=1)
    le = 0
    total = 0
    combos = itertools.combinations(range(n), n1)
    chunk: list[tuple[int, ...]] = []
    for combo in combos:
        chunk.append(combo)
        if len(chunk) == 20000:
            le, total = _enum_chunk(np.array(chunk), cmp, rowsums, u_obs,
                                    le, total)
            chunk = []
    if chunk:
        le, total = _enum_chunk(np.array(chunk), cmp, rowsums, u_obs,
                                le, total)
    return le / total


def _enum_chunk(idx: np.ndarray, cmp: np.ndarray, rowsums: np.ndarray,
                u_obs: float, le: int, total: int) -> tuple[int, int]:
    term1 = rowsums[idx].sum(axis=1)
    inner = cmp[idx[:, :, None], idx[:, None, :]].sum(axis=(1, 2))
    u = term1 - inner
    return le + int(np.sum(u <= u_obs + 1e-12)), total + idx.shape[0]


def mann_whitney_u(sample_a: np.ndarray,
                   sample_b: np.ndarray) -> MannWhitneyResult:
    """One-sided test that sample_a is stochastically smaller than sample_b.

    U counts pairs where a exceeds b (ties count one half), so small U
    supports the alternative. Exact distribution for pooled size <= 20
    (full enumeration when ties are present), tie-corrected normal
    approximation with continuity correction otherwise.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    u_obs = _u_statistic(a, b)
    n1, n2 = a.size, b.size
    n = n1 + n2
    pooled = np.concatenate([a, b])
    has_ties = np.unique(pooled).size < n
    if n <= EXACT_MW_LIMIT:
        if has_ties:
            p = _exact_p_enumeration(pooled, n1, u_obs)
        else:
            p = _exact_p_no_ties(n1, n2, u_obs)
        return MannWhitneyResult(u_obs, p, True)
    mean = n1 * n2 / 2.0
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts ** 3 - tie_counts)) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return MannWhitneyResult(u_obs, 1.0, False)
    z = (u_obs - mean + 0.5) / np.sqrt(var)
    return MannWhitneyResult(u_obs, float(ndtr(z)), False)
