"""Self-contained evaluation metrics.

ROUGE here is the standard clipped n-gram / LCS formulation over lowercased
tokens with no stemming or stopword removal, so absolute values can differ
from the official Perl toolkit. Self-BLEU follows the no-smoothing
convention: any zero modified precision zeroes the score.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .kernels import clipped_overlap, lcs_length, ngram_counts


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, p: float, r: float) -> "RougeScore":
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(p, r, f)


ZERO_ROUGE = RougeScore(0.0, 0.0, 0.0)


def _intern_pair(candidate, reference):
    """Map the two token sequences onto small ints for the kernels."""
    table: dict = {}
    out = []
    for tokens in (candidate, reference):
        ids = np.empty(len(tokens), dtype=np.int64)
        for i, tok in enumerate(tokens):
            ids[i] = table.setdefault(tok, len(table))
        out.append(ids)
    return out[0], out[1]


def rouge_n(candidate_tokens, reference_tokens, n: int) -> RougeScore:
    """Clipped n-gram overlap ROUGE for n in {1, 2}."""
    if n not in (1, 2):
        raise ValueError(f"rouge_n supports n in {{1, 2}}, got {n}")
    if len(candidate_tokens) < n or len(reference_tokens) < n:
        return ZERO_ROUGE
    cand, ref = _intern_pair(candidate_tokens, reference_tokens)
    ck, cc = ngram_counts(cand, n)
    rk, rc = ngram_counts(ref, n)
    overlap = clipped_overlap(ck, cc, rk, rc)
    return RougeScore.from_pr(overlap / int(cc.sum()), overlap / int(rc.sum()))


def rouge_l(candidate_tokens, reference_tokens) -> RougeScore:
    """Longest-common-subsequence ROUGE."""
    if not candidate_tokens or not reference_tokens:
        return ZERO_ROUGE
    cand, ref = _intern_pair(candidate_tokens, reference_tokens)
    lcs = lcs_length(cand, ref)
    return RougeScore.from_pr(lcs / len(cand), lcs / len(ref))


def _bleu(candidate, references, n_max: int) -> float:
    c_len = len(candidate)
    if c_len == 0:
        return 0.0
    log_prec_sum = 0.0
    for n in range(1, n_max + 1):
        cand_counts = Counter(zip(*(candidate[i:] for i in range(n))))
        total = max(c_len - n + 1, 0)
        if total == 0:
            return 0.0
        max_ref: Counter = Counter()
        for ref in references:
            ref_counts = Counter(zip(*(ref[i:] for i in range(n))))
            for gram, count in ref_counts.items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        overlap = sum(min(c, max_ref[g]) for g, c in cand_counts.items())
        if overlap == 0:
            return 0.0
        log_prec_sum += math.log(overlap / total)
    # Brevity penalty against the closest reference length (ties: shorter).
    r_len = min((abs(len(r) - c_len), len(r)) for r in references)[1]
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_prec_sum / n_max)


def self_bleu(summaries, n_max: int = 4) -> dict[int, float]:
    """Mean BLEU-n of each summary against all others, for n = 1..n_max."""
    if len(summaries) < 2:
        raise ValueError("self-BLEU needs at least 2 summaries")
    scores = {}
    for n in range(1, n_max + 1):
        total = 0.0
        for i, cand in enumerate(summaries):
            refs = [s for j, s in enumerate(summaries) if j != i]
            total += _bleu(cand, refs, n)
        scores[n] = total / len(summaries)
    return scores


def load_diagnostics(path) -> list[dict]:
    """Read the per-instance topic diagnostic dump (JSON lines)."""
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(json.loads(line))
    return records


def logdet_by_level(topic_posterior_dumps, tree) -> dict[int, float]:
    """Mean covariance log-determinant per tree level (levels are 1-based).

    Averages over all instances and all topics at each level.
    """
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    for record in topic_posterior_dumps:
        logdets = record["logdets"]
        if len(logdets) != tree.n_nodes:
            raise ValueError(
                f"dump has {len(logdets)} topics, tree has {tree.n_nodes}"
            )
        for k, value in enumerate(logdets):
            level = tree.level(k) + 1
            sums[level] = sums.get(level, 0.0) + float(value)
            counts[level] = counts.get(level, 0) + 1
    return {level: sums[level] / counts[level] for level in sorted(sums)}


@dataclass
class LatentProjection:
    coords: np.ndarray  # (K, 2) topic means in the top-2 principal plane
    ellipses: np.ndarray  # (K, points, 2) unit-Mahalanobis contours
    eigenvalues: np.ndarray  # all PCA eigenvalues, descending
    components: np.ndarray  # (n, 2) projection basis
    degenerate: bool = False


def latent_projection(means, covs, n_points: int = 64) -> LatentProjection:
    """Project topic means onto their top-2 principal components.

    Each topic also gets a sampled equal-Mahalanobis-distance contour of its
    covariance in the projected plane. Degenerate inputs (all means equal)
    fall back to arbitrary orthonormal axes.
    """
    means = np.asarray(means, dtype=float)
    covs = np.asarray(covs, dtype=float)
    if means.ndim != 2 or means.shape[0] < 2:
        raise ValueError("need at least 2 topic means")
    k, n = means.shape
    centered = means - means.mean(axis=0)
    scatter = centered.T @ centered / k
    eigvals, eigvecs = np.linalg.eigh(scatter)
    order = np.argsort(eigvals)[::-1]
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    degenerate = eigvals[0] <= 1e-12
    if degenerate:
        eigvecs = np.eye(n)
        eigvals = np.zeros(n)
    basis = eigvecs[:, :2]
    coords = centered @ basis

    angles = np.linspace(0.0, 2.0 * np.pi, n_points, endpoint=False)
    circle = np.stack([np.cos(angles), np.sin(angles)], axis=0)
    ellipses = np.empty((k, n_points, 2))
    for i in range(k):
        sigma2 = basis.T @ covs[i] @ basis
        chol = np.linalg.cholesky(sigma2 + 1e-12 * np.eye(2))
        ellipses[i] = (coords[i][:, None] + chol @ circle).T
    return LatentProjection(coords, ellipses, eigvals, basis, degenerate)
