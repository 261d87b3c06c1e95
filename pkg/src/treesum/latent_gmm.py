"""Recursive Gaussian mixture over the topic tree.

Per instance, each topic node gets a full-covariance Gaussian posterior by
moment-matching the topic-weighted sentence posteriors (one EM M-step). The
prior of each non-root node is its parent's posterior; the root prior is the
standard normal. Closed-form Gaussian KL terms connect the two levels, and
the weighted sentence-vs-prior KL is provably an upper bound of the
topic-vs-prior KL, which keeps parent covariances at least as large as their
children's on average.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import torch

from .topic_model import TopicTree

MASS_FLOOR = 1e-8
COV_JITTER = 1e-6


@dataclass
class TopicPosterior:
    """Moment-matched per-topic Gaussians for one instance."""

    means: torch.Tensor  # (K, n)
    covs: torch.Tensor  # (K, n, n), symmetric, jittered
    masses: torch.Tensor  # (K,) total topic weight over sentences
    empty: torch.Tensor  # (K,) bool, True where the topic fell back to its prior


@dataclass
class TopicPriorSet:
    """Per-topic prior Gaussians: root standard normal, else parent posterior."""

    means: torch.Tensor  # (K, n)
    covs: torch.Tensor  # (K, n, n)


def topic_posterior_means(sentence_means, theta, tree: TopicTree):
    """Topic means: theta-weighted averages of sentence posterior means.

    Returns (means (K, n), masses (K,), empty (K,)). Topics with negligible
    mass inherit their parent prior mean (the parent's posterior mean, or 0
    at the root) and are flagged.
    """
    masses = theta.sum(dim=0)
    weighted = theta.T @ sentence_means
    empty = masses < MASS_FLOOR
    zero = torch.zeros_like(sentence_means[0])
    means: list[torch.Tensor] = []
    for k in range(tree.n_nodes):
        if empty[k]:
            parent = tree.parent[k]
            means.append(zero if parent is None else means[parent])
        else:
            means.append(weighted[k] / masses[k])
    return torch.stack(means), masses, empty


def topic_posterior_covs(
    sentence_means,
    sentence_vars,
    theta,
    topic_means,
    tree: TopicTree,
    jitter: float = COV_JITTER,
):
    """Topic covariances: weighted second moments around the topic means.

    Sentence covariances are diagonal; the spread of sentence means around
    the topic mean contributes the off-diagonal mass. A small diagonal
    jitter keeps Cholesky factorizations stable. Empty topics inherit their
    parent prior covariance (identity at the root)."""
    n = sentence_means.shape[1]
    masses = theta.sum(dim=0)
    empty = masses < MASS_FLOOR
    eye = torch.eye(n, dtype=sentence_means.dtype, device=sentence_means.device)
    diag_part = theta.T @ sentence_vars  # (K, n)
    delta = sentence_means.unsqueeze(1) - topic_means.unsqueeze(0)  # (S, K, n)
    spread = torch.einsum("sk,ski,skj->kij", theta, delta, delta)
    covs: list[torch.Tensor] = []
    for k in range(tree.n_nodes):
        if empty[k]:
            parent = tree.parent[k]
            covs.append(eye if parent is None else covs[parent])
        else:
            covs.append(
                torch.diag_embed(diag_part[k]) / masses[k]
                + spread[k] / masses[k]
                + jitter * eye
            )
    return torch.stack(covs)


def em_topic_posteriors(sentence_means, sentence_vars, theta, tree: TopicTree) -> TopicPosterior:
    """One EM M-step: moment-matched topic Gaussians for an instance."""
    means, masses, empty = topic_posterior_means(sentence_means, theta, tree)
    covs = topic_posterior_covs(sentence_means, sentence_vars, theta, means, tree)
    return TopicPosterior(means, covs, masses, empty)


def topic_priors(
    posterior: TopicPosterior, tree: TopicTree, stop_gradients: bool = False
) -> TopicPriorSet:
    """Prior of each topic: standard normal at the root, parent posterior below."""
    n = posterior.means.shape[1]
    eye = torch.eye(n, dtype=posterior.means.dtype, device=posterior.means.device)
    zero = torch.zeros(n, dtype=posterior.means.dtype, device=posterior.means.device)
    means, covs = [], []
    for k in range(tree.n_nodes):
        parent = tree.parent[k]
        if parent is None:
            means.append(zero)
            covs.append(eye)
        else:
            means.append(posterior.means[parent])
            covs.append(posterior.covs[parent])
    prior_means = torch.stack(means)
    prior_covs = torch.stack(covs)
    if stop_gradients:
        prior_means = prior_means.detach()
        prior_covs = prior_covs.detach()
    return TopicPriorSet(prior_means, prior_covs)


class CovarianceFactorizationError(ValueError):
    """A covariance could not be Cholesky-factorized even after jitter."""


def _cholesky_with_retry(cov: torch.Tensor, jitter: float = COV_JITTER) -> torch.Tensor:
    try:
        return torch.linalg.cholesky(cov)
    except RuntimeError:
        pass
    if not torch.isfinite(cov).all():
        raise CovarianceFactorizationError(
            f"covariance contains non-finite values, shape {tuple(cov.shape)}"
        )
    n = cov.shape[-1]
    eye = torch.eye(n, dtype=cov.dtype, device=cov.device)
    try:
        return torch.linalg.cholesky(cov + jitter * eye)
    except RuntimeError as exc:
        sym_gap = (cov - cov.transpose(-1, -2)).abs().max().item()
        eigs = torch.linalg.eigvalsh(0.5 * (cov + cov.transpose(-1, -2)))
        raise CovarianceFactorizationError(
            f"covariance not positive definite after jitter {jitter}: "
            f"min eigenvalue {eigs.min().item():.3e}, "
            f"max asymmetry {sym_gap:.3e}, shape {tuple(cov.shape)}"
        ) from exc


def gaussian_kl(q_mean, q_cov, p_mean, p_cov) -> torch.Tensor:
    """KL(N(q_mean, q_cov) || N(p_mean, p_cov)), computed via Cholesky.

    ``q_cov`` may be a diagonal given as (..., n) or a full (..., n, n)
    matrix; ``p_cov`` is full. Supports arbitrary batch dimensions.
    """
    n = q_mean.shape[-1]
    chol = _cholesky_with_retry(p_cov)
    logdet_p = 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)
    if q_cov.shape == q_mean.shape:  # diagonal
        logdet_q = torch.log(q_cov).sum(-1)
        q_full = torch.diag_embed(q_cov)
    else:
        chol_q = _cholesky_with_retry(q_cov)
        logdet_q = 2.0 * torch.log(torch.diagonal(chol_q, dim1=-2, dim2=-1)).sum(-1)
        q_full = q_cov
    trace = torch.diagonal(
        torch.cholesky_solve(q_full, chol), dim1=-2, dim2=-1
    ).sum(-1)
    delta = (q_mean - p_mean).unsqueeze(-1)
    solved = torch.cholesky_solve(delta, chol)
    maha = (delta * solved).sum(dim=(-2, -1))
    return 0.5 * (logdet_p - logdet_q + trace + maha - n)


def kl_sentences_vs_priors(sentence_means, sentence_vars, priors: TopicPriorSet) -> torch.Tensor:
    """KL of every sentence posterior against every topic prior, shape (S, K).

    Shares one Cholesky per topic; this is the hot path of the latent KL
    term of the training objective."""
    s, n = sentence_means.shape
    chol = _cholesky_with_retry(priors.covs)  # (K, n, n)
    logdet_p = 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)  # (K,)
    eye = torch.eye(n, dtype=chol.dtype, device=chol.device).expand_as(chol)
    chol_inv = torch.linalg.solve_triangular(chol, eye, upper=False)  # (K, n, n)
    prec_diag = (chol_inv**2).sum(dim=-2)  # (K, n) diagonal of the precision
    trace = sentence_vars @ prec_diag.T  # (S, K)
    delta = sentence_means.unsqueeze(1) - priors.means.unsqueeze(0)  # (S, K, n)
    u = torch.einsum("kij,skj->ski", chol_inv, delta)
    maha = (u**2).sum(-1)  # (S, K)
    logdet_q = torch.log(sentence_vars).sum(-1)  # (S,)
    return 0.5 * (logdet_p.unsqueeze(0) - logdet_q.unsqueeze(1) + trace + maha - n)


def kl_bound_gap(
    sentence_means,
    sentence_vars,
    theta,
    posterior: TopicPosterior,
    priors: TopicPriorSet,
    k: int,
) -> torch.Tensor:
    """Weighted sentence-vs-prior KL minus weighted topic-vs-prior KL at node k.

    Non-negative when the topic posterior is the moment match of the same
    weighted sentences. The topic covariance carries a diagonal jitter; by
    linearity of the moment match that equals matching sentences whose
    variances carry the same jitter, so the sentence side uses the jittered
    variances too and the bound stays exact instead of degrading by
    jitter-scale terms.
    """
    kl_sent = gaussian_kl(
        sentence_means,
        sentence_vars + COV_JITTER,
        priors.means[k].expand_as(sentence_means),
        priors.covs[k].expand(sentence_means.shape[0], -1, -1),
    )
    term1 = (theta[:, k] * kl_sent).sum()
    kl_topic = gaussian_kl(
        posterior.means[k], posterior.covs[k], priors.means[k], priors.covs[k]
    )
    term2 = theta[:, k].sum() * kl_topic
    return term1 - term2


def logdet_cov(cov: torch.Tensor) -> torch.Tensor:
    """log-determinant of symmetric positive-definite matrices (batched)."""
    chol = _cholesky_with_retry(cov)
    return 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)


def weighted_mean_sentence_logdet(sentence_vars, theta, k: int) -> torch.Tensor:
    """Topic-weighted mean of sentence posterior log-determinants at node k."""
    logdets = torch.log(sentence_vars).sum(-1)
    mass = theta[:, k].sum()
    return (theta[:, k] * logdets).sum() / mass


def topic_diagnostics(product_id: str, posterior: TopicPosterior) -> dict:
    """Diagnostic record for one instance (JSON friendly)."""
    return {
        "product_id": product_id,
        "topic_means": posterior.means.detach().cpu().tolist(),
        "logdets": logdet_cov(posterior.covs).detach().cpu().tolist(),
        "masses": posterior.masses.detach().cpu().tolist(),
    }


def dump_diagnostics(path, records: list[dict]) -> None:
    """Write per-instance diagnostic records as JSON lines."""
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
