"""Summary generation and extraction.

One sentence is decoded per topic node from that topic's posterior mean.
A beam search then selects the subset whose concatenation best matches the
input reviews under ROUGE-1 F, skipping sentences that overlap too much
with one already selected; the result is ordered depth-first over the tree.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import Instance, Vocabulary
from .kernels import clipped_overlap, ngram_counts
from .latent_gmm import TopicPosterior, em_topic_posteriors
from .metrics import rouge_l
from .model import SummaryModel, instance_to_tensors
from .seq_codec import beam_decode, nucleus_decode
from .topic_model import TopicTree

logger = logging.getLogger(__name__)


@dataclass
class TopicSentence:
    topic_id: int
    tokens: list[str]
    seed: int
    low_confidence: bool = False  # topic had ~zero mass; decoded from inherited prior


@dataclass
class SummaryCandidate:
    topic_ids: tuple[int, ...]  # sorted = depth-first order
    score: float


@dataclass
class Summary:
    product_id: str
    topic_ids: list[int]
    sentences: list[list[str]]
    score: float
    topic_labels: list[str] = field(default_factory=list)

    def tokens(self) -> list[str]:
        return [t for s in self.sentences for t in s]

    def text(self) -> str:
        return "\n".join(" ".join(s) for s in self.sentences)


def _topic_seed(seed: int, k: int) -> int:
    return (seed * 1_000_003 + k) % (2**63)


def generate_topic_sentences(
    model: SummaryModel,
    vocab: Vocabulary,
    instance: Instance,
    seed: int,
) -> tuple[list[TopicSentence], TopicPosterior]:
    """Decode one sentence per topic node from the topic posterior means.

    Nucleus sampling by default (beam search under the beam-decode
    ablation); attention runs over all the instance's token states.
    Deterministic given the seed. Topics with no assigned mass decode from
    their inherited prior mean and are flagged low-confidence.
    """
    config = model.config
    model.eval()
    with torch.no_grad():
        batch = instance_to_tensors(instance, vocab, config.max_sentence_len)
        posterior, theta = model.encode_instance(batch)
        topics = em_topic_posteriors(posterior.mean, posterior.variance, theta, model.tree)
        memory, memory_mask = model.attention_memory(posterior)
        sentences = []
        for k in range(model.tree.n_nodes):
            topic_seed = _topic_seed(seed, k)
            if config.beam_decode:
                ids = beam_decode(
                    model.decoder,
                    topics.means[k],
                    memory,
                    memory_mask,
                    beam_width=config.beam_decode_width,
                    max_len=config.max_decode_len,
                )
            else:
                ids = nucleus_decode(
                    model.decoder,
                    topics.means[k],
                    memory,
                    memory_mask,
                    p_threshold=config.nucleus_p,
                    max_len=config.max_decode_len,
                    seed=topic_seed,
                )
            sentences.append(
                TopicSentence(
                    topic_id=k,
                    tokens=vocab.decode(ids),
                    seed=topic_seed,
                    low_confidence=bool(topics.empty[k]),
                )
            )
    return sentences, topics


class _Rouge1Scorer:
    """Interned unigram counts for fast ROUGE-1 during extraction."""

    def __init__(self, candidate_token_lists, reference_tokens):
        table: dict = {}

        def intern(tokens):
            out = np.empty(len(tokens), dtype=np.int64)
            for i, t in enumerate(tokens):
                out[i] = table.setdefault(t, len(table))
            return out

        self.cand_ids = [intern(t) for t in candidate_token_lists]
        self.ref_ids = intern(reference_tokens)
        self.ref_keys, self.ref_counts = ngram_counts(self.ref_ids, 1)
        self.counts = [ngram_counts(ids, 1) for ids in self.cand_ids]

    def precision(self, i: int, j: int) -> float:
        """ROUGE-1 precision of candidate i against candidate j."""
        if len(self.cand_ids[i]) == 0:
            return 0.0
        ki, ci = self.counts[i]
        kj, cj = self.counts[j]
        return clipped_overlap(ki, ci, kj, cj) / len(self.cand_ids[i])

    def f_against_reference(self, selected) -> float:
        """ROUGE-1 F of the concatenated selection against the reviews."""
        concat = np.concatenate([self.cand_ids[i] for i in selected])
        if len(concat) == 0 or len(self.ref_ids) == 0:
            return 0.0
        keys, counts = ngram_counts(concat, 1)
        overlap = clipped_overlap(keys, counts, self.ref_keys, self.ref_counts)
        p = overlap / len(concat)
        r = overlap / len(self.ref_ids)
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _beam_key(score: float, state: frozenset, topic_ids):
    return (-score, len(state), tuple(sorted(topic_ids[i] for i in state)))


def extract_summary(
    topic_sentences: list[TopicSentence],
    instance: Instance,
    beam_width: int = 8,
    max_sentences: int = 6,
    redundancy_threshold: float = 0.6,
) -> SummaryCandidate:
    """Greedy-incremental beam search over subsets of topic sentences.

    States are selected-sets scored by ROUGE-1 F of their concatenation
    against all input review tokens. A sentence whose ROUGE-1 precision
    against any already-selected sentence reaches the redundancy threshold
    is never added. Returns the best state over all sizes; ties prefer
    fewer sentences, then lexicographic topic ids.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if not 0.0 < redundancy_threshold <= 1.0:
        raise ValueError("redundancy_threshold must be in (0, 1]")
    reference = [t for s in instance.sentences() for t in s]
    scorer = _Rouge1Scorer([ts.tokens for ts in topic_sentences], reference)
    topic_ids_of = [ts.topic_id for ts in topic_sentences]
    usable = [i for i, ts in enumerate(topic_sentences) if ts.tokens]
    if not usable:
        logger.warning(
            "no admissible topic sentence for %s; returning an empty summary",
            instance.product_id,
        )
        return SummaryCandidate((), 0.0)

    scored: dict[frozenset, float] = {}

    def score(state: frozenset) -> float:
        if state not in scored:
            scored[state] = scorer.f_against_reference(state)
        return scored[state]

    beam = sorted(
        (frozenset([i]) for i in usable),
        key=lambda s: _beam_key(score(s), s, topic_ids_of),
    )[:beam_width]
    best_state = beam[0]
    for _ in range(1, max_sentences):
        expansions = set()
        for state in beam:
            for i in usable:
                if i in state:
                    continue
                # precision is asymmetric; checking both directions keeps set
                # admissibility independent of insertion order
                if any(
                    max(scorer.precision(i, j), scorer.precision(j, i))
                    >= redundancy_threshold
                    for j in state
                ):
                    continue
                expansions.add(state | {i})
        if not expansions:
            break
        beam = sorted(
            expansions, key=lambda s: _beam_key(score(s), s, topic_ids_of)
        )[:beam_width]
        if _beam_key(score(beam[0]), beam[0], topic_ids_of) < _beam_key(
            score(best_state), best_state, topic_ids_of
        ):
            best_state = beam[0]
    topic_ids = tuple(sorted(topic_sentences[i].topic_id for i in best_state))
    return SummaryCandidate(topic_ids, score(best_state))


def order_depth_first(candidate: SummaryCandidate, tree: TopicTree) -> list[int]:
    """Selected topic ids in the tree's depth-first node order."""
    for k in candidate.topic_ids:
        if not 0 <= k < tree.n_nodes:
            raise ValueError(f"topic id {k} not in tree with {tree.n_nodes} nodes")
    return sorted(candidate.topic_ids)


def oracle_extract(
    topic_sentences: list[TopicSentence],
    gold_tokens: list[str],
    count: int = 4,
    exhaustive_limit: int = 20000,
) -> SummaryCandidate:
    """Evaluation-only upper bound: the `count` topic sentences maximizing
    ROUGE-L F against a gold summary.

    Subsets are scored concatenated in depth-first order. Exhaustive when
    the number of subsets is feasible, otherwise incremental beam search.
    """
    indexed = sorted(range(len(topic_sentences)), key=lambda i: topic_sentences[i].topic_id)
    count = min(count, len(indexed))

    def rouge_of(subset) -> float:
        ordered = sorted(subset, key=lambda i: topic_sentences[i].topic_id)
        concat = [t for i in ordered for t in topic_sentences[i].tokens]
        return rouge_l(concat, gold_tokens).f1

    n_subsets = 1
    for i in range(count):
        n_subsets = n_subsets * (len(indexed) - i) // (i + 1)
    if n_subsets <= exhaustive_limit:
        best, best_score = None, -1.0
        for subset in itertools.combinations(indexed, count):
            s = rouge_of(subset)
            if s > best_score or (s == best_score and subset < best):
                best, best_score = subset, s
        chosen = best or ()
    else:
        beam = [frozenset()]
        for _ in range(count):
            expansions = {state | {i} for state in beam for i in indexed if i not in state}
            beam = sorted(
                expansions, key=lambda s: (-rouge_of(s), tuple(sorted(s)))
            )[:8]
        chosen = tuple(sorted(beam[0]))
        best_score = rouge_of(chosen)
    topic_ids = tuple(sorted(topic_sentences[i].topic_id for i in chosen))
    return SummaryCandidate(topic_ids, max(best_score, 0.0))


def summarize_instance(
    model: SummaryModel, vocab: Vocabulary, instance: Instance, seed: int
) -> Summary:
    """Full per-instance pipeline: generate, extract, order depth-first."""
    config = model.config
    sentences, _ = generate_topic_sentences(model, vocab, instance, seed)
    candidate = extract_summary(
        sentences,
        instance,
        beam_width=config.extraction_beam_width,
        max_sentences=config.max_summary_sentences,
        redundancy_threshold=config.redundancy_threshold,
    )
    ordered = order_depth_first(candidate, model.tree)
    by_topic = {ts.topic_id: ts for ts in sentences}
    return Summary(
        product_id=instance.product_id,
        topic_ids=ordered,
        sentences=[by_topic[k].tokens for k in ordered],
        score=candidate.score,
        topic_labels=[model.tree.labels[k] for k in ordered],
    )


def save_summaries(path, summaries: list[Summary]) -> None:
    """One JSON object per instance: product, selected topics, sentences, score."""
    with open(path, "w", encoding="utf-8") as f:
        for s in summaries:
            f.write(
                json.dumps(
                    {
                        "product_id": s.product_id,
                        "selected_topics": s.topic_labels,
                        "sentences": [" ".join(tokens) for tokens in s.sentences],
                        "score": s.score,
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )


def load_summaries(path) -> list[Summary]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                Summary(
                    product_id=rec["product_id"],
                    topic_ids=[],
                    sentences=[s.split() for s in rec["sentences"]],
                    score=rec["score"],
                    topic_labels=rec["selected_topics"],
                )
            )
    return out
