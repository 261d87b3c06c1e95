"""Review corpus handling: tokenization, vocabulary, instance assembly, and a
synthetic corpus generator for desk-scale experiments.

An *instance* is the unit the model trains on: a fixed-size bundle of reviews
of one product, flattened into sentences.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>")

SPLITS = ("train", "validation", "test")

_SENT_BOUNDARY = re.compile(r"[.?!]+")
# A word is a run of alphanumerics (with internal apostrophes); anything else
# that is not whitespace becomes a single-character token.
_WORD = re.compile(r"[a-z0-9]+(?:'[a-z0-9]+)*|[^\sa-z0-9]")


@dataclass
class Review:
    """One review, split into sentences of lowercased word tokens."""

    sentences: list[list[str]]


@dataclass
class Instance:
    """A bundle of reviews of one product plus its dataset split."""

    product_id: str
    reviews: list[Review]
    split: str = "train"

    def sentences(self) -> list[list[str]]:
        """All sentences of all reviews, flattened in review order."""
        return [s for review in self.reviews for s in review.sentences]


def tokenize(text: str) -> list[list[str]]:
    """Split raw text into sentences of lowercased tokens.

    Sentences end at runs of ``.?!`` (kept as tokens); words are split on
    whitespace with non-alphanumeric characters becoming their own tokens.
    Deterministic; empty text gives an empty list.
    """
    text = text.lower()
    sentences = []
    pos = 0
    for match in _SENT_BOUNDARY.finditer(text):
        tokens = _WORD.findall(text[pos : match.end()])
        if tokens:
            sentences.append(tokens)
        pos = match.end()
    tail_tokens = _WORD.findall(text[pos:])
    if tail_tokens:
        sentences.append(tail_tokens)
    return sentences


class Vocabulary:
    """Dense word<->id mapping with reserved special ids.

    Ids 0..3 are <pad>, <unk>, <bos>, <eos>; corpus words follow, ordered by
    descending training frequency with lexicographic tie-breaking.
    """

    def __init__(self, words: list[str], counts: list[int]):
        self.id_to_word = list(SPECIAL_TOKENS) + list(words)
        self.counts = [0, 0, 0, 0] + list(counts)
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        if len(self.word_to_id) != len(self.id_to_word):
            raise ValueError("vocabulary contains duplicate words")

    def __len__(self) -> int:
        return len(self.id_to_word)

    def __contains__(self, word: str) -> bool:
        return word in self.word_to_id

    def encode(self, tokens: list[str]) -> list[int]:
        """Token ids with out-of-vocabulary words mapped to <unk>."""
        return [self.word_to_id.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_word[int(i)] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for word, count in zip(self.id_to_word, self.counts):
                f.write(f"{word}\t{count}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        words, counts = [], []
        with open(path, encoding="utf-8") as f:
            for line in f:
                word, count = line.rstrip("\n").split("\t")
                words.append(word)
                counts.append(int(count))
        if tuple(words[:4]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: not a vocabulary file (bad specials)")
        return cls(words[4:], counts[4:])


def build_vocabulary(training_instances: list[Instance], min_count: int = 16) -> Vocabulary:
    """Vocabulary of words occurring strictly more than ``min_count`` times.

    Id order is deterministic (frequency descending, ties lexicographic) and
    independent of the instance order.
    """
    if not training_instances:
        raise ValueError("no training data")
    freq = Counter()
    for instance in training_instances:
        for sentence in instance.sentences():
            freq.update(sentence)
    kept = sorted(
        ((w, c) for w, c in freq.items() if c > min_count),
        key=lambda wc: (-wc[1], wc[0]),
    )
    return Vocabulary([w for w, _ in kept], [c for _, c in kept])


def _product_rng(seed: int, product_id: str) -> np.random.Generator:
    # Stable across runs and product iteration order.
    digest = hashlib.sha256(f"{seed}:{product_id}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def make_instances(
    raw_reviews_by_product: dict[str, list[Review]],
    reviews_per_instance: int = 8,
    instances_per_product: int = 12,
    seed: int = 0,
    max_review_sentences: int = 50,
    split: str = "train",
) -> list[Instance]:
    """Sample fixed-size review bundles per product.

    Reviews with more than ``max_review_sentences`` sentences are dropped
    first; products left with fewer than ``reviews_per_instance`` reviews are
    skipped (logged). Each instance samples reviews without replacement from
    one product; sampling is seeded per product, so the output does not
    depend on dict iteration order.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    instances = []
    for product_id in sorted(raw_reviews_by_product):
        reviews = [
            r
            for r in raw_reviews_by_product[product_id]
            if r.sentences and len(r.sentences) <= max_review_sentences
        ]
        if len(reviews) < reviews_per_instance:
            logger.info(
                "skipping product %s: %d usable reviews < %d",
                product_id,
                len(reviews),
                reviews_per_instance,
            )
            continue
        rng = _product_rng(seed, product_id)
        for _ in range(instances_per_product):
            chosen = rng.choice(len(reviews), size=reviews_per_instance, replace=False)
            instances.append(
                Instance(product_id, [reviews[i] for i in chosen], split=split)
            )
    return instances


@dataclass
class SyntheticSpec:
    """Recipe for a corpus with known per-sentence topic assignments.

    Each sentence draws a topic from ``mixture_weights`` and its tokens from
    that topic's word list; with disjoint word lists the generating topic can
    be recovered from any sentence.
    """

    topic_words: list[list[str]]
    mixture_weights: list[float] | None = None
    n_products: int = 50
    reviews_per_product: int = 10
    sentences_per_review: tuple[int, int] = (2, 5)
    sentence_length: tuple[int, int] = (4, 9)
    reviews_per_instance: int = 8
    instances_per_product: int = 1
    val_fraction: float = 0.0
    test_fraction: float = 0.0
    seed: int = 0

    def weights(self) -> np.ndarray:
        if self.mixture_weights is None:
            return np.full(len(self.topic_words), 1.0 / len(self.topic_words))
        w = np.asarray(self.mixture_weights, dtype=float)
        return w / w.sum()


def generate_synthetic_corpus(spec: SyntheticSpec) -> list[Instance]:
    """Generate a seeded synthetic corpus of instances per ``spec``."""
    if not spec.topic_words:
        raise ValueError("synthetic corpus needs at least one topic")
    if any(not words for words in spec.topic_words):
        raise ValueError("every topic needs a non-empty word list")
    rng = np.random.default_rng(spec.seed)
    weights = spec.weights()
    products: dict[str, list[Review]] = {}
    for p in range(spec.n_products):
        product_id = f"p{p:05d}"
        reviews = []
        for _ in range(spec.reviews_per_product):
            n_sent = int(rng.integers(spec.sentences_per_review[0], spec.sentences_per_review[1] + 1))
            sentences = []
            for _ in range(n_sent):
                topic = int(rng.choice(len(weights), p=weights))
                length = int(rng.integers(spec.sentence_length[0], spec.sentence_length[1] + 1))
                words = spec.topic_words[topic]
                sentences.append([words[i] for i in rng.integers(0, len(words), size=length)])
            reviews.append(Review(sentences))
        products[product_id] = reviews

    order = sorted(products)
    rng.shuffle(order)
    n_test = int(round(spec.test_fraction * len(order)))
    n_val = int(round(spec.val_fraction * len(order)))
    split_of = {}
    for i, product_id in enumerate(order):
        if i < n_test:
            split_of[product_id] = "test"
        elif i < n_test + n_val:
            split_of[product_id] = "validation"
        else:
            split_of[product_id] = "train"

    instances = []
    for split in SPLITS:
        subset = {p: r for p, r in products.items() if split_of[p] == split}
        instances.extend(
            make_instances(
                subset,
                reviews_per_instance=spec.reviews_per_instance,
                instances_per_product=spec.instances_per_product,
                seed=spec.seed,
                split=split,
            )
        )
    return instances


def sentence_topic_labels(instance: Instance, spec: SyntheticSpec) -> list[int | None]:
    """Ground-truth topic of each sentence, recovered from disjoint vocabularies.

    Raises if the spec's topic word lists overlap. Sentences with no known
    word map to None.
    """
    word_topic: dict[str, int] = {}
    for topic, words in enumerate(spec.topic_words):
        for w in words:
            if w in word_topic:
                raise ValueError(f"topic word lists overlap on {w!r}")
            word_topic[w] = topic
    labels = []
    for sentence in instance.sentences():
        votes = Counter(word_topic[t] for t in sentence if t in word_topic)
        labels.append(min(votes, key=lambda t: (-votes[t], t)) if votes else None)
    return labels


def save_instances(path, instances: list[Instance]) -> None:
    """Write instances as JSON lines: product_id, split, reviews->sentences->tokens."""
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            record = {
                "product_id": inst.product_id,
                "split": inst.split,
                "reviews": [r.sentences for r in inst.reviews],
            }
            f.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_instances(path) -> list[Instance]:
    instances = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                instances.append(
                    Instance(
                        product_id=record["product_id"],
                        reviews=[Review(sentences) for sentences in record["reviews"]],
                        split=record.get("split", "train"),
                    )
                )
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad instance record: {exc}") from exc
    return instances


def split_instances(instances: list[Instance]) -> dict[str, list[Instance]]:
    by_split: dict[str, list[Instance]] = {s: [] for s in SPLITS}
    for inst in instances:
        by_split[inst.split].append(inst)
    return by_split
