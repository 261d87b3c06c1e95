"""Full model wiring: shared embedding, Gaussian sentence encoder, attention
decoder, and the tree topic model, plus instance tensorization."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import Config
from .corpus import BOS, EOS, PAD, Instance, Vocabulary
from .seq_codec import AttentionDecoder, GaussianEncoder, SentencePosterior
from .topic_model import TopicTree, TreeTopicModel


@dataclass
class InstanceBatch:
    """Padded tensors for one instance's sentences."""

    product_id: str
    enc_ids: torch.Tensor  # (S, T)
    lengths: torch.Tensor  # (S,)
    dec_input: torch.Tensor  # (S, T+1) BOS-prefixed
    dec_target: torch.Tensor  # (S, T+1) EOS-suffixed
    dec_mask: torch.Tensor  # (S, T+1) float

    @property
    def n_sentences(self) -> int:
        return self.enc_ids.shape[0]


def instance_to_tensors(instance: Instance, vocab: Vocabulary, max_sentence_len: int) -> InstanceBatch:
    """Encode an instance's sentences as padded id tensors.

    Sentences are truncated to ``max_sentence_len`` tokens; an instance must
    contain at least one sentence.
    """
    sentences = [s[:max_sentence_len] for s in instance.sentences() if s]
    if not sentences:
        raise ValueError(f"instance {instance.product_id} has no sentences")
    ids = [vocab.encode(s) for s in sentences]
    lengths = torch.tensor([len(s) for s in ids], dtype=torch.int64)
    width = int(lengths.max())
    enc = torch.full((len(ids), width), PAD, dtype=torch.int64)
    dec_in = torch.full((len(ids), width + 1), PAD, dtype=torch.int64)
    dec_tgt = torch.full((len(ids), width + 1), PAD, dtype=torch.int64)
    mask = torch.zeros(len(ids), width + 1)
    for i, s in enumerate(ids):
        enc[i, : len(s)] = torch.tensor(s, dtype=torch.int64)
        dec_in[i, 0] = BOS
        dec_in[i, 1 : len(s) + 1] = enc[i, : len(s)]
        dec_tgt[i, : len(s)] = enc[i, : len(s)]
        dec_tgt[i, len(s)] = EOS
        mask[i, : len(s) + 1] = 1.0
    return InstanceBatch(instance.product_id, enc, lengths, dec_in, dec_tgt, mask)


class SummaryModel(nn.Module):
    """Sentence VAE with a topic-tree mixture prior over the latent space."""

    def __init__(self, vocab_size: int, config: Config):
        super().__init__()
        self.config = config
        self.tree = TopicTree(config.tree_branching)
        self.embedding = nn.Embedding(vocab_size, config.embedding_dim, padding_idx=PAD)
        self.encoder = GaussianEncoder(
            self.embedding,
            config.hidden_dim,
            config.latent_dim,
            var_floor=config.var_floor,
            dropout=config.dropout,
        )
        self.decoder = AttentionDecoder(
            self.embedding, config.hidden_dim, config.latent_dim, dropout=config.dropout
        )
        self.topic_model = TreeTopicModel(
            self.tree, self.embedding, config.topic_hidden_dim, dropout=config.dropout
        )

    def encode_instance(self, batch: InstanceBatch):
        """Sentence posteriors and topic distributions for one instance."""
        posterior = self.encoder(batch.enc_ids, batch.lengths)
        theta = self.topic_model.classify_tokens(batch.enc_ids, batch.lengths)
        return posterior, theta

    def attention_memory(self, posterior: SentencePosterior):
        """Flattened attention memory, honoring the no-attention ablation."""
        if self.config.no_attention:
            return None, None
        return posterior.flat_memory()
