"""Sentence encoder and attention decoder.

The encoder maps token sequences to diagonal Gaussian posteriors with a hard
variance floor; the decoder generates token sequences from a latent code,
attending over the encoder token states of every sentence in the instance.
Sampling utilities cover nucleus decoding (inference) and Gumbel-softmax
decoding (differentiable relaxed samples for the discriminator).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .corpus import BOS, EOS

DEFAULT_VAR_FLOOR = math.exp(0.5)


@dataclass
class SentencePosterior:
    """Diagonal Gaussian posterior of each sentence plus attention states."""

    mean: torch.Tensor  # (S, n)
    variance: torch.Tensor  # (S, n), elementwise >= the floor
    memory: torch.Tensor  # (S, T, H) projected token states for attention
    lengths: torch.Tensor  # (S,)

    def flat_memory(self):
        """Token states of all sentences flattened: (M, H) plus bool mask (M,)."""
        s, t, _ = self.memory.shape
        device = self.memory.device
        mask = torch.arange(t, device=device)[None, :] < self.lengths[:, None].to(device)
        return self.memory.reshape(s * t, -1), mask.reshape(s * t)

    def sample(self, generator=None) -> torch.Tensor:
        """One reparameterized draw per sentence."""
        noise = torch.randn(
            self.mean.shape, generator=generator, dtype=self.mean.dtype, device=self.mean.device
        )
        return self.mean + noise * self.variance.sqrt()


class GaussianEncoder(nn.Module):
    """Bidirectional GRU encoder with mean / floored-variance heads."""

    def __init__(
        self,
        embedding: nn.Embedding,
        hidden_dim: int,
        latent_dim: int,
        var_floor: float = DEFAULT_VAR_FLOOR,
        dropout: float = 0.0,
    ):
        super().__init__()
        self.embedding = embedding
        self.rnn = nn.GRU(
            embedding.embedding_dim, hidden_dim, batch_first=True, bidirectional=True
        )
        self.mean_head = nn.Linear(2 * hidden_dim, latent_dim)
        self.logvar_head = nn.Linear(2 * hidden_dim, latent_dim)
        self.memory_proj = nn.Linear(2 * hidden_dim, hidden_dim, bias=False)
        self.var_floor = var_floor
        self.dropout = nn.Dropout(dropout)

    def forward(self, token_ids: torch.Tensor, lengths) -> SentencePosterior:
        """Encode padded sentences (S, T) with 1-based lengths."""
        lengths = torch.as_tensor(lengths, dtype=torch.int64)
        if (lengths < 1).any():
            raise ValueError("cannot encode an empty sentence")
        embedded = self.dropout(self.embedding(token_ids))
        packed = pack_padded_sequence(
            embedded, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        outputs, final = self.rnn(packed)
        outputs, _ = pad_packed_sequence(
            outputs, batch_first=True, total_length=token_ids.shape[1]
        )
        state = self.dropout(torch.cat([final[0], final[1]], dim=-1))
        mean = self.mean_head(state)
        variance = torch.exp(self.logvar_head(state)).clamp(min=self.var_floor)
        memory = self.memory_proj(self.dropout(outputs))
        return SentencePosterior(mean, variance, memory, lengths)

    def encode_ids(self, sentences: list[list[int]], dtype=None) -> SentencePosterior:
        """Encode a list of (non-empty) token id sequences."""
        if any(len(s) == 0 for s in sentences):
            raise ValueError("cannot encode an empty sentence")
        lengths = [len(s) for s in sentences]
        width = max(lengths)
        batch = torch.zeros(len(sentences), width, dtype=torch.int64)
        for i, s in enumerate(sentences):
            batch[i, : len(s)] = torch.as_tensor(s, dtype=torch.int64)
        return self(batch, lengths)


def _context(hidden, memory, memory_mask):
    """Dot-product attention context for decoder states ``hidden``.

    hidden: (..., H); memory: (M, H); returns (..., H). Empty or absent
    memory falls back to a zero context.
    """
    if memory is None or memory.shape[0] == 0:
        return torch.zeros_like(hidden)
    scores = hidden @ memory.T
    if memory_mask is not None:
        scores = scores.masked_fill(~memory_mask, float("-inf"))
    return torch.softmax(scores, dim=-1) @ memory


class AttentionDecoder(nn.Module):
    """GRU decoder initialized from a latent code, with dot-product attention
    over instance token states feeding the output layer."""

    def __init__(
        self,
        embedding: nn.Embedding,
        hidden_dim: int,
        latent_dim: int,
        dropout: float = 0.0,
    ):
        super().__init__()
        self.embedding = embedding
        self.rnn = nn.GRU(embedding.embedding_dim, hidden_dim, batch_first=True)
        self.init_map = nn.Linear(latent_dim, hidden_dim)
        self.output = nn.Linear(2 * hidden_dim, embedding.num_embeddings, bias=False)
        self.dropout = nn.Dropout(dropout)

    def initial_state(self, latents: torch.Tensor) -> torch.Tensor:
        """(1, B, H) initial hidden state from latent codes (B, n)."""
        return self.init_map(latents).unsqueeze(0)

    def step_logits(self, input_tokens_emb, hidden, memory, memory_mask):
        """One decode step. input (B, E); hidden (1, B, H) -> (logits, hidden)."""
        out, hidden = self.rnn(self.dropout(input_tokens_emb).unsqueeze(1), hidden)
        h = self.dropout(out.squeeze(1))
        ctx = _context(h, memory, memory_mask)
        return self.output(torch.cat([h, ctx], dim=-1)), hidden

    def teacher_forced_log_probs(
        self,
        latents: torch.Tensor,
        input_ids: torch.Tensor,
        target_ids: torch.Tensor,
        target_mask: torch.Tensor,
        memory: torch.Tensor | None,
        memory_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Sum of per-token log-probabilities per sentence, shape (S,).

        input_ids are BOS-prefixed, target_ids EOS-suffixed; target_mask
        selects real positions. The attention context does not feed back
        into the recurrence, so the GRU runs fused over all steps.
        """
        embedded = self.dropout(self.embedding(input_ids))
        states, _ = self.rnn(embedded, self.initial_state(latents))
        states = self.dropout(states)
        ctx = _context(states, memory, memory_mask)
        logits = self.output(torch.cat([states, ctx], dim=-1))
        log_probs = torch.log_softmax(logits, dim=-1)
        token_lp = log_probs.gather(-1, target_ids.unsqueeze(-1)).squeeze(-1)
        return (token_lp * target_mask).sum(dim=-1)


def nucleus_decode(
    decoder: AttentionDecoder,
    latent: torch.Tensor,
    memory: torch.Tensor | None,
    memory_mask: torch.Tensor | None,
    p_threshold: float,
    max_len: int,
    seed: int,
) -> list[int]:
    """Sample one token sequence, restricting each step to the smallest
    probability-sorted prefix with cumulative mass >= p_threshold.

    Ties sort by token id; sampling is reproducible given the seed. Stops at
    the end-of-sentence token (not included in the result).
    """
    if not 0.0 < p_threshold <= 1.0:
        raise ValueError(f"p_threshold must be in (0, 1], got {p_threshold}")
    rng = np.random.default_rng(seed)
    tokens: list[int] = []
    with torch.no_grad():
        hidden = decoder.initial_state(latent.unsqueeze(0))
        step_input = decoder.embedding.weight[BOS].unsqueeze(0)
        for _ in range(max_len):
            logits, hidden = decoder.step_logits(step_input, hidden, memory, memory_mask)
            probs = torch.softmax(logits.squeeze(0).double(), dim=-1).cpu().numpy()
            order = np.lexsort((np.arange(len(probs)), -probs))
            cumulative = np.cumsum(probs[order])
            cut = min(int(np.searchsorted(cumulative, p_threshold - 1e-12)), len(probs) - 1)
            nucleus = order[: cut + 1]
            weights = probs[nucleus]
            token = int(rng.choice(nucleus, p=weights / weights.sum()))
            if token == EOS:
                break
            tokens.append(token)
            step_input = decoder.embedding.weight[token].unsqueeze(0)
    return tokens


def gumbel_softmax_decode(
    decoder: AttentionDecoder,
    latents: torch.Tensor,
    memory: torch.Tensor | None,
    memory_mask: torch.Tensor | None,
    temperature: float,
    max_len: int,
    generator: torch.Generator | None = None,
    zero_noise: bool = False,
) -> torch.Tensor:
    """Differentiable relaxed decode: (B, max_len, V) soft word distributions.

    Each step softmaxes (logits + Gumbel noise) / temperature and feeds the
    expected embedding of the result to the next step. ``zero_noise`` is a
    test hook that skips the noise.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    batch = latents.shape[0]
    hidden = decoder.initial_state(latents)
    step_input = decoder.embedding.weight[BOS].expand(batch, -1)
    steps = []
    for _ in range(max_len):
        logits, hidden = decoder.step_logits(step_input, hidden, memory, memory_mask)
        if zero_noise:
            noisy = logits
        else:
            uniform = torch.rand(
                logits.shape, generator=generator, dtype=logits.dtype, device=logits.device
            )
            gumbel = -torch.log(-torch.log(uniform + 1e-20) + 1e-20)
            noisy = logits + gumbel
        soft = torch.softmax(noisy / temperature, dim=-1)
        steps.append(soft)
        step_input = soft @ decoder.embedding.weight
    return torch.stack(steps, dim=1)


def beam_decode(
    decoder: AttentionDecoder,
    latent: torch.Tensor,
    memory: torch.Tensor | None,
    memory_mask: torch.Tensor | None,
    beam_width: int,
    max_len: int,
) -> list[int]:
    """Deterministic beam search decode (highest total log-probability)."""
    with torch.no_grad():
        hidden = decoder.initial_state(latent.unsqueeze(0))
        beams = [(0.0, [], hidden, False)]  # (log-prob, tokens, hidden, done)
        for _ in range(max_len):
            candidates = []
            for lp, tokens, h, done in beams:
                if done:
                    candidates.append((lp, tokens, h, True))
                    continue
                last = tokens[-1] if tokens else BOS
                step_input = decoder.embedding.weight[last].unsqueeze(0)
                logits, new_h = decoder.step_logits(step_input, h, memory, memory_mask)
                log_probs = torch.log_softmax(logits.squeeze(0), dim=-1)
                top = torch.topk(log_probs, beam_width)
                for val, tok in zip(top.values.tolist(), top.indices.tolist()):
                    if tok == EOS:
                        candidates.append((lp + val, tokens, new_h, True))
                    else:
                        candidates.append((lp + val, tokens + [tok], new_h, False))
            candidates.sort(key=lambda c: (-c[0], c[1]))
            beams = candidates[:beam_width]
            if all(done for _, _, _, done in beams):
                break
    return beams[0][1]
