"""Tree-structured topic inference.

A fixed topic tree is traversed by two tree-recurrent networks (one over
ancestors, one over preceding siblings) whose per-node states score a
sentence embedding into stick-breaking proportions. Those give a path
distribution over each level, a level distribution along each path, and
their product: the per-sentence topic distribution over all nodes.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence


class TopicTree:
    """Fixed topic tree, nodes indexed 0..K-1 in depth-first order.

    Built from per-level branching factors: ``[4, 4]`` is a root with 4
    children, each with 4 children (21 nodes over 3 levels).
    """

    def __init__(self, branching: list[int]):
        branching = [int(b) for b in branching]
        if any(b < 1 for b in branching):
            raise ValueError(f"branching factors must be >= 1, got {branching}")
        self.branching = branching
        self.n_levels = len(branching) + 1
        sep = "" if all(b <= 9 for b in branching) else "-"

        self.parent: list[int | None] = [None]
        self._level = [0]
        self.labels = ["1"]
        self.children: list[list[int]] = [[]]
        self._sibling_pos = [0]

        def grow(node: int) -> None:
            depth = self._level[node]
            if depth == len(branching):
                return
            for i in range(branching[depth]):
                idx = len(self.parent)
                self.parent.append(node)
                self._level.append(depth + 1)
                self._sibling_pos.append(i)
                self.labels.append(self.labels[node] + sep + str(i + 1))
                self.children.append([])
                self.children[node].append(idx)
                grow(idx)

        grow(0)
        self.n_nodes = len(self.parent)
        self.leaves = [k for k in range(self.n_nodes) if not self.children[k]]
        self.is_last_sibling = [
            self.parent[k] is None
            or self._sibling_pos[k] == len(self.children[self.parent[k]]) - 1
            for k in range(self.n_nodes)
        ]

    def level(self, k: int) -> int:
        """Depth of node k (root is 0)."""
        return self._level[k]

    def ancestors(self, k: int) -> list[int]:
        """Strict ancestors of k, root first."""
        chain = []
        node = self.parent[k]
        while node is not None:
            chain.append(node)
            node = self.parent[node]
        return chain[::-1]

    def preceding_siblings(self, k: int) -> list[int]:
        parent = self.parent[k]
        if parent is None:
            return []
        return self.children[parent][: self._sibling_pos[k]]

    def previous_sibling(self, k: int) -> int | None:
        sibs = self.preceding_siblings(k)
        return sibs[-1] if sibs else None

    def nodes_at_level(self, level: int) -> list[int]:
        return [k for k in range(self.n_nodes) if self._level[k] == level]

    def index_of_label(self, label: str) -> int:
        return self.labels.index(label)

    def __repr__(self) -> str:
        return f"TopicTree(branching={self.branching}, n_nodes={self.n_nodes})"


class TreeStateNetwork(nn.Module):
    """Doubly-recurrent network producing one hidden state per tree node.

    h_k = tanh(W_p h_parent + W_s h_prev_sibling); the root feeds a learned
    start state into both slots, and each first child a learned sibling
    start state.
    """

    def __init__(self, tree: TopicTree, dim: int):
        super().__init__()
        self.tree = tree
        self.w_parent = nn.Parameter(torch.empty(dim, dim))
        self.w_sibling = nn.Parameter(torch.empty(dim, dim))
        self.h_start = nn.Parameter(torch.empty(dim))
        self.h_sibling_start = nn.Parameter(torch.empty(dim))
        nn.init.xavier_uniform_(self.w_parent)
        nn.init.xavier_uniform_(self.w_sibling)
        nn.init.normal_(self.h_start, std=0.5)
        nn.init.normal_(self.h_sibling_start, std=0.5)

    def hidden_states(self) -> torch.Tensor:
        """Per-node states, shape (K, dim), computed in depth-first order."""
        tree = self.tree
        states: list[torch.Tensor | None] = [None] * tree.n_nodes
        for k in range(tree.n_nodes):
            parent = tree.parent[k]
            if parent is None:
                p_in = s_in = self.h_start
            else:
                p_in = states[parent]
                prev = tree.previous_sibling(k)
                s_in = self.h_sibling_start if prev is None else states[prev]
            states[k] = torch.tanh(self.w_parent @ p_in + self.w_sibling @ s_in)
        return torch.stack(states)

    forward = hidden_states


def path_distribution(y: torch.Tensor, h: torch.Tensor, tree: TopicTree) -> torch.Tensor:
    """Per-level stick-breaking path probabilities, shape (S, K).

    The breaking proportion of each node is sigmoid(h_k . y), with the last
    sibling of every group forced to 1 so each level sums to 1 exactly.
    """
    squeeze = y.dim() == 1
    if squeeze:
        y = y.unsqueeze(0)
    nu = torch.sigmoid(y @ h.T)
    ones = torch.ones_like(nu[:, 0])
    pi_cols: list[torch.Tensor] = [ones]
    for k in range(1, tree.n_nodes):
        nu_k = ones if tree.is_last_sibling[k] else nu[:, k]
        col = pi_cols[tree.parent[k]] * nu_k
        for j in tree.preceding_siblings(k):
            col = col * (1.0 - (ones if tree.is_last_sibling[j] else nu[:, j]))
        pi_cols.append(col)
    pi = torch.stack(pi_cols, dim=1)
    return pi.squeeze(0) if squeeze else pi


def level_distribution(y: torch.Tensor, h_level: torch.Tensor, tree: TopicTree) -> torch.Tensor:
    """Stop-at-level probabilities along each root-to-leaf path, shape (S, K).

    The stop proportion is sigmoid(h_k . y), forced to 1 at the deepest
    level so each path sums to 1 exactly.
    """
    squeeze = y.dim() == 1
    if squeeze:
        y = y.unsqueeze(0)
    eta = torch.sigmoid(y @ h_level.T)
    ones = torch.ones_like(eta[:, 0])
    deepest = tree.n_levels - 1
    eta_cols = [
        ones if tree.level(k) == deepest else eta[:, k] for k in range(tree.n_nodes)
    ]
    # survival[k]: probability of not stopping at any strict ancestor of k
    survival: list[torch.Tensor] = [ones] * tree.n_nodes
    phi_cols: list[torch.Tensor] = [None] * tree.n_nodes  # type: ignore[list-item]
    for k in range(tree.n_nodes):
        parent = tree.parent[k]
        if parent is not None:
            survival[k] = survival[parent] * (1.0 - eta_cols[parent])
        phi_cols[k] = eta_cols[k] * survival[k]
    phi = torch.stack(phi_cols, dim=1)
    return phi.squeeze(0) if squeeze else phi


def topic_distribution(pi: torch.Tensor, phi: torch.Tensor) -> torch.Tensor:
    """Joint topic probabilities: elementwise product of path and level."""
    return pi * phi


class TreeTopicModel(nn.Module):
    """Maps sentences (hard tokens or soft word distributions) to topic
    distributions over the tree.

    The sentence embedding comes from a dedicated GRU over word embeddings;
    the embedding table is shared with the rest of the model so gradients
    reach the generator through soft words.
    """

    def __init__(
        self,
        tree: TopicTree,
        embedding: nn.Embedding,
        hidden_dim: int,
        dropout: float = 0.0,
    ):
        super().__init__()
        self.tree = tree
        self.embedding = embedding
        self.rnn = nn.GRU(embedding.embedding_dim, hidden_dim, batch_first=True)
        self.path_net = TreeStateNetwork(tree, hidden_dim)
        self.level_net = TreeStateNetwork(tree, hidden_dim)
        self.dropout = nn.Dropout(dropout)

    def _encode_embedded(self, embedded: torch.Tensor, lengths) -> torch.Tensor:
        embedded = self.dropout(embedded)
        if lengths is not None:
            packed = pack_padded_sequence(
                embedded, lengths, batch_first=True, enforce_sorted=False
            )
            _, final = self.rnn(packed)
        else:
            _, final = self.rnn(embedded)
        return self.dropout(final.squeeze(0))

    def sentence_embedding(self, token_ids: torch.Tensor, lengths) -> torch.Tensor:
        """Embedding of hard token sequences, shape (S, hidden)."""
        return self._encode_embedded(self.embedding(token_ids), lengths)

    def soft_sentence_embedding(self, soft_words: torch.Tensor, lengths=None) -> torch.Tensor:
        """Embedding of soft sequences (S, T, V): expected word embeddings."""
        expected = soft_words @ self.embedding.weight
        return self._encode_embedded(expected, lengths)

    def topic_distribution_from_embedding(self, y: torch.Tensor):
        """(theta, pi, phi) for sentence embeddings y."""
        h_path = self.path_net.hidden_states()
        h_level = self.level_net.hidden_states()
        pi = path_distribution(y, h_path, self.tree)
        phi = level_distribution(y, h_level, self.tree)
        return topic_distribution(pi, phi), pi, phi

    def classify_tokens(self, token_ids: torch.Tensor, lengths) -> torch.Tensor:
        theta, _, _ = self.topic_distribution_from_embedding(
            self.sentence_embedding(token_ids, lengths)
        )
        return theta

    def classify_soft_sentence(self, soft_words: torch.Tensor, lengths=None) -> torch.Tensor:
        """Topic distribution of relaxed (probability-vector) word sequences."""
        theta, _, _ = self.topic_distribution_from_embedding(
            self.soft_sentence_embedding(soft_words, lengths)
        )
        return theta
