"""Balanced binary tree over the vocabulary for O(log Q) word conditionals.

The probability of a word is the product of sigmoid left/right choices along
the root-to-leaf path.  The tree is the implicit heap layout on 2Q-1 nodes:
node 0 is the root, node i has children 2i+1 (left) and 2i+2 (right), nodes
0..Q-2 are internal and Q-1..2Q-2 are leaves.  Words map to leaves through a
seeded permutation, so (leaf count, seed) fully reconstruct the tree.

Bit convention: 0 means the path continues into the left subtree.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rng import named_stream


@dataclass
class OpCounter:
    """Instrumentation for cost-scaling assertions."""

    sigmoids: int = 0
    column_adds: int = 0


@dataclass
class WordTree:
    size: int  # leaf count Q
    seed: int
    leaf_of_word: np.ndarray  # word -> leaf node index in [Q-1, 2Q-2]
    _table: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n_internal(self) -> int:
        return self.size - 1

    def path(self, word: int) -> tuple[np.ndarray, np.ndarray]:
        """Root-to-leaf internal node indices and left/right bits for `word`."""
        node = int(self.leaf_of_word[word])
        nodes, bits = [], []
        while node != 0:
            parent = (node - 1) // 2
            bits.append(node - 2 * parent - 1)  # left child is 2p+1
            nodes.append(parent)
            node = parent
        return (
            np.array(nodes[::-1], dtype=np.int64),
            np.array(bits[::-1], dtype=np.int64),
        )

    def path_length(self, word: int) -> int:
        # depth of node i in the heap layout is floor(log2(i + 1))
        return int(self.leaf_of_word[word] + 1).bit_length() - 1

    @property
    def max_path_length(self) -> int:
        return int(2 * self.size - 1).bit_length() - 1

    def path_table(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Padded (nodes, bits, lengths) arrays for every word, built lazily.

        nodes and bits have shape (Q, max depth); unused slots hold -1 / 0.
        """
        if self._table is None:
            depth = self.max_path_length
            lengths = (
                np.floor(np.log2(self.leaf_of_word + 1)).astype(np.int64)
                if self.size > 1
                else np.zeros(1, dtype=np.int64)
            )
            nodes = np.full((self.size, max(depth, 1)), -1, dtype=np.int64)
            bits = np.zeros((self.size, max(depth, 1)), dtype=np.int64)
            cur = self.leaf_of_word.copy()
            pos = lengths - 1
            while True:
                active = pos >= 0
                if not active.any():
                    break
                parent = (cur[active] - 1) // 2
                nodes[np.flatnonzero(active), pos[active]] = parent
                bits[np.flatnonzero(active), pos[active]] = cur[active] - 2 * parent - 1
                cur[active] = parent
                pos[active] -= 1
            self._table = (nodes, bits, lengths)
        return self._table


def build_tree(size: int, seed: int) -> WordTree:
    """Complete balanced binary tree over `size` leaves with seeded word layout."""
    if size < 1:
        raise ValueError("tree needs at least one leaf")
    perm = named_stream(seed, "tree").permutation(size)
    leaf_of_word = (size - 1) + perm
    return WordTree(size=size, seed=seed, leaf_of_word=leaf_of_word.astype(np.int64))


def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -x)


def word_log_prob(
    tree: WordTree,
    h: np.ndarray,
    word: int,
    V: np.ndarray,
    b: np.ndarray,
    counter: OpCounter | None = None,
) -> float:
    """log p(word | h) via the sigmoid factors along the word's tree path."""
    if V.shape != (tree.n_internal, len(h)) or b.shape != (tree.n_internal,):
        raise ValueError(
            f"tree parameter shapes {V.shape}/{b.shape} do not match "
            f"(T={tree.n_internal}, H={len(h)})"
        )
    nodes, bits = tree.path(word)
    if counter is not None:
        counter.sigmoids += len(nodes)
    if len(nodes) == 0:
        return 0.0
    act = b[nodes] + V[nodes] @ h
    signs = 2 * bits - 1  # probability of the observed bit
    return float(_log_sigmoid(signs * act).sum())


def words_log_prob(
    tree: WordTree, h: np.ndarray, words: np.ndarray, V: np.ndarray, b: np.ndarray
) -> np.ndarray:
    """log p(w | h) for many candidate words sharing one hidden state."""
    nodes, bits, lengths = tree.path_table()
    nodes, bits = nodes[words], bits[words]
    valid = nodes >= 0
    safe = np.where(valid, nodes, 0)
    act = b[safe] + V[safe] @ h
    signs = 2 * bits - 1
    terms = np.where(valid, _log_sigmoid(signs * act), 0.0)
    return terms.sum(axis=1)


def tree_gradients(
    tree: WordTree,
    h: np.ndarray,
    word: int,
    V: np.ndarray,
    b: np.ndarray,
    scale: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of -scale * log p(word | h).

    Returns (nodes, dV_rows, db_entries, dh); only the rows/entries listed
    in `nodes` are nonzero.
    """
    nodes, bits = tree.path(word)
    if len(nodes) == 0:
        return nodes, np.zeros((0, len(h))), np.zeros(0), np.zeros(len(h))
    act = b[nodes] + V[nodes] @ h
    prob_right = np.exp(_log_sigmoid(act))
    dt = scale * (prob_right - bits)
    dV_rows = dt[:, None] * h[None, :]
    dh = V[nodes].T @ dt
    return nodes, dV_rows, dt.copy(), dh
