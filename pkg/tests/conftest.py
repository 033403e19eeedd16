import numpy as np
import pytest

from docnade import deep as deep_mod
from docnade import shallow as shallow_mod
from docnade.wordtree import build_tree


def random_shallow_params(rng, vocab_size, hidden, n_classes, scale=1.0):
    return shallow_mod.ShallowParams(
        W=rng.uniform(-scale, scale, (hidden, vocab_size)),
        c=rng.uniform(-scale, scale, hidden),
        V=rng.uniform(-scale, scale, (vocab_size - 1, hidden)),
        b=rng.uniform(-scale, scale, vocab_size - 1),
        U=rng.uniform(-scale, scale, (n_classes, hidden)),
        d=rng.uniform(-scale, scale, n_classes),
    )


def zero_shallow_params(vocab_size, hidden, n_classes):
    return shallow_mod.ShallowParams(
        W=np.zeros((hidden, vocab_size)),
        c=np.zeros(hidden),
        V=np.zeros((vocab_size - 1, hidden)),
        b=np.zeros(vocab_size - 1),
        U=np.zeros((n_classes, hidden)),
        d=np.zeros(n_classes),
    )


def random_deep_params(rng, vocab_size, hidden_sizes, n_classes, n_features=0, scale=1.0):
    weights, biases = [], []
    prev = vocab_size
    for h in hidden_sizes:
        weights.append(rng.uniform(-scale, scale, (h, prev)))
        biases.append(rng.uniform(-scale, scale, h))
        prev = h
    P = rng.uniform(-scale, scale, (n_features, hidden_sizes[0])) if n_features else None
    return deep_mod.DeepParams(
        weights,
        biases,
        P,
        rng.uniform(-scale, scale, (vocab_size, hidden_sizes[-1])),
        rng.uniform(-scale, scale, vocab_size),
        rng.uniform(-scale, scale, (n_classes, hidden_sizes[-1])),
        rng.uniform(-scale, scale, n_classes),
    )


def zero_deep_params(vocab_size, hidden_sizes, n_classes, n_features=0):
    weights, biases = [], []
    prev = vocab_size
    for h in hidden_sizes:
        weights.append(np.zeros((h, prev)))
        biases.append(np.zeros(h))
        prev = h
    P = np.zeros((n_features, hidden_sizes[0])) if n_features else None
    return deep_mod.DeepParams(
        weights, biases, P,
        np.zeros((vocab_size, hidden_sizes[-1])), np.zeros(vocab_size),
        np.zeros((n_classes, hidden_sizes[-1])), np.zeros(n_classes),
    )


def shallow_instance_off_kink(rng, vocab_size, hidden, n_classes, doc_len, margin=1e-3):
    """Random (tree, params, tokens) whose relu pre-activations avoid the kink."""
    tree = build_tree(vocab_size, int(rng.integers(10_000)))
    while True:
        params = random_shallow_params(rng, vocab_size, hidden, n_classes)
        tokens = rng.integers(0, vocab_size, doc_len)
        pre = shallow_mod._preactivations(tokens, params)
        if np.abs(pre).min() > margin:
            return tree, params, tokens


def fd_gradient(loss_fn, arr, step=1e-4):
    """Central finite differences of loss_fn w.r.t. every entry of arr."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = arr[idx]
        arr[idx] = orig + step
        plus = loss_fn()
        arr[idx] = orig - step
        minus = loss_fn()
        arr[idx] = orig
        grad[idx] = (plus - minus) / (2 * step)
    return grad


def max_rel_error(analytic, numeric, floor=1e-3):
    """Worst relative error with an absolute floor guarding tiny entries."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
