"""Deep extensions trained with the ordering-split estimator.

One stochastic update splits a document's token multiset into an observed
part (fed through the network as a histogram) and a predicted part (scored
under a full-softmax output).  Sampling a split position d uniformly from
{1..D} and a uniformly random (d-1)-sub-multiset as the observed side makes
the rescaled loss

    (D / (D - d + 1)) * sum_{w in output} phi_w * -log softmax(...)[w]

an unbiased estimator of the expected negative log-likelihood over all token
orderings (`exhaustive_ordering_loss` certifies this on small instances).

Annotation ids can be up-weighted both in the input histogram and in the
per-token loss weights phi; input histograms are rescaled to unit variance.
The supervised head (softmax for single-label, sigmoid for multi-label)
conditions on the full document's histogram.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

HEADS = ("softmax", "sigmoid")
SPLIT_MODES = ("prefix", "per-word")
_STD_GUARD = 1e-12


@dataclass
class DeepParams:
    """Weights of the deep model.

    layer_weights[n]: (H_{n+1}, H_n) with H_0 = Q; layer_biases[n]: (H_{n+1},).
    P maps global features into the first pre-activation (None if unused).
    V_out/b_out parameterize the softmax over the vocabulary; U/d the class
    head (C may be 0 for unsupervised models).
    """

    layer_weights: list[np.ndarray]
    layer_biases: list[np.ndarray]
    P: np.ndarray | None
    V_out: np.ndarray
    b_out: np.ndarray
    U: np.ndarray
    d: np.ndarray

    @property
    def n_layers(self) -> int:
        return len(self.layer_weights)

    @property
    def vocab_size(self) -> int:
        return self.layer_weights[0].shape[1]

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.layer_weights)

    @property
    def n_classes(self) -> int:
        return self.U.shape[0]

    @property
    def n_features(self) -> int:
        return 0 if self.P is None else self.P.shape[0]

    def arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for n, (w, c) in enumerate(zip(self.layer_weights, self.layer_biases), start=1):
            out.append((f"W{n}", w))
            out.append((f"c{n}", c))
        if self.P is not None:
            out.append(("P", self.P))
        out.extend([("V_out", self.V_out), ("b_out", self.b_out), ("U", self.U), ("d", self.d)])
        return out

    def copy(self) -> "DeepParams":
        return DeepParams(
            [w.copy() for w in self.layer_weights],
            [c.copy() for c in self.layer_biases],
            None if self.P is None else self.P.copy(),
            self.V_out.copy(),
            self.b_out.copy(),
            self.U.copy(),
            self.d.copy(),
        )

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.arrays()}


@dataclass
class HistogramSplit:
    """One document split: observed counts, predicted counts, split position."""

    input_hist: np.ndarray  # unweighted observed counts, length Q
    output_hist: np.ndarray  # predicted counts, length Q, never all zero
    d: int  # observed token count + 1
    total_tokens: int


def split_histogram(
    counts: np.ndarray, rng: np.random.Generator, mode: str = "prefix"
) -> HistogramSplit | None:
    """Split a count vector into observed/predicted sides for one update.

    `prefix` draws d uniformly from {1..D} and then a uniformly random
    (d-1)-sub-multiset of the tokens (sequential hypergeometric draws per
    word), which matches the distribution of uniformly shuffled token
    prefixes exactly.  `per-word` is the cheaper approximation that splits
    each word's count independently and uniformly; it does not match the
    prefix distribution and is kept for fidelity experiments (resampled
    until the predicted side is nonempty).

    Returns None for empty documents (the caller skips them).
    """
    if mode not in SPLIT_MODES:
        raise ValueError(f"unknown split mode {mode!r}")
    counts = np.asarray(counts)
    total = int(counts.sum())
    if total == 0:
        return None
    input_hist = np.zeros_like(counts)
    if mode == "prefix":
        d = int(rng.integers(1, total + 1))
        need = d - 1
        remaining = total
        for word in np.flatnonzero(counts):
            if need == 0:
                break
            have = int(counts[word])
            take = int(rng.hypergeometric(have, remaining - have, need))
            input_hist[word] = take
            need -= take
            remaining -= have
    else:
        while True:
            for word in np.flatnonzero(counts):
                input_hist[word] = rng.integers(0, counts[word] + 1)
            if input_hist.sum() < total:
                break
        d = int(input_hist.sum()) + 1
    output_hist = counts - input_hist
    return HistogramSplit(input_hist, output_hist, d, total)


def prepare_histogram(
    counts: np.ndarray, omega: np.ndarray | None = None, normalize: bool = True
) -> np.ndarray:
    """Weighted, optionally unit-variance-rescaled input histogram."""
    x = counts.astype(float)
    if omega is not None:
        if len(omega) != len(x):
            raise ValueError("weight vector length does not match histogram")
        x = x * omega
    if normalize:
        std = x.std()
        if std >= _STD_GUARD:  # zero histograms pass through unscaled
            x = x / std
    return x


def deep_forward(
    x: np.ndarray,
    params: DeepParams,
    features: np.ndarray | None = None,
    masks: list[np.ndarray] | None = None,
    keep_scale: float | None = None,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Hidden stack h^(1)..h^(N); returns (activations, pre-activations).

    During training, per-layer binary dropout masks multiply the
    activations; at inference `keep_scale` multiplies them instead
    (weight-scaling rule).
    """
    if len(x) != params.vocab_size:
        raise ValueError(f"input length {len(x)} != vocabulary size {params.vocab_size}")
    if masks is not None and keep_scale is not None:
        raise ValueError("masks and keep_scale are mutually exclusive")
    hs, pres = [], []
    inp = x
    for n, (w, c) in enumerate(zip(params.layer_weights, params.layer_biases)):
        pre = c + w @ inp
        if n == 0 and features is not None:
            if params.P is None:
                raise ValueError("model has no global-feature map")
            pre = pre + features @ params.P
        h = np.maximum(pre, 0.0)
        if masks is not None:
            h = h * masks[n]
        elif keep_scale is not None:
            h = h * keep_scale
        pres.append(pre)
        hs.append(h)
        inp = h
    return hs, pres


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())


def generative_loss(
    h_top: np.ndarray,
    output_hist: np.ndarray,
    phi: np.ndarray | None,
    d: int,
    total_tokens: int,
    params: DeepParams,
) -> tuple[float, dict[str, np.ndarray]]:
    """Rescaled weighted cross-entropy of the predicted-side histogram.

    One log-softmax over the vocabulary serves every predicted token, so the
    cost is O(Q * H) regardless of how many tokens are predicted.  Returns
    the loss and output-layer gradients {V_out, b_out, h} (h is the gradient
    w.r.t. h_top, to be backpropagated by the caller).
    """
    z = params.b_out + params.V_out @ h_top
    log_probs = _log_softmax(z)
    targets = output_hist * phi if phi is not None else output_hist.astype(float)
    factor = total_tokens / (total_tokens - d + 1)
    loss = factor * float(-(targets @ log_probs))
    d_logits = factor * (targets.sum() * np.exp(log_probs) - targets)
    return loss, {
        "V_out": np.outer(d_logits, h_top),
        "b_out": d_logits,
        "h": params.V_out.T @ d_logits,
    }


def supervised_loss(
    h_top: np.ndarray,
    labels: frozenset[int] | set[int],
    params: DeepParams,
    head: str,
) -> tuple[float, dict[str, np.ndarray]]:
    """Class-head loss and gradients {U, d, h}.

    softmax: -log p(y | h) for the single label y.
    sigmoid: per-class binary cross-entropy against the label set.
    """
    if head not in HEADS:
        raise ValueError(f"unknown head {head!r}")
    z = params.d + params.U @ h_top
    if head == "softmax":
        if len(labels) != 1:
            raise ValueError("softmax head requires exactly one label")
        (label,) = labels
        log_post = _log_softmax(z)
        loss = -float(log_post[label])
        d_logits = np.exp(log_post)
        d_logits[label] -= 1.0
    else:
        target = np.zeros(params.n_classes)
        target[sorted(labels)] = 1.0
        # -t*log(sig(z)) - (1-t)*log(1-sig(z)), computed stably
        loss = float((target * np.logaddexp(0.0, -z) + (1 - target) * np.logaddexp(0.0, z)).sum())
        d_logits = np.exp(-np.logaddexp(0.0, -z)) - target
    return loss, {
        "U": np.outer(d_logits, h_top),
        "d": d_logits,
        "h": params.U.T @ d_logits,
    }


def _backprop_layers(
    d_top: np.ndarray,
    x: np.ndarray,
    features: np.ndarray | None,
    hs: list[np.ndarray],
    pres: list[np.ndarray],
    masks: list[np.ndarray] | None,
    params: DeepParams,
    grads: dict[str, np.ndarray],
    weight: float = 1.0,
) -> None:
    """Accumulate layer gradients for d loss / d h_top flowing down the stack."""
    delta = d_top * weight
    for n in range(params.n_layers, 0, -1):
        if masks is not None:
            delta = delta * masks[n - 1]
        delta = delta * (pres[n - 1] > 0)
        grads[f"c{n}"] += delta
        below = hs[n - 2] if n > 1 else x
        grads[f"W{n}"] += np.outer(delta, below)
        if n > 1:
            delta = params.layer_weights[n - 1].T @ delta
        elif features is not None and params.P is not None:
            grads["P"] += np.outer(features, delta)


def hybrid_loss_gradients(
    counts: np.ndarray,
    labels: frozenset[int] | None,
    features: np.ndarray | None,
    params: DeepParams,
    unsup_weight: float,
    omega: np.ndarray | None,
    phi: np.ndarray | None,
    split: HistogramSplit | None,
    gen_masks: list[np.ndarray] | None,
    sup_masks: list[np.ndarray] | None,
    head: str = "softmax",
    normalize: bool = True,
) -> tuple[float, dict[str, np.ndarray]]:
    """Deterministic core of one training update (stochasticity passed in).

    The supervised term conditions on the full document histogram; the
    generative term on the split's observed side, scored against its
    predicted side and weighted by `unsup_weight`.  Gradients of both paths
    accumulate into shared layer parameters.
    """
    grads = params.zero_grads()
    loss = 0.0

    if labels is not None:
        x_full = prepare_histogram(counts, omega, normalize)
        hs, pres = deep_forward(x_full, params, features, masks=sup_masks)
        sup, head_grads = supervised_loss(hs[-1], labels, params, head)
        loss += sup
        grads["U"] += head_grads["U"]
        grads["d"] += head_grads["d"]
        _backprop_layers(head_grads["h"], x_full, features, hs, pres, sup_masks, params, grads)

    if split is not None and unsup_weight != 0.0:
        x_in = prepare_histogram(split.input_hist, omega, normalize)
        hs, pres = deep_forward(x_in, params, features, masks=gen_masks)
        gen, out_grads = generative_loss(
            hs[-1], split.output_hist, phi, split.d, split.total_tokens, params
        )
        loss += unsup_weight * gen
        grads["V_out"] += unsup_weight * out_grads["V_out"]
        grads["b_out"] += unsup_weight * out_grads["b_out"]
        _backprop_layers(
            out_grads["h"], x_in, features, hs, pres, gen_masks, params, grads,
            weight=unsup_weight,
        )
    return loss, grads


def hybrid_gradients(
    counts: np.ndarray,
    labels: frozenset[int] | None,
    features: np.ndarray | None,
    params: DeepParams,
    unsup_weight: float,
    omega: np.ndarray | None,
    phi: np.ndarray | None,
    rng: np.random.Generator,
    dropout_rate: float = 0.0,
    head: str = "softmax",
    split_mode: str = "prefix",
) -> tuple[float, dict[str, np.ndarray]]:
    """One stochastic update's loss and gradients (fresh split and masks)."""
    split = split_histogram(counts, rng, mode=split_mode)
    gen_masks = sup_masks = None
    if dropout_rate > 0.0:
        keep = 1.0 - dropout_rate
        gen_masks = [
            (rng.random(size) < keep).astype(float) for size in params.hidden_sizes
        ]
        sup_masks = [
            (rng.random(size) < keep).astype(float) for size in params.hidden_sizes
        ]
    return hybrid_loss_gradients(
        counts, labels, features, params, unsup_weight, omega, phi,
        split, gen_masks, sup_masks, head=head,
    )


def deep_represent(
    counts: np.ndarray,
    features: np.ndarray | None,
    params: DeepParams,
    omega: np.ndarray | None,
    dropout_rate: float = 0.0,
) -> np.ndarray:
    """Top-layer representation of the full (weighted, rescaled) histogram."""
    x = prepare_histogram(np.asarray(counts), omega, normalize=True)
    keep = 1.0 - dropout_rate if dropout_rate > 0.0 else None
    hs, _ = deep_forward(x, params, features, keep_scale=keep)
    return hs[-1]


def output_log_probs(h_top: np.ndarray, params: DeepParams) -> np.ndarray:
    """Per-word log conditional probabilities given a hidden state."""
    return _log_softmax(params.b_out + params.V_out @ h_top)


def exhaustive_ordering_loss(
    counts: np.ndarray,
    params: DeepParams,
    phi: np.ndarray | None = None,
    omega: np.ndarray | None = None,
    features: np.ndarray | None = None,
    normalize: bool = True,
    max_tokens: int = 6,
) -> float:
    """Exact expectation over all orderings of the per-position weighted NLL.

    Oracle-scale only: enumerates every permutation of the token multiset
    and every position's conditional directly (no estimator machinery), so
    unbiasedness of the split estimator can be certified against it.
    """
    counts = np.asarray(counts)
    total = int(counts.sum())
    if total > max_tokens:
        raise ValueError(f"document too large for exhaustive enumeration ({total} tokens)")
    if total == 0:
        return 0.0
    tokens = np.repeat(np.flatnonzero(counts), counts[counts > 0])
    weights = phi if phi is not None else np.ones(len(counts))

    cond_cache: dict[tuple, np.ndarray] = {}

    def conditionals(prefix_key: tuple) -> np.ndarray:
        if prefix_key not in cond_cache:
            x = prepare_histogram(np.array(prefix_key), omega, normalize)
            hs, _ = deep_forward(x, params, features)
            cond_cache[prefix_key] = output_log_probs(hs[-1], params)
        return cond_cache[prefix_key]

    total_loss = 0.0
    n_orderings = 0
    for perm in itertools.permutations(tokens):
        prefix = np.zeros(len(counts), dtype=np.int64)
        for word in perm:
            log_probs = conditionals(tuple(prefix))
            total_loss += weights[word] * -float(log_probs[word])
            prefix[word] += 1
        n_orderings += 1
    return total_loss / n_orderings
