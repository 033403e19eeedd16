"""Autoregressive neural topic models for multimodal bag-of-words data.

Shallow models factor a document's joint probability into per-token
conditionals computed by a shared-weight neural network with a hierarchical
(tree) output; a supervised variant adds a class head trained with a hybrid
generative/discriminative objective.  Deep variants stack hidden layers and
train with an unbiased ordering-split estimator over histograms, with
annotation up-weighting and optional global-feature conditioning.
"""

__version__ = "0.1.0"
