"""Cross-entropy, supervised contrastive loss and their weighted sum."""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import BatchConstructionError, ConfigurationError, LabelError


@dataclass(frozen=True)
class LossWeights:
    w_ce: float = 0.8
    w_con: float = 0.2

    def __post_init__(self):
        if self.w_ce < 0 or self.w_con < 0:
            raise ConfigurationError("loss weights must be non-negative")


def cross_entropy(logits, labels, with_grad=False):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels).reshape(-1)
    n, m = logits.shape
    if labels.shape[0] != n:
        raise LabelError("one label per row required")
    if np.any(labels < 0) or np.any(labels >= m):
        raise LabelError(f"labels must lie in [0, {m})")
    log_norm = logsumexp(logits, axis=1)
    log_prob = logits[np.arange(n), labels] - log_norm
    loss = float(-log_prob.sum() / n)
    if not with_grad:
        return loss
    grad = np.exp(logits - log_norm[:, None])
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def positive_mask(labels):
    labels = np.asarray(labels).reshape(-1)
    pos = labels[:, None] == labels[None, :]
    np.fill_diagonal(pos, False)
    return pos


def sup_contrastive(templates, labels, tau=0.07, with_grad=False):
    """Supervised contrastive loss summed over all anchors in the batch.

    For anchor i the denominator runs over every other entry; positives are
    the other entries sharing its label. ``templates`` are expected unit-norm.
    """
    z = np.atleast_2d(np.asarray(templates, dtype=np.float64))
    if tau <= 0:
        raise ConfigurationError("temperature must be positive")
    pos = positive_mask(labels)
    n_pos = pos.sum(axis=1)
    if np.any(n_pos == 0):
        raise BatchConstructionError("every anchor needs at least one positive")
    logits = z @ z.T / tau
    masked = logits.copy()
    np.fill_diagonal(masked, -np.inf)
    log_denom = logsumexp(masked, axis=1)
    log_prob = masked - log_denom[:, None]
    per_anchor = -np.where(pos, log_prob, 0.0).sum(axis=1) / n_pos
    loss = float(per_anchor.sum())
    if not with_grad:
        return loss
    soft = np.exp(log_prob)  # diagonal is exp(-inf) = 0
    d_logits = soft - pos / n_pos[:, None]
    d_z = (d_logits + d_logits.T) @ z / tau
    return loss, d_z


def hybrid_loss(ce, con, weights):
    return weights.w_ce * ce + weights.w_con * con
