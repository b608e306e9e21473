"""Forward and backward passes through an expert pool, TEIM and embeddings.

A *pool* is the ordered list of textural experts visible at one site; its
positions double as expert ids for tie-breaking. A :class:`Head` is one
verification model reading from the pool: the anchor expert it owns, its
embedding layers, and (optionally) the pool positions TEIM may route from.
Training and deployment both go through :func:`head_templates` /
:func:`objective`, so enabling TEIM with (alpha, beta) = (1, 0) reproduces
the TEIM-free pipeline bit for bit.
"""

from dataclasses import dataclass, field

import numpy as np

from .losses import cross_entropy, hybrid_loss, sup_contrastive
from .models import embed_backward, embed_batch, expert_backward, expert_forward_batch
from .teim import route_batch


@dataclass
class Head:
    anchor: int
    embedding: object  # ParamVector
    candidates: tuple = None  # pool positions routed by TEIM; None disables TEIM


@dataclass
class HeadTerms:
    ce: float
    con: float
    loss: float


@dataclass
class ObjectiveResult:
    loss: float
    terms: list
    embedding_grads: list
    expert_grads: dict = field(default_factory=dict)


def _needed_positions(heads):
    needed = set()
    for head in heads:
        needed.add(head.anchor)
        if head.candidates is not None:
            needed.update(head.candidates)
    return sorted(needed)


def _enhanced(head, feats, k):
    anchor = feats[head.anchor]
    if head.candidates is None:
        return anchor, None
    cand = np.stack([feats[c] for c in head.candidates])
    selected, side = route_batch(anchor, cand, k)
    alpha = head.embedding["alpha"]
    beta = head.embedding["beta"]
    return alpha * anchor + beta * side, (selected, side)


def pool_features(experts, expert_cfg, images, positions, cache_positions=()):
    feats, caches = {}, {}
    for pos in positions:
        keep = pos in cache_positions
        feats[pos], cache = expert_forward_batch(experts[pos], expert_cfg, images, keep_cache=keep)
        if keep:
            caches[pos] = cache
    return feats, caches


def head_templates(experts, expert_cfg, head, images, k):
    """Unit templates (B, d_e) produced by one head for a batch of images."""
    feats, _ = pool_features(experts, expert_cfg, images, _needed_positions([head]))
    enhanced, _ = _enhanced(head, feats, k)
    _, template, _ = embed_batch(head.embedding, enhanced)
    return template


def objective(experts, expert_cfg, heads, images, labels, k, tau, weights, expert_grads=()):
    """Summed hybrid loss of every head, with gradients.

    ``expert_grads`` names the pool positions whose parameters need gradients;
    frozen experts are left out and cost only a forward pass.
    """
    feats, caches = pool_features(experts, expert_cfg, images, _needed_positions(heads), set(expert_grads))
    d_feats = {pos: np.zeros_like(feats[pos]) for pos in expert_grads}
    total = 0.0
    terms, emb_grads = [], []
    for head in heads:
        enhanced, routing = _enhanced(head, feats, k)
        logits, template, cache = embed_batch(head.embedding, enhanced, keep_cache=True)
        ce, d_logits = cross_entropy(logits, labels, with_grad=True)
        con, d_template = sup_contrastive(template, labels, tau, with_grad=True)
        loss = hybrid_loss(ce, con, weights)
        total += loss
        terms.append(HeadTerms(ce, con, loss))
        grad, d_enh = embed_backward(head.embedding, cache, weights.w_ce * d_logits, weights.w_con * d_template)
        if routing is None:
            if head.anchor in d_feats:
                d_feats[head.anchor] += d_enh
        else:
            selected, side = routing
            alpha = head.embedding["alpha"]
            beta = head.embedding["beta"]
            grad["alpha"] = np.sum(d_enh * feats[head.anchor])
            grad["beta"] = np.sum(d_enh * side)
            if head.anchor in d_feats:
                d_feats[head.anchor] += alpha * d_enh
            d_side = beta * d_enh / k
            batch = np.arange(d_enh.shape[0])
            for j in range(k):
                chosen = np.asarray(head.candidates)[selected[j]]
                for pos in set(chosen.tolist()) & d_feats.keys():
                    rows = batch[chosen == pos]
                    d_feats[pos][rows] += d_side[rows]
        emb_grads.append(grad)
    ex_grads = {pos: expert_backward(expert_cfg, caches[pos], d_feats[pos]) for pos in expert_grads}
    return ObjectiveResult(total, terms, emb_grads, ex_grads)
