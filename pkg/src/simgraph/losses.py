"""Metric-learning losses written in dissimilarity form, with gradients.

Both losses return ``(loss, grads)`` so they can be used with a hand-written
optimiser. Hinge kinks get subgradient 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, ShapeError


@dataclass
class MarginLossConfig:
    alpha_margin: float = 0.2
    beta_class: np.ndarray | None = None

    def __post_init__(self):
        if not self.alpha_margin > 0:
            raise ConfigError(f"margin alpha must be > 0, got {self.alpha_margin}")
        if self.beta_class is not None:
            self.beta_class = np.asarray(self.beta_class, dtype=np.float64)
            if not np.all(np.isfinite(self.beta_class)):
                raise ConfigError("class boundaries beta must be finite")

    @classmethod
    def uniform(cls, n_classes, alpha=0.2, beta=1.2) -> "MarginLossConfig":
        return cls(alpha, np.full(n_classes, float(beta)))


@dataclass
class ProxyAnchorConfig:
    scale: float = 16.0
    beta: float = 2.0
    tau: float = 0.2

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"proxy-anchor scale must be > 0, got {self.scale}")


def margin_loss(distances, positive, anchor_class, cfg: MarginLossConfig):
    """Mean hinge over positive pairs plus mean hinge over negative pairs.

    Returns ``(loss, grad_distances, grad_beta_class)``. A side with no
    pairs contributes nothing; having neither side is an error.
    """
    d = np.asarray(distances, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    cls = np.asarray(anchor_class, dtype=np.intp)
    if not d.shape == pos.shape == cls.shape:
        raise ShapeError(f"distances {d.shape}, positive {pos.shape}, classes {cls.shape} must match")
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 and n_neg == 0:
        raise ValueError("margin loss needs at least one positive or negative pair")
    beta = cfg.beta_class[cls]
    a = cfg.alpha_margin
    grad_d = np.zeros_like(d)
    grad_beta = np.zeros_like(cfg.beta_class)
    loss = 0.0
    if n_pos:
        slack = d[pos] - (beta[pos] - a)
        active = slack > 0
        loss += np.where(active, slack, 0.0).sum() / n_pos
        g = active / n_pos
        grad_d[pos] = g
        np.add.at(grad_beta, cls[pos], -g)
    if n_neg:
        slack = (beta[~pos] + a) - d[~pos]
        active = slack > 0
        loss += np.where(active, slack, 0.0).sum() / n_neg
        g = active / n_neg
        grad_d[~pos] = -g
        np.add.at(grad_beta, cls[~pos], g)
    return float(loss), grad_d, grad_beta


def _log1p_sum_exp(logits: np.ndarray):
    """Column-wise ``log(1 + sum exp(logits))`` and its softmax weights.

    Masked entries are ``-inf``; an all-masked column gives ``log 1 = 0``.
    """
    with np.errstate(divide="ignore"):
        padded = np.vstack([np.zeros((1, logits.shape[1])), logits])
    value = logsumexp(padded, axis=0)
    weights = np.exp(logits - value[None, :])
    return value, weights


def proxy_anchor_loss(dists, labels, cfg: ProxyAnchorConfig):
    """Proxy-anchor loss on a sample-to-proxy dissimilarity matrix ``(N, C)``.

    Returns ``(loss, grad_dists)``. Proxies without positives in the batch
    are left out of the positive term; if no proxy has a positive the term is
    dropped altogether.
    """
    d = np.asarray(dists, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if d.ndim != 2 or d.shape[1] < 1 or d.shape[0] != labels.shape[0]:
        raise ShapeError(f"need an (N, C>=1) distance matrix matching {labels.shape[0]} labels, got {d.shape}")
    if not np.all(np.isfinite(d)):
        raise ValueError("non-finite dissimilarity")
    n_proxies = d.shape[1]
    pos_mask = labels[:, None] == np.arange(n_proxies)[None, :]
    with_pos = pos_mask.any(axis=0)
    n_with_pos = int(with_pos.sum())
    a = cfg.scale

    pos_logits = np.where(pos_mask, a * (d - (cfg.beta - cfg.tau)), -np.inf)
    neg_logits = np.where(~pos_mask, -a * (d - (cfg.beta + cfg.tau)), -np.inf)
    pos_val, pos_w = _log1p_sum_exp(pos_logits)
    neg_val, neg_w = _log1p_sum_exp(neg_logits)

    loss = neg_val.sum() / n_proxies
    grad = -a * neg_w / n_proxies
    if n_with_pos:
        loss += pos_val[with_pos].sum() / n_with_pos
        grad = grad + a * pos_w / n_with_pos
    return float(loss), grad
