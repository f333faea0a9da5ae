import math

import numpy as np
import pytest

from simgraph.errors import ShapeError
from simgraph.losses import MarginLossConfig, ProxyAnchorConfig, margin_loss, proxy_anchor_loss

H = 1e-5


def _rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def test_margin_boundaries_are_zero():
    cfg = MarginLossConfig.uniform(2, alpha=0.2, beta=1.2)
    assert margin_loss([1.0], [True], [0], cfg)[0] == 0.0
    assert margin_loss([1.4], [False], [1], cfg)[0] == 0.0
    with pytest.raises(ValueError):
        margin_loss([], [], [], cfg)
    with pytest.raises(ShapeError):
        margin_loss([1.0, 2.0], [True], [0], cfg)


def _margin_fd_case(rng):
    n, c = int(rng.integers(2, 12)), int(rng.integers(1, 4))
    d = rng.uniform(0.2, 2.2, n)
    pos = rng.random(n) < 0.5
    cls = rng.integers(0, c, n)
    cfg = MarginLossConfig(0.2, rng.uniform(0.8, 1.6, c))
    slack = np.where(pos, d - (cfg.beta_class[cls] - 0.2), (cfg.beta_class[cls] + 0.2) - d)
    return d, pos, cls, cfg, slack


def test_margin_gradients_finite_difference():
    rng = np.random.default_rng(0)
    checked = 0
    while checked < 100:
        d, pos, cls, cfg, slack = _margin_fd_case(rng)
        if np.min(np.abs(slack)) < 1e-3:
            continue
        loss, gd, gb = margin_loss(d, pos, cls, cfg)
        assert loss >= 0
        fd = np.array([(margin_loss(d + H * e, pos, cls, cfg)[0] - margin_loss(d - H * e, pos, cls, cfg)[0]) / (2 * H)
                       for e in np.eye(len(d))])
        assert _rel(gd, fd) <= 1e-4
        fb = []
        for e in np.eye(len(cfg.beta_class)):
            up = MarginLossConfig(0.2, cfg.beta_class + H * e)
            dn = MarginLossConfig(0.2, cfg.beta_class - H * e)
            fb.append((margin_loss(d, pos, cls, up)[0] - margin_loss(d, pos, cls, dn)[0]) / (2 * H))
        if np.any(np.abs(fb) > 0):
            assert _rel(gb, fb) <= 1e-4
        checked += 1


def test_proxy_anchor_examples():
    cfg = ProxyAnchorConfig(scale=16, beta=2.0, tau=0.2)
    loss, _ = proxy_anchor_loss(np.array([[1.8]]), [0], cfg)
    assert loss == pytest.approx(math.log(2.0), rel=1e-15)
    # Only positives: the negative term is sum log(1) = 0.
    loss, _ = proxy_anchor_loss(np.array([[1.8], [1.8]]), [0, 0], cfg)
    assert loss == pytest.approx(math.log(3.0), rel=1e-15)


def _textbook(d, labels, cfg):
    n, c = d.shape
    pos_terms, neg_terms, with_pos = 0.0, 0.0, 0
    for p in range(c):
        pos = [math.exp(cfg.scale * (d[i, p] - cfg.beta + cfg.tau)) for i in range(n) if labels[i] == p]
        neg = [math.exp(-cfg.scale * (d[i, p] - cfg.beta - cfg.tau)) for i in range(n) if labels[i] != p]
        if pos:
            with_pos += 1
            pos_terms += math.log(1 + sum(pos))
        neg_terms += math.log(1 + sum(neg))
    return (pos_terms / with_pos if with_pos else 0.0) + neg_terms / c


def test_proxy_anchor_textbook_and_gradients():
    rng = np.random.default_rng(1)
    cfg = ProxyAnchorConfig(scale=4.0, beta=2.0, tau=0.2)
    for _ in range(100):
        d = rng.uniform(0.0, 4.0, (4, 3))
        labels = rng.integers(0, 3, 4)
        loss, g = proxy_anchor_loss(d, labels, cfg)
        assert loss == pytest.approx(_textbook(d, labels, cfg), rel=1e-12)
        fd = np.zeros_like(d)
        for idx in np.ndindex(*d.shape):
            e = np.zeros_like(d)
            e[idx] = H
            fd[idx] = (proxy_anchor_loss(d + e, labels, cfg)[0] - proxy_anchor_loss(d - e, labels, cfg)[0]) / (2 * H)
        assert _rel(g, fd) <= 1e-4


def test_proxy_anchor_overflow_safe():
    cfg = ProxyAnchorConfig(scale=175.0, beta=2.0, tau=0.2)
    d = np.array([[4.0, 0.0], [0.0, 4.0]])  # scale * d = 700
    loss, g = proxy_anchor_loss(d, [0, 1], cfg)
    assert np.isfinite(loss) and np.all(np.isfinite(g)) and loss > 0
    with pytest.raises(ValueError):
        proxy_anchor_loss(np.array([[np.nan]]), [0], cfg)
