"""Split objective: level losses train the projection heads (and loss
parameters), the loss on the rectified overall dissimilarity trains only the
gate parameters.

All gradients are analytic. The construction side differentiates through
embedding normalization; the inference side treats nodes, edges and CAM
spreads as constants and differentiates through the rectification recursion
and the sigmoid gates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .config import Config
from .errors import ConfigError, TrainingError
from .graph import EdgeStore, batch_edge_update
from .io import Checkpoint
from .inference import InferenceParams, mixing_matrices, rectify_arrays
from .losses import MarginLossConfig, ProxyAnchorConfig, margin_loss, proxy_anchor_loss
from .model import Encoded, FeatureCache, SimilarityModel, encode


# -- optimiser ----------------------------------------------------------------

@dataclass
class AdamW:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def update(self, name, value, grad, moments: dict, t: int) -> np.ndarray:
        m, v = moments.get(name, (np.zeros_like(value), np.zeros_like(value)))
        m = self.beta1 * m + (1 - self.beta1) * grad
        v = self.beta2 * v + (1 - self.beta2) * grad * grad
        moments[name] = (m, v)
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        return value - self.lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * value)


# -- state --------------------------------------------------------------------

@dataclass
class TrainState:
    projections: list[np.ndarray]
    loss_params: dict[str, np.ndarray]
    inference: InferenceParams
    edges: EdgeStore
    classes: np.ndarray  # training label values, sorted
    moments: dict = field(default_factory=dict)
    step: int = 0
    seed: int = 0

    @classmethod
    def initial(cls, cfg: Config, level_shapes, classes) -> "TrainState":
        classes = np.unique(np.asarray(classes))
        model = SimilarityModel.initial(level_shapes, cfg.r, cfg.k, cfg.gamma, cfg.seed)
        rng = np.random.default_rng([cfg.seed, 11])
        if cfg.loss == "margin":
            loss_params = {f"margin_beta.{l + 1}": np.full(len(classes), cfg.margin_beta)
                           for l in range(len(level_shapes))}
        else:
            loss_params = {f"proxy.{l + 1}": rng.standard_normal((len(classes), cfg.r))
                           for l in range(len(level_shapes))}
        return cls(model.projections, loss_params, model.params, model.edges, classes, seed=cfg.seed)

    def theta1(self) -> dict[str, np.ndarray]:
        blocks = {f"projection.{l + 1}": w for l, w in enumerate(self.projections)}
        blocks.update(self.loss_params)
        return blocks

    def theta2(self) -> dict[str, np.ndarray]:
        return {"alpha": self.inference.alpha, "beta": self.inference.beta}

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.inference.copy(), self.edges.copy(),
                          {n: v.copy() for n, v in self.theta1().items()}, self.step)

    def set_theta1(self, blocks):
        self.projections = [blocks[f"projection.{l + 1}"] for l in range(len(self.projections))]
        self.loss_params = {k: blocks[k] for k in self.loss_params}

    def set_theta2(self, blocks):
        self.inference = InferenceParams(blocks["alpha"], blocks["beta"], self.inference.k)

    def model(self) -> SimilarityModel:
        return SimilarityModel(self.projections, self.inference, self.edges)

    def class_index(self, labels) -> np.ndarray:
        idx = np.searchsorted(self.classes, labels)
        if np.any(idx >= len(self.classes)) or np.any(self.classes[np.minimum(idx, len(self.classes) - 1)] != labels):
            raise ConfigError("batch contains labels unseen at initialisation")
        return idx


# -- construction side (theta_1) ----------------------------------------------

def _normalize_backward(grad_unit, unit, raw):
    norm = np.linalg.norm(raw, axis=-1, keepdims=True)
    return (grad_unit - (grad_unit * unit).sum(axis=-1, keepdims=True) * unit) / norm


def _pair_index(n):
    i, j = np.nonzero(~np.eye(n, dtype=bool))
    return i, j


def _sqrt_distance(d):
    dist = np.sqrt(np.maximum(d, 0.0))
    inv = np.where(dist > 0, 0.5 / np.where(dist > 0, dist, 1.0), 0.0)
    return dist, inv


def margin_level_terms(unit, labels_idx, beta_class, alpha):
    """Margin loss on ``sqrt(d^l)`` over all ordered pairs of a batch.

    Returns ``(loss, grad_unit, grad_beta)``.
    """
    n = unit.shape[0]
    i, j = _pair_index(n)
    diff = unit[i] - unit[j]
    d = (diff ** 2).sum(axis=-1)
    dist, inv = _sqrt_distance(d)
    cfg = MarginLossConfig(alpha, beta_class)
    loss, g_dist, g_beta = margin_loss(dist, labels_idx[i] == labels_idx[j], labels_idx[i], cfg)
    g = np.zeros((n, n))
    g[i, j] = g_dist * inv
    s = g + g.T
    grad_unit = 2.0 * (s.sum(axis=1)[:, None] * unit - s @ unit)
    return loss, grad_unit, g_beta


def proxy_level_terms(unit, labels_idx, proxies, pa: ProxyAnchorConfig):
    """Proxy-anchor loss on squared distances to normalized proxies."""
    pnorm = np.linalg.norm(proxies, axis=1, keepdims=True)
    punit = proxies / pnorm
    diff = unit[:, None, :] - punit[None, :, :]
    d = (diff ** 2).sum(axis=-1)
    loss, g = proxy_anchor_loss(d, labels_idx, pa)
    grad_unit = 2.0 * (g[:, :, None] * diff).sum(axis=1)
    grad_punit = -2.0 * (g[:, :, None] * diff).sum(axis=0)
    grad_proxies = _normalize_backward(grad_punit, punit, proxies)
    return loss, grad_unit, grad_proxies


def level_objective(cache: FeatureCache, enc: Encoded, state: TrainState, cfg: Config):
    """Weighted sum of per-level losses and its gradient for every theta_1 block."""
    labels_idx = state.class_index(cache.labels)
    grads = {name: np.zeros_like(v) for name, v in state.theta1().items()}
    losses = []
    levels = [len(enc.unit) - 1] if cfg.top_level_only else range(len(enc.unit))
    for l in levels:
        w = cfg.weights[l]
        if cfg.loss == "margin":
            name = f"margin_beta.{l + 1}"
            loss, g_unit, g_beta = margin_level_terms(
                enc.unit[l], labels_idx, state.loss_params[name], cfg.margin_alpha)
            grads[name] += w * g_beta
        else:
            pa = ProxyAnchorConfig(cfg.pa_scale, cfg.pa_beta, cfg.pa_tau)
            name = f"proxy.{l + 1}"
            loss, g_unit, g_prox = proxy_level_terms(enc.unit[l], labels_idx, state.loss_params[name], pa)
            grads[name] += w * g_prox
        g_raw = _normalize_backward(g_unit, enc.unit[l], enc.raw[l])
        grads[f"projection.{l + 1}"] += w * (g_raw.T @ cache.pooled[l])
        losses.append(loss)
    total = float(sum(cfg.weights[l] * v for l, v in zip(levels, losses)))
    return total, grads, losses


# -- inference side (theta_2) -------------------------------------------------

def dhat_dgates(deltas, gates, mixing, rectified=None):
    """Per-pair derivative of the overall dissimilarity w.r.t. each gate.

    Uses the linear structure of the recursion: with ``g^L = 1`` and
    ``g^{l-1} = (g^l * (1 - p^l)) W~^l``, the derivative w.r.t. ``p^l`` is
    ``g^l * (delta^l - W~^l rect^{l-1})``.
    """
    if rectified is None:
        rectified = rectify_arrays(deltas, gates, mixing).values
    g = np.ones_like(np.asarray(deltas[-1], dtype=np.float64))
    out = [None] * len(gates)
    for li in range(len(gates) - 1, -1, -1):
        lvl = li + 1  # list index of level li + 2
        w = np.asarray(mixing[li])
        p = gates[li]
        out[li] = g * (deltas[lvl] - rectified[lvl - 1] @ w.T)
        g = (g * (1.0 - p)) @ w
    return out


def analytic_theta2_gradients(deltas, gates, etas, mixing, upstream):
    """Gradient of a loss on the overall dissimilarity w.r.t. (alpha, beta).

    ``deltas`` are L arrays ``(..., r)``; ``gates``/``etas`` the L-1 gated
    levels; ``upstream`` is ``dLoss/d d_hat`` with the leading batch shape.
    Only the sigmoid path carries gradient: ``dp/dalpha = p(1-p) eta`` and
    ``dp/dbeta = p(1-p)``.
    """
    d_gates = dhat_dgates(deltas, gates, mixing)
    up = np.asarray(upstream, dtype=np.float64)[..., None]
    batch_axes = tuple(range(up.ndim - 1))
    grad_alpha, grad_beta = [], []
    for dp, p, eta in zip(d_gates, gates, etas):
        local = up * dp * p * (1.0 - p)
        grad_beta.append(local.sum(axis=batch_axes))
        grad_alpha.append((local * eta).sum(axis=batch_axes))
    return np.array(grad_alpha), np.array(grad_beta)


def _gates(params: InferenceParams, etas):
    return [expit(params.alpha[l] * eta + params.beta[l]) for l, eta in enumerate(etas)]


def overall_pair_terms(enc: Encoded, state: TrainState, cfg: Config):
    """Nodes and CAM-spread products of every sample pair (or sample/proxy pair)."""
    if cfg.loss == "margin":
        deltas = [(u[:, None, :] - u[None, :, :]) ** 2 for u in enc.unit]
        etas = [s[:, None, :] * s[None, :, :] for s in enc.spread]
    else:
        proxies = [state.loss_params[f"proxy.{l + 1}"] for l in range(len(enc.unit))]
        punit = [p / np.linalg.norm(p, axis=1, keepdims=True) for p in proxies]
        deltas = [(u[:, None, :] - p[None, :, :]) ** 2 for u, p in zip(enc.unit, punit)]
        n_prox = punit[0].shape[0]
        # A proxy has no CAM; its spread is taken equal to the sample's own.
        etas = [np.repeat((s * s)[:, None, :], n_prox, axis=1) for s in enc.spread]
    return deltas, etas


def overall_loss(d_hat, labels_idx, state: TrainState, cfg: Config):
    """Loss on overall dissimilarities and its derivative, same shape as ``d_hat``."""
    if cfg.loss == "margin":
        n = d_hat.shape[0]
        i, j = _pair_index(n)
        dist, inv = _sqrt_distance(d_hat[i, j])
        mcfg = MarginLossConfig.uniform(len(state.classes), cfg.margin_alpha, cfg.margin_beta)
        loss, g_dist, _ = margin_loss(dist, labels_idx[i] == labels_idx[j], labels_idx[i], mcfg)
        grad = np.zeros_like(d_hat)
        grad[i, j] = g_dist * inv
        return loss, grad
    pa = ProxyAnchorConfig(cfg.pa_scale, cfg.pa_beta, cfg.pa_tau)
    return proxy_anchor_loss(d_hat, labels_idx, pa)


def overall_objective(cache: FeatureCache, enc: Encoded, state: TrainState, cfg: Config,
                      params: InferenceParams | None = None):
    params = state.inference if params is None else params
    labels_idx = state.class_index(cache.labels)
    mixing = mixing_matrices(state.edges, params.k)
    deltas, etas = overall_pair_terms(enc, state, cfg)
    if not etas:
        d_hat = deltas[0].sum(axis=-1)
        loss, _ = overall_loss(d_hat, labels_idx, state, cfg)
        return loss, {"alpha": np.zeros_like(params.alpha), "beta": np.zeros_like(params.beta)}
    gates = _gates(params, etas)
    d_hat = rectify_arrays(deltas, gates, mixing).overall
    loss, upstream = overall_loss(d_hat, labels_idx, state, cfg)
    ga, gb = analytic_theta2_gradients(deltas, gates, etas, mixing, upstream)
    return loss, {"alpha": ga, "beta": gb}


# -- one optimisation step ----------------------------------------------------

def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingError(name, f"{bad} non-finite entries")


def objective_step(cache: FeatureCache, state: TrainState, cfg: Config):
    """Forward pass, both gradient halves, AdamW update, then edge update.

    Mutates and returns ``state`` along with a metrics dict. A disabled loss
    leaves its parameter block untouched (no weight decay either).
    """
    enc = encode(cache, state.projections, with_correlations=True)
    metrics = {}
    g1 = g2 = None
    if cfg.use_level_loss:
        metrics["level_loss"], g1, metrics["level_losses"] = level_objective(cache, enc, state, cfg)
        _check_finite(g1)
    if cfg.use_overall_loss:
        metrics["overall_loss"], g2 = overall_objective(cache, enc, state, cfg)
        _check_finite(g2)

    t = state.step + 1
    if g1 is not None:
        opt = AdamW(cfg.lr, cfg.weight_decay)
        blocks = state.theta1()
        state.set_theta1({n: opt.update(n, v, g1[n], state.moments, t) for n, v in blocks.items()})
    if g2 is not None:
        opt = AdamW(cfg.lr_inference, cfg.weight_decay)
        blocks = state.theta2()
        state.set_theta2({n: opt.update(n, v, g2[n], state.moments, t) for n, v in blocks.items()})
    if enc.correlations is not None:
        state.edges = batch_edge_update(state.edges, enc.correlations)
    state.step = t
    return state, metrics


def batch_sampler(labels, batch_size, classes_per_batch, seed, epoch=0):
    """Class-balanced batches for one epoch.

    Classes are visited in shuffled rounds; inside a class, samples are drawn
    from a shuffled queue that is refilled only when exhausted, so no sample
    repeats before all of its classmates have been used.
    """
    labels = np.asarray(labels)
    if classes_per_batch < 1 or batch_size % classes_per_batch:
        raise ConfigError(f"batch_size {batch_size} is not a multiple of classes_per_batch {classes_per_batch}")
    per_class = batch_size // classes_per_batch
    classes = np.unique(labels)
    if len(classes) < classes_per_batch:
        raise ConfigError(f"dataset has {len(classes)} classes, batches need {classes_per_batch}")
    members = {c: np.flatnonzero(labels == c) for c in classes}
    small = [c for c, m in members.items() if len(m) < per_class]
    if small:
        raise ConfigError(f"classes {small} have fewer than {per_class} samples")
    rng = np.random.default_rng([seed, epoch])
    queues = {c: list(rng.permutation(members[c])) for c in classes}
    order: list = []
    n_batches = max(1, len(labels) // batch_size)
    for _ in range(n_batches):
        chosen = []
        while len(chosen) < classes_per_batch:
            if not order:
                order = list(rng.permutation(classes))
            c = order.pop()
            if c not in chosen:
                chosen.append(c)
        batch = []
        for c in chosen:
            if len(queues[c]) < per_class:
                queues[c] = queues[c] + [i for i in rng.permutation(members[c]) if i not in queues[c]]
            batch.extend(queues[c][:per_class])
            queues[c] = queues[c][per_class:]
        yield np.array(batch)


def fit(cache: FeatureCache, cfg: Config, state: TrainState | None = None, log=None) -> TrainState:
    if state is None:
        state = TrainState.initial(cfg, cache.level_shapes, cache.labels)
    for epoch in range(cfg.epochs):
        for idx in batch_sampler(cache.labels, cfg.batch_size, cfg.classes_per_batch, cfg.seed, epoch):
            state, metrics = objective_step(cache.subset(idx), state, cfg)
        if log is not None:
            log(epoch, state, metrics)
    return state


def model_from_checkpoint(ckpt: Checkpoint) -> SimilarityModel:
    """Rebuild the scoring model from a checkpoint's projection tensors."""
    names = sorted((n for n in ckpt.tensors if n.startswith("projection.")),
                   key=lambda n: int(n.split(".")[1]))
    if not names:
        raise ConfigError("checkpoint holds no projection tensors")
    projections = [ckpt.tensors[n] for n in names]
    if len(projections) != ckpt.params.n_levels:
        raise ConfigError(f"checkpoint has {len(projections)} projections for "
                          f"{ckpt.params.n_levels} gate levels")
    return SimilarityModel(projections, ckpt.params, ckpt.edges)
