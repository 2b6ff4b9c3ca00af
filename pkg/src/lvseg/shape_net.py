"""Stacked autoencoder that maps a 64x64 ROI to an LV boundary mask."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .imaging import DimensionError, as_mask, rasterize_ring, resample, sigmoid
from .optim import OptimConfig, flatten, minimize, unflatten
from .sparse_ae import SparsityConfig, train_ae

log = logging.getLogger(__name__)

SIDE = 64
HIDDEN = 100
FALLBACK_RADIUS = 12.0


class ShapeInferenceError(RuntimeError):
    """The thresholded network output contains no usable shape."""


@dataclass
class StackedAEParams:
    W4: np.ndarray
    b4: np.ndarray
    W5: np.ndarray
    b5: np.ndarray
    W6: np.ndarray
    b6: np.ndarray

    def __post_init__(self):
        h1, n = self.W4.shape
        h2 = self.W5.shape[0]
        ok = (self.b4.shape == (h1,) and self.W5.shape == (h2, h1) and self.b5.shape == (h2,)
              and self.W6.shape[1] == h2 and self.b6.shape == (self.W6.shape[0],))
        if not ok:
            raise ValueError("inconsistent stacked-autoencoder shapes")


@dataclass
class ShapeConfig:
    """Hyperparameters for the three training stages of one shape network."""

    pretrain: SparsityConfig = field(default_factory=lambda: SparsityConfig(lam=3e-3))
    lam: float = 1e-4
    hidden: tuple[int, int] = (HIDDEN, HIDDEN)
    output_optim: OptimConfig = field(default_factory=OptimConfig)
    finetune_optim: OptimConfig = field(default_factory=OptimConfig)


@dataclass
class ShapeInference:
    ring: np.ndarray
    filled: np.ndarray
    probabilities: np.ndarray
    used_hull: bool = False


def _hidden(params: StackedAEParams, X):
    h1 = sigmoid(X @ params.W4.T + params.b4)
    h2 = sigmoid(h1 @ params.W5.T + params.b5)
    return h1, h2


def sae_forward(params: StackedAEParams, x_s) -> np.ndarray:
    """``y_s = f(W6 f(W5 f(W4 x + b4) + b5) + b6)`` for a vector or a batch of rows."""
    X = np.asarray(x_s, dtype=np.float64)
    if X.shape[-1] != params.W4.shape[1]:
        raise DimensionError(f"input length {X.shape[-1]} != {params.W4.shape[1]}")
    _, h2 = _hidden(params, X)
    return sigmoid(h2 @ params.W6.T + params.b6)


def layerwise_pretrain(inputs, cfg: ShapeConfig | None = None, seed: int = 0,
                       history: list | None = None):
    """Greedy unsupervised pretraining of the two hidden layers.

    A sparse AE is fit to the inputs; its hidden code trains a second sparse
    AE. Decoders are discarded. Returns ``(W4, b4, W5, b5)``.
    """
    cfg = cfg or ShapeConfig()
    X = np.asarray(inputs, dtype=np.float64).reshape(len(inputs), -1)
    if len(X) == 0:
        raise ValueError("empty pretraining set")
    ae1 = train_ae(X, cfg.pretrain, n_hidden=cfg.hidden[0], seed=seed, history=history)
    H1 = sigmoid(X @ ae1.W2.T + ae1.b2)
    ae2 = train_ae(H1, cfg.pretrain, n_hidden=cfg.hidden[1], seed=seed + 1, history=history)
    return ae1.W2, ae1.b2, ae2.W2, ae2.b2


def output_cost_grad(W6, b6, h2, labels, lam: float):
    n = h2.shape[0]
    y = sigmoid(h2 @ W6.T + b6)
    resid = y - labels
    cost = 0.5 / n * np.sum(resid * resid) + 0.5 * lam * np.sum(W6 * W6)
    dy = resid * y * (1 - y) / n
    return float(cost), dy.T @ h2 + lam * W6, dy.sum(axis=0)


def train_output_layer(params: StackedAEParams, inputs, labels, lam: float = 1e-4,
                       optim: OptimConfig | None = None, history: list | None = None) -> StackedAEParams:
    """Supervised fit of ``W6, b6`` with the hidden layers frozen."""
    optim = optim or OptimConfig()
    X = np.asarray(inputs, dtype=np.float64)
    L = np.asarray(labels, dtype=np.float64)
    _, h2 = _hidden(params, X)
    n_w = params.W6.size

    def fun(vec):
        cost, gW, gb = output_cost_grad(vec[:n_w].reshape(params.W6.shape), vec[n_w:], h2, L, lam)
        return cost, np.concatenate([gW.ravel(), gb])

    res = minimize(fun, np.concatenate([params.W6.ravel(), params.b6]), optim, stage="shape output layer")
    if history is not None:
        history.extend(res.history)
    return replace(params, W6=res.x[:n_w].reshape(params.W6.shape).copy(), b6=res.x[n_w:].copy())


def sae_cost_grad(params: StackedAEParams, inputs, labels, lam: float = 1e-4):
    """Supervised cost of the whole stack (decay on all three weight matrices) and its gradient."""
    X = np.asarray(inputs, dtype=np.float64)
    L = np.asarray(labels, dtype=np.float64)
    n = X.shape[0]
    h1, h2 = _hidden(params, X)
    y = sigmoid(h2 @ params.W6.T + params.b6)
    resid = y - L
    cost = 0.5 / n * np.sum(resid * resid) + 0.5 * lam * (
        np.sum(params.W4 ** 2) + np.sum(params.W5 ** 2) + np.sum(params.W6 ** 2))
    d3 = resid * y * (1 - y) / n
    d2 = (d3 @ params.W6) * h2 * (1 - h2)
    d1 = (d2 @ params.W5) * h1 * (1 - h1)
    grads = StackedAEParams(
        W4=d1.T @ X + lam * params.W4, b4=d1.sum(axis=0),
        W5=d2.T @ h1 + lam * params.W5, b5=d2.sum(axis=0),
        W6=d3.T @ h2 + lam * params.W6, b6=d3.sum(axis=0),
    )
    return float(cost), grads


def finetune_sae(params: StackedAEParams, inputs, labels, lam: float = 1e-4,
                 optim: OptimConfig | None = None, history: list | None = None) -> StackedAEParams:
    optim = optim or OptimConfig()
    X = np.asarray(inputs, dtype=np.float64)
    L = np.asarray(labels, dtype=np.float64)

    def fun(vec):
        cost, g = sae_cost_grad(unflatten(params, vec), X, L, lam)
        return cost, flatten(g)

    res = minimize(fun, flatten(params), optim, stage="shape fine-tuning")
    if history is not None:
        history.extend(res.history)
    return unflatten(params, res.x)


def train_shape_net(inputs, labels, cfg: ShapeConfig | None = None, seed: int = 0,
                    history: dict | None = None) -> StackedAEParams:
    """All three stages: layer-wise pretraining, output layer, fine-tuning."""
    cfg = cfg or ShapeConfig()
    hist = history if history is not None else {}
    X = np.asarray(inputs, dtype=np.float64).reshape(len(inputs), -1)
    L = np.asarray(labels, dtype=np.float64).reshape(len(labels), -1)
    W4, b4, W5, b5 = layerwise_pretrain(X, cfg, seed, history=hist.setdefault("pretrain", []))
    r = np.sqrt(6.0 / (L.shape[1] + cfg.hidden[1]))
    rng = np.random.default_rng(seed + 2)
    params = StackedAEParams(W4, b4, W5, b5, rng.uniform(-r, r, (L.shape[1], cfg.hidden[1])), np.zeros(L.shape[1]))
    params = train_output_layer(params, X, L, cfg.lam, cfg.output_optim, history=hist.setdefault("output", []))
    return finetune_sae(params, X, L, cfg.lam, cfg.finetune_optim, history=hist.setdefault("finetune", []))


# --------------------------------------------------------------------------
# labels and inference


def ring_label(points64, side: int = SIDE) -> np.ndarray:
    """Boundary-ring training mask: the contour polyline dilated by one pixel."""
    return rasterize_ring(points64, (side, side), closed=True, thickness=1)


def ring_to_region(ring) -> tuple[np.ndarray, bool]:
    """Convert a boundary ring into a filled region.

    Closing bridges small gaps, holes are filled, and the result is eroded
    once so its edge follows the middle of the ring. If the ring is still open
    the convex hull of the ring pixels is used instead (second return value).
    """
    from skimage.morphology import convex_hull_image

    ring = as_mask(ring)
    cross = ndimage.generate_binary_structure(2, 1)
    closed = ndimage.binary_closing(ring, structure=cross, iterations=2, border_value=0)
    filled = ndimage.binary_fill_holes(closed)
    used_hull = False
    if filled.sum() <= closed.sum():
        filled = convex_hull_image(ring)
        used_hull = True
    region = ndimage.binary_erosion(filled, structure=cross, border_value=0)
    if not region.any():
        region = filled
    labels, n = ndimage.label(region)
    if n > 1:
        sizes = ndimage.sum(region, labels, range(1, n + 1))
        region = labels == (int(np.argmax(sizes)) + 1)
    return region, used_hull


def infer_shape(params: StackedAEParams, sub_image, threshold: float = 0.5) -> ShapeInference:
    """Run the shape network on an ROI sub-image (resized to 64x64)."""
    sub = np.asarray(sub_image, dtype=np.float64)
    side = int(round(np.sqrt(params.W4.shape[1])))
    x = resample(sub, side, side, "bilinear").ravel()
    y = sae_forward(params, x).reshape(side, side)
    ring = y > threshold
    if ring.sum() < 3:
        raise ShapeInferenceError("thresholded network output is (nearly) empty")
    filled, used_hull = ring_to_region(ring)
    if not filled.any():
        raise ShapeInferenceError("could not form a region from the inferred ring")
    return ShapeInference(ring, filled, y, used_hull)


def fallback_disk(side: int = SIDE, radius: float = FALLBACK_RADIUS) -> np.ndarray:
    """Centered disk prior used when shape inference fails."""
    yy, xx = np.mgrid[0:side, 0:side]
    c = (side - 1) / 2.0
    return (xx - c) ** 2 + (yy - c) ** 2 <= radius ** 2


