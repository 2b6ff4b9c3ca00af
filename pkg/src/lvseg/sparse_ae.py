"""Single-hidden-layer sparse autoencoder.

Trained on random image patches, its encoder weights become the convolution
filters of the detector; the same machinery pretrains the hidden layers of
the shape network.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .imaging import sigmoid
from .optim import OptimConfig, flatten, minimize, unflatten

log = logging.getLogger(__name__)

RHO_CLAMP = 1e-8


@dataclass
class AEParams:
    """Encoder ``W2 (hidden, visible)``, ``b2``; decoder ``W3 (visible, hidden)``, ``b3``."""

    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: np.ndarray

    def __post_init__(self):
        h, v = self.W2.shape
        if self.b2.shape != (h,) or self.W3.shape != (v, h) or self.b3.shape != (v,):
            raise ValueError("inconsistent autoencoder parameter shapes")

    @property
    def n_visible(self) -> int:
        return self.W2.shape[1]

    @property
    def n_hidden(self) -> int:
        return self.W2.shape[0]


@dataclass
class SparsityConfig:
    rho: float = 0.1
    beta: float = 3.0
    lam: float = 1e-4
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if self.beta < 0 or self.lam < 0:
            raise ValueError("beta and lam must be non-negative")


def init_ae(n_visible: int, n_hidden: int, rng: np.random.Generator) -> AEParams:
    r = np.sqrt(6.0 / (n_visible + n_hidden))
    return AEParams(
        W2=rng.uniform(-r, r, (n_hidden, n_visible)),
        b2=np.zeros(n_hidden),
        W3=rng.uniform(-r, r, (n_visible, n_hidden)),
        b3=np.zeros(n_visible),
    )


def sample_patches(images, count: int, patch_size: int = 11, seed: int = 0) -> np.ndarray:
    """Draw ``count`` random square patches, each unrolled row-major.

    An image is chosen uniformly, then a top-left corner uniformly among the
    valid positions. Returns an array of shape ``(count, patch_size**2)``.
    """
    images = [np.asarray(im, dtype=np.float64) for im in images]
    if not images:
        raise ValueError("no images to sample patches from")
    if count < 1:
        raise ValueError("count must be at least 1")
    for im in images:
        if min(im.shape) < patch_size:
            raise ValueError(f"image {im.shape} smaller than patch size {patch_size}")
    rng = np.random.default_rng(seed)
    out = np.empty((count, patch_size * patch_size))
    which = rng.integers(0, len(images), size=count)
    for n, k in enumerate(which):
        im = images[k]
        r = rng.integers(0, im.shape[0] - patch_size + 1)
        c = rng.integers(0, im.shape[1] - patch_size + 1)
        out[n] = im[r:r + patch_size, c:c + patch_size].ravel()
    return out


def ae_forward(params: AEParams, x):
    """Hidden activations and reconstruction for one vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    a2 = sigmoid(x @ params.W2.T + params.b2)
    y = sigmoid(a2 @ params.W3.T + params.b3)
    return a2, y


def kl_divergence(rho: float, rho_hat):
    return rho * np.log(rho / rho_hat) + (1 - rho) * np.log((1 - rho) / (1 - rho_hat))


def ae_cost_grad(params: AEParams, batch, cfg: SparsityConfig):
    """Sparse-autoencoder cost and its exact gradient.

    ``J = 1/(2N) sum |y - x|^2 + lam/2 (|W2|^2 + |W3|^2) + beta sum_j KL(rho || rho_hat_j)``
    where ``rho_hat_j`` is the batch-mean activation of hidden unit ``j``.
    Biases carry no weight decay.
    """
    X = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    n = X.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    a2, y = ae_forward(params, X)
    resid = y - X
    rho_hat = a2.mean(axis=0)
    clamped = (rho_hat < RHO_CLAMP) | (rho_hat > 1 - RHO_CLAMP)
    if clamped.any():
        log.warning("clamped %d saturated mean activations", int(clamped.sum()))
        rho_hat = np.clip(rho_hat, RHO_CLAMP, 1 - RHO_CLAMP)
    rho, beta, lam = cfg.rho, cfg.beta, cfg.lam
    cost = (0.5 / n) * np.sum(resid * resid) \
        + 0.5 * lam * (np.sum(params.W2 ** 2) + np.sum(params.W3 ** 2)) \
        + beta * np.sum(kl_divergence(rho, rho_hat))

    d3 = resid * y * (1 - y) / n
    sparse = beta * (-rho / rho_hat + (1 - rho) / (1 - rho_hat)) / n
    d2 = (d3 @ params.W3 + sparse) * a2 * (1 - a2)
    grads = AEParams(
        W2=d2.T @ X + lam * params.W2,
        b2=d2.sum(axis=0),
        W3=d3.T @ a2 + lam * params.W3,
        b3=d3.sum(axis=0),
    )
    return float(cost), grads


def train_ae(patches, cfg: SparsityConfig, n_hidden: int = 100, seed: int = 0,
             init: AEParams | None = None, history: list | None = None) -> AEParams:
    """Fit a sparse autoencoder to the rows of ``patches``.

    ``history``, if given, is extended with the cost at each accepted iterate.
    """
    X = np.asarray(patches, dtype=np.float64)
    if X.shape[0] < 2:
        raise ValueError("need at least two training vectors")
    params = init if init is not None else init_ae(X.shape[1], n_hidden, np.random.default_rng(seed))

    def fun(vec):
        cost, g = ae_cost_grad(unflatten(params, vec), X, cfg)
        return cost, flatten(g)

    res = minimize(fun, flatten(params), cfg.optim, stage="sparse autoencoder")
    if history is not None:
        history.extend(res.history)
    log.info("sparse AE %d->%d: J %.5g -> %.5g in %d iterations",
             X.shape[1], params.n_hidden, res.history[0], res.history[-1], res.iterations)
    return unflatten(params, res.x)


def mean_activation(params: AEParams, batch) -> np.ndarray:
    return ae_forward(params, batch)[0].mean(axis=0)


def export_filters(params: AEParams, size: int = 11):
    """Reshape encoder rows into ``size x size`` filters; the hidden bias becomes ``b0``."""
    if params.n_visible != size * size:
        raise ValueError(f"encoder input {params.n_visible} is not a {size}x{size} patch")
    return params.W2.reshape(params.n_hidden, size, size).copy(), params.b2.copy()
