"""Convolutional LV localization network.

Pipeline per image: valid convolution with the pretrained filters, sigmoid,
non-overlapping average pooling, unrolling (filter-major, row-major inside
each pooled map) and a fully connected logistic layer producing a coarse
ROI mask. Training is two-stage: the output layer alone, then the whole
network.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import Crop, DimensionError, centroid, crop, map_coords, resample, sigmoid
from .optim import OptimConfig, flatten, minimize, unflatten

log = logging.getLogger(__name__)

INPUT_SIDE = 64
POOL = 6
OUT_SIDE = 32
ROI_SIDE = 100
CHUNK = 32


@dataclass
class DetectorParams:
    filters: np.ndarray  # (L, k, k)
    b0: np.ndarray       # (L,)
    W1: np.ndarray       # (n_out, L * m * m)
    b1: np.ndarray       # (n_out,)

    def __post_init__(self):
        n_f = self.filters.shape[0]
        if self.filters.ndim != 3 or self.b0.shape != (n_f,):
            raise ValueError("filters must be (L, k, k) with a length-L bias")
        if self.W1.ndim != 2 or self.b1.shape != (self.W1.shape[0],):
            raise ValueError("output layer shapes inconsistent")
        if self.W1.shape[1] % n_f:
            raise ValueError("W1 input width is not a multiple of the filter count")


@dataclass
class RoiLabel:
    mask: np.ndarray            # (out_side, out_side) bool
    center: tuple[float, float]

    @property
    def vector(self) -> np.ndarray:
        return self.mask.ravel().astype(np.float64)


def init_output_layer(filters, b0, n_in: int, n_out: int, rng: np.random.Generator) -> DetectorParams:
    r = np.sqrt(6.0 / (n_in + n_out))
    return DetectorParams(np.asarray(filters, float).copy(), np.asarray(b0, float).copy(),
                          rng.uniform(-r, r, (n_out, n_in)), np.zeros(n_out))


def _im2col(images: np.ndarray, k: int) -> np.ndarray:
    win = sliding_window_view(images, (k, k), axis=(1, 2))  # (N, Hc, Wc, k, k)
    return win.reshape(-1, k * k)


def _conv_pool(filters, b0, images, pool):
    """Conv + sigmoid + pool for a chunk; returns (cols, C, p) with C shaped (N, Hc, Wc, L)."""
    n, h, w = images.shape
    n_f, k, _ = filters.shape
    hc, wc = h - k + 1, w - k + 1
    if hc < 1 or wc < 1:
        raise DimensionError(f"filters {k}x{k} larger than input {h}x{w}")
    if hc % pool or wc % pool:
        raise DimensionError(f"conv map {hc}x{wc} not divisible by pool {pool}")
    cols = _im2col(images, k)
    C = sigmoid(cols @ filters.reshape(n_f, -1).T + b0).reshape(n, hc, wc, n_f)
    m_h, m_w = hc // pool, wc // pool
    P = C.reshape(n, m_h, pool, m_w, pool, n_f).mean(axis=(2, 4))
    p = P.transpose(0, 3, 1, 2).reshape(n, -1)
    return cols, C, p


def pooled_features(filters, b0, images, pool: int = POOL) -> np.ndarray:
    """Unrolled pooled feature vectors ``p`` for a stack of images."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    out = [_conv_pool(filters, b0, images[s:s + CHUNK], pool)[2] for s in range(0, len(images), CHUNK)]
    return np.concatenate(out, axis=0)


def detector_forward(params: DetectorParams, image64, pool: int = POOL) -> np.ndarray:
    """Output mask probabilities ``y_c`` for one input image (or a stack)."""
    img = np.asarray(image64, dtype=np.float64)
    single = img.ndim == 2
    stack = img[None] if single else img
    p = pooled_features(params.filters, params.b0, stack, pool)
    if p.shape[1] != params.W1.shape[1]:
        raise DimensionError(f"pooled feature length {p.shape[1]} != W1 width {params.W1.shape[1]}")
    y = sigmoid(p @ params.W1.T + params.b1)
    return y[0] if single else y


def output_layer_cost_grad(W1, b1, p, labels, lam: float):
    """Squared-error cost of the logistic output layer on fixed features, with decay on ``W1``."""
    n = p.shape[0]
    y = sigmoid(p @ W1.T + b1)
    resid = y - labels
    cost = 0.5 / n * np.sum(resid * resid) + 0.5 * lam * np.sum(W1 * W1)
    dy = resid * y * (1 - y) / n
    return float(cost), dy.T @ p + lam * W1, dy.sum(axis=0)


def detector_cost_grad(params: DetectorParams, images, labels, lam: float, pool: int = POOL):
    """Whole-network cost (decay on ``W1`` and every filter) and its gradient.

    The pooling gradient spreads each pooled error evenly over its window;
    accumulation runs over fixed-size chunks in order, so results are
    reproducible.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = images.shape[0]
    n_f, k, _ = params.filters.shape
    fmat = params.filters.reshape(n_f, -1)
    g_f = np.zeros_like(fmat)
    g_b0 = np.zeros(n_f)
    g_W1 = np.zeros_like(params.W1)
    g_b1 = np.zeros_like(params.b1)
    sq = 0.0
    for s in range(0, n, CHUNK):
        chunk = images[s:s + CHUNK]
        cols, C, p = _conv_pool(params.filters, params.b0, chunk, pool)
        y = sigmoid(p @ params.W1.T + params.b1)
        resid = y - labels[s:s + CHUNK]
        sq += np.sum(resid * resid)
        dy = resid * y * (1 - y) / n
        g_W1 += dy.T @ p
        g_b1 += dy.sum(axis=0)
        nc, hc, wc, _ = C.shape
        m_h, m_w = hc // pool, wc // pool
        dP = (dy @ params.W1).reshape(nc, n_f, m_h, m_w).transpose(0, 2, 3, 1) / (pool * pool)
        dC = np.broadcast_to(dP[:, :, None, :, None, :], (nc, m_h, pool, m_w, pool, n_f)).reshape(nc, hc, wc, n_f)
        dZ = (dC * C * (1 - C)).reshape(-1, n_f)
        g_f += dZ.T @ cols
        g_b0 += dZ.sum(axis=0)
    cost = 0.5 / n * sq + 0.5 * lam * (np.sum(params.W1 ** 2) + np.sum(fmat ** 2))
    grads = DetectorParams(
        filters=(g_f + lam * fmat).reshape(params.filters.shape),
        b0=g_b0,
        W1=g_W1 + lam * params.W1,
        b1=g_b1,
    )
    return float(cost), grads


def pretrain_output_layer(params: DetectorParams, images, labels, lam: float = 1e-4,
                          optim: OptimConfig | None = None, pool: int = POOL,
                          history: list | None = None) -> DetectorParams:
    """Fit ``W1, b1`` on features from the frozen filters."""
    optim = optim or OptimConfig()
    labels = np.asarray(labels, dtype=np.float64)
    if len(labels) == 0:
        raise ValueError("empty detector training set")
    p = pooled_features(params.filters, params.b0, images, pool)
    n_w = params.W1.size

    def fun(vec):
        W1 = vec[:n_w].reshape(params.W1.shape)
        cost, gW, gb = output_layer_cost_grad(W1, vec[n_w:], p, labels, lam)
        return cost, np.concatenate([gW.ravel(), gb])

    res = minimize(fun, np.concatenate([params.W1.ravel(), params.b1]), optim, stage="detector output layer")
    if history is not None:
        history.extend(res.history)
    log.info("detector output layer: J %.5g -> %.5g", res.history[0], res.history[-1])
    return DetectorParams(params.filters, params.b0, res.x[:n_w].reshape(params.W1.shape).copy(), res.x[n_w:].copy())


def finetune_detector(params: DetectorParams, images, labels, lam: float = 1e-4,
                      optim: OptimConfig | None = None, pool: int = POOL,
                      history: list | None = None) -> DetectorParams:
    optim = optim or OptimConfig()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)

    def fun(vec):
        cost, g = detector_cost_grad(unflatten(params, vec), images, labels, lam, pool)
        return cost, flatten(g)

    res = minimize(fun, flatten(params), optim, stage="detector fine-tuning")
    if history is not None:
        history.extend(res.history)
    log.info("detector fine-tuning: J %.5g -> %.5g", res.history[0], res.history[-1])
    return unflatten(params, res.x)


def make_roi_label(center, roi_side: int = ROI_SIDE, out_side: int = OUT_SIDE,
                   image_side: int = 256) -> RoiLabel:
    """Coarse training mask: a filled square of side ``ceil(roi_side * out/image)``
    at the down-scaled LV center, clipped at the borders."""
    side = int(np.ceil(roi_side * out_side / image_side))
    cx, cy = map_coords(np.asarray(center, float), (image_side, image_side), (out_side, out_side))
    col0 = int(np.floor(cx + 0.5)) - side // 2
    row0 = int(np.floor(cy + 0.5)) - side // 2
    mask = np.zeros((out_side, out_side), dtype=bool)
    mask[max(row0, 0):max(row0 + side, 0), max(col0, 0):max(col0 + side, 0)] = True
    return RoiLabel(mask, (float(center[0]), float(center[1])))


def mask_center(y_c, image_shape: tuple[int, int] = (256, 256), threshold: float = 0.5):
    """LV center in full-image coordinates from the detector output.

    The thresholded coarse mask's centroid equals that of its nearest-neighbour
    upsampling, so it is computed at the coarse grid and mapped up. An empty
    mask falls back to the most confident output pixel.
    """
    y = np.asarray(y_c, dtype=np.float64)
    side = int(round(np.sqrt(y.size)))
    y = y.reshape(side, side)
    mask = y > threshold
    if mask.any():
        cx, cy = centroid(mask)
    else:
        r, c = np.unravel_index(int(np.argmax(y)), y.shape)
        cx, cy = float(c), float(r)
    x, yy = map_coords(np.array([cx, cy]), (side, side), image_shape)
    return float(x), float(yy)


def prepare_input(full_image, side: int = INPUT_SIDE) -> np.ndarray:
    return resample(np.asarray(full_image, dtype=np.float64), side, side, "bilinear")


def detect_roi(params: DetectorParams, full_image, roi_side: int = ROI_SIDE,
               pool: int = POOL) -> tuple[Crop, tuple[float, float]]:
    """Locate the LV in a full slice and cut the ROI sub-image around it."""
    full_image = np.asarray(full_image, dtype=np.float64)
    y = detector_forward(params, prepare_input(full_image), pool)
    center = mask_center(y, full_image.shape)
    return crop(full_image, center, roi_side), center
