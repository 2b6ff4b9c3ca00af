"""Synthetic short-axis cine phantoms with analytic LV ground truth.

Each slice shows a dim body ellipse, a bright right-ventricle blood pool, a
dark myocardial ring and a bright LV cavity. Optional papillary blobs (at
myocardium intensity, inside the cavity) and septal gaps (cavity merging
with the RV) reproduce the classic shrinkage and leakage failure modes of
unconstrained deformable models. Slice centers follow a quadratic curve plus
Gaussian jitter so that slice alignment has something to recover.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SliceRecord, StudyRecord
from .imaging import Contour

CAVITY = 0.8
MYOCARDIUM = 0.4
RV = 0.7
BODY = 0.2


@dataclass
class PhantomConfig:
    count: int = 10
    size: int = 256
    n_slices: tuple[int, int] = (6, 10)
    base_radius: tuple[float, float] = (17.0, 24.0)
    apex_ratio: tuple[float, float] = (0.45, 0.6)
    wall_thickness: tuple[float, float] = (5.0, 8.0)
    ellipticity: float = 0.08
    center_spread: float = 25.0
    curve_drift: float = 8.0
    misalignment_sd: float = 2.0
    noise_sd: float = 0.03
    papillary_prob: float = 0.5
    papillary_size: tuple[float, float] = (0.15, 0.25)
    gap_prob: float = 0.0
    spacing_mm: float = 1.25
    thickness_mm: float = 8.0
    with_es: bool = False
    es_ratio: tuple[float, float] = (0.65, 0.8)
    seed: int = 0

    def __post_init__(self):
        if min(self.base_radius) <= 0 or min(self.wall_thickness) <= 0:
            raise ValueError("radii and wall thickness must be positive")
        if not max(self.apex_ratio) < 1:
            raise ValueError("apical radii must be smaller than basal radii")
        if self.count < 0:
            raise ValueError("count must be non-negative")


@dataclass
class _Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float = 0.0

    def rho(self, xx, yy):
        c, s = np.cos(self.theta), np.sin(self.theta)
        u = (xx - self.cx) * c + (yy - self.cy) * s
        v = -(xx - self.cx) * s + (yy - self.cy) * c
        return np.sqrt((u / self.a) ** 2 + (v / self.b) ** 2)

    def coverage(self, xx, yy):
        # approximate signed distance -> partial-volume fraction over one pixel
        d = (self.rho(xx, yy) - 1.0) * 0.5 * (self.a + self.b)
        return np.clip(0.5 - d, 0.0, 1.0)

    def grown(self, t: float) -> "_Ellipse":
        return _Ellipse(self.cx, self.cy, self.a + t, self.b + t, self.theta)

    def boundary(self, n: int = 128) -> np.ndarray:
        t = np.linspace(0, 2 * np.pi, n, endpoint=False)
        c, s = np.cos(self.theta), np.sin(self.theta)
        u, v = self.a * np.cos(t), self.b * np.sin(t)
        return np.stack([self.cx + u * c - v * s, self.cy + u * s + v * c], axis=1)


def _paint(img, cov, value):
    img *= 1.0 - cov
    img += value * cov


def render_slice(rng: np.random.Generator, size: int, center, radius: float, wall: float,
                 cfg: PhantomConfig, body_center=None):
    """Render one slice; returns ``(image, cavity_contour_points)``."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx, cy = center
    e = rng.uniform(-cfg.ellipticity, cfg.ellipticity)
    cavity = _Ellipse(cx, cy, radius * (1 + e), radius * (1 - e), rng.uniform(0, np.pi))
    myo = cavity.grown(wall)
    bc = body_center if body_center is not None else (size / 2, size / 2)
    img = np.zeros((size, size))
    _paint(img, _Ellipse(bc[0], bc[1], 0.43 * size, 0.36 * size).coverage(xx, yy), BODY)
    rv_r = 1.25 * radius + wall
    rv = _Ellipse(cx - (radius + wall + 0.55 * rv_r), cy + 0.15 * radius, 0.75 * rv_r, 1.2 * rv_r, 0.2)
    _paint(img, rv.coverage(xx, yy), RV)
    _paint(img, myo.coverage(xx, yy), MYOCARDIUM)
    if rng.random() < cfg.gap_prob:
        # septal gap: cavity-bright bridge through the wall into the RV
        ang = np.pi + rng.uniform(-0.3, 0.3)
        width = rng.uniform(0.8, 1.1) * radius
        gx, gy = cx + (radius + wall / 2) * np.cos(ang), cy + (radius + wall / 2) * np.sin(ang)
        gap = _Ellipse(gx, gy, wall, width, ang)
        _paint(img, gap.coverage(xx, yy), CAVITY)
    _paint(img, cavity.coverage(xx, yy), CAVITY)
    if rng.random() < cfg.papillary_prob:
        for _ in range(int(rng.integers(1, 3))):
            pr = rng.uniform(*cfg.papillary_size) * radius
            ang = rng.uniform(0, 2 * np.pi)
            dist = radius - 0.8 * pr
            blob = _Ellipse(cx + dist * np.cos(ang), cy + dist * np.sin(ang), pr, pr)
            _paint(img, blob.coverage(xx, yy) * cavity.coverage(xx, yy), MYOCARDIUM)
    img += rng.normal(0.0, cfg.noise_sd, img.shape)
    return np.clip(img, 0.0, 1.0), cavity.boundary()


def _stack(rng, cfg: PhantomConfig, n: int, base_r: float, apex_r: float, wall: float,
           curve, jitter, ratio: float = 1.0, wall_gain: float = 1.0):
    slices = []
    for i in range(1, n + 1):
        t = (i - 1) / max(n - 1, 1)
        r = (base_r + (apex_r - base_r) * t) * ratio
        center = (curve[0](i) + jitter[i - 1, 0], curve[1](i) + jitter[i - 1, 1])
        img, pts = render_slice(rng, cfg.size, center, r, wall * wall_gain, cfg)
        slices.append(SliceRecord(img, Contour(pts, cfg.spacing_mm)))
    return slices


def generate_phantoms(cfg: PhantomConfig) -> list[StudyRecord]:
    """Deterministic (per seed) list of phantom studies.

    With ``with_es`` every phantom yields an ED study and an ES study with a
    contracted cavity; both share the ``patient`` tag.
    """
    rng = np.random.default_rng(cfg.seed)
    studies = []
    for k in range(cfg.count):
        n = int(rng.integers(cfg.n_slices[0], cfg.n_slices[1] + 1))
        base_r = rng.uniform(*cfg.base_radius)
        apex_r = base_r * rng.uniform(*cfg.apex_ratio)
        wall = rng.uniform(*cfg.wall_thickness)
        c0 = cfg.size / 2 + rng.uniform(-cfg.center_spread, cfg.center_spread, 2)
        drift = rng.uniform(-cfg.curve_drift, cfg.curve_drift, (2, 2))
        mid = (n + 1) / 2.0
        # quadratic center path through c0 at the middle slice
        curve = tuple(
            (lambda i, a=drift[ax, 0], b=drift[ax, 1], c=c0[ax]:
             c + b * (i - mid) / n + a * ((i - mid) / n) ** 2 * 4)
            for ax in range(2))
        jitter = rng.normal(0.0, cfg.misalignment_sd, (n, 2))
        truth_centers = np.array([[curve[0](i), curve[1](i)] for i in range(1, n + 1)])
        pid = f"phantom{cfg.seed:04d}_{k:04d}"
        phases = [("ED", 1.0, 1.0)]
        if cfg.with_es:
            phases.append(("ES", rng.uniform(*cfg.es_ratio), 1.3))
        for phase, ratio, gain in phases:
            slices = _stack(rng, cfg, n, base_r, apex_r, wall, curve, jitter, ratio, gain)
            sid = pid if not cfg.with_es else f"{pid}_{phase}"
            studies.append(StudyRecord(
                id=sid, slices=slices, spacing_mm=cfg.spacing_mm, thickness_mm=cfg.thickness_mm,
                phase=phase, pathology="phantom", patient=pid,
                extra={"true_centers": truth_centers.round(6).tolist()}))
    return studies
