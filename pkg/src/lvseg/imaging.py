"""Image-grid primitives shared by every stage of the pipeline.

Images are plain 2D ``float64`` arrays with intensities in [0, 1]; masks are
2D boolean arrays. Coordinates given as ``(x, y)`` pairs are (column, row)
in pixel units, with pixel centers on integer positions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage
from scipy.special import expit


class DimensionError(ValueError):
    """Array shapes are incompatible with the requested operation."""


class DegenerateMaskError(ValueError):
    """Mask has no foreground, or no background where one is required."""


class NoContourError(ValueError):
    """A field has no sign change, so it has no zero level set."""


def as_image(data, name: str = "image") -> np.ndarray:
    """Validate and return ``data`` as a 2D float image in [0, 1]."""
    img = np.asarray(data, dtype=np.float64)
    if img.ndim != 2:
        raise DimensionError(f"{name} must be 2D, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError(f"{name} contains non-finite values")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ValueError(f"{name} intensities outside [0, 1]")
    return img


def as_mask(data, name: str = "mask") -> np.ndarray:
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.dtype != bool:
        if not np.all((arr == 0) | (arr == 1)):
            raise ValueError(f"{name} is not binary")
        arr = arr.astype(bool)
    return arr


@dataclass(frozen=True)
class Contour:
    """Ordered subpixel polyline on one slice.

    ``points`` is an ``(N, 2)`` array of ``(x, y)`` pixel coordinates. A closed
    contour does not repeat its first point at the end.
    """

    points: np.ndarray
    pixel_spacing: float = 1.0
    closed: bool = True

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(pts)):
            raise ValueError("contour points must be finite")
        if self.closed and len(pts) < 3:
            raise ValueError("closed contour needs at least 3 points")
        if len(pts) > 1 and np.any(np.all(pts[1:] == pts[:-1], axis=1)):
            raise ValueError("consecutive duplicate points in contour")
        if self.pixel_spacing <= 0:
            raise ValueError("pixel_spacing must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    @property
    def length(self) -> float:
        return polyline_length(self.points, self.closed)

    def translated(self, dx: float, dy: float) -> "Contour":
        return Contour(self.points + np.array([dx, dy]), self.pixel_spacing, self.closed)


# --------------------------------------------------------------------------
# network building blocks


def conv2d_valid(image, kernel, bias: float = 0.0) -> np.ndarray:
    """Valid-mode 2D correlation of ``image`` with ``kernel`` plus ``bias``.

    ``out[i, j] = sum_{a, b} kernel[a, b] * image[i + a, j + b] + bias``, which
    is the 1-based ``F[k1, k2] I[i + k1 - 1, j + k2 - 1]`` sum shifted to
    0-based storage. No kernel flip and no activation.
    """
    image = np.asarray(image, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if image.ndim != 2 or kernel.ndim != 2:
        raise DimensionError("conv2d_valid expects 2D image and kernel")
    kh, kw = kernel.shape
    if kh > image.shape[0] or kw > image.shape[1]:
        raise DimensionError(f"kernel {kernel.shape} larger than image {image.shape}")
    if not np.all(np.isfinite(kernel)):
        raise ValueError("kernel entries must be finite")
    windows = sliding_window_view(image, (kh, kw))
    return np.einsum("ijab,ab->ij", windows, kernel) + bias


def avg_pool(fmap, window: int) -> np.ndarray:
    """Mean over non-overlapping ``window x window`` blocks.

    Works on the last two axes, so a stack of maps pools in one call.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    h, w = fmap.shape[-2:]
    if window < 1 or h % window or w % window:
        raise DimensionError(f"map {h}x{w} not divisible by pooling window {window}")
    lead = fmap.shape[:-2]
    blocks = fmap.reshape(*lead, h // window, window, w // window, window)
    return blocks.mean(axis=(-3, -1))


def sigmoid(x):
    """Logistic function ``1 / (1 + exp(-x))``, elementwise."""
    return expit(x)


# --------------------------------------------------------------------------
# resampling and geometry


def _source_coords(n_out: int, n_in: int) -> np.ndarray:
    # pixel-center alignment: out pixel k covers the same physical span as in
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def resample(image, new_h: int, new_w: int, method: str = "bilinear") -> np.ndarray:
    """Resize a 2D grid with pixel-center alignment.

    ``nearest`` keeps the value set (masks stay binary); ``bilinear`` clamps at
    the borders, so constants stay constant and same-size calls are identity.
    """
    if new_h < 1 or new_w < 1:
        raise DimensionError("resample target must be at least 1x1")
    src = np.asarray(image)
    h, w = src.shape
    if (h, w) == (new_h, new_w):
        return src.copy()
    if method == "nearest":
        rows = np.clip(np.floor((np.arange(new_h) + 0.5) * h / new_h).astype(int), 0, h - 1)
        cols = np.clip(np.floor((np.arange(new_w) + 0.5) * w / new_w).astype(int), 0, w - 1)
        return src[np.ix_(rows, cols)]
    if method != "bilinear":
        raise ValueError(f"unknown resample method {method!r}")
    src = src.astype(np.float64)
    ry = np.clip(_source_coords(new_h, h), 0, h - 1)
    rx = np.clip(_source_coords(new_w, w), 0, w - 1)
    y0 = np.minimum(np.floor(ry).astype(int), h - 1)
    x0 = np.minimum(np.floor(rx).astype(int), w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ry - y0)[:, None]
    fx = (rx - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def map_coords(xy, n_in: tuple[int, int], n_out: tuple[int, int]) -> np.ndarray:
    """Map ``(x, y)`` points from an ``n_in`` grid to a resampled ``n_out`` grid.

    Grid sizes are ``(height, width)``; consistent with :func:`resample`.
    """
    xy = np.asarray(xy, dtype=np.float64)
    sx = n_out[1] / n_in[1]
    sy = n_out[0] / n_in[0]
    return np.stack([(xy[..., 0] + 0.5) * sx - 0.5, (xy[..., 1] + 0.5) * sy - 0.5], axis=-1)


def centroid(mask) -> tuple[float, float]:
    """Mean ``(x, y)`` of the foreground pixels."""
    mask = as_mask(mask)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise DegenerateMaskError("centroid of an empty mask")
    return float(cols.mean()), float(rows.mean())


@dataclass(frozen=True)
class Crop:
    """A fixed-size window cut from a larger image.

    ``origin`` is the ``(row, col)`` of the window's top-left pixel in the
    source; ``padded`` records whether any zero padding was needed.
    """

    image: np.ndarray
    origin: tuple[int, int]
    padded: bool = False
    pad_value: float = 0.0

    def to_source(self, xy) -> np.ndarray:
        return np.asarray(xy, dtype=np.float64) + np.array([self.origin[1], self.origin[0]])

    def from_source(self, xy) -> np.ndarray:
        return np.asarray(xy, dtype=np.float64) - np.array([self.origin[1], self.origin[0]])


def crop(image, center, size: int) -> Crop:
    """Cut a ``size x size`` window centered at ``center = (x, y)``.

    Regions falling outside the source are zero-padded.
    """
    image = np.asarray(image)
    h, w = image.shape
    cx, cy = center
    col0 = int(np.floor(cx + 0.5)) - size // 2
    row0 = int(np.floor(cy + 0.5)) - size // 2
    out = np.zeros((size, size), dtype=image.dtype)
    r_lo, r_hi = max(row0, 0), min(row0 + size, h)
    c_lo, c_hi = max(col0, 0), min(col0 + size, w)
    if r_lo < r_hi and c_lo < c_hi:
        out[r_lo - row0:r_hi - row0, c_lo - col0:c_hi - col0] = image[r_lo:r_hi, c_lo:c_hi]
    padded = not (row0 >= 0 and col0 >= 0 and row0 + size <= h and col0 + size <= w)
    return Crop(out, (row0, col0), padded)


def polygon_area(points) -> float:
    """Signed shoelace area; positive for counterclockwise in (x, y-down) order."""
    p = np.asarray(points, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_centroid(points) -> tuple[float, float]:
    """Area centroid of a simple closed polygon."""
    p = np.asarray(points, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = cross.sum() / 2.0
    if abs(a) < 1e-12:
        return float(x.mean()), float(y.mean())
    return float(((x + xn) * cross).sum() / (6 * a)), float(((y + yn) * cross).sum() / (6 * a))


def polyline_length(points, closed: bool = True) -> float:
    p = np.asarray(points, dtype=np.float64)
    if len(p) < 2:
        return 0.0
    seg = np.diff(np.vstack([p, p[:1]]) if closed else p, axis=0)
    return float(np.hypot(seg[:, 0], seg[:, 1]).sum())


def rasterize_polygon(points, shape: tuple[int, int]) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside a closed polygon (even-odd)."""
    p = np.asarray(points, dtype=np.float64)
    h, w = shape
    mask = np.zeros(shape, dtype=bool)
    r0 = max(int(np.floor(p[:, 1].min())), 0)
    r1 = min(int(np.ceil(p[:, 1].max())) + 1, h)
    c0 = max(int(np.floor(p[:, 0].min())), 0)
    c1 = min(int(np.ceil(p[:, 0].max())) + 1, w)
    if r0 >= r1 or c0 >= c1:
        return mask
    yy, xx = np.mgrid[r0:r1, c0:c1].astype(np.float64)
    inside = np.zeros(yy.shape, dtype=bool)
    xa, ya = p[:, 0], p[:, 1]
    xb, yb = np.roll(xa, -1), np.roll(ya, -1)
    for x1, y1, x2, y2 in zip(xa, ya, xb, yb):
        if y1 == y2:
            continue
        straddle = (y1 > yy) != (y2 > yy)
        xcross = x1 + (yy - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddle & (xx < xcross)
    mask[r0:r1, c0:c1] = inside
    return mask


def rasterize_ring(points, shape: tuple[int, int], closed: bool = True,
                   thickness: int = 1) -> np.ndarray:
    """Pixels on a polyline, dilated ``thickness`` times with a 4-neighbour cross."""
    p = np.asarray(points, dtype=np.float64)
    if closed:
        p = np.vstack([p, p[:1]])
    pieces = []
    for a, b in zip(p[:-1], p[1:]):
        n = max(int(np.ceil(np.hypot(*(b - a)) * 4)), 1)
        t = np.linspace(0.0, 1.0, n, endpoint=False)[:, None]
        pieces.append(a + t * (b - a))
    pieces.append(p[-1:])
    samples = np.rint(np.vstack(pieces)).astype(int)
    ok = (samples[:, 0] >= 0) & (samples[:, 0] < shape[1]) & (samples[:, 1] >= 0) & (samples[:, 1] < shape[0])
    mask = np.zeros(shape, dtype=bool)
    mask[samples[ok, 1], samples[ok, 0]] = True
    if thickness > 0:
        mask = ndimage.binary_dilation(mask, ndimage.generate_binary_structure(2, 1), iterations=thickness)
    return mask


def point_segment_distance(points, seg_a, seg_b, chunk: int = 2048) -> np.ndarray:
    """Distance from each point to the nearest of a set of segments ``a -> b``."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    a = np.asarray(seg_a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(seg_b, dtype=np.float64).reshape(-1, 2)
    d = b - a
    dd = np.einsum("ij,ij->i", d, d)
    dd_safe = np.where(dd > 0, dd, 1.0)
    out = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        q = pts[s:s + chunk, None, :] - a[None, :, :]
        t = np.clip(np.einsum("pij,ij->pi", q, d) / dd_safe, 0.0, 1.0)
        t = np.where(dd > 0, t, 0.0)
        r = q - t[..., None] * d[None, :, :]
        out[s:s + chunk] = np.sqrt(np.einsum("pij,pij->pi", r, r).min(axis=1))
    return out


def point_to_polyline(points, vertices, closed: bool = True) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    b = np.roll(v, -1, axis=0) if closed else v[1:]
    a = v if closed else v[:-1]
    return point_segment_distance(points, a, b)


# --------------------------------------------------------------------------
# level-set helpers


def signed_distance(mask) -> np.ndarray:
    """Euclidean signed distance to the region boundary, negative inside.

    The boundary is taken halfway between foreground and background pixel
    centers, so boundary-adjacent pixels sit at +-0.5 and negating the mask
    negates the field exactly.
    """
    mask = as_mask(mask)
    if not mask.any() or mask.all():
        raise DegenerateMaskError("signed distance needs foreground and background pixels")
    d_out = ndimage.distance_transform_edt(~mask)
    d_in = ndimage.distance_transform_edt(mask)
    return np.where(mask, 0.5 - d_in, d_out - 0.5)


# marching-squares segment table; edges: 0=top, 1=right, 2=bottom, 3=left
# corner bits: 1=top-left, 2=top-right, 4=bottom-right, 8=bottom-left (inside = negative)
_CASES = {
    1: [(0, 3)], 2: [(0, 1)], 3: [(3, 1)], 4: [(1, 2)], 6: [(0, 2)], 7: [(3, 2)],
    8: [(3, 2)], 9: [(0, 2)], 11: [(1, 2)], 12: [(3, 1)], 13: [(0, 1)], 14: [(0, 3)],
}
# saddles resolved by the average of the four corners
_SADDLE = {
    (5, True): [(0, 1), (3, 2)], (5, False): [(0, 3), (1, 2)],
    (10, True): [(0, 3), (1, 2)], (10, False): [(0, 1), (3, 2)],
}


@dataclass
class _Segments:
    a: np.ndarray  # edge ids
    b: np.ndarray
    points: dict = field(default_factory=dict)


def _marching_segments(v: np.ndarray):
    """Zero-crossing segments of ``v``; returns edge-id pairs and an id->xy lookup."""
    h, w = v.shape
    inside = v < 0
    case = (inside[:-1, :-1] * 1 + inside[:-1, 1:] * 2 + inside[1:, 1:] * 4
            + inside[1:, :-1] * 8)
    center_in = (v[:-1, :-1] + v[:-1, 1:] + v[1:, 1:] + v[1:, :-1]) < 0
    n_h = h * (w - 1)
    rr, cc = np.mgrid[0:h - 1, 0:w - 1]
    edge_id = np.stack([
        rr * (w - 1) + cc,            # top: horizontal edge (r, c)
        n_h + rr * w + cc + 1,        # right: vertical edge (r, c+1)
        (rr + 1) * (w - 1) + cc,      # bottom: horizontal edge (r+1, c)
        n_h + rr * w + cc,            # left: vertical edge (r, c)
    ])
    ea, eb = [], []
    for k, pairs in _CASES.items():
        sel = case == k
        if sel.any():
            for e1, e2 in pairs:
                ea.append(edge_id[e1][sel])
                eb.append(edge_id[e2][sel])
    for (k, cin), pairs in _SADDLE.items():
        sel = (case == k) & (center_in == cin)
        if sel.any():
            for e1, e2 in pairs:
                ea.append(edge_id[e1][sel])
                eb.append(edge_id[e2][sel])
    if not ea:
        return np.empty(0, int), np.empty(0, int), np.empty((0, 2))
    ea = np.concatenate(ea)
    eb = np.concatenate(eb)
    # deterministic order: by cell position of the first edge
    order = np.lexsort((eb, ea))
    ea, eb = ea[order], eb[order]
    ids = np.unique(np.concatenate([ea, eb]))
    xy = np.empty((len(ids), 2))
    horiz = ids < n_h
    hr, hc = np.divmod(ids[horiz], w - 1)
    v0, v1 = v[hr, hc], v[hr, hc + 1]
    xy[horiz] = np.stack([hc + v0 / (v0 - v1), hr], axis=1)
    vr, vc = np.divmod(ids[~horiz] - n_h, w)
    v0, v1 = v[vr, vc], v[vr + 1, vc]
    xy[~horiz] = np.stack([vc, vr + v0 / (v0 - v1)], axis=1)
    pos = np.searchsorted(ids, ea), np.searchsorted(ids, eb)
    return pos[0], pos[1], xy


def _link(ea: np.ndarray, eb: np.ndarray, n_nodes: int) -> list[tuple[list[int], bool]]:
    adj: list[list[int]] = [[] for _ in range(n_nodes)]
    for s, (a, b) in enumerate(zip(ea.tolist(), eb.tolist())):
        adj[a].append(s)
        adj[b].append(s)
    used = np.zeros(len(ea), dtype=bool)
    chains = []

    def walk(start):
        nodes = [start]
        cur = start
        while True:
            nxt = [s for s in adj[cur] if not used[s]]
            if not nxt:
                return nodes
            s = nxt[0]
            used[s] = True
            cur = eb[s] if ea[s] == cur else ea[s]
            if cur == start:
                return nodes
            nodes.append(int(cur))

    for node in range(n_nodes):
        if len(adj[node]) == 1 and not used[adj[node][0]]:
            chains.append((walk(node), False))
    for s in range(len(ea)):
        if not used[s]:
            chains.append((walk(int(ea[s])), True))
    return chains


def _dedupe(points: np.ndarray, closed: bool) -> np.ndarray:
    keep = np.ones(len(points), dtype=bool)
    keep[1:] = np.any(points[1:] != points[:-1], axis=1)
    pts = points[keep]
    while closed and len(pts) > 1 and np.all(pts[0] == pts[-1]):
        pts = pts[:-1]
    return pts


def zero_contours(field_, close_at_frame: bool = True) -> list[tuple[np.ndarray, bool]]:
    """All zero-level polylines of a field as ``(points, closed)`` pairs.

    With ``close_at_frame`` the field is padded with a positive border so every
    curve closes; points outside the frame are clipped back onto it.
    """
    v = np.asarray(field_, dtype=np.float64)
    h, w = v.shape
    if close_at_frame:
        v = np.pad(v, 1, constant_values=1.0)
    ea, eb, xy = _marching_segments(v)
    out = []
    for nodes, closed in _link(ea, eb, len(xy)):
        pts = xy[nodes]
        if close_at_frame:
            pts = pts - 1.0
            pts[:, 0] = np.clip(pts[:, 0], 0, w - 1)
            pts[:, 1] = np.clip(pts[:, 1], 0, h - 1)
        pts = _dedupe(pts, closed)
        if len(pts) >= (3 if closed else 2):
            out.append((pts, closed))
    return out


def extract_zero_contour(field_, pixel_spacing: float = 1.0) -> Contour:
    """Largest closed zero-level curve of a level-set field (marching squares).

    Returns a counterclockwise :class:`Contour`; raises :class:`NoContourError`
    when the field does not change sign.
    """
    v = np.asarray(field_, dtype=np.float64)
    if not (np.any(v < 0) and np.any(v >= 0)):
        raise NoContourError("field has no sign change")
    loops = [p for p, closed in zero_contours(v) if closed]
    if not loops:
        raise NoContourError("no closed zero-level curve")
    areas = [abs(polygon_area(p)) for p in loops]
    best = loops[int(np.argmax(areas))]
    if polygon_area(best) < 0:
        best = best[::-1]
    return Contour(best, pixel_spacing, closed=True)


def reinitialize(phi) -> np.ndarray:
    """Rebuild a signed-distance field with the same subpixel zero set.

    Distances are measured to the marching-squares segments of ``phi`` itself,
    so the zero crossing does not snap to pixel edges.
    """
    phi = np.asarray(phi, dtype=np.float64)
    ea, eb, xy = _marching_segments(phi)
    if len(ea) == 0:
        raise NoContourError("cannot reinitialize a field without a zero crossing")
    h, w = phi.shape
    yy, xx = np.mgrid[0:h, 0:w]
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    d = point_segment_distance(pts, xy[ea], xy[eb]).reshape(h, w)
    return np.where(phi < 0, -d, d)
