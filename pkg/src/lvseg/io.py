"""File formats: 8-bit PGM images, contour CSVs, key=value text and the
binary+JSON parameter container."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .imaging import Contour


class FormatError(ValueError):
    pass


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM and return intensities scaled to [0, 1]."""
    path = Path(path)
    raw = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    if data.size != w * h:
        raise FormatError(f"{path}: pixel data truncated")
    return data.reshape(h, w).astype(np.float64) / 255.0


def write_pgm(path, image) -> None:
    img = np.asarray(image, dtype=np.float64)
    if img.size and (img.min() < 0 or img.max() > 1):
        raise ValueError("image intensities must lie in [0, 1]")
    data = np.rint(img * 255.0).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + data.tobytes())


def write_mask_pgm(path, mask) -> None:
    write_pgm(path, np.asarray(mask, dtype=bool).astype(np.float64))


def read_contour_csv(path, pixel_spacing: float = 1.0) -> Contour:
    path = Path(path)
    rows = []
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise FormatError(f"{path}:{n}: expected 'x,y'")
        try:
            rows.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise FormatError(f"{path}:{n}: non-numeric coordinate") from None
    try:
        return Contour(np.array(rows).reshape(-1, 2), pixel_spacing, closed=True)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_contour_csv(path, contour: Contour) -> None:
    lines = []
    for x, y in contour.points:
        line = f"{x:.4f},{y:.4f}"
        if not lines or line != lines[-1]:  # vertices closer than the rounding collapse
            lines.append(line)
    if len(lines) > 1 and lines[-1] == lines[0]:
        lines.pop()
    Path(path).write_text("\n".join(lines) + "\n")


def read_keyvalue(path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{n}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_keyvalue(path, values: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in values.items()))


def save_params(stem, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``<stem>.bin`` (little-endian float64 blocks) and ``<stem>.json``."""
    stem = Path(stem)
    blocks, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        blocks.append({"name": name, "shape": list(a.shape), "offset": offset})
        offset += a.size
        chunks.append(a.tobytes())
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    sidecar = {"kind": kind, "dtype": "<f8", "count": offset, "blocks": blocks, "meta": meta or {}}
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_params(stem, kind: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    stem = Path(stem)
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    if kind is not None and sidecar["kind"] != kind:
        raise FormatError(f"{stem}: expected model kind {kind!r}, found {sidecar['kind']!r}")
    flat = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    if flat.size != sidecar["count"]:
        raise FormatError(f"{stem}: parameter count mismatch")
    arrays = {}
    for block in sidecar["blocks"]:
        n = int(np.prod(block["shape"], dtype=int))
        arrays[block["name"]] = flat[block["offset"]:block["offset"] + n].reshape(block["shape"]).astype(np.float64)
    return arrays, sidecar["meta"]
