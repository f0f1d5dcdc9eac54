"""Full-resolution probability maps via halo-overlapped tiles, the CMAP file
format, and heatmap rendering."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import model as M
from .data import write_netpbm
from .errors import CheckpointError, ConfigError, DimensionMismatchError
from .tensor import sigmoid

CMAP_MAGIC = b"CMAP"
CMAP_VERSION = 1
_CMAP_HEADER = struct.Struct("<4sBIId")

# Blue -> cyan -> green -> yellow -> red, linearly interpolated between anchors.
COLORMAP_ANCHORS = (
    (0.00, (0, 0, 255)),
    (0.25, (0, 255, 255)),
    (0.50, (0, 255, 0)),
    (0.75, (255, 255, 0)),
    (1.00, (255, 0, 0)),
)


@dataclass
class ProbabilityMap:
    probs: np.ndarray
    pixel_spacing_mm: float = 0.1
    source_id: str = ""

    @property
    def height(self) -> int:
        return self.probs.shape[0]

    @property
    def width(self) -> int:
        return self.probs.shape[1]


def tile_windows(height: int, width: int, tile: int, halo: int):
    """Yield (out_slice, in_slice, inner_slice) triples covering the image.

    ``in_slice`` is the tile grown by ``halo`` and clipped to the frame;
    ``inner_slice`` selects the written interior within that window.
    """
    for y0 in range(0, height, tile):
        y1 = min(y0 + tile, height)
        iy0, iy1 = max(0, y0 - halo), min(height, y1 + halo)
        for x0 in range(0, width, tile):
            x1 = min(x0 + tile, width)
            ix0, ix1 = max(0, x0 - halo), min(width, x1 + halo)
            yield ((slice(y0, y1), slice(x0, x1)),
                   (slice(iy0, iy1), slice(ix0, ix1)),
                   (slice(y0 - iy0, y1 - iy0), slice(x0 - ix0, x1 - ix0)))


def predict_full(model: M.Model, image, tile_size: int = 512, halo: int | None = None,
                 pixel_spacing_mm: float = 0.1, source_id: str = "",
                 strict: bool = False) -> ProbabilityMap:
    """Sigmoid probability for every pixel of a 2D image.

    Each tile sees ``halo`` extra pixels of real context on every side that is
    not an image border, which makes the stitched map equal to one whole-image
    forward pass whenever ``halo >= (receptive_field - 1) / 2``.
    """
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 2:
        raise DimensionMismatchError("predict_full expects a 2D grayscale image", 2, image.ndim)
    rf = M.receptive_field(model.config)
    need = (rf - 1) // 2
    halo = need if halo is None else halo
    if halo < need:
        raise ConfigError(f"halo {halo} is below the receptive-field radius {need}")
    if tile_size <= 2 * halo:
        raise ConfigError(f"tile_size {tile_size} must exceed twice the halo ({2 * halo})")

    h, w = image.shape
    if h < rf or w < rf:
        msg = f"image {w}x{h} is smaller than the {rf}x{rf} receptive field"
        if strict:
            raise DimensionMismatchError(msg, (rf, rf), (h, w))
        warnings.warn(msg + "; zero-padding", stacklevel=2)
        padded = np.zeros((max(h, rf), max(w, rf)), np.float32)
        padded[:h, :w] = image
        full = predict_full(model, padded, tile_size, halo, pixel_spacing_mm, source_id)
        return ProbabilityMap(full.probs[:h, :w].copy(), pixel_spacing_mm, source_id)

    probs = np.empty((h, w), np.float32)
    for out_sl, in_sl, inner_sl in tile_windows(h, w, tile_size, halo):
        window = image[in_sl][None, None]
        logits = M.forward(model, window)[0, 0]
        probs[out_sl] = sigmoid(logits[inner_sl])
    return ProbabilityMap(probs, pixel_spacing_mm, source_id)


def save_probability_map(pmap: ProbabilityMap, path) -> Path:
    """CMAP layout: magic, version (u8), height (u32), width (u32),
    pixel spacing in mm (f64), then row-major float32 probabilities; all little-endian."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _CMAP_HEADER.pack(CMAP_MAGIC, CMAP_VERSION, pmap.height, pmap.width,
                               float(pmap.pixel_spacing_mm))
    path.write_bytes(header + np.ascontiguousarray(pmap.probs, dtype="<f4").tobytes())
    return path


def load_probability_map(path) -> ProbabilityMap:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _CMAP_HEADER.size:
        raise CheckpointError(f"{path}: truncated probability map")
    magic, version, h, w, spacing = _CMAP_HEADER.unpack_from(blob)
    if magic != CMAP_MAGIC:
        raise CheckpointError(f"{path}: not a CMAP file")
    if version != CMAP_VERSION:
        raise CheckpointError(f"{path}: unsupported CMAP version {version}")
    payload = np.frombuffer(blob, dtype="<f4", offset=_CMAP_HEADER.size)
    if payload.size != h * w:
        raise CheckpointError(f"{path}: payload has {payload.size} values, header says {h * w}")
    return ProbabilityMap(payload.reshape(h, w).astype(np.float32), spacing, path.stem)


def colormap(p) -> np.ndarray:
    """RGB (float, 0..255) for probabilities ``p``; 0.5 maps to pure green (0, 255, 0)."""
    p = np.clip(np.asarray(p, dtype=np.float64), 0, 1)
    xs = [a for a, _ in COLORMAP_ANCHORS]
    return np.stack([np.interp(p, xs, [c[i] for _, c in COLORMAP_ANCHORS]) for i in range(3)],
                    axis=-1)


def render_heatmap(pmap: ProbabilityMap, background, threshold: float = 0.1) -> np.ndarray:
    """Alpha-blend the colormap over the grayscale background (values in [0, 1]).

    Opacity equals the probability; pixels below ``threshold`` stay background.
    Returns uint8 RGB of shape (H, W, 3).
    """
    background = np.asarray(background, dtype=np.float64)
    if background.shape != pmap.probs.shape:
        raise DimensionMismatchError("background and map differ in size", pmap.probs.shape,
                                     background.shape)
    gray = np.repeat((np.clip(background, 0, 1) * 255)[..., None], 3, axis=2)
    p = pmap.probs.astype(np.float64)
    alpha = np.where(p >= threshold, p, 0.0)[..., None]
    rgb = (1 - alpha) * gray + alpha * colormap(p)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def save_heatmap(rgb: np.ndarray, path) -> Path:
    path = Path(path)
    if path.suffix.lower() in (".ppm", ".pnm"):
        write_netpbm(path, rgb, 255)
    else:
        from PIL import Image

        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rgb, "RGB").save(path)
    return path
