"""Model-agnostic prototype visualization: heatmap upsampling and patch extraction.

The similarity map of a prototype lives on the latent grid; bilinear upsampling
to image resolution preserves its spatial arrangement, and the top-percentile
region of the upsampled heatmap gives the image patch shown as "the prototype".
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .imutil import RESOLUTION, estimate_background, resize_bilinear, to_float, to_uint8
from .protopnet import SimilarityMap

DEFAULT_PERCENTILE = 95.0


@dataclass
class Heatmap:
    values: np.ndarray  # (RESOLUTION, RESOLUTION) float64, image-aligned
    backend: str  # "upsample" | "prp"
    prototype_id: int | None = None
    image_id: int | None = None

    @property
    def argmax(self) -> tuple[int, int]:
        r, c = np.unravel_index(int(np.argmax(self.values)), self.values.shape)
        return int(r), int(c)


@dataclass(frozen=True)
class PatchBox:
    """Inclusive pixel bounds of a highlighted region."""

    top: int
    left: int
    bottom: int
    right: int

    def __post_init__(self):
        if self.bottom < self.top or self.right < self.left:
            raise ValueError("empty patch box")

    @property
    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.bottom + 1), slice(self.left, self.right + 1)

    @property
    def height(self) -> int:
        return self.bottom - self.top + 1

    @property
    def width(self) -> int:
        return self.right - self.left + 1

    def contains(self, other: "PatchBox") -> bool:
        return (
            self.top <= other.top
            and self.left <= other.left
            and self.bottom >= other.bottom
            and self.right >= other.right
        )

    def to_json(self) -> dict:
        return {"top": self.top, "left": self.left, "bottom": self.bottom, "right": self.right}


def upsample_map(sim: SimilarityMap | np.ndarray, size: int = RESOLUTION,
                 prototype_id: int | None = None, image_id: int | None = None) -> Heatmap:
    """Bilinear upsampling of a latent-grid score map to image resolution."""
    if isinstance(sim, SimilarityMap):
        values = sim.scores
        prototype_id = sim.prototype_id if prototype_id is None else prototype_id
    else:
        values = np.asarray(sim, dtype=np.float64)
    up = resize_bilinear(values, size, size)
    return Heatmap(up, "upsample", prototype_id, image_id)


def top_region_mask(heatmap: Heatmap | np.ndarray, percentile: float = DEFAULT_PERCENTILE) -> np.ndarray:
    """Boolean mask of pixels at or above the given percentile of heatmap values.

    When the threshold collapses onto the heatmap minimum (as for sparse maps
    whose flat floor spans the requested percentile), the floor is excluded so
    the region is the active support rather than the whole image.
    """
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    threshold = np.percentile(values, percentile)
    if threshold == values.min() and values.max() > threshold:
        return values > threshold
    return values >= threshold


def extract_patch(heatmap: Heatmap | np.ndarray, percentile: float = DEFAULT_PERCENTILE) -> PatchBox:
    """Smallest box containing the top-percentile region of the heatmap.

    A degenerate all-equal heatmap yields the full-image box with a warning.
    """
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if not np.isfinite(values).all():
        raise ValueError("heatmap contains non-finite values")
    h, w = values.shape
    if values.max() == values.min():
        warnings.warn("degenerate all-equal heatmap; returning full-image box")
        return PatchBox(0, 0, h - 1, w - 1)
    rows, cols = np.nonzero(top_region_mask(values, percentile))
    return PatchBox(int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))


def crop_to_canvas(image: np.ndarray, box: PatchBox, fill=None) -> np.ndarray:
    """Cut the box out of an image and paste it centered on a background canvas.

    Used by the machine "guess who" probe: the patch is presented standalone,
    padded back to model input size with the (estimated) background tint.
    """
    if fill is None:
        fill = estimate_background(image)
    img = to_float(image)
    h, w = img.shape[:2]
    canvas = np.ones_like(img) * np.asarray(fill, dtype=np.float64)
    patch = img[box.slices]
    r0 = (h - box.height) // 2
    c0 = (w - box.width) // 2
    canvas[r0 : r0 + box.height, c0 : c0 + box.width] = patch
    return to_uint8(canvas) if image.dtype == np.uint8 else canvas


@torch.no_grad()
def prototype_heatmap(model, image: np.ndarray, prototype_id: int,
                      backend: str = "upsample", image_id: int | None = None) -> Heatmap:
    """Heatmap of one prototype on one uint8 image, via either backend."""
    from .protopnet import images_to_tensor

    tensor = images_to_tensor(image[None])[0]
    if backend == "upsample":
        maps = model.similarity_maps(tensor)
        if not 0 <= prototype_id < len(maps):
            raise IndexError(f"prototype id {prototype_id} out of range")
        return upsample_map(maps[prototype_id], image_id=image_id)
    if backend == "prp":
        from .prp import prp_relevance

        return prp_relevance(model, prototype_id, tensor, image_id=image_id)
    raise ValueError(f"unknown backend {backend!r}")


def overlay_heatmap(image: np.ndarray, heatmap: Heatmap, alpha: float = 0.55) -> np.ndarray:
    """Blend a heatmap over an image for export (red-hot colormap, uint8 out)."""
    values = heatmap.values
    lo, hi = values.min(), values.max()
    norm = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    colored = np.stack([norm, norm**3, np.zeros_like(norm)], axis=-1)
    base = to_float(image)
    return to_uint8(base * (1 - alpha) + colored * alpha)
