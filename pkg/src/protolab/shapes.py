"""Synthetic shapes benchmark: deterministic 2D scene renderer with ground-truth masks.

Scenes are flat-shaded 2D analogs of rendered 3D shape arrangements. Each of the
six shape kinds keeps its 3D vocabulary name but is drawn as a flat silhouette
(cube -> square, sphere -> disc, cone -> triangle, cylinder -> rectangle,
torus -> ring, icosphere -> hexagon) with a fixed fill colour. Rendering is a
pure function of the scene description, so identical specs produce bit-identical
images, and every shape comes with an exact per-pixel mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage
from scipy.special import erf

from .imutil import RESOLUTION, estimate_background, resize_bilinear, to_float, to_uint8

# Width (in pixels) of the Gaussian-profile anti-aliasing band. Kept smooth
# enough that a rotate/un-rotate round trip stays within 8/255 per pixel.
AA_SIGMA = 1.2

# Minimum clearance between shape silhouettes, in pixels.
MIN_SEPARATION = 2.0


class ShapeKind(str, Enum):
    CUBE = "cube"
    SPHERE = "sphere"
    CONE = "cone"
    CYLINDER = "cylinder"
    TORUS = "torus"
    ICOSPHERE = "icosphere"


SHAPE_COLORS: dict[ShapeKind, tuple[float, float, float]] = {
    ShapeKind.CUBE: (0.80, 0.25, 0.22),
    ShapeKind.SPHERE: (0.25, 0.35, 0.80),
    ShapeKind.CONE: (0.24, 0.65, 0.30),
    ShapeKind.CYLINDER: (0.82, 0.71, 0.25),
    ShapeKind.TORUS: (0.62, 0.28, 0.68),
    ShapeKind.ICOSPHERE: (0.25, 0.68, 0.66),
}

V1_COMPOSITIONS: dict[int, frozenset[ShapeKind]] = {
    0: frozenset({ShapeKind.CUBE, ShapeKind.SPHERE, ShapeKind.CONE}),
    1: frozenset({ShapeKind.SPHERE, ShapeKind.CYLINDER, ShapeKind.ICOSPHERE}),
    2: frozenset({ShapeKind.CONE, ShapeKind.TORUS, ShapeKind.ICOSPHERE}),
}

V2_COMPOSITIONS: dict[int, frozenset[ShapeKind]] = {
    0: frozenset({ShapeKind.CUBE, ShapeKind.SPHERE}),
    1: frozenset({ShapeKind.CONE, ShapeKind.CYLINDER}),
    2: frozenset({ShapeKind.TORUS, ShapeKind.ICOSPHERE}),
}

COMPOSITIONS = {"V1": V1_COMPOSITIONS, "V2": V2_COMPOSITIONS}

# Canonical drawing order inside a scene (fixed so datasets are reproducible).
_KIND_ORDER = list(ShapeKind)


class SceneOverlapError(ValueError):
    """Raised when a scene spec places shapes closer than the required clearance."""


@dataclass(frozen=True)
class ShapePlacement:
    kind: ShapeKind
    position: tuple[float, float]  # normalized (x, y) in [0,1]^2
    scale: float  # silhouette diameter as fraction of image side, in [0.1, 0.4]
    rotation: float = 0.0  # degrees, counter-clockwise

    def center_px(self, resolution: int = RESOLUTION) -> tuple[float, float]:
        return (self.position[0] * resolution, self.position[1] * resolution)

    def radius_px(self, resolution: int = RESOLUTION) -> float:
        return self.scale * resolution / 2.0


@dataclass(frozen=True)
class SceneSpec:
    shapes: tuple[ShapePlacement, ...]
    background_tint: tuple[float, float, float]
    seed: int = 0

    def validate(self, resolution: int = RESOLUTION) -> None:
        if len(self.shapes) > 4:
            raise ValueError(f"scene holds {len(self.shapes)} shapes, maximum is 4")
        for s in self.shapes:
            if not (0.1 <= s.scale <= 0.4):
                raise ValueError(f"scale {s.scale} outside [0.1, 0.4]")
            if not (0.0 <= s.position[0] <= 1.0 and 0.0 <= s.position[1] <= 1.0):
                raise ValueError(f"position {s.position} outside [0,1]^2")
        # Conservative bounding-circle clearance check.
        for i in range(len(self.shapes)):
            for j in range(i + 1, len(self.shapes)):
                a, b = self.shapes[i], self.shapes[j]
                ax, ay = a.center_px(resolution)
                bx, by = b.center_px(resolution)
                dist = np.hypot(ax - bx, ay - by)
                if dist < a.radius_px(resolution) + b.radius_px(resolution) + MIN_SEPARATION:
                    raise SceneOverlapError(
                        f"shapes {i} ({a.kind.value}) and {j} ({b.kind.value}) are "
                        f"closer than {MIN_SEPARATION}px"
                    )


@dataclass
class MaskSet:
    """Per-shape binary masks at image resolution, aligned with the scene's shape list."""

    entries: list[tuple[ShapeKind, np.ndarray]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[tuple[ShapeKind, np.ndarray]]:
        return iter(self.entries)

    def kinds(self) -> list[ShapeKind]:
        return [k for k, _ in self.entries]

    def get(self, kind: ShapeKind) -> np.ndarray:
        for k, m in self.entries:
            if k == kind:
                return m
        raise KeyError(kind)

    def masks(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, RESOLUTION, RESOLUTION), dtype=bool)
        return np.stack([m for _, m in self.entries])

    def pairwise_disjoint(self) -> bool:
        stack = self.masks()
        return bool((stack.sum(axis=0) <= 1).all())


# ---------------------------------------------------------------------------
# Signed distance functions (pixel units, negative inside)
# ---------------------------------------------------------------------------


def _rotate_coords(dx: np.ndarray, dy: np.ndarray, degrees: float):
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    return c * dx + s * dy, -s * dx + c * dy


def _sdf_disc(dx, dy, r):
    return np.hypot(dx, dy) - r


def _sdf_box(dx, dy, hw, hh):
    qx = np.abs(dx) - hw
    qy = np.abs(dy) - hh
    return np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0)) + np.minimum(
        np.maximum(qx, qy), 0.0
    )


def _sdf_ring(dx, dy, r_outer, r_inner):
    mid = 0.5 * (r_outer + r_inner)
    half = 0.5 * (r_outer - r_inner)
    return np.abs(np.hypot(dx, dy) - mid) - half


def _sdf_convex_polygon(dx, dy, vertices: np.ndarray):
    """Max of signed edge-line distances for a convex polygon with CCW vertices."""
    sd = np.full(dx.shape, -np.inf)
    n = len(vertices)
    for i in range(n):
        ax, ay = vertices[i]
        bx, by = vertices[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        norm = np.hypot(ex, ey)
        nx, ny = ey / norm, -ex / norm  # outward normal for CCW winding
        sd = np.maximum(sd, nx * (dx - ax) + ny * (dy - ay))
    return sd


def _regular_polygon_vertices(r: float, n: int, phase_deg: float) -> np.ndarray:
    ang = np.deg2rad(phase_deg) + 2 * np.pi * np.arange(n) / n
    return np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)


def shape_sdf(placement: ShapePlacement, resolution: int = RESOLUTION) -> np.ndarray:
    """Signed distance grid (pixel centers) for one placed shape."""
    ys, xs = np.mgrid[0:resolution, 0:resolution]
    px = xs + 0.5
    py = ys + 0.5
    cx, cy = placement.center_px(resolution)
    r = placement.radius_px(resolution)
    dx, dy = _rotate_coords(px - cx, py - cy, placement.rotation)

    kind = placement.kind
    if kind == ShapeKind.SPHERE:
        return _sdf_disc(dx, dy, r)
    if kind == ShapeKind.CUBE:
        a = r / np.sqrt(2.0)
        return _sdf_box(dx, dy, a, a)
    if kind == ShapeKind.CYLINDER:
        hw = r / np.sqrt(5.0)
        return _sdf_box(dx, dy, hw, 2.0 * hw)
    if kind == ShapeKind.TORUS:
        return _sdf_ring(dx, dy, r, 0.5 * r)
    if kind == ShapeKind.CONE:
        verts = _regular_polygon_vertices(r, 3, -90.0)  # apex up
        return _sdf_convex_polygon(dx, dy, verts)
    if kind == ShapeKind.ICOSPHERE:
        verts = _regular_polygon_vertices(r, 6, 0.0)
        return _sdf_convex_polygon(dx, dy, verts)
    raise ValueError(f"unknown shape kind {kind!r}")


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def render_scene(
    spec: SceneSpec,
    palette: dict[ShapeKind, tuple[float, float, float]] | None = None,
    resolution: int = RESOLUTION,
) -> tuple[np.ndarray, MaskSet]:
    """Render a scene to an anti-aliased RGB image plus per-shape masks.

    Returns a (resolution, resolution, 3) uint8 image and a MaskSet whose
    entries follow the scene's shape order. A shape's mask is the set of pixel
    centers inside its silhouette (coverage >= 0.5).
    """
    spec.validate(resolution)
    colors = palette if palette is not None else SHAPE_COLORS

    img = np.ones((resolution, resolution, 3), dtype=np.float64)
    img *= np.asarray(spec.background_tint, dtype=np.float64)

    masks = MaskSet()
    for placement in spec.shapes:
        sdf = shape_sdf(placement, resolution)
        coverage = 0.5 * (1.0 - erf(sdf / (AA_SIGMA * np.sqrt(2.0))))
        color = np.asarray(colors[placement.kind], dtype=np.float64)
        img = img * (1.0 - coverage[..., None]) + coverage[..., None] * color
        masks.entries.append((placement.kind, sdf <= 0.0))

    return to_uint8(img), masks


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------


@dataclass
class DatasetSplit:
    version: str
    images: np.ndarray  # (N, R, R, 3) uint8
    labels: np.ndarray  # (N,) int
    mask_sets: list[MaskSet]
    class_composition: dict[int, frozenset[ShapeKind]]
    specs: list[SceneSpec]
    seed: int

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.class_composition)


def _sample_scene(
    kinds: Sequence[ShapeKind], rng: np.random.Generator, resolution: int = RESOLUTION
) -> SceneSpec:
    """Place the given kinds without overlap; positions/scales/rotations randomized."""
    n = len(kinds)
    lo, hi = (0.18, 0.28) if n >= 3 else (0.22, 0.34)
    margin_px = 6.0
    for _attempt in range(500):
        placements = []
        ok = True
        for kind in kinds:
            scale = float(rng.uniform(lo, hi))
            r = scale * resolution / 2.0
            # keep silhouettes fully inside the frame and off the corners
            pad = (r + 4.0) / resolution
            x = float(rng.uniform(pad, 1.0 - pad))
            y = float(rng.uniform(pad, 1.0 - pad))
            rot = float(rng.uniform(0.0, 360.0))
            cand = ShapePlacement(kind, (x, y), scale, rot)
            for prev in placements:
                px_, py_ = prev.center_px(resolution)
                cx_, cy_ = cand.center_px(resolution)
                if np.hypot(px_ - cx_, py_ - cy_) < (
                    prev.radius_px(resolution) + cand.radius_px(resolution) + margin_px
                ):
                    ok = False
                    break
            if not ok:
                break
            placements.append(cand)
        if ok:
            tint = 0.78 + rng.uniform(-0.06, 0.06, size=3)
            return SceneSpec(tuple(placements), tuple(tint.tolist()))
    raise RuntimeError("could not place shapes without overlap after 500 attempts")


def make_dataset(version: str, n_per_class: int, seed: int) -> DatasetSplit:
    """Generate the V1 (overlapping compositions) or V2 (disjoint) benchmark.

    Every image contains exactly the shapes of its class composition, drawn in a
    fixed kind order, with positions, scales and rotations randomized from the
    seed. Identical (version, n_per_class, seed) give bit-identical datasets.
    """
    if version not in COMPOSITIONS:
        raise ValueError(f"unknown dataset version {version!r}, expected V1 or V2")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")

    compositions = COMPOSITIONS[version]
    images, labels, mask_sets, specs = [], [], [], []
    for class_id in sorted(compositions):
        kinds = sorted(compositions[class_id], key=_KIND_ORDER.index)
        for i in range(n_per_class):
            ss = np.random.SeedSequence(entropy=seed, spawn_key=(class_id, i))
            rng = np.random.default_rng(ss)
            spec = _sample_scene(kinds, rng)
            spec = SceneSpec(spec.shapes, spec.background_tint, seed=int(ss.generate_state(1)[0]))
            img, masks = render_scene(spec)
            images.append(img)
            labels.append(class_id)
            mask_sets.append(masks)
            specs.append(spec)

    return DatasetSplit(
        version=version,
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        mask_sets=mask_sets,
        class_composition=dict(compositions),
        specs=specs,
        seed=seed,
    )


def train_test_split(
    ds: DatasetSplit, train_fraction: float = 0.8
) -> tuple[DatasetSplit, DatasetSplit]:
    """Deterministic per-class split: the first train_fraction of each class's
    generation order goes to train, the rest to test."""
    if not (0.0 < train_fraction < 1.0):
        raise ValueError("train_fraction must be in (0,1)")
    train_idx, test_idx = [], []
    for class_id in sorted(ds.class_composition):
        idx = np.flatnonzero(ds.labels == class_id)
        cut = int(round(len(idx) * train_fraction))
        cut = min(max(cut, 1), len(idx) - 1)
        train_idx.extend(idx[:cut].tolist())
        test_idx.extend(idx[cut:].tolist())

    def take(indices: list[int]) -> DatasetSplit:
        return DatasetSplit(
            version=ds.version,
            images=ds.images[indices],
            labels=ds.labels[indices],
            mask_sets=[ds.mask_sets[i] for i in indices],
            class_composition=ds.class_composition,
            specs=[ds.specs[i] for i in indices],
            seed=ds.seed,
        )

    return take(train_idx), take(test_idx)


def subset_classes(ds: DatasetSplit, class_ids: Sequence[int]) -> DatasetSplit:
    """Restrict a dataset to the given classes, relabelling them 0..k-1."""
    class_ids = list(class_ids)
    remap = {c: i for i, c in enumerate(class_ids)}
    keep = [i for i in range(len(ds)) if int(ds.labels[i]) in remap]
    return DatasetSplit(
        version=ds.version,
        images=ds.images[keep],
        labels=np.asarray([remap[int(ds.labels[i])] for i in keep], dtype=np.int64),
        mask_sets=[ds.mask_sets[i] for i in keep],
        class_composition={remap[c]: ds.class_composition[c] for c in class_ids},
        specs=[ds.specs[i] for i in keep],
        seed=ds.seed,
    )


# ---------------------------------------------------------------------------
# Image transformations (invariance probes)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transform:
    kind: str  # "rotate" | "center_crop"
    amount: float

    @staticmethod
    def rotate(degrees: float) -> "Transform":
        return Transform("rotate", float(degrees))

    @staticmethod
    def center_crop(fraction: float) -> "Transform":
        if not (0.0 < fraction <= 1.0):
            raise ValueError(f"crop fraction {fraction} outside (0, 1]")
        return Transform("center_crop", float(fraction))

    def describe(self) -> str:
        if self.kind == "rotate":
            return f"rotate({self.amount:g}deg)"
        return f"center_crop({self.amount:g})"


def rotate_image(image: np.ndarray, degrees: float, fill=None) -> np.ndarray:
    """Rotate about the image center; exposed corners take the background tint.

    Quintic spline resampling keeps a rotate/un-rotate round trip within a few
    grey levels on anti-aliased renders. fill defaults to the tint estimated
    from the image corners.
    """
    if degrees % 360.0 == 0.0:
        return image.copy()
    img = to_float(image)
    if fill is None:
        fill = estimate_background(img)
    out = np.stack(
        [
            ndimage.rotate(
                img[..., c], degrees, reshape=False, order=5, mode="constant",
                cval=float(fill[c]),
            )
            for c in range(img.shape[-1])
        ],
        axis=-1,
    )
    out = np.clip(out, 0.0, 1.0)
    return to_uint8(out) if image.dtype == np.uint8 else out


def center_crop_image(image: np.ndarray, fraction: float) -> np.ndarray:
    """Crop the central fraction of the image and resize back to full resolution."""
    if not (0.0 < fraction <= 1.0):
        raise ValueError(f"crop fraction {fraction} outside (0, 1]")
    if fraction == 1.0:
        return image.copy()
    h, w = image.shape[:2]
    size = max(int(round(h * fraction)), 1)
    y0 = (h - size) // 2
    x0 = (w - size) // 2
    window = to_float(image)[y0 : y0 + size, x0 : x0 + size]
    out = resize_bilinear(window, h, w)
    out = np.clip(out, 0.0, 1.0)
    return to_uint8(out) if image.dtype == np.uint8 else out


def transform_image(image: np.ndarray, t: Transform, fill=None) -> np.ndarray:
    if t.kind == "rotate":
        return rotate_image(image, t.amount, fill=fill)
    if t.kind == "center_crop":
        return center_crop_image(image, t.amount)
    raise ValueError(f"unknown transform kind {t.kind!r}")


DEFAULT_TRANSFORMS: tuple[Transform, ...] = (
    Transform.rotate(25.0),
    Transform.center_crop(0.8),
)


# ---------------------------------------------------------------------------
# Disk format: images/*.png, masks/*.png, manifest.json
# ---------------------------------------------------------------------------


def _spec_to_json(spec: SceneSpec) -> dict:
    return {
        "shapes": [
            {
                "kind": p.kind.value,
                "position": list(p.position),
                "scale": p.scale,
                "rotation": p.rotation,
            }
            for p in spec.shapes
        ],
        "background_tint": list(spec.background_tint),
        "seed": spec.seed,
    }


def _spec_from_json(obj: dict) -> SceneSpec:
    return SceneSpec(
        shapes=tuple(
            ShapePlacement(
                ShapeKind(s["kind"]), tuple(s["position"]), s["scale"], s["rotation"]
            )
            for s in obj["shapes"]
        ),
        background_tint=tuple(obj["background_tint"]),
        seed=obj["seed"],
    )


def save_dataset(ds: DatasetSplit, path: str | Path) -> None:
    """Write images/*.png, masks/*_<kind>.png and manifest.json."""
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    (path / "masks").mkdir(parents=True, exist_ok=True)

    entries = []
    for i in range(len(ds)):
        stem = f"img_{i:05d}"
        img_rel = f"images/{stem}.png"
        PILImage.fromarray(ds.images[i]).save(path / img_rel)
        mask_rels = {}
        for kind, mask in ds.mask_sets[i]:
            mask_rel = f"masks/{stem}_{kind.value}.png"
            PILImage.fromarray((mask * 255).astype(np.uint8)).save(path / mask_rel)
            mask_rels[kind.value] = mask_rel
        entries.append(
            {
                "image": img_rel,
                "label": int(ds.labels[i]),
                "masks": mask_rels,
                "spec": _spec_to_json(ds.specs[i]),
            }
        )

    manifest = {
        "format_version": 1,
        "version": ds.version,
        "seed": ds.seed,
        "resolution": RESOLUTION,
        "compositions": {
            str(c): sorted(k.value for k in kinds)
            for c, kinds in ds.class_composition.items()
        },
        "entries": entries,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_dataset(path: str | Path) -> DatasetSplit:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    images, labels, mask_sets, specs = [], [], [], []
    for entry in manifest["entries"]:
        images.append(np.asarray(PILImage.open(path / entry["image"]).convert("RGB")))
        labels.append(entry["label"])
        spec = _spec_from_json(entry["spec"])
        specs.append(spec)
        ms = MaskSet()
        for p in spec.shapes:
            rel = entry["masks"][p.kind.value]
            m = np.asarray(PILImage.open(path / rel)) > 127
            ms.entries.append((p.kind, m))
        mask_sets.append(ms)

    compositions = {
        int(c): frozenset(ShapeKind(k) for k in kinds)
        for c, kinds in manifest["compositions"].items()
    }
    return DatasetSplit(
        version=manifest["version"],
        images=np.stack(images) if images else np.zeros((0, RESOLUTION, RESOLUTION, 3), np.uint8),
        labels=np.asarray(labels, dtype=np.int64),
        mask_sets=mask_sets,
        class_composition=compositions,
        specs=specs,
        seed=manifest["seed"],
    )
