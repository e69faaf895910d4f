"""Distance-based out-of-distribution detection with prototype models.

A sample's OOD score is its squared-L2 distance to the nearest prototype over
all latent patches; in-distribution samples sit close to some prototype,
outliers do not. Detector quality is summarized by AUROC (probability that a
random OOD sample scores above a random ID sample, ties counted half), which is
invariant under any strictly increasing rescoring.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .imutil import RESOLUTION
from .protopnet import images_to_tensor
from .shapes import SceneSpec, ShapeKind, _sample_scene, render_scene

HISTOGRAM_BINS = 50


@dataclass
class OODResult:
    label: str
    id_scores: np.ndarray
    ood_scores: np.ndarray
    auroc: float
    bin_edges: np.ndarray
    hist_id: np.ndarray
    hist_ood: np.ndarray

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "auroc": self.auroc,
            "n_id": int(len(self.id_scores)),
            "n_ood": int(len(self.ood_scores)),
            "id_score_mean": float(self.id_scores.mean()),
            "ood_score_mean": float(self.ood_scores.mean()),
            "bin_edges": self.bin_edges.tolist(),
            "hist_id": self.hist_id.tolist(),
            "hist_ood": self.hist_ood.tolist(),
        }


@torch.no_grad()
def ood_scores(model, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Min over prototypes and patches of squared-L2 distance, per image."""
    model.eval()
    tensor = images_to_tensor(images)
    out = []
    for start in range(0, len(tensor), batch_size):
        batch = tensor[start : start + batch_size]
        z = model.extractor(batch).double()
        d = ((z.unsqueeze(1) - model.prototypes.double()[None, :, :, None, None]) ** 2).sum(2)
        out.append(d.amin(dim=(1, 2, 3)).numpy())
    return np.concatenate(out)


def ood_score(model, image: np.ndarray) -> float:
    return float(ood_scores(model, image[None])[0])


def auroc(id_scores, ood_scores_) -> float:
    """Rank-statistic AUROC: P(ood > id) with ties counted half.

    Computed via the Mann-Whitney U statistic with average ranks, so it matches
    the all-pairs count exactly, including ties.
    """
    id_scores = np.asarray(id_scores, dtype=np.float64)
    ood = np.asarray(ood_scores_, dtype=np.float64)
    if len(id_scores) == 0 or len(ood) == 0:
        raise ValueError("both score sets must be non-empty")
    ranks = rankdata(np.concatenate([id_scores, ood]))
    r_ood = ranks[len(id_scores) :].sum()
    u = r_ood - len(ood) * (len(ood) + 1) / 2.0
    return float(u / (len(id_scores) * len(ood)))


# ---------------------------------------------------------------------------
# Far-OOD generators (synthetic analog)
# ---------------------------------------------------------------------------

# A palette never used by the in-distribution renderer: neon tones on dark ground.
ALIEN_PALETTE: dict[ShapeKind, tuple[float, float, float]] = {
    ShapeKind.CUBE: (0.05, 0.95, 0.95),
    ShapeKind.SPHERE: (0.95, 0.05, 0.85),
    ShapeKind.CONE: (0.98, 0.55, 0.05),
    ShapeKind.CYLINDER: (0.20, 0.05, 0.95),
    ShapeKind.TORUS: (0.90, 0.95, 0.08),
    ShapeKind.ICOSPHERE: (0.95, 0.10, 0.10),
}


def make_noise_images(n: int, seed: int) -> np.ndarray:
    """Uniform pixel noise: maximally far from any rendered scene."""
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, RESOLUTION, RESOLUTION, 3), dtype=np.uint8)


def make_alien_palette_images(n: int, seed: int) -> np.ndarray:
    """Scenes rendered with an unseen palette on a dark background tint."""
    images = []
    kinds = list(ShapeKind)
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(99, i)))
        picked = [kinds[k] for k in rng.choice(len(kinds), size=2, replace=False)]
        spec = _sample_scene(picked, rng)
        dark = SceneSpec(spec.shapes, tuple((0.12 + 0.05 * rng.uniform(size=3)).tolist()))
        img, _ = render_scene(dark, palette=ALIEN_PALETTE)
        images.append(img)
    return np.stack(images)


def make_far_ood(n: int, seed: int) -> np.ndarray:
    """Half uniform-noise images, half unseen-palette scenes."""
    half = n // 2
    return np.concatenate(
        [make_noise_images(half, seed), make_alien_palette_images(n - half, seed)]
    )


# ---------------------------------------------------------------------------
# Experiment
# ---------------------------------------------------------------------------


def _image_hashes(images: np.ndarray) -> set[str]:
    return {hashlib.sha1(images[i].tobytes()).hexdigest() for i in range(len(images))}


def _histograms(id_s: np.ndarray, ood_s: np.ndarray, bins: int = HISTOGRAM_BINS):
    lo = min(id_s.min(), ood_s.min())
    hi = max(id_s.max(), ood_s.max())
    if hi <= lo:
        hi = lo + 1e-9
    edges = np.linspace(lo, hi, bins + 1)
    h_id, _ = np.histogram(id_s, bins=edges)
    h_ood, _ = np.histogram(ood_s, bins=edges)
    return edges, h_id, h_ood


def run_ood_experiment(model, id_images: np.ndarray, near_images: np.ndarray,
                       far_images: np.ndarray, out_dir: str | Path | None = None
                       ) -> tuple[OODResult, OODResult]:
    """Score ID vs near/far OOD splits, compute AUROCs, export histograms.

    The three splits must be disjoint (checked by image content hash).
    """
    sets = [_image_hashes(x) for x in (id_images, near_images, far_images)]
    for a in range(3):
        for b in range(a + 1, 3):
            if sets[a] & sets[b]:
                raise ValueError("ID/near/far splits overlap")

    id_s = ood_scores(model, id_images)
    near_s = ood_scores(model, near_images)
    far_s = ood_scores(model, far_images)

    results = []
    for label, scores in (("near", near_s), ("far", far_s)):
        edges, h_id, h_ood = _histograms(id_s, scores)
        results.append(OODResult(label, id_s, scores, auroc(id_s, scores), edges, h_id, h_ood))

    if out_dir is not None:
        export_histograms(results, Path(out_dir))
    return results[0], results[1]


def export_histograms(results: list[OODResult], out_dir: Path) -> None:
    """Write histograms.csv and histograms.png alongside the experiment output."""
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "histograms.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["split", "bin_left", "bin_right", "count_id", "count_ood"])
        for res in results:
            for i in range(len(res.hist_id)):
                writer.writerow(
                    [res.label, res.bin_edges[i], res.bin_edges[i + 1],
                     res.hist_id[i], res.hist_ood[i]]
                )

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, len(results), figsize=(6 * len(results), 4))
    axes = np.atleast_1d(axes)
    for ax, res in zip(axes, results):
        centers = 0.5 * (res.bin_edges[:-1] + res.bin_edges[1:])
        width = res.bin_edges[1] - res.bin_edges[0]
        ax.bar(centers, res.hist_id, width=width, alpha=0.6, label="ID")
        ax.bar(centers, res.hist_ood, width=width, alpha=0.6, label=f"{res.label} OOD")
        ax.set_title(f"{res.label} OOD (AUROC {res.auroc:.3f})")
        ax.set_xlabel("distance to nearest prototype")
        ax.set_ylabel("count")
        ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "histograms.png", dpi=120)
    plt.close(fig)
