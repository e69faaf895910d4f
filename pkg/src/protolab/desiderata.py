"""Automated prototype-quality metrics against synthetic ground truth.

Four measurable proxies, one per desired property of interpretable prototypes:

  purity                     how much of a prototype's highlighted mass falls
                             inside a single ground-truth shape mask
  redundancy                 pairwise prototype similarity (vector cosine and
                             activation-region IoU) with duplicate flagging
  transformation consistency stability of top-k prototypes / tree paths under
                             image transforms
  task relevance             whether a prototype's own source patch, shown in
                             isolation, is classified as the prototype's class

These are constructed operationalizations of inherently human-judged
properties; the report labels them as such, and the human counterpart lives in
the study service.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .explain import DEFAULT_PERCENTILE, crop_to_canvas, extract_patch, prototype_heatmap, top_region_mask
from .protopnet import ProtoPNet, images_to_tensor
from .prototree import SoftTree
from .shapes import DEFAULT_TRANSFORMS, DatasetSplit, Transform, transform_image

DEFAULT_TAU_COSINE = 0.95
DEFAULT_TAU_IOU = 0.5
DEFAULT_TOP_K = 3


class MasksUnavailableError(ValueError):
    """Purity needs per-shape ground-truth masks (synthetic datasets only)."""


def top_k_prototypes(pooled: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest pooled similarities, ties broken by index order.

    Any strictly increasing transform of the scores selects the same set.
    """
    order = np.argsort(-np.asarray(pooled), kind="stable")
    return [int(i) for i in order[:k]]


# ---------------------------------------------------------------------------
# Purity
# ---------------------------------------------------------------------------


def purity_from_heatmap(values: np.ndarray, masks: Sequence[np.ndarray],
                        percentile: float = DEFAULT_PERCENTILE) -> float:
    """Top-region mass inside the best single mask, over total top-region mass."""
    region = top_region_mask(values, percentile)
    total = float(values[region].sum())
    if total <= 0:
        return 0.0
    best = 0.0
    for mask in masks:
        inside = float(values[region & mask].sum())
        best = max(best, inside / total)
    return best


def purity(model, prototype_id: int, dataset: DatasetSplit,
           backend: str = "upsample", percentile: float = DEFAULT_PERCENTILE) -> float:
    """Mean purity of one prototype's heatmaps over a mask-annotated test set."""
    if not dataset.mask_sets or any(len(ms) == 0 for ms in dataset.mask_sets):
        raise MasksUnavailableError("dataset has no ground-truth masks")
    scores = []
    for i in range(len(dataset)):
        heat = prototype_heatmap(model, dataset.images[i], prototype_id, backend, image_id=i)
        masks = [m for _, m in dataset.mask_sets[i]]
        scores.append(purity_from_heatmap(heat.values, masks, percentile))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# Redundancy
# ---------------------------------------------------------------------------


@dataclass
class RedundancyResult:
    class_id: int
    prototype_ids: list[int]
    matrix: np.ndarray  # symmetric, unit diagonal
    cosine: np.ndarray
    iou: np.ndarray
    duplicates: list[tuple[int, int]]

    @property
    def duplicate_count(self) -> int:
        return len(self.duplicates)


def _region_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def redundancy(model: ProtoPNet, class_id: int, probe_set: DatasetSplit,
               tau_cosine: float = DEFAULT_TAU_COSINE, tau_iou: float = DEFAULT_TAU_IOU,
               percentile: float = DEFAULT_PERCENTILE) -> RedundancyResult:
    """Pairwise duplication analysis for one class's prototypes.

    Score = max(vector cosine, mean activation-region IoU over the probe set);
    a pair is a duplicate when cosine >= tau_cosine or IoU >= tau_iou.
    """
    ids = [int(j) for j in np.flatnonzero(model.prototype_classes.numpy() == class_id)]
    if len(ids) < 2:
        raise ValueError(f"class {class_id} has fewer than 2 prototypes")
    if len(probe_set) == 0:
        raise ValueError("empty probe set")

    vecs = model.prototypes.detach().numpy()[ids]
    norms = np.linalg.norm(vecs, axis=1, keepdims=True)
    unit = vecs / np.clip(norms, 1e-12, None)
    cos = np.clip(unit @ unit.T, -1.0, 1.0)

    regions = []  # per prototype: list of top-region masks over the probe set
    for j in ids:
        regs = []
        for i in range(len(probe_set)):
            heat = prototype_heatmap(model, probe_set.images[i], j, "upsample", image_id=i)
            regs.append(top_region_mask(heat.values, percentile))
        regions.append(regs)

    n = len(ids)
    iou = np.eye(n)
    for a in range(n):
        for b in range(a + 1, n):
            vals = [_region_iou(regions[a][i], regions[b][i]) for i in range(len(probe_set))]
            iou[a, b] = iou[b, a] = float(np.mean(vals))

    matrix = np.maximum(cos, iou)
    np.fill_diagonal(matrix, 1.0)
    duplicates = [
        (ids[a], ids[b])
        for a in range(n)
        for b in range(a + 1, n)
        if cos[a, b] >= tau_cosine or iou[a, b] >= tau_iou
    ]
    return RedundancyResult(class_id, ids, matrix, cos, iou, duplicates)


# ---------------------------------------------------------------------------
# Transformation consistency
# ---------------------------------------------------------------------------


@dataclass
class TransformProbe:
    transform: str
    top_k_overlap: float | None = None
    same_class_fraction: float | None = None  # class-composition invariance of top-k
    true_class_fraction: float | None = None  # top-k share belonging to the image's class
    path_equality_rate: float | None = None

    def to_json(self) -> dict:
        return {
            "transform": self.transform,
            "top_k_overlap": self.top_k_overlap,
            "same_class_fraction": self.same_class_fraction,
            "true_class_fraction": self.true_class_fraction,
            "path_equality_rate": self.path_equality_rate,
        }


@torch.no_grad()
def _pooled_scores(model, images: np.ndarray) -> np.ndarray:
    model.eval()
    tensor = images_to_tensor(images)
    if isinstance(model, ProtoPNet):
        return model(tensor).pooled.numpy()
    # tree: rank node prototypes by negative min distance (monotone in similarity)
    return -model(tensor).d_min.numpy()


def _multiset_overlap(a: list[int], b: list[int]) -> float:
    """|multiset intersection| / len(a)."""
    from collections import Counter

    ca, cb = Counter(a), Counter(b)
    inter = sum(min(ca[x], cb[x]) for x in ca)
    return inter / len(a)


def transformation_consistency(model, dataset: DatasetSplit,
                               transforms: Sequence[Transform] = DEFAULT_TRANSFORMS,
                               k: int = DEFAULT_TOP_K) -> list[TransformProbe]:
    """Stability of nearest prototypes (and tree paths) under image transforms.

    same_class_fraction measures whether the transform changed WHICH CLASSES the
    top-k prototypes come from (multiset overlap with the untransformed top-k's
    classes); the identity transform scores exactly 1. true_class_fraction is
    the plain share of top-k prototypes belonging to the image's own class, the
    quantity that drops when e.g. a rotation pulls in another class's
    background prototype.
    """
    is_tree = isinstance(model, SoftTree)
    base_pooled = _pooled_scores(model, dataset.images)
    if is_tree:
        base_paths = [
            model.extract_decision_path(images_to_tensor(dataset.images[i : i + 1])[0]).signature()
            for i in range(len(dataset))
        ]

    probes = []
    for t in transforms:
        moved = np.stack([transform_image(dataset.images[i], t) for i in range(len(dataset))])
        pooled = _pooled_scores(model, moved)
        overlaps = []
        same_class = []
        true_class = []
        for i in range(len(dataset)):
            before = top_k_prototypes(base_pooled[i], k)
            after = top_k_prototypes(pooled[i], k)
            overlaps.append(len(set(before) & set(after)) / k)
            if not is_tree:
                classes = model.prototype_classes.numpy()
                same_class.append(
                    _multiset_overlap([int(classes[j]) for j in before],
                                      [int(classes[j]) for j in after])
                )
                true_class.append(
                    float(np.mean([classes[j] == dataset.labels[i] for j in after]))
                )
        probe = TransformProbe(t.describe(), top_k_overlap=float(np.mean(overlaps)))
        if not is_tree:
            probe.same_class_fraction = float(np.mean(same_class))
            probe.true_class_fraction = float(np.mean(true_class))
        else:
            eq = [
                model.extract_decision_path(images_to_tensor(moved[i : i + 1])[0]).signature()
                == base_paths[i]
                for i in range(len(dataset))
            ]
            probe.path_equality_rate = float(np.mean(eq))
        probes.append(probe)
    return probes


# ---------------------------------------------------------------------------
# Task relevance ("guess who" machine proxy)
# ---------------------------------------------------------------------------


@dataclass
class TaskRelevanceResult:
    accuracy: float
    outcomes: list[dict]  # per prototype: id, class, predicted, correct


@torch.no_grad()
def task_relevance(model: ProtoPNet, dataset: DatasetSplit,
                   percentile: float = DEFAULT_PERCENTILE) -> TaskRelevanceResult:
    """Classify each projected prototype's own source patch, shown in isolation.

    The patch box comes from the prototype's heatmap on its source image; it is
    re-cropped, padded to input size with the background tint, and sent through
    the classifier. Accuracy is the fraction predicted as the prototype's class.
    """
    if any(s is None for s in model.sources):
        raise ValueError("prototypes are unprojected; run project_prototypes first")
    if max(s[0] for s in model.sources) >= len(dataset):
        raise ValueError(
            "prototype sources index past the dataset; pass the dataset the "
            "prototypes were projected on (the training split)"
        )
    outcomes = []
    hits = 0
    for proto in model.prototype_info():
        img_idx = proto.source[0]
        image = dataset.images[img_idx]
        heat = prototype_heatmap(model, image, proto.id, "upsample", image_id=img_idx)
        box = extract_patch(heat, percentile)
        canvas = crop_to_canvas(image, box)
        pred = int(model.predict(images_to_tensor(canvas[None]))[0])
        correct = pred == proto.class_id
        hits += int(correct)
        outcomes.append(
            {
                "prototype": proto.id,
                "class": proto.class_id,
                "source_image": img_idx,
                "box": box.to_json(),
                "predicted": pred,
                "correct": correct,
            }
        )
    return TaskRelevanceResult(hits / model.num_prototypes, outcomes)


# ---------------------------------------------------------------------------
# Full report
# ---------------------------------------------------------------------------


@dataclass
class DesiderataReport:
    model_id: str
    config: dict
    purity_scores: dict  # backend -> {prototype id -> purity}
    redundancy_results: list[RedundancyResult] = field(default_factory=list)
    transform_probes: list[TransformProbe] = field(default_factory=list)
    task_relevance_accuracy: float | None = None
    task_relevance_outcomes: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "schema_version": 1,
            "model_id": self.model_id,
            "config": self.config,
            "metrics_are_operationalizations": True,
            "purity": {
                backend: {str(k): v for k, v in scores.items()}
                for backend, scores in self.purity_scores.items()
            },
            "redundancy": [
                {
                    "class": r.class_id,
                    "prototypes": r.prototype_ids,
                    "matrix": np.round(r.matrix, 6).tolist(),
                    "cosine": np.round(r.cosine, 6).tolist(),
                    "iou": np.round(r.iou, 6).tolist(),
                    "duplicates": [list(p) for p in r.duplicates],
                    "duplicate_count": r.duplicate_count,
                }
                for r in self.redundancy_results
            ],
            "transformation_consistency": [p.to_json() for p in self.transform_probes],
            "task_relevance": {
                "accuracy": self.task_relevance_accuracy,
                "outcomes": self.task_relevance_outcomes,
            },
            "notes": self.notes,
        }


def evaluate_model(model, dataset: DatasetSplit, model_id: str = "model",
                   transforms: Sequence[Transform] = DEFAULT_TRANSFORMS,
                   k: int = DEFAULT_TOP_K, tau_cosine: float = DEFAULT_TAU_COSINE,
                   tau_iou: float = DEFAULT_TAU_IOU, percentile: float = DEFAULT_PERCENTILE,
                   backends: Sequence[str] = ("upsample", "prp"),
                   max_purity_images: int = 24,
                   projection_data: DatasetSplit | None = None) -> DesiderataReport:
    """Run every applicable metric for a model over a mask-annotated dataset.

    Purity, redundancy and the transformation probes run on `dataset` (a test
    split). Task relevance needs the images the prototypes were projected on,
    so pass that split as `projection_data`; without it the metric runs only
    when the source indices happen to fit inside `dataset`.
    """
    config = {
        "k": k,
        "tau_cosine": tau_cosine,
        "tau_iou": tau_iou,
        "percentile": percentile,
        "transforms": [t.describe() for t in transforms],
    }
    report = DesiderataReport(model_id=model_id, config=config, purity_scores={})
    is_tree = isinstance(model, SoftTree)

    probe = dataset
    if len(dataset) > max_purity_images:
        idx = np.linspace(0, len(dataset) - 1, max_purity_images).astype(int)
        from .shapes import DatasetSplit as DS

        probe = DS(
            version=dataset.version,
            images=dataset.images[idx],
            labels=dataset.labels[idx],
            mask_sets=[dataset.mask_sets[i] for i in idx],
            class_composition=dataset.class_composition,
            specs=[dataset.specs[i] for i in idx],
            seed=dataset.seed,
        )

    n_protos = model.n_internal if is_tree else model.num_prototypes
    for backend in backends:
        if is_tree and backend == "prp":
            continue  # relevance backend is defined for the max-pooled classifier
        scores = {}
        for j in range(n_protos):
            if is_tree:
                scores[j] = _tree_purity(model, j, probe, percentile)
            else:
                scores[j] = purity(model, j, probe, backend, percentile)
        report.purity_scores[backend] = scores

    if not is_tree:
        counts = model.prototype_classes.numpy()
        for class_id in sorted(dataset.class_composition):
            if (counts == class_id).sum() < 2:
                report.notes.append(
                    f"class {class_id}: redundancy skipped (fewer than 2 prototypes)"
                )
                continue
            report.redundancy_results.append(
                redundancy(model, class_id, probe, tau_cosine, tau_iou, percentile)
            )

    identity = Transform.rotate(0.0)
    report.transform_probes = transformation_consistency(
        model, probe, [identity, *transforms], k
    )

    if not is_tree and all(s is not None for s in model.sources):
        source_data = projection_data if projection_data is not None else dataset
        if max(s[0] for s in model.sources) < len(source_data):
            tr = task_relevance(model, source_data, percentile)
            report.task_relevance_accuracy = tr.accuracy
            report.task_relevance_outcomes = tr.outcomes
        else:
            report.notes.append(
                "task relevance skipped: prototype sources index past the given "
                "dataset; pass the training split as projection_data"
            )

    for r in report.redundancy_results:
        if r.duplicate_count == 0:
            report.notes.append(
                f"class {r.class_id}: no duplicate pair flagged; per-pair scores recorded "
                f"(max off-diagonal {float(np.max(r.matrix - np.eye(len(r.matrix)))):.3f})"
            )
    return report


def _tree_purity(tree: SoftTree, node_id: int, dataset: DatasetSplit,
                 percentile: float) -> float:
    """Upsample-backend purity for a tree node prototype."""
    from .explain import upsample_map
    from .protopnet import _pairwise_distances, _similarity_t

    scores = []
    tree.eval()
    tensor = images_to_tensor(dataset.images)
    with torch.no_grad():
        z = tree.extractor(tensor)
        d = _pairwise_distances(z, tree.prototypes)
        sim = _similarity_t(d, 1e-4)
    for i in range(len(dataset)):
        heat = upsample_map(sim[i, node_id].numpy(), prototype_id=node_id, image_id=i)
        masks = [m for _, m in dataset.mask_sets[i]]
        scores.append(purity_from_heatmap(heat.values, masks, percentile))
    return float(np.mean(scores))
