"""Soft decision tree over prototypes: similarity-based routing, leaf mixtures, paths.

A full binary tree of depth h holds one class-agnostic prototype at each of its
2^h - 1 internal nodes. An input routes right at a node with probability
exp(-d_min), where d_min is the smallest squared-L2 distance between the node's
prototype and any latent patch; the prediction mixes leaf class distributions
by path probability. Hard (greedy) routing yields an explicit decision path
with present/absent marking per node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .protopnet import (
    LATENT_DIM,
    FeatureExtractor,
    TrainingDivergedError,
    _pairwise_distances,
    images_to_tensor,
)
from .shapes import DatasetSplit

PRESENCE_THRESHOLD = 0.5


def route_probability(z, p) -> float:
    """Routing probability exp(-d_min) for one latent map and one node prototype.

    z: (H, W, D) or (D, H, W) array-like; p: length-D vector. Equals 1 exactly
    when some patch matches the prototype, and decreases strictly in d_min.
    """
    from .protopnet import squared_l2_map

    d_min = squared_l2_map(z, p).min()
    return float(np.exp(-d_min))


class TreeOutput(NamedTuple):
    distribution: torch.Tensor  # (B, C) mixture prediction
    leaf_probs: torch.Tensor  # (B, n_leaves) path probabilities
    p_right: torch.Tensor  # (B, n_internal) routing probabilities
    d_min: torch.Tensor  # (B, n_internal) min distances per node
    argmin: torch.Tensor  # (B, n_internal) flattened argmin patch index
    latent: torch.Tensor  # (B, D, H, W)


@dataclass
class PathStep:
    node_id: int
    p_right: float
    present: bool
    patch: tuple[int, int]  # argmin-distance latent location


@dataclass
class DecisionPath:
    steps: list[PathStep]
    leaf_index: int
    leaf_distribution: np.ndarray
    predicted_class: int

    def __len__(self) -> int:
        return len(self.steps)

    def signature(self) -> tuple:
        """Hashable identity of the traversal: visited nodes and their flags."""
        return tuple((s.node_id, s.present) for s in self.steps)


@dataclass
class TreeConfig:
    depth: int = 4
    warmup_epochs: int = 5
    joint_epochs: int = 25
    leaf_epochs: int = 5
    lr_prototypes: float = 3e-3
    lr_extractor: float = 2e-3
    lr_leaves: float = 5e-2
    batch_size: int = 16
    seed: int = 0


class SoftTree(nn.Module):
    def __init__(self, num_classes: int, depth: int = 4, latent_dim: int = LATENT_DIM,
                 widths=(16, 32, 64, 64)):
        super().__init__()
        if depth < 1:
            raise ValueError("depth must be >= 1")
        self.depth = depth
        self.num_classes = num_classes
        self.n_internal = 2**depth - 1
        self.n_leaves = 2**depth
        self.extractor = FeatureExtractor(widths, latent_dim)
        self.prototypes = nn.Parameter(torch.rand(self.n_internal, latent_dim))
        self.leaf_logits = nn.Parameter(torch.zeros(self.n_leaves, num_classes))
        self.sources: list[tuple[int, int, int] | None] = [None] * self.n_internal

    @staticmethod
    def build(num_classes: int, depth: int = 4, seed: int = 0) -> "SoftTree":
        torch.manual_seed(seed)
        return SoftTree(num_classes, depth)

    def leaf_distributions(self) -> torch.Tensor:
        return F.softmax(self.leaf_logits, dim=1)

    def routing(self, z: torch.Tensor):
        d = _pairwise_distances(z, self.prototypes)  # (B, n_int, H, W)
        b, m, h, w = d.shape
        flat = d.reshape(b, m, h * w)
        d_min, argmin = flat.min(dim=2)
        return torch.exp(-d_min), d_min, argmin

    def leaf_probabilities(self, p_right: torch.Tensor) -> torch.Tensor:
        """Product of edge probabilities along each root-to-leaf path (heap order)."""
        b = p_right.shape[0]
        total = 2 ** (self.depth + 1) - 1
        node_probs: list[torch.Tensor | None] = [None] * total
        node_probs[0] = torch.ones(b, dtype=p_right.dtype, device=p_right.device)
        for i in range(self.n_internal):
            node_probs[2 * i + 1] = node_probs[i] * (1.0 - p_right[:, i])
            node_probs[2 * i + 2] = node_probs[i] * p_right[:, i]
        return torch.stack(node_probs[self.n_internal :], dim=1)

    def forward(self, images: torch.Tensor) -> TreeOutput:
        z = self.extractor(images)
        p_right, d_min, argmin = self.routing(z)
        leaf_probs = self.leaf_probabilities(p_right)
        dist = leaf_probs @ self.leaf_distributions()
        return TreeOutput(dist, leaf_probs, p_right, d_min, argmin, z)

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> torch.Tensor:
        """Class distribution per image (mixture over leaves)."""
        self.eval()
        return self.forward(images).distribution

    @torch.no_grad()
    def predict_label(self, images: torch.Tensor) -> torch.Tensor:
        return self.predict(images).argmax(dim=1)

    @torch.no_grad()
    def extract_decision_path(self, image: torch.Tensor) -> DecisionPath:
        """Greedy hard routing for one (3,128,128) image: right iff p_right >= 0.5."""
        self.eval()
        out = self.forward(image.unsqueeze(0))
        h = w = out.latent.shape[-1]
        steps = []
        node = 0
        for _ in range(self.depth):
            p = float(out.p_right[0, node])
            present = p >= PRESENCE_THRESHOLD
            k = int(out.argmin[0, node])
            steps.append(PathStep(node, p, present, (k // w, k % w)))
            node = 2 * node + 2 if present else 2 * node + 1
        leaf_index = node - self.n_internal
        leaf_dist = self.leaf_distributions()[leaf_index].numpy()
        return DecisionPath(steps, leaf_index, leaf_dist, int(leaf_dist.argmax()))

    @torch.no_grad()
    def hard_predict_label(self, image: torch.Tensor) -> int:
        return self.extract_decision_path(image).predicted_class


@dataclass
class TreeTrainResult:
    tree: SoftTree
    history: list[dict]


def _nll(out: TreeOutput, labels: torch.Tensor) -> torch.Tensor:
    picked = out.distribution.gather(1, labels[:, None]).squeeze(1)
    return -torch.log(picked.clamp_min(1e-12)).mean()


def _run_tree_stage(tree: SoftTree, stage: str, optimizer, epochs: int,
                    images: torch.Tensor, labels: torch.Tensor, batch_size: int,
                    rng: np.random.Generator, history: list[dict]) -> None:
    n = len(images)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = torch.from_numpy(order[start : start + batch_size])
            optimizer.zero_grad()
            loss = _nll(tree(images[idx]), labels[idx])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(stage, step, float(loss))
            loss.backward()
            optimizer.step()
            history.append({"stage": stage, "epoch": epoch, "step": step, "total": loss.item()})
            step += 1


def _init_prototypes_from_patches(tree: SoftTree, images: torch.Tensor,
                                  rng: np.random.Generator) -> None:
    """Seed node prototypes with actual latent patches so routing starts informative."""
    tree.eval()
    with torch.no_grad():
        sample = torch.from_numpy(
            rng.choice(len(images), size=min(len(images), 32), replace=False)
        )
        z = tree.extractor(images[sample])  # (S, D, H, W)
        s, d, h, w = z.shape
        for j in range(tree.n_internal):
            si = int(rng.integers(s))
            r = int(rng.integers(h))
            c = int(rng.integers(w))
            tree.prototypes[j] = z[si, :, r, c]


def train_tree(config: TreeConfig, data: DatasetSplit) -> TreeTrainResult:
    """Joint gradient training of extractor, node prototypes and leaf logits.

    Initialization seeds prototypes from training patches (part of building the
    tree); with an all-zero schedule that initialized tree is returned with no
    training steps and no projection applied.
    """
    torch.manual_seed(config.seed)
    tree = SoftTree(data.num_classes, config.depth)
    images = images_to_tensor(data.images)
    labels = torch.from_numpy(data.labels)
    rng = np.random.default_rng(config.seed)
    _init_prototypes_from_patches(tree, images, rng)
    history: list[dict] = []

    if config.warmup_epochs == config.joint_epochs == config.leaf_epochs == 0:
        return TreeTrainResult(tree, history)

    tree.train()
    opt = torch.optim.Adam(
        [
            {"params": [tree.prototypes], "lr": config.lr_prototypes},
            {"params": [tree.leaf_logits], "lr": config.lr_leaves},
        ]
    )
    _run_tree_stage(tree, "warmup", opt, config.warmup_epochs, images, labels,
                    config.batch_size, rng, history)

    opt = torch.optim.Adam(
        [
            {"params": tree.extractor.parameters(), "lr": config.lr_extractor},
            {"params": [tree.prototypes], "lr": config.lr_prototypes},
            {"params": [tree.leaf_logits], "lr": config.lr_leaves},
        ]
    )
    _run_tree_stage(tree, "joint", opt, config.joint_epochs, images, labels,
                    config.batch_size, rng, history)

    # projection and the leaf refit both see frozen evaluation-mode features
    tree.eval()
    project_tree_prototypes(tree, data)

    opt = torch.optim.Adam([tree.leaf_logits], lr=config.lr_leaves)
    _run_tree_stage(tree, "leaves", opt, config.leaf_epochs, images, labels,
                    config.batch_size, rng, history)
    return TreeTrainResult(tree, history)


@torch.no_grad()
def project_tree_prototypes(tree: SoftTree, data: DatasetSplit, batch_size: int = 32) -> SoftTree:
    """Snap each node prototype to the nearest latent patch over ALL training images.

    Nodes are class-agnostic, so projection searches the whole training set.
    """
    tree.eval()
    images = images_to_tensor(data.images)
    best_d = torch.full((tree.n_internal,), float("inf"), dtype=torch.float64)
    best_vec = torch.zeros_like(tree.prototypes, dtype=torch.float64)
    best_src: list[tuple[int, int, int] | None] = [None] * tree.n_internal

    for start in range(0, len(images), batch_size):
        z = tree.extractor(images[start : start + batch_size]).double()
        d = _pairwise_distances(z, tree.prototypes.double())
        b, m, h, w = d.shape
        for j in range(m):
            flat = d[:, j].reshape(-1)
            k = int(flat.argmin())
            if float(flat[k]) < float(best_d[j]):
                bi, rest = divmod(k, h * w)
                r, c = divmod(rest, w)
                best_d[j] = flat[k]
                best_vec[j] = z[bi, :, r, c]
                best_src[j] = (start + bi, r, c)

    if len(images) == 0:
        raise ValueError("cannot project prototypes with no training images")
    tree.prototypes.copy_(best_vec.to(tree.prototypes.dtype))
    tree.sources = best_src
    return tree


@torch.no_grad()
def tree_accuracy(tree: SoftTree, images: np.ndarray, labels: np.ndarray,
                  batch_size: int = 64) -> float:
    tree.eval()
    tensor = images_to_tensor(images)
    hits = 0
    for start in range(0, len(tensor), batch_size):
        pred = tree.predict_label(tensor[start : start + batch_size])
        hits += int((pred.numpy() == labels[start : start + batch_size]).sum())
    return hits / len(labels)


@torch.no_grad()
def hard_soft_agreement(tree: SoftTree, images: np.ndarray) -> float:
    """Fraction of images where greedy hard routing agrees with the soft argmax."""
    tensor = images_to_tensor(images)
    agree = 0
    for i in range(len(tensor)):
        soft = int(tree.predict(tensor[i : i + 1]).argmax())
        hard = tree.hard_predict_label(tensor[i])
        agree += int(soft == hard)
    return agree / len(tensor)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_tree_checkpoint(tree: SoftTree, path: str | Path, extra: dict | None = None) -> None:
    """Checkpoint directory: weights.pt, tree.json, config.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(tree.state_dict(), path / "weights.pt")

    tree_doc = {
        "depth": tree.depth,
        "nodes": [
            {
                "id": j,
                "left": 2 * j + 1,
                "right": 2 * j + 2,
                "prototype": [float(v) for v in tree.prototypes[j].detach().numpy()],
                "source": list(tree.sources[j]) if tree.sources[j] is not None else None,
            }
            for j in range(tree.n_internal)
        ],
        "leaf_distributions": tree.leaf_distributions().detach().numpy().tolist(),
    }
    (path / "tree.json").write_text(json.dumps(tree_doc, indent=1))

    config = {
        "model_type": "prototree",
        "num_classes": tree.num_classes,
        "depth": tree.depth,
        "latent_dim": tree.extractor.latent_dim,
    }
    if extra:
        config.update(extra)
    (path / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True))


def load_tree_checkpoint(path: str | Path) -> SoftTree:
    path = Path(path)
    config = json.loads((path / "config.json").read_text())
    if config.get("model_type") != "prototree":
        raise ValueError(f"not a prototree checkpoint: {path}")
    tree = SoftTree(config["num_classes"], config["depth"],
                    latent_dim=config.get("latent_dim", LATENT_DIM))
    tree.load_state_dict(torch.load(path / "weights.pt", weights_only=True))
    doc = json.loads((path / "tree.json").read_text())
    tree.sources = [tuple(n["source"]) if n["source"] else None for n in doc["nodes"]]
    tree.eval()
    return tree
