"""Prototype-part classifier: feature extractor, prototype layer, losses, training.

The model computes squared-L2 distances between each learnt prototype (a 1x1xD
latent vector) and every spatial patch of the feature map, inverts them into
similarity scores, max-pools each similarity map to a single score per
prototype, and classifies with a linear head over the pooled scores. Training
runs in stages (prototype warmup, joint, projection, last-layer refit) with
cluster and separation losses alongside cross-entropy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .shapes import DatasetSplit

LATENT_DIM = 64
LATENT_GRID = 8


class TrainingDivergedError(RuntimeError):
    def __init__(self, stage: str, step: int, value: float):
        super().__init__(f"non-finite loss ({value}) at stage={stage} step={step}")
        self.stage = stage
        self.step = step


@dataclass
class PrototypeLayerConfig:
    per_class_count: int = 10
    epsilon: float = 1e-4

    def __post_init__(self):
        if self.per_class_count < 1:
            raise ValueError("per_class_count must be >= 1")
        if not (self.epsilon > 0):
            raise ValueError("epsilon must be positive")


@dataclass
class TrainConfig:
    warmup_epochs: int = 3
    joint_epochs: int = 25
    last_layer_epochs: int = 5
    lr_prototypes: float = 3e-3
    lr_extractor: float = 2e-3
    lr_last_layer: float = 1e-2
    lambda_cluster: float = 0.8
    lambda_separation: float = 0.08
    batch_size: int = 16
    seed: int = 0
    per_class_count: int = 10
    epsilon: float = 1e-4

    def __post_init__(self):
        for name in ("warmup_epochs", "joint_epochs", "last_layer_epochs", "batch_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (np.isfinite(self.lambda_cluster) and np.isfinite(self.lambda_separation)):
            raise ValueError("loss coefficients must be finite")

    def layer_config(self) -> PrototypeLayerConfig:
        return PrototypeLayerConfig(self.per_class_count, self.epsilon)


class FeatureExtractor(nn.Module):
    """Four conv blocks (conv3x3 + batchnorm + ReLU + maxpool) and a sigmoid add-on.

    128x128x3 input -> 8x8xD latent grid with values in (0,1). Batch
    normalization keeps from-scratch training away from the constant-latent
    collapse that the cluster loss otherwise invites; evaluation mode is fully
    deterministic.
    """

    def __init__(self, widths=(16, 32, 64, 64), latent_dim: int = LATENT_DIM):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = 3
        for w in widths:
            layers += [
                nn.Conv2d(c_in, w, 3, padding=1, bias=False),
                nn.BatchNorm2d(w),
                nn.ReLU(),
                nn.MaxPool2d(2),
            ]
            c_in = w
        layers += [nn.Conv2d(c_in, latent_dim, 1), nn.Sigmoid()]
        self.net = nn.Sequential(*layers)
        self.latent_dim = latent_dim

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ForwardOutput(NamedTuple):
    logits: torch.Tensor  # (B, C)
    pooled: torch.Tensor  # (B, m) max-pooled similarity per prototype
    similarity_maps: torch.Tensor  # (B, m, H, W)
    distances: torch.Tensor  # (B, m, H, W)
    latent: torch.Tensor  # (B, D, H, W)


@dataclass
class Prototype:
    """Read-only view of one learnt prototype."""

    id: int
    class_id: int
    vector: np.ndarray
    source: tuple[int, int, int] | None  # (image index, row, col) after projection


@dataclass
class SimilarityMap:
    """Spatial similarity scores of one (image, prototype) pair."""

    scores: np.ndarray  # (H, W)
    distances: np.ndarray  # (H, W)
    prototype_id: int
    argmax: tuple[int, int]

    @property
    def pooled(self) -> float:
        return float(self.scores.max())


def similarity_from_distance(d, epsilon: float):
    """Monotone inversion of a squared-L2 distance: log((d+1)/(d+epsilon)).

    Strictly decreasing in d, equal to log(1/epsilon) at d=0, and tending to 0
    from above as d grows. Works on scalars and numpy arrays.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    arr = np.asarray(d, dtype=np.float64)
    if (arr < 0).any():
        raise ValueError("distance must be nonnegative")
    out = np.log((arr + 1.0) / (arr + epsilon))
    return float(out) if np.isscalar(d) or out.ndim == 0 else out


def _similarity_t(d: torch.Tensor, epsilon: float) -> torch.Tensor:
    return torch.log((d + 1.0) / (d + epsilon))


def _pairwise_distances(z: torch.Tensor, protos: torch.Tensor) -> torch.Tensor:
    """Squared-L2 distance between every latent patch and every prototype.

    z: (B, D, H, W), protos: (m, D) -> (B, m, H, W), clamped at 0 against
    floating-point noise.
    """
    diff = z.unsqueeze(1) - protos[None, :, :, None, None]
    return diff.pow(2).sum(dim=2).clamp_min(0.0)


def squared_l2_map(z, p):
    """Distance grid between one latent map and one prototype vector.

    Accepts z as (H, W, D) or (D, H, W) numpy/torch and p as a length-D vector;
    returns an (H, W) float64 numpy array with entries sum_d (z[i,j,d]-p[d])^2.
    """
    zt = torch.as_tensor(np.asarray(z), dtype=torch.float64)
    pt = torch.as_tensor(np.asarray(p), dtype=torch.float64).reshape(-1)
    if zt.ndim != 3:
        raise ValueError("z must have three axes")
    if zt.shape[-1] == pt.shape[0]:
        zt = zt.permute(2, 0, 1)  # (H,W,D) -> (D,H,W)
    elif zt.shape[0] != pt.shape[0]:
        raise ValueError(
            f"no axis of z has the prototype dimension {pt.shape[0]}; z shape {tuple(zt.shape)}"
        )
    grid = _pairwise_distances(zt.unsqueeze(0), pt.unsqueeze(0))[0, 0]
    return grid.numpy()


class ProtoPNet(nn.Module):
    def __init__(
        self,
        num_classes: int,
        config: PrototypeLayerConfig | None = None,
        widths=(16, 32, 64, 64),
        latent_dim: int = LATENT_DIM,
    ):
        super().__init__()
        self.config = config or PrototypeLayerConfig()
        self.num_classes = num_classes
        self.extractor = FeatureExtractor(widths, latent_dim)
        m = num_classes * self.config.per_class_count
        self.prototypes = nn.Parameter(torch.rand(m, latent_dim))
        self.register_buffer(
            "prototype_classes",
            torch.arange(num_classes).repeat_interleave(self.config.per_class_count),
        )
        self.head = nn.Linear(m, num_classes, bias=False)
        self.reset_head()
        # projection provenance: (image index, row, col) per prototype
        self.sources: list[tuple[int, int, int] | None] = [None] * m

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def epsilon(self) -> float:
        return self.config.epsilon

    def reset_head(self) -> None:
        """Own-class weights 1, cross-class -0.5: prototype presence reads as class evidence."""
        with torch.no_grad():
            identity = F.one_hot(self.prototype_classes, self.num_classes).T.float()
            self.head.weight.copy_(identity + (identity - 1.0) * 0.5)

    @staticmethod
    def build(num_classes: int, config: PrototypeLayerConfig | None = None, seed: int = 0,
              widths=(16, 32, 64, 64), latent_dim: int = LATENT_DIM) -> "ProtoPNet":
        torch.manual_seed(seed)
        return ProtoPNet(num_classes, config, widths, latent_dim)

    def latent(self, images: torch.Tensor) -> torch.Tensor:
        return self.extractor(images)

    def distances_from_latent(self, z: torch.Tensor) -> torch.Tensor:
        return _pairwise_distances(z, self.prototypes)

    def forward(self, images: torch.Tensor) -> ForwardOutput:
        z = self.latent(images)
        d = self.distances_from_latent(z)
        sim = _similarity_t(d, self.epsilon)
        pooled = sim.amax(dim=(2, 3))
        logits = self.head(pooled)
        return ForwardOutput(logits, pooled, sim, d, z)

    @torch.no_grad()
    def predict(self, images: torch.Tensor) -> torch.Tensor:
        self.eval()
        return self.forward(images).logits.argmax(dim=1)

    @torch.no_grad()
    def similarity_maps(self, image: torch.Tensor) -> list[SimilarityMap]:
        """Per-prototype similarity maps for a single image (3,128,128)."""
        self.eval()
        out = self.forward(image.unsqueeze(0))
        maps = []
        for j in range(self.num_prototypes):
            scores = out.similarity_maps[0, j].numpy()
            dist = out.distances[0, j].numpy()
            r, c = np.unravel_index(np.argmax(scores), scores.shape)
            maps.append(SimilarityMap(scores, dist, j, (int(r), int(c))))
        return maps

    def prototype_info(self) -> list[Prototype]:
        vecs = self.prototypes.detach().numpy()
        return [
            Prototype(j, int(self.prototype_classes[j]), vecs[j].copy(), self.sources[j])
            for j in range(self.num_prototypes)
        ]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _min_distance_by_class(distances: torch.Tensor, labels: torch.Tensor,
                           proto_classes: torch.Tensor, own: bool) -> torch.Tensor:
    """Per-sample min over (selected prototypes x patches) of the distance grid."""
    b, m, h, w = distances.shape
    per_proto = distances.reshape(b, m, h * w).min(dim=2).values  # (B, m)
    is_own = labels[:, None] == proto_classes[None, :]
    select = is_own if own else ~is_own
    if (~select.any(dim=1)).any():
        raise ValueError("a sample has no prototypes on the selected side")
    masked = per_proto.masked_fill(~select, float("inf"))
    return masked.min(dim=1).values


def cluster_loss(distances: torch.Tensor, labels: torch.Tensor,
                 proto_classes: torch.Tensor) -> torch.Tensor:
    """Mean over samples of min squared-L2 distance to own-class prototypes."""
    return _min_distance_by_class(distances, labels, proto_classes, own=True).mean()


def separation_loss(distances: torch.Tensor, labels: torch.Tensor,
                    proto_classes: torch.Tensor) -> torch.Tensor:
    """Mean over samples of min squared-L2 distance to other-class prototypes.

    Enters the training objective with a negative coefficient (pushed up).
    """
    return _min_distance_by_class(distances, labels, proto_classes, own=False).mean()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """uint8 (N,H,W,3) -> float32 (N,3,H,W) scaled to [0,1]."""
    return torch.from_numpy(images.astype(np.float32) / 255.0).permute(0, 3, 1, 2).contiguous()


@dataclass
class TrainResult:
    model: ProtoPNet
    history: list[dict] = field(default_factory=list)


def _total_loss(model: ProtoPNet, images: torch.Tensor, labels: torch.Tensor,
                cfg: TrainConfig):
    out = model(images)
    ce = F.cross_entropy(out.logits, labels)
    clus = cluster_loss(out.distances, labels, model.prototype_classes)
    sep = separation_loss(out.distances, labels, model.prototype_classes)
    total = ce + cfg.lambda_cluster * clus - cfg.lambda_separation * sep
    return total, {"ce": ce.item(), "cluster": clus.item(), "separation": sep.item()}


def _run_stage(model: ProtoPNet, stage: str, optimizer, epochs: int,
               images: torch.Tensor, labels: torch.Tensor, cfg: TrainConfig,
               rng: np.random.Generator, history: list[dict],
               post_step=None) -> None:
    n = len(images)
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = torch.from_numpy(idx)
            optimizer.zero_grad()
            total, parts = _total_loss(model, images[batch], labels[batch], cfg)
            if not torch.isfinite(total):
                raise TrainingDivergedError(stage, step, total.item())
            total.backward()
            optimizer.step()
            if post_step is not None:
                post_step()
            history.append(
                {"stage": stage, "epoch": epoch, "step": step, "total": total.item(), **parts}
            )
            step += 1


def initialize_model(config: TrainConfig, data: DatasetSplit) -> ProtoPNet:
    """Build the model and seed each prototype from a random own-class latent patch.

    Data-driven prototype seeding starts the cluster/separation geometry on
    actual feature modes instead of uniform noise; it is part of
    initialization, so a zero-epoch training run returns exactly this model.
    """
    torch.manual_seed(config.seed)
    model = ProtoPNet(data.num_classes, config.layer_config())
    rng = np.random.default_rng(config.seed)
    model.eval()
    with torch.no_grad():
        images = images_to_tensor(data.images)
        grid = 128 // 2 ** 4
        for j in range(model.num_prototypes):
            own = np.flatnonzero(data.labels == int(model.prototype_classes[j]))
            if len(own) == 0:
                continue  # class without images keeps its random vector
            i = int(rng.choice(own))
            r, c = int(rng.integers(grid)), int(rng.integers(grid))
            z = model.latent(images[i : i + 1])
            model.prototypes[j] = z[0, :, r, c]
    return model


def train(config: TrainConfig, data: DatasetSplit) -> TrainResult:
    """Staged training: prototype warmup, joint, projection, last-layer refit.

    With an all-zero schedule the initialized model (see initialize_model) is
    returned untouched, projection included, so a zero-epoch run is a no-op.
    """
    model = initialize_model(config, data)
    images = images_to_tensor(data.images)
    labels = torch.from_numpy(data.labels)
    history: list[dict] = []
    rng = np.random.default_rng(config.seed + 1)

    if config.warmup_epochs == config.joint_epochs == config.last_layer_epochs == 0:
        return TrainResult(model, history)

    model.train()
    model.head.weight.requires_grad_(False)

    opt = torch.optim.Adam([model.prototypes], lr=config.lr_prototypes)
    _run_stage(model, "warmup", opt, config.warmup_epochs, images, labels, config, rng, history)

    opt = torch.optim.Adam(
        [
            {"params": model.extractor.parameters(), "lr": config.lr_extractor},
            {"params": [model.prototypes], "lr": config.lr_prototypes},
        ]
    )
    _run_stage(model, "joint", opt, config.joint_epochs, images, labels, config, rng, history)

    # projection and the head refit both see frozen evaluation-mode features
    model.eval()
    project_prototypes(model, data)

    model.head.weight.requires_grad_(True)
    model.reset_head()
    own_mask = F.one_hot(model.prototype_classes, model.num_classes).T.bool()

    def clamp_own_nonnegative():
        with torch.no_grad():
            w = model.head.weight
            w.copy_(torch.where(own_mask, w.clamp_min(0.0), w))

    opt = torch.optim.Adam(model.head.parameters(), lr=config.lr_last_layer)
    _run_stage(
        model, "last_layer", opt, config.last_layer_epochs, images, labels, config,
        rng, history, post_step=clamp_own_nonnegative,
    )
    model.eval()
    return TrainResult(model, history)


@torch.no_grad()
def project_prototypes(model: ProtoPNet, data: DatasetSplit, batch_size: int = 32) -> ProtoPNet:
    """Snap each prototype to its nearest latent patch among its own class's images.

    Records the (image index, row, col) source per prototype. Idempotent: a
    projected prototype sits at distance 0 from its source patch.
    """
    model.eval()
    images = images_to_tensor(data.images)
    labels = torch.from_numpy(data.labels)

    best_d = torch.full((model.num_prototypes,), float("inf"), dtype=torch.float64)
    best_vec = torch.zeros_like(model.prototypes, dtype=torch.float64)
    best_src = [None] * model.num_prototypes

    for start in range(0, len(images), batch_size):
        z = model.latent(images[start : start + batch_size]).double()
        d = _pairwise_distances(z, model.prototypes.double())  # (b, m, H, W)
        b, m, h, w = d.shape
        for j in range(m):
            cls = int(model.prototype_classes[j])
            in_class = labels[start : start + b] == cls
            if not in_class.any():
                continue
            dj = d[:, j].clone()
            dj[~in_class] = float("inf")
            flat = dj.reshape(-1)
            k = int(flat.argmin())
            if float(flat[k]) < float(best_d[j]):
                bi, rest = divmod(k, h * w)
                r, c = divmod(rest, w)
                best_d[j] = flat[k]
                best_vec[j] = z[bi, :, r, c]
                best_src[j] = (start + bi, r, c)

    missing = [j for j in range(model.num_prototypes) if best_src[j] is None]
    if missing:
        classes = sorted({int(model.prototype_classes[j]) for j in missing})
        raise ValueError(f"no training images for classes {classes}; cannot project")

    model.prototypes.copy_(best_vec.to(model.prototypes.dtype))
    model.sources = best_src
    return model


@torch.no_grad()
def pooled_similarity_stats(model: ProtoPNet, images: np.ndarray,
                            batch_size: int = 64) -> dict[int, dict]:
    """Per-prototype mean/max of the pooled similarity over a set of images."""
    model.eval()
    tensor = images_to_tensor(images)
    pooled = []
    for start in range(0, len(tensor), batch_size):
        pooled.append(model(tensor[start : start + batch_size]).pooled)
    stack = torch.cat(pooled)
    return {
        j: {"mean": float(stack[:, j].mean()), "max": float(stack[:, j].max())}
        for j in range(model.num_prototypes)
    }


@torch.no_grad()
def accuracy(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    model.eval()
    tensor = images_to_tensor(images)
    hits = 0
    for start in range(0, len(tensor), batch_size):
        pred = model.predict(tensor[start : start + batch_size])
        hits += int((pred.numpy() == labels[start : start + batch_size]).sum())
    return hits / len(labels)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: ProtoPNet, path: str | Path, extra: dict | None = None,
                    pooled_stats: dict | None = None) -> None:
    """Checkpoint directory: weights.pt, prototypes.json, config.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path / "weights.pt")

    protos = []
    for p in model.prototype_info():
        protos.append(
            {
                "id": p.id,
                "class": p.class_id,
                "vector": [float(v) for v in p.vector],
                "source": list(p.source) if p.source is not None else None,
                "pooled_stats": (pooled_stats or {}).get(p.id),
            }
        )
    (path / "prototypes.json").write_text(json.dumps(protos, indent=1))

    config = {
        "model_type": "protopnet",
        "num_classes": model.num_classes,
        "per_class_count": model.config.per_class_count,
        "epsilon": model.config.epsilon,
        "latent_dim": model.extractor.latent_dim,
    }
    if extra:
        config.update(extra)
    (path / "config.json").write_text(json.dumps(config, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path) -> ProtoPNet:
    path = Path(path)
    config = json.loads((path / "config.json").read_text())
    if config.get("model_type") != "protopnet":
        raise ValueError(f"not a protopnet checkpoint: {path}")
    model = ProtoPNet(
        config["num_classes"],
        PrototypeLayerConfig(config["per_class_count"], config["epsilon"]),
        latent_dim=config.get("latent_dim", LATENT_DIM),
    )
    model.load_state_dict(torch.load(path / "weights.pt", weights_only=True))
    protos = json.loads((path / "prototypes.json").read_text())
    model.sources = [tuple(p["source"]) if p["source"] else None for p in protos]
    model.eval()
    return model
