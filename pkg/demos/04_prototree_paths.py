"""Train a depth-2 soft decision tree and walk its decision paths.

Each internal node holds one class-agnostic prototype; an image routes right
when a similar patch is present (routing probability >= 0.5). The rendered
figure shows a test image and, per node on its hard path, the node's projected
prototype patch marked present (green) or absent (red).
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import torch

from protolab.explain import extract_patch, upsample_map
from protolab.protopnet import _pairwise_distances, _similarity_t, images_to_tensor
from protolab.prototree import (
    TreeConfig,
    hard_soft_agreement,
    save_tree_checkpoint,
    train_tree,
    tree_accuracy,
)
from protolab.shapes import make_dataset, train_test_split

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

ds = make_dataset("V2", n_per_class=40, seed=42)
train_ds, test_ds = train_test_split(ds, 0.8)

print("training depth-2 tree...")
result = train_tree(TreeConfig(depth=2, seed=1), train_ds)
tree = result.tree
print(f"test accuracy: {tree_accuracy(tree, test_ds.images, test_ds.labels):.3f}")
print(f"hard routing agrees with soft argmax on "
      f"{hard_soft_agreement(tree, test_ds.images):.0%} of the test split")
print(f"node prototypes: {tree.n_internal} (vs {3 * 10} for a 10-per-class part classifier)")
save_tree_checkpoint(tree, OUT / "prototree_v2")


def node_patch(node_id):
    src = tree.sources[node_id]
    image = train_ds.images[src[0]]
    with torch.no_grad():
        z = tree.extractor(images_to_tensor(image[None]))
        sim = _similarity_t(_pairwise_distances(z, tree.prototypes), 1e-4)
    box = extract_patch(upsample_map(sim[0, node_id].numpy()))
    return image[box.slices]


n_show = 3
fig, axes = plt.subplots(n_show, tree.depth + 1, figsize=(2.6 * (tree.depth + 1), 2.9 * n_show))
for row in range(n_show):
    image = test_ds.images[row * 9 % len(test_ds)]
    path = tree.extract_decision_path(images_to_tensor(image[None])[0])
    axes[row][0].imshow(image)
    axes[row][0].set_title(
        f"true {test_ds.labels[row * 9 % len(test_ds)]} -> predicted {path.predicted_class}",
        fontsize=9,
    )
    axes[row][0].axis("off")
    for col, step in enumerate(path.steps, start=1):
        ax = axes[row][col]
        ax.imshow(node_patch(step.node_id))
        color = "green" if step.present else "red"
        flag = "present" if step.present else "absent"
        ax.set_title(f"node {step.node_id}: {flag} (p={step.p_right:.2f})",
                     fontsize=9, color=color)
        for spine in ax.spines.values():
            spine.set_edgecolor(color)
            spine.set_linewidth(3)
        ax.set_xticks([])
        ax.set_yticks([])
fig.suptitle("hard decision paths through the soft tree")
fig.tight_layout()
fig.savefig(OUT / "prototree_paths.png", dpi=120)
print(f"figure in {OUT}/prototree_paths.png")
