"""Compare the two visualization backends on the same prototype and image.

Bilinear upsampling of the similarity map against model-aware relevance
backpropagation: the relevance heatmap is typically much sharper, and with
ground-truth masks we can quantify that with the purity score.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from protolab.desiderata import purity_from_heatmap
from protolab.explain import prototype_heatmap
from protolab.protopnet import load_checkpoint
from protolab.shapes import make_dataset, train_test_split

OUT = Path(__file__).parent / "out"
ckpt = OUT / "protopnet_v2"
if not ckpt.exists():
    raise SystemExit("run 02_train_protopnet.py first")

model = load_checkpoint(ckpt)
_, test_ds = train_test_split(make_dataset("V2", 40, 42), 0.8)

n_show = 4
fig, axes = plt.subplots(n_show, 3, figsize=(8, 2.7 * n_show))
for row in range(n_show):
    image = test_ds.images[row * 7 % len(test_ds)]
    masks = [m for _, m in test_ds.mask_sets[row * 7 % len(test_ds)]]
    proto = row % model.num_prototypes

    axes[row][0].imshow(image)
    axes[row][0].set_title(f"input (prototype {proto})", fontsize=9)
    for col, backend in ((1, "upsample"), (2, "prp")):
        heat = prototype_heatmap(model, image, proto, backend)
        p = purity_from_heatmap(heat.values, masks)
        axes[row][col].imshow(image)
        axes[row][col].imshow(heat.values, cmap="hot", alpha=0.6)
        axes[row][col].set_title(f"{backend} (purity {p:.2f})", fontsize=9)
    for ax in axes[row]:
        ax.axis("off")

fig.suptitle("model-agnostic upsampling vs relevance backpropagation")
fig.tight_layout()
fig.savefig(OUT / "explain_backends.png", dpi=120)
print(f"comparison in {OUT}/explain_backends.png")

# mean purity over a handful of test images, both backends
scores = {"upsample": [], "prp": []}
for backend in scores:
    for i in range(8):
        heat = prototype_heatmap(model, test_ds.images[i], 0, backend)
        masks = [m for _, m in test_ds.mask_sets[i]]
        scores[backend].append(purity_from_heatmap(heat.values, masks))
for backend, vals in scores.items():
    print(f"prototype 0 mean purity [{backend}]: {np.mean(vals):.3f}")
