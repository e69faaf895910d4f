"""Train a prototype-part classifier on the disjoint-composition benchmark.

Two prototypes per class, the staged schedule (warmup / joint / projection /
last-layer refit), and a gallery of what the prototypes actually look like
after projection. The checkpoint is reused by the later demos.
"""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from protolab.explain import extract_patch, prototype_heatmap
from protolab.protopnet import TrainConfig, accuracy, save_checkpoint, train
from protolab.shapes import make_dataset, train_test_split

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

ds = make_dataset("V2", n_per_class=40, seed=42)
train_ds, test_ds = train_test_split(ds, 0.8)

config = TrainConfig(per_class_count=2, joint_epochs=20, seed=0)
print("training...")
result = train(config, train_ds)
model = result.model

print(f"train accuracy: {accuracy(model, train_ds.images, train_ds.labels):.3f}")
print(f"test accuracy:  {accuracy(model, test_ds.images, test_ds.labels):.3f}")

save_checkpoint(model, OUT / "protopnet_v2")
print(f"checkpoint saved to {OUT/'protopnet_v2'}")

# the "this" in this-looks-like-that: each prototype's projected source patch
fig, axes = plt.subplots(3, 2, figsize=(5, 7))
for proto in model.prototype_info():
    img = train_ds.images[proto.source[0]]
    heat = prototype_heatmap(model, img, proto.id, "upsample")
    box = extract_patch(heat)
    ax = axes[proto.class_id][proto.id % 2]
    ax.imshow(img[box.slices])
    ax.set_title(f"prototype {proto.id} (class {proto.class_id})", fontsize=9)
    ax.axis("off")
fig.suptitle("projected prototypes, V2")
fig.tight_layout()
fig.savefig(OUT / "protopnet_prototypes.png", dpi=120)
print(f"gallery in {OUT}/protopnet_prototypes.png")

# loss curve across stages
fig, ax = plt.subplots(figsize=(7, 3))
ax.plot([h["total"] for h in result.history])
boundaries = [i for i, h in enumerate(result.history[1:], 1)
              if h["stage"] != result.history[i - 1]["stage"]]
for b in boundaries:
    ax.axvline(b, color="grey", ls="--", lw=0.8)
ax.set_xlabel("step")
ax.set_ylabel("total loss")
ax.set_title("staged training (dashes: stage changes)")
fig.tight_layout()
fig.savefig(OUT / "protopnet_loss.png", dpi=120)
