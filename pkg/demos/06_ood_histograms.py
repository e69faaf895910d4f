"""Out-of-distribution detection from distances to the nearest prototype.

Train on two of the three classes; the held-out third class is "near" OOD
(same rendering family), while uniform noise and alien-palette scenes are
"far" OOD. Far should separate much better than near, mirroring the
full-scale behaviour of distance-based prototype OOD detection.
"""

from pathlib import Path

from protolab.ood import make_far_ood, run_ood_experiment
from protolab.protopnet import TrainConfig, accuracy, train
from protolab.shapes import make_dataset, subset_classes, train_test_split

OUT = Path(__file__).parent / "out" / "ood"
OUT.parent.mkdir(exist_ok=True)

full = make_dataset("V2", n_per_class=40, seed=42)
two_class = subset_classes(full, [0, 1])
train_ds, test_ds = train_test_split(two_class, 0.8)
near_images = subset_classes(full, [2]).images

print("training 2-class model (class 2 held out as near OOD)...")
model = train(TrainConfig(per_class_count=2, joint_epochs=15, seed=0), train_ds).model
print(f"ID test accuracy: {accuracy(model, test_ds.images, test_ds.labels):.3f}")

far_images = make_far_ood(40, seed=1)
near, far = run_ood_experiment(model, test_ds.images, near_images, far_images, OUT)

print(f"near OOD AUROC: {near.auroc:.3f}   (held-out class, same palette and layout)")
print(f"far  OOD AUROC: {far.auroc:.3f}   (noise + unseen palette)")
print(f"ID score mean {near.id_scores.mean():.3f}, "
      f"near mean {near.ood_scores.mean():.3f}, far mean {far.ood_scores.mean():.3f}")
print(f"histograms in {OUT}/histograms.png and histograms.csv")
