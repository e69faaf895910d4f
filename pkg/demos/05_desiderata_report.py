"""Score the trained classifier against the four prototype desiderata.

Purity (are heatmaps on a single shape?), redundancy (are a class's prototypes
duplicates?), transformation consistency (do the nearest prototypes survive a
rotation or crop?), and task relevance (does the prototype's own patch classify
as its class?). On the disjoint two-shape benchmark the expected qualitative
finding is prototype duplication within classes.
"""

import json
from pathlib import Path

from protolab.desiderata import evaluate_model
from protolab.protopnet import load_checkpoint
from protolab.shapes import make_dataset, train_test_split

OUT = Path(__file__).parent / "out"
ckpt = OUT / "protopnet_v2"
if not ckpt.exists():
    raise SystemExit("run 02_train_protopnet.py first")

model = load_checkpoint(ckpt)
train_ds, test_ds = train_test_split(make_dataset("V2", 40, 42), 0.8)

report = evaluate_model(model, test_ds, model_id="demo-protopnet-v2",
                        max_purity_images=12, projection_data=train_ds)
doc = report.to_json()
(OUT / "desiderata_report.json").write_text(json.dumps(doc, indent=1, sort_keys=True))

print("purity (mean per backend):")
for backend, scores in doc["purity"].items():
    mean = sum(scores.values()) / len(scores)
    print(f"  {backend}: {mean:.3f}")

print("redundancy duplicates per class:")
for entry in doc["redundancy"]:
    print(f"  class {entry['class']}: {entry['duplicate_count']} duplicate pair(s), "
          f"pairs {entry['duplicates']}")

print("transformation consistency:")
for probe in doc["transformation_consistency"]:
    print(f"  {probe['transform']}: top-3 overlap {probe['top_k_overlap']:.2f}, "
          f"class-composition stability {probe['same_class_fraction']:.2f}, "
          f"true-class share {probe['true_class_fraction']:.2f}")

print(f"task relevance (machine guess-who): {doc['task_relevance']['accuracy']:.2f}")
if doc["notes"]:
    print("notes:", *doc["notes"], sep="\n  ")
print(f"full report in {OUT}/desiderata_report.json")
