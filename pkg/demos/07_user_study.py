"""Run the user study end to end, in process, with simulated participants.

Builds a gallery item bank from the two demo checkpoints, serves it through
the HTTP API (TestClient, no network needed), plays three scripted users
through the guess-who and rating experiments, and prints the aggregated
statistics. To run it for real participants:

    protolab serve-study --items demos/out/study_items --log study.ndjson --port 8765

and point the frontend (frontend/ at the repository root) at that server.
"""

from pathlib import Path

import numpy as np
from fastapi.testclient import TestClient

from protolab.shapes import make_dataset, train_test_split
from protolab.study import StudyStore, build_app, load_items, make_study_items, replay_stats

OUT = Path(__file__).parent / "out"
for name in ("protopnet_v2", "prototree_v2"):
    if not (OUT / name).exists():
        raise SystemExit("run 02_train_protopnet.py and 04_prototree_paths.py first")

train_ds, _ = train_test_split(make_dataset("V2", 40, 42), 0.8)
items_dir = make_study_items(
    {"protopnet": OUT / "protopnet_v2", "prototree": OUT / "prototree_v2"},
    train_ds,
    OUT / "study_items",
)
items = load_items(items_dir)
print(f"item bank: {len(items)} items "
      f"({sum(i.experiment == 1 for i in items)} guess, "
      f"{sum(i.experiment == 2 for i in items)} rating) in {items_dir}")

log_path = OUT / "study_log.ndjson"
log_path.unlink(missing_ok=True)
store = StudyStore(items, log_path)
client = TestClient(build_app(store, items_dir / "assets"))

# three simulated users: one sharp, one guessing at random, one harsh rater
rng = np.random.default_rng(0)
profiles = {
    "sharp": dict(guess="true", useful=0.9, redundant=0.3),
    "random": dict(guess="random", useful=0.5, redundant=0.5),
    "harsh": dict(guess="true", useful=0.2, redundant=0.8),
}
for user, profile in profiles.items():
    sid = client.post("/sessions", json={"user": user, "seed": hash(user) % 1000}).json()[
        "session_id"
    ]
    while True:
        nxt = client.get(f"/sessions/{sid}/next").json()
        if nxt["done"]:
            break
        item = nxt["item"]
        if item["experiment"] == 1:
            options = item["class_options"]
            if profile["guess"] == "true":
                # a sharp user recognizes the shapes; the item id encodes the class
                guess = int(item["id"].rsplit("c", 1)[1])
            else:
                guess = int(rng.choice(options))
            body = {"item": item["id"], "guess": guess}
        else:
            ratings = {}
            for pid in item["prototype_ids"]:
                redundant = rng.uniform() < profile["redundant"]
                ratings[str(pid)] = {
                    "useful": bool(rng.uniform() < profile["useful"]),
                    "redundancy": "redundant" if redundant else "non_redundant",
                }
            body = {"item": item["id"], "ratings": ratings}
        client.post(f"/sessions/{sid}/responses", json=body)

stats = client.get("/stats").json()
for method, m in stats["methods"].items():
    print(f"\n{method}:")
    print(f"  guess accuracy: {m['guess_accuracy']:.2f} over {m['n_guesses']} guesses")
    print(f"  totally useful prototypes: {m['totally_useful_fraction']:.2f}")
    print(f"  totally non-redundant: {m['totally_non_redundant_fraction']:.2f}")
    print(f"  usefulness histogram: {m['usefulness_histogram']}")

assert replay_stats(log_path) == stats
print(f"\nlog replay reproduces the stats exactly ({log_path})")
