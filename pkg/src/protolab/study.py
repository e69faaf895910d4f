"""User-study service: prototype galleries, two-experiment flow, durable log, stats.

Experiment 1 is a "guess who" game (given a class's prototype gallery, pick the
class from a candidate list); experiment 2 reveals the class and collects
per-prototype useful / redundancy ratings. Every guess item of a session is
served and answered before any rating item, so no class is revealed early. The
redundancy answer is three-way (redundant / non-redundant / not meaningful) to
disambiguate "not repeating" from "meaningless"; stats also report the two-way
collapse where both of the latter count as non-redundant.

All state changes append to a newline-delimited JSON log whose replay rebuilds
sessions and statistics exactly.
"""

from __future__ import annotations

import json
import os
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from pydantic import BaseModel

SCHEMA_VERSION = 1
REDUNDANCY_CHOICES = ("redundant", "non_redundant", "not_meaningful")
HISTOGRAM_BIN_COUNT = 5


class StudyError(ValueError):
    """Validation failure with an HTTP-ish status code attached."""

    def __init__(self, message: str, status: int = 400):
        super().__init__(message)
        self.status = status


@dataclass
class StudyItem:
    id: str
    experiment: int  # 1 = guess, 2 = ratings
    method: str  # "protopnet" | "prototree"
    true_class: int
    prototype_images: list[str]  # asset-relative paths
    prototype_ids: list[int]
    class_options: list[int] = field(default_factory=list)  # experiment 1 only
    class_names: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.experiment not in (1, 2):
            raise ValueError(f"item {self.id}: experiment must be 1 or 2")
        if self.experiment == 1 and self.class_options.count(self.true_class) != 1:
            raise ValueError(f"item {self.id}: candidates must include the true class exactly once")
        if len(self.prototype_ids) != len(self.prototype_images):
            raise ValueError(f"item {self.id}: prototype ids and images differ in length")

    def public_payload(self) -> dict:
        """What participants see. Experiment-1 payloads never carry the true class."""
        doc = {
            "schema_version": SCHEMA_VERSION,
            "id": self.id,
            "experiment": self.experiment,
            "method": self.method,
            "prototype_images": self.prototype_images,
            "prototype_ids": self.prototype_ids,
        }
        if self.experiment == 1:
            doc["class_options"] = self.class_options
            doc["class_names"] = {str(k): v for k, v in self.class_names.items()}
        else:
            doc["revealed_class"] = self.true_class
            doc["revealed_class_name"] = self.class_names.get(self.true_class)
            doc["redundancy_choices"] = list(REDUNDANCY_CHOICES)
        return doc


def load_items(items_dir: str | Path) -> list[StudyItem]:
    items_dir = Path(items_dir)
    doc = json.loads((items_dir / "items.json").read_text())
    items = []
    for raw in doc["items"]:
        item = StudyItem(
            id=raw["id"],
            experiment=raw["experiment"],
            method=raw["method"],
            true_class=raw["true_class"],
            prototype_images=raw["prototype_images"],
            prototype_ids=raw["prototype_ids"],
            class_options=raw.get("class_options", []),
            class_names={int(k): v for k, v in raw.get("class_names", {}).items()},
        )
        item.validate()
        items.append(item)
    if len({it.id for it in items}) != len(items):
        raise ValueError("duplicate item ids in items.json")
    return items


# ---------------------------------------------------------------------------
# Store: sessions + append-only log
# ---------------------------------------------------------------------------


@dataclass
class Session:
    id: str
    user: str
    seed: int
    order: list[str]
    answered: set = field(default_factory=set)

    def next_unanswered(self) -> str | None:
        for item_id in self.order:
            if item_id not in self.answered:
                return item_id
        return None


class StudyStore:
    """Sessions, response validation, durable NDJSON log."""

    def __init__(self, items: list[StudyItem], log_path: str | Path):
        self.items = {it.id: it for it in items}
        self.log_path = Path(log_path)
        self.sessions: dict[str, Session] = {}
        self.responses: list[dict] = []
        self._lock = threading.Lock()
        if self.log_path.exists():
            self._replay_existing()

    # -- log plumbing --

    def _append(self, record: dict) -> None:
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.log_path, "a") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
            f.flush()
            os.fsync(f.fileno())

    def _replay_existing(self) -> None:
        for record in read_log(self.log_path):
            if record["type"] == "session":
                self.sessions[record["session"]] = Session(
                    record["session"], record["user"], record["seed"], record["order"]
                )
            elif record["type"] == "response":
                self.responses.append(record)
                sess = self.sessions.get(record["session"])
                if sess is not None:
                    sess.answered.add(record["item"])

    # -- session flow --

    def _item_order(self, seed: int) -> list[str]:
        rng = np.random.default_rng(seed)
        exp1 = sorted(i for i, it in self.items.items() if it.experiment == 1)
        exp2 = sorted(i for i, it in self.items.items() if it.experiment == 2)
        return [exp1[k] for k in rng.permutation(len(exp1))] + [
            exp2[k] for k in rng.permutation(len(exp2))
        ]

    def create_session(self, user: str, seed: int, session_id: str | None = None) -> Session:
        with self._lock:
            sid = session_id or uuid.uuid4().hex
            if sid in self.sessions:
                raise StudyError(f"duplicate session id {sid!r}", status=409)
            session = Session(sid, user, seed, self._item_order(seed))
            # persist before the first item can be served
            self._append(
                {"type": "session", "session": sid, "user": user, "seed": seed,
                 "order": session.order, "ts": _now()}
            )
            self.sessions[sid] = session
            return session

    def _get_session(self, session_id: str) -> Session:
        sess = self.sessions.get(session_id)
        if sess is None:
            raise StudyError(f"unknown session {session_id!r}", status=404)
        return sess

    def next_item(self, session_id: str) -> dict:
        sess = self._get_session(session_id)
        item_id = sess.next_unanswered()
        if item_id is None:
            return {
                "schema_version": SCHEMA_VERSION,
                "done": True,
                "answered": len(sess.answered),
                "total": len(sess.order),
            }
        return {
            "schema_version": SCHEMA_VERSION,
            "done": False,
            "answered": len(sess.answered),
            "total": len(sess.order),
            "item": self.items[item_id].public_payload(),
        }

    def submit_response(self, session_id: str, payload: dict) -> dict:
        with self._lock:
            sess = self._get_session(session_id)
            item_id = payload.get("item")
            if item_id not in self.items:
                raise StudyError(f"unknown item {item_id!r}", status=404)
            if item_id in sess.answered:
                raise StudyError(f"duplicate response for item {item_id!r}", status=409)
            current = sess.next_unanswered()
            if item_id != current:
                raise StudyError(
                    f"response for {item_id!r} does not match the served item {current!r}",
                    status=409,
                )
            item = self.items[item_id]
            record = self._validated_record(sess, item, payload)
            self._append(record)
            self.responses.append(record)
            sess.answered.add(item_id)
            return {
                "schema_version": SCHEMA_VERSION,
                "status": "ok",
                "answered": len(sess.answered),
                "total": len(sess.order),
            }

    def _validated_record(self, sess: Session, item: StudyItem, payload: dict) -> dict:
        base = {
            "type": "response",
            "session": sess.id,
            "user": sess.user,
            "item": item.id,
            "experiment": item.experiment,
            "method": item.method,
            "ts": _now(),
        }
        if item.experiment == 1:
            guess = payload.get("guess")
            if guess is None:
                raise StudyError("experiment-1 response needs a 'guess'", status=422)
            if guess not in item.class_options:
                raise StudyError(f"guess {guess!r} is not a candidate class", status=422)
            return {**base, "guess": int(guess), "true_class": item.true_class,
                    "correct": bool(guess == item.true_class)}

        ratings = payload.get("ratings")
        if not isinstance(ratings, dict):
            raise StudyError("experiment-2 response needs a 'ratings' object", status=422)
        clean = {}
        for pid in item.prototype_ids:
            key = str(pid)
            if key not in ratings:
                raise StudyError(f"missing rating for prototype {pid}", status=422)
            slot = ratings[key]
            if not isinstance(slot.get("useful"), bool):
                raise StudyError(f"prototype {pid}: 'useful' must be true/false", status=422)
            if slot.get("redundancy") not in REDUNDANCY_CHOICES:
                raise StudyError(
                    f"prototype {pid}: 'redundancy' must be one of {REDUNDANCY_CHOICES}",
                    status=422,
                )
            clean[key] = {"useful": slot["useful"], "redundancy": slot["redundancy"]}
        extra = set(ratings) - set(clean)
        if extra:
            raise StudyError(f"ratings for unknown prototypes: {sorted(extra)}", status=422)
        return {**base, "class": item.true_class, "ratings": clean}

    def stats(self) -> dict:
        return compute_stats(self.responses)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def read_log(path: str | Path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def replay_stats(path: str | Path) -> dict:
    """Stats recomputed from the durable log alone."""
    responses = [r for r in read_log(path) if r["type"] == "response"]
    return compute_stats(responses)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def _fraction_histogram(fractions: list[float], bins: int = HISTOGRAM_BIN_COUNT) -> list[int]:
    """Counts of per-prototype agreement fractions over [0,1]; sums to len(fractions)."""
    edges = np.linspace(0.0, 1.0, bins + 1)
    counts, _ = np.histogram(fractions, bins=edges)
    return [int(c) for c in counts]


def compute_stats(responses: list[dict]) -> dict:
    """Fig-6-style statistics: guess accuracy, usefulness, (non-)redundancy.

    A prototype counts as "totally useful" only when 100% of its raters marked
    it useful; same rule for "totally non-redundant" under the two-way collapse
    (non_redundant or not_meaningful both count as not repeating).
    """
    if not responses:
        raise ValueError("no responses recorded")

    methods = sorted({r["method"] for r in responses})
    out = {"schema_version": SCHEMA_VERSION, "methods": {}}
    for method in methods:
        guesses = [r for r in responses if r["method"] == method and r["experiment"] == 1]
        ratings = [r for r in responses if r["method"] == method and r["experiment"] == 2]

        acc = None
        if guesses:
            acc = sum(r["correct"] for r in guesses) / len(guesses)

        useful_votes: dict[str, list[bool]] = {}
        nonred_votes: dict[str, list[bool]] = {}
        three_way = {c: 0 for c in REDUNDANCY_CHOICES}
        for r in ratings:
            for pid, slot in r["ratings"].items():
                key = f"{r['item']}:{pid}"
                useful_votes.setdefault(key, []).append(bool(slot["useful"]))
                nonred_votes.setdefault(key, []).append(slot["redundancy"] != "redundant")
                three_way[slot["redundancy"]] += 1

        useful_fracs = {k: float(np.mean(v)) for k, v in useful_votes.items()}
        nonred_fracs = {k: float(np.mean(v)) for k, v in nonred_votes.items()}
        n_protos = len(useful_fracs)

        out["methods"][method] = {
            "guess_accuracy": acc,
            "n_guesses": len(guesses),
            "n_rated_prototypes": n_protos,
            "usefulness_fraction_per_prototype": useful_fracs,
            "totally_useful_fraction": (
                sum(f == 1.0 for f in useful_fracs.values()) / n_protos if n_protos else None
            ),
            "usefulness_histogram": _fraction_histogram(list(useful_fracs.values())),
            "non_redundancy_fraction_per_prototype": nonred_fracs,
            "totally_non_redundant_fraction": (
                sum(f == 1.0 for f in nonred_fracs.values()) / n_protos if n_protos else None
            ),
            "non_redundancy_histogram": _fraction_histogram(list(nonred_fracs.values())),
            "redundancy_three_way_counts": three_way,
        }
    return out


# ---------------------------------------------------------------------------
# HTTP app
# ---------------------------------------------------------------------------


class CreateSessionBody(BaseModel):
    user: str
    seed: int = 0
    session_id: str | None = None


class SubmitResponseBody(BaseModel):
    item: str
    guess: int | None = None
    ratings: dict | None = None


def build_app(store: StudyStore, assets_dir: str | Path):
    """FastAPI app exposing the versioned JSON API over a StudyStore."""
    from fastapi import FastAPI, HTTPException
    from fastapi.middleware.cors import CORSMiddleware
    from fastapi.responses import FileResponse

    assets_dir = Path(assets_dir).resolve()

    app = FastAPI(title="prototype user study", version=str(SCHEMA_VERSION))
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    def guard(fn, *args):
        try:
            return fn(*args)
        except StudyError as e:
            raise HTTPException(status_code=e.status, detail=str(e))

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody):
        session = guard(store.create_session, body.user, body.seed, body.session_id)
        return {
            "schema_version": SCHEMA_VERSION,
            "session_id": session.id,
            "total_items": len(session.order),
        }

    @app.get("/sessions/{session_id}/next")
    def next_item(session_id: str):
        return guard(store.next_item, session_id)

    @app.post("/sessions/{session_id}/responses")
    def submit(session_id: str, body: SubmitResponseBody):
        payload = {"item": body.item}
        if body.guess is not None:
            payload["guess"] = body.guess
        if body.ratings is not None:
            payload["ratings"] = body.ratings
        return guard(store.submit_response, session_id, payload)

    @app.get("/stats")
    def stats():
        try:
            return store.stats()
        except ValueError as e:
            raise HTTPException(status_code=404, detail=str(e))

    @app.get("/assets/{name:path}")
    def asset(name: str):
        target = (assets_dir / name).resolve()
        if not str(target).startswith(str(assets_dir)) or not target.is_file():
            raise HTTPException(status_code=404, detail="no such asset")
        return FileResponse(target)

    return app


def serve(items_dir: str | Path, log_path: str | Path, host: str = "127.0.0.1",
          port: int = 8765):
    import uvicorn

    items = load_items(items_dir)
    store = StudyStore(items, log_path)
    app = build_app(store, Path(items_dir) / "assets")
    uvicorn.run(app, host=host, port=port, log_level="warning")


# ---------------------------------------------------------------------------
# Item-bank construction from trained checkpoints
# ---------------------------------------------------------------------------


def make_study_items(checkpoints: dict[str, str | Path], dataset, out_dir: str | Path,
                     class_names: dict[int, str] | None = None,
                     percentile: float = 95.0) -> Path:
    """Build a gallery item bank from trained models.

    checkpoints: method tag -> checkpoint dir ("protopnet" and/or "prototree").
    Writes items.json plus assets/ thumbnails; returns the items directory.
    """
    from PIL import Image as PILImage

    from .explain import extract_patch, prototype_heatmap, upsample_map
    from .protopnet import images_to_tensor, load_checkpoint
    from .prototree import load_tree_checkpoint

    out_dir = Path(out_dir)
    assets = out_dir / "assets"
    assets.mkdir(parents=True, exist_ok=True)
    names = class_names or {
        c: f"class {c} ({', '.join(sorted(k.value for k in kinds))})"
        for c, kinds in dataset.class_composition.items()
    }

    items = []
    for method, ckpt in sorted(checkpoints.items()):
        if method == "protopnet":
            model = load_checkpoint(ckpt)
            groups: dict[int, list[int]] = {}
            for proto in model.prototype_info():
                groups.setdefault(proto.class_id, []).append(proto.id)
            proto_source = {p.id: p.source for p in model.prototype_info()}

            def heat_for(pid, image):
                return prototype_heatmap(model, image, pid, "upsample")

        elif method == "prototree":
            tree = load_tree_checkpoint(ckpt)
            # a tree's nodes are class-agnostic: every class item shows the
            # node prototypes along that class's most likely hard path
            groups = {}
            proto_source = {j: tree.sources[j] for j in range(tree.n_internal)}
            for c in sorted(dataset.class_composition):
                idx = [i for i in range(len(dataset)) if dataset.labels[i] == c]
                path = tree.extract_decision_path(
                    images_to_tensor(dataset.images[idx[0] : idx[0] + 1])[0]
                )
                groups[c] = [s.node_id for s in path.steps]

            def heat_for(pid, image):
                import torch as _t

                from .protopnet import _pairwise_distances, _similarity_t

                with _t.no_grad():
                    z = tree.extractor(images_to_tensor(image[None]))
                    d = _pairwise_distances(z, tree.prototypes)
                    sim = _similarity_t(d, 1e-4)
                return upsample_map(sim[0, pid].numpy(), prototype_id=pid)

        else:
            raise ValueError(f"unknown method {method!r}")

        for class_id, proto_ids in sorted(groups.items()):
            image_rels = []
            for pid in proto_ids:
                src = proto_source.get(pid)
                if src is None:
                    raise ValueError(f"{method} prototype {pid} has no projection source")
                image = dataset.images[src[0]]
                box = extract_patch(heat_for(pid, image), percentile)
                thumb = image[box.slices]
                rel = f"{method}_c{class_id}_p{pid}.png"
                PILImage.fromarray(thumb).save(assets / rel)
                image_rels.append(rel)

            options = sorted(dataset.class_composition)
            items.append(
                {
                    "id": f"guess-{method}-c{class_id}",
                    "experiment": 1,
                    "method": method,
                    "true_class": class_id,
                    "class_options": options,
                    "class_names": {str(c): names[c] for c in options},
                    "prototype_images": image_rels,
                    "prototype_ids": proto_ids,
                }
            )
            items.append(
                {
                    "id": f"rate-{method}-c{class_id}",
                    "experiment": 2,
                    "method": method,
                    "true_class": class_id,
                    "class_names": {str(class_id): names[class_id]},
                    "prototype_images": image_rels,
                    "prototype_ids": proto_ids,
                }
            )

    (out_dir / "items.json").write_text(
        json.dumps({"schema_version": SCHEMA_VERSION, "items": items}, indent=1)
    )
    return out_dir
