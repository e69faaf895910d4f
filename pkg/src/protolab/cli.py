"""Command line entry point: every workflow behind one `protolab` command.

Subcommands: generate-data, train, train-tree, project, explain, evaluate,
ood, serve-study, report. Each run validates its JSON config against a schema
(unknown keys rejected), writes a manifest (config hash, seed, versions) next
to its outputs, and reruns byte-identically given the same config and seed.
Errors leave machine-readable JSON on stderr and a nonzero exit status.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

PROTOPNET_TRAIN_KEYS = {
    "warmup_epochs": {"type": "integer", "minimum": 0},
    "joint_epochs": {"type": "integer", "minimum": 0},
    "last_layer_epochs": {"type": "integer", "minimum": 0},
    "lr_prototypes": {"type": "number", "exclusiveMinimum": 0},
    "lr_extractor": {"type": "number", "exclusiveMinimum": 0},
    "lr_last_layer": {"type": "number", "exclusiveMinimum": 0},
    "lambda_cluster": {"type": "number"},
    "lambda_separation": {"type": "number"},
    "batch_size": {"type": "integer", "minimum": 1},
}

TREE_TRAIN_KEYS = {
    "warmup_epochs": {"type": "integer", "minimum": 0},
    "joint_epochs": {"type": "integer", "minimum": 0},
    "leaf_epochs": {"type": "integer", "minimum": 0},
    "lr_prototypes": {"type": "number", "exclusiveMinimum": 0},
    "lr_extractor": {"type": "number", "exclusiveMinimum": 0},
    "lr_leaves": {"type": "number", "exclusiveMinimum": 0},
    "batch_size": {"type": "integer", "minimum": 1},
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer"},
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "type": {"enum": ["protopnet", "prototree"]},
                "per_class_count": {"type": "integer", "minimum": 1},
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "depth": {"type": "integer", "minimum": 1},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {**PROTOPNET_TRAIN_KEYS, **TREE_TRAIN_KEYS},
        },
        "evaluation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "k": {"type": "integer", "minimum": 1},
                "tau_cosine": {"type": "number"},
                "tau_iou": {"type": "number"},
                "percentile": {"type": "number"},
                "rotate_degrees": {"type": "number"},
                "crop_fraction": {"type": "number"},
                "max_purity_images": {"type": "integer", "minimum": 1},
            },
        },
    },
}


class ConfigError(ValueError):
    pass


def load_config(path: str | None) -> dict:
    doc = {} if path is None else json.loads(Path(path).read_text())
    try:
        import jsonschema

        jsonschema.validate(doc, CONFIG_SCHEMA)
    except Exception as e:  # jsonschema.ValidationError
        raise ConfigError(str(getattr(e, "message", e)))
    return doc


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def write_manifest(out_dir: Path, command: str, config: dict, seed: int | None) -> None:
    import torch

    import protolab

    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "versions": {
            "protolab": protolab.__version__,
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def _dump_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    from .shapes import make_dataset, save_dataset

    ds = make_dataset(args.version, args.n_per_class, args.seed)
    out = Path(args.out)
    save_dataset(ds, out)
    write_manifest(
        out, "generate-data",
        {"version": args.version, "n_per_class": args.n_per_class}, args.seed,
    )
    print(f"wrote {len(ds)} images to {out}")
    return 0


def _split_for_training(data_dir: str):
    from .shapes import load_dataset, train_test_split

    ds = load_dataset(data_dir)
    return train_test_split(ds, 0.8)


def cmd_train(args) -> int:
    from .protopnet import (
        TrainConfig,
        accuracy,
        pooled_similarity_stats,
        save_checkpoint,
        train,
    )

    config = load_config(args.config)
    seed = config.get("seed", 0)
    model_cfg = config.get("model", {})
    if model_cfg.get("type", "protopnet") != "protopnet":
        raise ConfigError("train expects a protopnet model config; use train-tree for trees")
    tc = TrainConfig(
        seed=seed,
        per_class_count=model_cfg.get("per_class_count", 10),
        epsilon=model_cfg.get("epsilon", 1e-4),
        **{k: v for k, v in config.get("train", {}).items() if k in PROTOPNET_TRAIN_KEYS},
    )
    train_ds, test_ds = _split_for_training(args.data)
    result = train(tc, train_ds)

    out = Path(args.out)
    save_checkpoint(
        result.model, out,
        extra={"dataset": str(args.data), "projection_split": "train80"},
        pooled_stats=pooled_similarity_stats(result.model, train_ds.images),
    )
    metrics = {
        "train_accuracy": accuracy(result.model, train_ds.images, train_ds.labels),
        "test_accuracy": accuracy(result.model, test_ds.images, test_ds.labels),
        "final_loss": result.history[-1]["total"] if result.history else None,
        "steps": len(result.history),
    }
    _dump_json(out / "metrics.json", metrics)
    (out / "history.json").write_text(json.dumps(result.history))
    write_manifest(out, "train", config, seed)
    print(json.dumps(metrics, indent=1, sort_keys=True))
    return 0


def cmd_train_tree(args) -> int:
    from .prototree import TreeConfig, save_tree_checkpoint, train_tree, tree_accuracy

    config = load_config(args.config)
    seed = config.get("seed", 0)
    model_cfg = config.get("model", {})
    depth = args.depth if args.depth is not None else model_cfg.get("depth", 4)
    tc = TreeConfig(
        depth=depth,
        seed=seed,
        **{k: v for k, v in config.get("train", {}).items() if k in TREE_TRAIN_KEYS},
    )
    train_ds, test_ds = _split_for_training(args.data)
    result = train_tree(tc, train_ds)

    out = Path(args.out)
    save_tree_checkpoint(result.tree, out, extra={"dataset": str(args.data), "projection_split": "train80"})
    metrics = {
        "train_accuracy": tree_accuracy(result.tree, train_ds.images, train_ds.labels),
        "test_accuracy": tree_accuracy(result.tree, test_ds.images, test_ds.labels),
        "final_loss": result.history[-1]["total"] if result.history else None,
        "steps": len(result.history),
    }
    _dump_json(out / "metrics.json", metrics)
    write_manifest(out, "train-tree", config, seed)
    print(json.dumps(metrics, indent=1, sort_keys=True))
    return 0


def _load_any_model(model_dir: str):
    config = json.loads((Path(model_dir) / "config.json").read_text())
    if config.get("model_type") == "prototree":
        from .prototree import load_tree_checkpoint

        return load_tree_checkpoint(model_dir), "prototree"
    from .protopnet import load_checkpoint

    return load_checkpoint(model_dir), "protopnet"


def _projection_dataset(model_dir: str, data_dir: str):
    """The dataset view that a checkpoint's prototype sources index into.

    Checkpoints written by `train` project on the 80% training split of their
    dataset directory; checkpoints re-projected by `project` use the directory
    as given. The checkpoint records which.
    """
    from .shapes import load_dataset, train_test_split

    config = json.loads((Path(model_dir) / "config.json").read_text())
    ds = load_dataset(data_dir)
    if config.get("projection_split", "train80") == "train80":
        return train_test_split(ds, 0.8)[0]
    return ds


def cmd_project(args) -> int:
    from .protopnet import save_checkpoint
    from .prototree import project_tree_prototypes, save_tree_checkpoint
    from .shapes import load_dataset

    model, kind = _load_any_model(args.model)
    ds = load_dataset(args.data)
    out = Path(args.out)
    if kind == "prototree":
        project_tree_prototypes(model, ds)
        save_tree_checkpoint(model, out, extra={"projected_on": str(args.data), "projection_split": "full"})
    else:
        from .protopnet import project_prototypes

        project_prototypes(model, ds)
        save_checkpoint(model, out, extra={"projected_on": str(args.data), "projection_split": "full"})
    write_manifest(out, "project", {"model": str(args.model), "data": str(args.data)}, None)
    print(f"projected prototypes written to {out}")
    return 0


def cmd_explain(args) -> int:
    from PIL import Image as PILImage

    from .explain import extract_patch, overlay_heatmap, prototype_heatmap
    from .desiderata import purity_from_heatmap

    model, kind = _load_any_model(args.model)
    if kind != "protopnet":
        raise ConfigError("explain operates on protopnet checkpoints")

    mask_arrays = []
    if args.image is not None:
        image = np.asarray(PILImage.open(args.image).convert("RGB"))
        image_ref = str(args.image)
    else:
        from .shapes import load_dataset

        ds = load_dataset(args.data)
        image = ds.images[args.index]
        mask_arrays = [m for _, m in ds.mask_sets[args.index]]
        image_ref = f"{args.data}[{args.index}]"

    heat = prototype_heatmap(model, image, args.prototype, args.backend)
    box = extract_patch(heat, args.percentile)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(overlay_heatmap(image, heat)).save(out / "heatmap.png")
    PILImage.fromarray(image[box.slices]).save(out / "patch.png")
    doc = {
        "backend": args.backend,
        "prototype": args.prototype,
        "image": image_ref,
        "box": box.to_json(),
        "heatmap_max": float(heat.values.max()),
    }
    if mask_arrays:
        doc["mass_in_mask"] = purity_from_heatmap(heat.values, mask_arrays, args.percentile)
    _dump_json(out / "explanation.json", doc)
    write_manifest(out, "explain", {"prototype": args.prototype, "backend": args.backend}, None)
    print(json.dumps(doc, indent=1, sort_keys=True))
    return 0


def cmd_evaluate(args) -> int:
    from .desiderata import evaluate_model
    from .shapes import Transform, load_dataset

    config = load_config(args.config)
    ev = config.get("evaluation", {})
    model, kind = _load_any_model(args.model)
    ds = load_dataset(args.data)
    transforms = (
        Transform.rotate(ev.get("rotate_degrees", 25.0)),
        Transform.center_crop(ev.get("crop_fraction", 0.8)),
    )
    report = evaluate_model(
        model, ds, model_id=str(args.model), transforms=transforms,
        projection_data=_projection_dataset(args.model, args.data),
        k=ev.get("k", 3), tau_cosine=ev.get("tau_cosine", 0.95),
        tau_iou=ev.get("tau_iou", 0.5), percentile=ev.get("percentile", 95.0),
        backends=("upsample", "prp") if kind == "protopnet" else ("upsample",),
        max_purity_images=ev.get("max_purity_images", 24),
    )
    out = Path(args.out)
    _dump_json(out, report.to_json())
    write_manifest(out.parent, "evaluate", config, config.get("seed"))
    print(f"report written to {out}")
    return 0


def cmd_ood(args) -> int:
    from .ood import run_ood_experiment
    from .shapes import load_dataset

    model, _ = _load_any_model(args.model)
    id_ds = load_dataset(args.id)
    near_ds = load_dataset(args.near)

    if args.far is not None:
        far_images = load_dataset(args.far).images
        far_ref = str(args.far)
    else:
        from .ood import make_far_ood

        far_images = make_far_ood(len(near_ds), args.seed)
        far_ref = f"generated(seed={args.seed})"

    out = Path(args.out)
    near, far = run_ood_experiment(model, id_ds.images, near_ds.images, far_images, out)
    doc = {"near": near.to_json(), "far": far.to_json(), "far_source": far_ref}
    _dump_json(out / "result.json", doc)
    write_manifest(out, "ood", {"id": str(args.id), "near": str(args.near)}, args.seed)
    print(json.dumps({"near_auroc": near.auroc, "far_auroc": far.auroc}, indent=1))
    return 0


def cmd_serve_study(args) -> int:
    from .study import serve

    serve(args.items, args.log, host=args.host, port=args.port)
    return 0


def cmd_report(args) -> int:
    from .report import render_report

    out = render_report(
        out_dir=Path(args.out),
        evaluation_path=args.evaluation,
        ood_dir=args.ood,
        study_log=args.study_log,
        model_dir=args.model,
        data_dir=args.data,
    )
    print(f"report rendered to {out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protolab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="render a synthetic shapes dataset")
    p.add_argument("--version", choices=["V1", "V2"], required=True)
    p.add_argument("--n-per-class", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate_data)

    p = sub.add_parser("train", help="train a prototype-part classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("train-tree", help="train a soft decision tree")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_tree)

    p = sub.add_parser("project", help="re-project prototypes onto a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_project)

    p = sub.add_parser("explain", help="heatmap + patch for one prototype on one image")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", default=None)
    src.add_argument("--data", default=None)
    p.add_argument("--index", type=int, default=0, help="image index when --data is used")
    p.add_argument("--prototype", type=int, required=True)
    p.add_argument("--backend", choices=["upsample", "prp"], default="upsample")
    p.add_argument("--percentile", type=float, default=95.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_explain)

    p = sub.add_parser("evaluate", help="desiderata metrics report")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ood", help="distance-based OOD experiment")
    p.add_argument("--model", required=True)
    p.add_argument("--id", required=True)
    p.add_argument("--near", required=True)
    p.add_argument("--far", default=None, help="dataset dir; generated noise/palette mix if omitted")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ood)

    p = sub.add_parser("serve-study", help="run the user-study HTTP service")
    p.add_argument("--items", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.set_defaults(fn=cmd_serve_study)

    p = sub.add_parser("report", help="render figures from run artifacts")
    p.add_argument("--evaluation", default=None, help="report.json from evaluate")
    p.add_argument("--ood", default=None, help="output dir of the ood subcommand")
    p.add_argument("--study-log", default=None)
    p.add_argument("--model", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(json.dumps({"error": "config", "message": str(e)}), file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures also leave machine-readable traces
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
