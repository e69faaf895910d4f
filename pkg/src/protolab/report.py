"""Render figures and an HTML index from run artifacts.

Sections appear only when their inputs are given: prototype galleries from a
checkpoint plus its dataset, metric plots from an evaluation report, study
statistics from a response log, and OOD histograms from an ood run directory.
"""

from __future__ import annotations

import json
import shutil
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path: Path) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path.name


def render_gallery(model_dir: str, data_dir: str, out_dir: Path) -> list[str]:
    """Prototype source-patch gallery, one row per class (or per tree path)."""
    from .cli import _load_any_model, _projection_dataset
    from .explain import extract_patch, prototype_heatmap, upsample_map
    from .protopnet import images_to_tensor

    model, kind = _load_any_model(model_dir)
    ds = _projection_dataset(model_dir, data_dir)
    files = []

    if kind == "protopnet":
        classes = sorted({int(c) for c in model.prototype_classes.numpy()})
        rows = max(len(classes), 1)
        cols = max(sum(int(c) == classes[0] for c in model.prototype_classes.numpy()), 1)
        fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.4 * rows), squeeze=False)
        for ax_row in axes:
            for ax in ax_row:
                ax.axis("off")
        for row, cls in enumerate(classes):
            col = 0
            for proto in model.prototype_info():
                if proto.class_id != cls or proto.source is None:
                    continue
                image = ds.images[proto.source[0]]
                heat = prototype_heatmap(model, image, proto.id, "upsample")
                box = extract_patch(heat)
                axes[row][col].imshow(image[box.slices])
                axes[row][col].set_title(f"p{proto.id} (class {cls})", fontsize=8)
                col += 1
        files.append(_save(fig, out_dir / "gallery_protopnet.png"))
    else:
        import torch

        from .protopnet import _pairwise_distances, _similarity_t

        tree = model
        n = tree.n_internal
        fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.6), squeeze=False)
        for j in range(n):
            src = tree.sources[j]
            ax = axes[0][j]
            ax.axis("off")
            if src is None:
                continue
            image = ds.images[src[0]]
            with torch.no_grad():
                z = tree.extractor(images_to_tensor(image[None]))
                sim = _similarity_t(_pairwise_distances(z, tree.prototypes), 1e-4)
            heat = upsample_map(sim[0, j].numpy())
            box = extract_patch(heat)
            ax.imshow(image[box.slices])
            ax.set_title(f"node {j}", fontsize=8)
        files.append(_save(fig, out_dir / "gallery_prototree.png"))
    return files


def render_evaluation(evaluation_path: str, out_dir: Path) -> list[str]:
    doc = json.loads(Path(evaluation_path).read_text())
    files = []

    # purity per prototype, per backend
    purity = doc.get("purity", {})
    if purity:
        fig, ax = plt.subplots(figsize=(7, 3.2))
        width = 0.8 / max(len(purity), 1)
        for i, (backend, scores) in enumerate(sorted(purity.items())):
            ids = sorted(scores, key=int)
            xs = np.arange(len(ids)) + i * width
            ax.bar(xs, [scores[j] for j in ids], width=width, label=backend)
        ax.set_xticks(np.arange(len(ids)) + width / 2)
        ax.set_xticklabels(ids)
        ax.set_xlabel("prototype")
        ax.set_ylabel("purity")
        ax.set_ylim(0, 1)
        ax.legend()
        files.append(_save(fig, out_dir / "purity.png"))

    probes = doc.get("transformation_consistency", [])
    if probes:
        names = [p["transform"] for p in probes]
        metrics = ["top_k_overlap", "same_class_fraction", "path_equality_rate"]
        fig, ax = plt.subplots(figsize=(7, 3.2))
        width = 0.8 / len(metrics)
        for i, metric in enumerate(metrics):
            vals = [p.get(metric) for p in probes]
            xs = np.arange(len(names)) + i * width
            ax.bar(xs, [v if v is not None else 0.0 for v in vals], width=width,
                   label=metric.replace("_", " "))
        ax.set_xticks(np.arange(len(names)) + width)
        ax.set_xticklabels(names, fontsize=8)
        ax.set_ylim(0, 1.05)
        ax.legend(fontsize=8)
        files.append(_save(fig, out_dir / "transforms.png"))

    red = doc.get("redundancy", [])
    if red:
        fig, axes = plt.subplots(1, len(red), figsize=(3.2 * len(red), 3), squeeze=False)
        for ax, r in zip(axes[0], red):
            im = ax.imshow(np.asarray(r["matrix"]), vmin=0, vmax=1, cmap="viridis")
            ax.set_title(f"class {r['class']} (dups: {r['duplicate_count']})", fontsize=9)
            ax.set_xticks(range(len(r["prototypes"])))
            ax.set_xticklabels(r["prototypes"], fontsize=7)
            ax.set_yticks(range(len(r["prototypes"])))
            ax.set_yticklabels(r["prototypes"], fontsize=7)
            fig.colorbar(im, ax=ax, fraction=0.046)
        files.append(_save(fig, out_dir / "redundancy.png"))
    return files


def render_study(study_log: str, out_dir: Path) -> list[str]:
    from .study import replay_stats

    stats = replay_stats(study_log)
    methods = sorted(stats["methods"])
    files = []

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    accs = [stats["methods"][m]["guess_accuracy"] or 0.0 for m in methods]
    axes[0].bar(methods, accs, color=["#4477aa", "#ee6677"][: len(methods)])
    axes[0].set_ylim(0, 1.05)
    axes[0].set_title("class prediction accuracy")

    for ax, key, title in (
        (axes[1], "usefulness_histogram", "prototype usefulness"),
        (axes[2], "non_redundancy_histogram", "prototype non-redundancy"),
    ):
        width = 0.8 / max(len(methods), 1)
        for i, m in enumerate(methods):
            hist = stats["methods"][m][key]
            xs = np.arange(len(hist)) + i * width
            ax.bar(xs, hist, width=width, label=m)
        ax.set_xticks(np.arange(5) + width / 2)
        ax.set_xticklabels(["0-.2", ".2-.4", ".4-.6", ".6-.8", ".8-1"], fontsize=8)
        ax.set_xlabel("agreement fraction")
        ax.set_title(title)
        ax.legend(fontsize=8)
    files.append(_save(fig, out_dir / "study_stats.png"))
    return files


def render_report(out_dir: Path, evaluation_path: str | None = None,
                  ood_dir: str | None = None, study_log: str | None = None,
                  model_dir: str | None = None, data_dir: str | None = None) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sections: list[tuple[str, list[str]]] = []

    if model_dir and data_dir:
        sections.append(("Prototype gallery", render_gallery(model_dir, data_dir, out_dir)))
    if evaluation_path:
        sections.append(("Desiderata metrics", render_evaluation(evaluation_path, out_dir)))
    if study_log:
        sections.append(("User study", render_study(study_log, out_dir)))
    if ood_dir:
        src = Path(ood_dir) / "histograms.png"
        if src.exists():
            shutil.copy(src, out_dir / "ood_histograms.png")
            sections.append(("OOD detection", ["ood_histograms.png"]))

    if not sections:
        raise ValueError("nothing to render: pass at least one artifact input")

    html = ["<html><head><title>protolab report</title></head><body>",
            "<h1>protolab report</h1>"]
    for title, images in sections:
        html.append(f"<h2>{title}</h2>")
        for name in images:
            html.append(f'<p><img src="{name}" style="max-width:100%"></p>')
    html.append("</body></html>")
    (out_dir / "index.html").write_text("\n".join(html))
    return out_dir
