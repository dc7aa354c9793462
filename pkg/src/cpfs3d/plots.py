"""SVG figures: loss curves, precision-recall curves, top-down scene views, ablation bars."""

import csv
import json

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .eval3d import match_detections, pr_curve  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "cpfs3d"
_SVG_META = {"Date": None, "Creator": None}

# tab10 without its green entry, which is reserved for ground truth
_DET_COLORS = matplotlib.colors.ListedColormap([c for i, c in enumerate(plt.get_cmap("tab10").colors) if i != 2])

LOSS_KEYS = ("l_vote", "l_objectness", "l_box", "l_cls", "l_det", "l_semcl", "l_primcl", "l_total")


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def read_metrics(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def plot_losses(metrics_paths, out_path, keys=LOSS_KEYS):
    """One panel per loss term; stages are concatenated along the step axis."""
    rows, offset = [], 0
    for p in metrics_paths:
        recs = read_metrics(p)
        for r in recs:
            rows.append((offset + r["step"], r))
        if recs:
            offset = rows[-1][0] + 1
    fig, axes = plt.subplots(2, 4, figsize=(14, 6), sharex=True)
    for ax, key in zip(axes.ravel(), keys):
        pts = [(s, r[key]) for s, r in rows if r.get(key) is not None]
        if pts:
            ax.plot(*zip(*pts), lw=0.8)
        ax.set_title(key)
        ax.set_xlabel("step")
    fig.tight_layout()
    return _save(fig, out_path)


def plot_pr(dets_by_scene, scenes, class_ids, out_path, iou_threshold=0.25, names=None):
    """Precision-recall curves of the given classes at one IoU threshold."""
    fig, ax = plt.subplots(figsize=(5, 4))
    ordered = sorted(scenes, key=lambda s: s.scene_id)
    for c in class_ids:
        gts = {s.scene_id: [b for b in s.boxes if b.class_id == c] for s in ordered}
        dets = [(s.scene_id, d, float(d["score"])) for s in ordered
                for d in dets_by_scene.get(s.scene_id, []) if int(d["class_id"]) == c]
        table = match_detections(dets, gts, iou_threshold)
        if not table.tp or not table.n_gt:
            continue
        recall, precision = pr_curve(table)
        ax.step(recall, precision, where="post", label=(names or {}).get(c, f"class {c}"))
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"PR @ IoU {iou_threshold:g}")
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, out_path)


def plot_scene(scene, out_path, detections=(), score_threshold=0.0):
    """Top-down (x, y) view: points, ground-truth footprints and detected footprints.

    Points are gray, ground truth green, detections dashed and colored by
    predicted class.  Ground-truth rectangles carry SVG ids ``gt-box-<i>``;
    detections ``det-box-<i>``.
    """
    fig, ax = plt.subplots(figsize=(6, 6))
    pts = scene.points
    ax.scatter(pts[:, 0], pts[:, 1], s=0.5, c="0.6", linewidths=0)
    for i, b in enumerate(scene.boxes):
        r = Rectangle((b.lo[0], b.lo[1]), b.size[0], b.size[1], fill=False, ec="green", lw=1.2)
        r.set_gid(f"gt-box-{i}")
        ax.add_patch(r)
        ax.text(b.lo[0], b.hi[1], str(b.class_id), color="green", fontsize=7)
    for i, d in enumerate(d for d in detections if d["score"] >= score_threshold):
        cx, cy = d["center"][:2]
        sx, sy = d["size"][:2]
        color = _DET_COLORS(int(d["class_id"]) % _DET_COLORS.N)
        r = Rectangle((cx - sx / 2, cy - sy / 2), sx, sy, fill=False, ec=color, lw=0.8, ls="--")
        r.set_gid(f"det-box-{i}")
        ax.add_patch(r)
    ax.set_aspect("equal")
    ax.set_title(scene.scene_id)
    fig.tight_layout()
    return _save(fig, out_path)


def plot_ablation(csv_path, out_path, metric="novel_AP25"):
    with open(csv_path) as f:
        rows = [r for r in csv.DictReader(f) if r["status"] == "ok"]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(rows)), 4))
    labels = [f"{r['group']}:{r['arm']}" for r in rows]
    ax.bar(range(len(rows)), [float(r[metric]) for r in rows])
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=60, ha="right", fontsize=7)
    ax.set_ylabel(metric)
    fig.tight_layout()
    return _save(fig, out_path)
