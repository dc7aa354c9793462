"""Axis-aligned 3D IoU and all-point average precision."""

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np


def _lohi(box):
    if isinstance(box, dict):
        c, s = np.asarray(box["center"], float), np.asarray(box["size"], float)
    else:
        c, s = np.asarray(box.center, float), np.asarray(box.size, float)
    return c - s / 2, c + s / 2


def iou3d(a, b):
    """Intersection over union of two axis-aligned boxes (Box3D or dicts)."""
    alo, ahi = _lohi(a)
    blo, bhi = _lohi(b)
    inter = float(np.prod(np.clip(np.minimum(ahi, bhi) - np.maximum(alo, blo), 0.0, None)))
    union = float(np.prod(ahi - alo)) + float(np.prod(bhi - blo)) - inter
    return inter / union if union > 0 else 0.0


@dataclass
class MatchTable:
    scores: list = field(default_factory=list)
    tp: list = field(default_factory=list)
    n_gt: int = 0


def match_detections(detections, gts, iou_threshold):
    """Greedy score-ordered matching for one class.

    Args:
        detections: list of (scene_key, box, score); ties keep insertion order
        gts: dict scene_key -> list of boxes
    Each detection takes the highest-IoU GT not yet matched in its scene
    (ties by GT index) and is a true positive iff that IoU >= threshold.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i][2])
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    table = MatchTable(n_gt=sum(len(v) for v in gts.values()))
    for i in order:
        key, box, score = detections[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(gts.get(key, [])):
            if used[key][j]:
                continue
            o = iou3d(box, g)
            if o > best:
                best, best_j = o, j
        hit = best_j >= 0 and best >= iou_threshold
        if hit:
            used[key][best_j] = True
        table.scores.append(score)
        table.tp.append(bool(hit))
    return table


def pr_curve(table):
    tp = np.asarray(table.tp, dtype=float)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / table.n_gt if table.n_gt else np.zeros_like(ctp)
    precision = ctp / np.maximum(ctp + cfp, np.finfo(float).tiny)
    return recall, precision


def ap_from_table(table):
    """Area under the monotone precision envelope (all points)."""
    if table.n_gt == 0:
        return None if not table.tp else 0.0
    if not table.tp:
        return 0.0
    recall, precision = pr_curve(table)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    i = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def average_precision(detections, gts, iou_threshold):
    """AP for one class; None when the class has neither GTs nor detections."""
    return ap_from_table(match_detections(detections, gts, iou_threshold))


@dataclass
class APReport:
    per_class: dict          # class_id -> {"AP25": x, "AP50": y}
    novel_ids: list
    base_ids: list
    meta: dict = field(default_factory=dict)

    def _mean(self, ids, key):
        vals = [self.per_class[c][key] for c in ids if c in self.per_class and self.per_class[c][key] is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def novel_AP25(self):
        return self._mean(self.novel_ids, "AP25")

    @property
    def novel_AP50(self):
        return self._mean(self.novel_ids, "AP50")

    @property
    def base_AP25(self):
        return self._mean(self.base_ids, "AP25")

    @property
    def base_AP50(self):
        return self._mean(self.base_ids, "AP50")

    def to_dict(self):
        return {
            "per_class": {str(c): v for c, v in sorted(self.per_class.items())},
            "novel": {"AP25": self.novel_AP25, "AP50": self.novel_AP50, "class_ids": self.novel_ids},
            "base": {"AP25": self.base_AP25, "AP50": self.base_AP50, "class_ids": self.base_ids},
            "meta": self.meta,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class_id", "split", "AP25", "AP50"])
        fmt = lambda v: "" if v is None else repr(float(v))
        for c in sorted(self.per_class):
            w.writerow([c, "novel" if c in self.novel_ids else "base",
                        fmt(self.per_class[c]["AP25"]), fmt(self.per_class[c]["AP50"])])
        w.writerow(["mean_novel", "novel", fmt(self.novel_AP25), fmt(self.novel_AP50)])
        w.writerow(["mean_base", "base", fmt(self.base_AP25), fmt(self.base_AP50)])
        return buf.getvalue()

    def save(self, out_dir, stem="ap_report"):
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, stem + ".json"), "w") as f:
            f.write(self.to_json())
        with open(os.path.join(out_dir, stem + ".csv"), "w") as f:
            f.write(self.to_csv())


def evaluate(detections_by_scene, scenes, split, thresholds=(0.25, 0.5)):
    """APReport from in-memory detections.

    Args:
        detections_by_scene: dict scene_id -> list of {"center", "size", "class_id", "score"}
        scenes: ground-truth PointCloudScene list
    """
    missing = sorted(s.scene_id for s in scenes if s.scene_id not in detections_by_scene)
    if missing:
        raise FileNotFoundError(f"no detections for scenes: {missing}")
    class_ids = sorted(split.base_class_ids + split.novel_class_ids)
    per_class = {}
    # Scenes are visited in sorted order so the report ignores input ordering.
    ordered = sorted(scenes, key=lambda s: s.scene_id)
    for c in class_ids:
        gts = {s.scene_id: [b for b in s.boxes if b.class_id == c] for s in ordered}
        dets = [(s.scene_id, d, float(d["score"])) for s in ordered
                for d in detections_by_scene[s.scene_id] if int(d["class_id"]) == c]
        row = {}
        for thr in thresholds:
            row[f"AP{int(round(thr * 100))}"] = average_precision(dets, gts, thr)
        per_class[c] = row
    return APReport(per_class, list(split.novel_class_ids), list(split.base_class_ids))


def save_detections(dets, path):
    with open(path, "w") as f:
        json.dump(dets, f, sort_keys=True)
        f.write("\n")


def load_detections(path):
    with open(path) as f:
        return json.load(f)


def evaluate_run(detection_dir, scenes, split):
    """Score ``<scene_id>.det.json`` files in ``detection_dir`` against ``scenes``."""
    missing = [s.scene_id for s in scenes
               if not os.path.isfile(os.path.join(detection_dir, s.scene_id + ".det.json"))]
    if missing:
        raise FileNotFoundError(f"missing detection files for scenes: {sorted(missing)}")
    dets = {s.scene_id: load_detections(os.path.join(detection_dir, s.scene_id + ".det.json")) for s in scenes}
    return evaluate(dets, scenes, split)
