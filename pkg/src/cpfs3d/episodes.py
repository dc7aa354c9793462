"""Episodic N-way K-shot task sampling and batching."""

import json
from dataclasses import dataclass, field

import numpy as np

from .synthdata import ConfigurationError


@dataclass(frozen=True)
class SupportInstance:
    points: np.ndarray      # (S, 3), centered on the source box center
    class_id: int
    source: tuple           # (scene_id, instance_id)


@dataclass(frozen=True)
class Episode:
    query: object                   # PointCloudScene
    support: tuple                  # N tuples of K SupportInstance
    class_ids: tuple
    stage: str = "pretrain"

    @property
    def n_way(self):
        return len(self.class_ids)

    @property
    def k_shot(self):
        return len(self.support[0])

    def audit_record(self):
        return {"scene_id": self.query.scene_id, "stage": self.stage, "class_ids": list(self.class_ids),
                "support": [[list(s.source) for s in row] for row in self.support]}


def crop_instance(scene, box, margin=0.03):
    """Points inside ``box`` (grown by ``margin``), translated so the box center is the origin."""
    inside = box.contains(scene.points, margin)
    return (scene.points[inside] - box.center).astype(np.float32)


def resample(points, n, rng):
    """Exactly ``n`` rows: a random subset, or sampling with replacement if fewer."""
    if len(points) == 0:
        raise ValueError("cannot resample an empty point set")
    replace = len(points) < n
    return points[rng.choice(len(points), n, replace=replace)]


class EpisodeSampler:
    """Draws episodes from the annotated training scenes of a split.

    Novel-class pools hold only the designated k shots, so neither supports
    nor query supervision can leak any other novel instance.
    """

    def __init__(self, scenes, split, support_points=128, crop_margin=0.03, query_sampling="class_balanced"):
        if query_sampling not in ("class_balanced", "uniform"):
            raise ConfigurationError(f"unknown query_sampling {query_sampling!r}")
        self.scenes = list(scenes)
        self.split = split
        self.support_points = support_points
        self.crop_margin = crop_margin
        self.query_sampling = query_sampling
        shots = set(split.annotated_novel_instances)
        novel = set(split.novel_class_ids)
        self.pools = {c: [] for c in split.all_class_ids}
        for si, sc in enumerate(self.scenes):
            for b in sc.boxes:
                if b.class_id in novel and (sc.scene_id, b.instance_id) not in shots:
                    continue
                if b.class_id in self.pools:
                    self.pools[b.class_id].append((si, b.instance_id))
        self._crops = {}
        self._scenes_with = {c: sorted({si for si, _ in pool}) for c, pool in self.pools.items()}

    def classes_for(self, stage):
        if stage == "pretrain":
            cls = self.split.base_class_ids
        elif stage == "finetune":
            cls = self.split.base_class_ids + self.split.novel_class_ids
        else:
            raise ConfigurationError(f"unknown stage {stage!r}")
        return sorted(c for c in cls if self.pools.get(c))

    def crop(self, si, iid):
        key = (si, iid)
        if key not in self._crops:
            sc = self.scenes[si]
            self._crops[key] = crop_instance(sc, sc.box_by_instance(iid), self.crop_margin)
        return self._crops[key]

    def support_instance(self, si, iid, class_id, rng):
        pts = resample(self.crop(si, iid), self.support_points, rng)
        return SupportInstance(pts, class_id, (self.scenes[si].scene_id, iid))

    def _pick_supports(self, c, k_shot, query_idx, rng):
        pool = self.pools[c]
        others = [p for p in pool if p[0] != query_idx]
        cand = others if len(others) >= k_shot else pool
        if len(cand) >= k_shot:
            pick = [cand[i] for i in rng.choice(len(cand), k_shot, replace=False)]
        else:
            pick = list(cand) + [cand[i] for i in rng.choice(len(cand), k_shot - len(cand), replace=True)]
        return tuple(self.support_instance(si, iid, c, rng) for si, iid in pick)

    def sample_classes(self, stage, n_way, rng):
        avail = self.classes_for(stage)
        if n_way > len(avail):
            raise ConfigurationError(f"n_way={n_way} exceeds the {len(avail)} classes available for {stage}")
        if n_way < 1:
            raise ConfigurationError("n_way must be >= 1")
        return tuple(sorted(int(c) for c in rng.choice(avail, n_way, replace=False)))

    def sample(self, stage, n_way, k_shot, rng, classes=None):
        """One episode; ``classes`` fixes the N classes instead of drawing them."""
        if k_shot < 1:
            raise ConfigurationError("k_shot must be >= 1")
        if classes is None:
            classes = self.sample_classes(stage, n_way, rng)
        else:
            classes = tuple(sorted(int(c) for c in classes))
            avail = set(self.classes_for(stage))
            if len(classes) != n_way or len(set(classes)) != n_way or not set(classes) <= avail:
                raise ConfigurationError(f"classes {classes} are not {n_way} distinct {stage} classes")
        if self.query_sampling == "class_balanced":
            anchor = classes[int(rng.integers(n_way))]
            cand = self._scenes_with[anchor]
        else:
            cand = sorted(set().union(*(self._scenes_with[c] for c in classes)))
        qi = cand[int(rng.integers(len(cand)))]
        support = tuple(self._pick_supports(c, k_shot, qi, rng) for c in classes)
        return Episode(self.scenes[qi], support, classes, stage)

    def sample_batch(self, stage, n_way, k_shot, batch_size, rng):
        """``batch_size`` episodes over one shared draw of N classes.

        Slot n then names the same category in every task of the batch,
        which the cross-task semantic contrast relies on.
        """
        classes = self.sample_classes(stage, n_way, rng)
        return [self.sample(stage, n_way, k_shot, rng, classes) for _ in range(batch_size)]


def sample_episode(stage, split, scenes, n_way, k_shot, rng, **kw):
    return EpisodeSampler(scenes, split, **kw).sample(stage, n_way, k_shot, rng)


@dataclass(frozen=True)
class EpisodeBatch:
    """Stacked arrays for B episodes sharing (N, K).

    query_points: (B, n_input, 3); support_points: (B, N, K, S, 3);
    class_ids: (B, N); targets[b]: dict with 'lohi' (T, 2, 3), 'center',
    'size', 'slot' (episode-relative class index) and 'ignore_center'.
    """
    query_points: np.ndarray
    support_points: np.ndarray
    class_ids: np.ndarray
    targets: tuple
    episodes: tuple = field(default=(), repr=False)

    @property
    def B(self):
        return self.query_points.shape[0]

    @property
    def scl_feasible(self):
        # cross-task contrast pairs slot n of every task, so the class rows must agree
        aligned = bool((self.class_ids == self.class_ids[:1]).all())
        return self.B >= 2 and self.class_ids.shape[1] >= 2 and aligned

    def supports(self, b, n):
        return self.support_points[b, n]


def episode_targets(scene, class_ids):
    slot = {c: i for i, c in enumerate(class_ids)}
    keep = [b for b in scene.boxes if b.class_id in slot]
    other = [b for b in scene.boxes if b.class_id not in slot]
    return {
        "lohi": np.array([[b.lo, b.hi] for b in keep], dtype=np.float32).reshape(-1, 2, 3),
        "center": np.array([b.center for b in keep], dtype=np.float32).reshape(-1, 3),
        "size": np.array([b.size for b in keep], dtype=np.float32).reshape(-1, 3),
        "slot": np.array([slot[b.class_id] for b in keep], dtype=np.int64),
        "ignore_center": np.array([b.center for b in other], dtype=np.float32).reshape(-1, 3),
    }


def build_batch(episodes, n_input=1024, rng=None):
    """Stack episodes; query scenes are resampled to ``n_input`` points."""
    if len(episodes) < 1:
        raise ValueError("batch needs B >= 1")
    shapes = {(e.n_way, e.k_shot) for e in episodes}
    if len(shapes) != 1:
        raise ConfigurationError(f"episodes disagree on (N, K): {sorted(shapes)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    q = np.stack([resample(e.query.points, n_input, rng) if len(e.query.points) != n_input else e.query.points
                  for e in episodes])
    s = np.stack([np.stack([np.stack([x.points for x in row]) for row in e.support]) for e in episodes])
    cls = np.array([e.class_ids for e in episodes], dtype=np.int64)
    tg = tuple(episode_targets(e.query, e.class_ids) for e in episodes)
    return EpisodeBatch(q.astype(np.float32), s.astype(np.float32), cls, tg, tuple(episodes))


class EpisodeAuditLog:
    """JSON-lines record of every episode's composition."""

    def __init__(self, path):
        self.path = path
        self._f = open(path, "a")

    def write(self, episode, step=None):
        rec = episode.audit_record()
        if step is not None:
            rec["step"] = step
        self._f.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_audit(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
