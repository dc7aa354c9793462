"""Procedural indoor scenes built from explicit geometric primitives.

Every object is a composition of planar patches (quads and triangles) laid out
inside a unit cube, then scaled into its ground-truth box.  Faces, edges and
corners of these patches are the geometric components the prototype bank is
expected to discover.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

BACKGROUND = -1
NOISE_SIGMA = 0.01


class ConfigurationError(ValueError):
    pass


class SceneFormatError(ValueError):
    """Malformed scene or split file; message names the offending field."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass
class Box3D:
    center: np.ndarray
    size: np.ndarray
    class_id: int
    instance_id: int
    heading: float = 0.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float32).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float32).reshape(3)
        self.class_id = int(self.class_id)
        self.instance_id = int(self.instance_id)
        if not np.all(self.size > 0):
            raise SceneFormatError(f"size: all components must be > 0, got {self.size.tolist()}")
        if self.class_id < 0 or self.instance_id < 0:
            raise SceneFormatError("class_id/instance_id must be >= 0")

    @property
    def lo(self):
        return self.center - self.size / 2

    @property
    def hi(self):
        return self.center + self.size / 2

    def contains(self, pts, margin=0.0):
        pts = np.asarray(pts)
        return np.all((pts >= self.lo - margin) & (pts <= self.hi + margin), axis=-1)

    def __eq__(self, other):
        if not isinstance(other, Box3D):
            return NotImplemented
        return (np.array_equal(self.center, other.center) and np.array_equal(self.size, other.size)
                and self.class_id == other.class_id and self.instance_id == other.instance_id
                and self.heading == other.heading)


@dataclass
class PointCloudScene:
    points: np.ndarray          # (N, 3) float32
    boxes: list
    point_instance: np.ndarray  # (N,) int64, BACKGROUND for floor/walls
    scene_id: str

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float32).reshape(-1, 3)
        self.point_instance = np.asarray(self.point_instance, dtype=np.int64).reshape(-1)
        if len(self.points) != len(self.point_instance):
            raise SceneFormatError("point_instance: length does not match points")
        keys = [(b.class_id, b.instance_id) for b in self.boxes]
        if len(set(keys)) != len(keys):
            raise SceneFormatError("boxes: duplicate (class_id, instance_id)")
        known = {b.instance_id for b in self.boxes}
        used = set(np.unique(self.point_instance).tolist()) - {BACKGROUND}
        if not used <= known:
            raise SceneFormatError(f"point_instance: unknown instance ids {sorted(used - known)}")

    def box_by_instance(self, instance_id):
        for b in self.boxes:
            if b.instance_id == instance_id:
                return b
        raise KeyError(instance_id)

    def __eq__(self, other):
        if not isinstance(other, PointCloudScene):
            return NotImplemented
        return (self.scene_id == other.scene_id and np.array_equal(self.points, other.points)
                and np.array_equal(self.point_instance, other.point_instance)
                and self.boxes == other.boxes)


@dataclass
class CategorySpec:
    """A category: deterministic shape program plus sampling ranges.

    ``shape_program(rng)`` returns a list of patches in unit-cube coordinates,
    each ``("quad", o, u, v)`` or ``("tri", a, b, c)``, whose union spans the
    full cube on every axis so the ground-truth box is tight.
    """
    class_id: int
    name: str
    shape_program: object
    size_range: tuple           # ((xmin, xmax), (ymin, ymax), (zmin, zmax))
    points_per_object: tuple = (120, 200)

    def validate(self):
        rng_ = np.asarray(self.size_range, dtype=float)
        if rng_.shape != (3, 2) or np.any(rng_[:, 0] <= 0) or np.any(rng_[:, 1] < rng_[:, 0]):
            raise ConfigurationError(f"category {self.name}: degenerate size_range {self.size_range}")
        lo, hi = self.points_per_object
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"category {self.name}: bad points_per_object {self.points_per_object}")


@dataclass
class DatasetSplit:
    base_class_ids: list
    novel_class_ids: list
    k_shots: int
    annotated_novel_instances: list = field(default_factory=list)  # [(scene_id, instance_id)]

    def __post_init__(self):
        self.base_class_ids = sorted(int(c) for c in self.base_class_ids)
        self.novel_class_ids = sorted(int(c) for c in self.novel_class_ids)
        self.annotated_novel_instances = [(str(s), int(i)) for s, i in self.annotated_novel_instances]
        if set(self.base_class_ids) & set(self.novel_class_ids):
            raise ConfigurationError("base and novel classes overlap")

    @property
    def all_class_ids(self):
        return sorted(self.base_class_ids + self.novel_class_ids)


# ---------------------------------------------------------------------------
# Shape programs
# ---------------------------------------------------------------------------


def _quad(o, u, v):
    return ("quad", np.asarray(o, float), np.asarray(u, float), np.asarray(v, float))


def _cuboid(lo, hi, skip=()):
    """Six faces of an axis-aligned cuboid; ``skip`` names faces to omit."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    dx, dy, dz = hi - lo
    ex, ey, ez = np.array([dx, 0, 0]), np.array([0, dy, 0]), np.array([0, 0, dz])
    faces = {
        "bottom": _quad(lo, ex, ey),
        "top": _quad(lo + ez, ex, ey),
        "front": _quad(lo, ex, ez),
        "back": _quad(lo + ey, ex, ez),
        "left": _quad(lo, ey, ez),
        "right": _quad(lo + ex, ey, ez),
    }
    return [f for name, f in faces.items() if name not in skip]


def _prism(cx, cy, r, z0, z1, facets=8, caps=("top",)):
    """Vertical prism approximating a cylinder by planar facets."""
    ang = np.arange(facets) * 2 * np.pi / facets
    ring = np.stack([cx + r * np.cos(ang), cy + r * np.sin(ang)], axis=1)
    parts = []
    for i in range(facets):
        a, b = ring[i], ring[(i + 1) % facets]
        parts.append(_quad([a[0], a[1], z0], [b[0] - a[0], b[1] - a[1], 0], [0, 0, z1 - z0]))
    for cap in caps:
        z = z1 if cap == "top" else z0
        c = np.array([cx, cy, z])
        for i in range(facets):
            a, b = ring[i], ring[(i + 1) % facets]
            parts.append(("tri", c, np.array([a[0], a[1], z]), np.array([b[0], b[1], z])))
    return parts


def _legs(z_top, t, inset=0.0, count=4):
    lo, hi = inset, 1 - inset - t
    corners = [(lo, lo), (hi, lo), (lo, hi), (hi, hi)][:count]
    out = []
    for x, y in corners:
        out += _cuboid([x, y, 0], [x + t, y + t, z_top], skip=("bottom", "top"))
    return out


def _crate(rng):
    return _cuboid([0, 0, 0], [1, 1, 1], skip=("bottom",))


def _bin(rng):
    wall = rng.uniform(0.04, 0.08)
    parts = _cuboid([0, 0, 0], [1, 1, 1], skip=("bottom", "top"))
    parts += _cuboid([wall, wall, 0.05], [1 - wall, 1 - wall, 1], skip=("bottom", "top"))
    parts.append(_quad([wall, wall, 0.05], [1 - 2 * wall, 0, 0], [0, 1 - 2 * wall, 0]))
    return parts


def _bracket(rng):
    t = rng.uniform(0.12, 0.2)
    return _cuboid([0, 0, 0], [1, 1, t], skip=("bottom",)) + _cuboid([0, 1 - t, t], [1, 1, 1], skip=("bottom",))


def _barrel(rng):
    return _prism(0.5, 0.5, 0.5, 0.0, 1.0, facets=8)


def _table(rng):
    slab = rng.uniform(0.06, 0.1)
    return _cuboid([0, 0, 1 - slab], [1, 1, 1]) + _legs(1 - slab, 0.08)


def _chair(rng):
    seat = rng.uniform(0.45, 0.55)
    parts = _cuboid([0, 0, seat - 0.06], [1, 1, seat]) + _legs(seat - 0.06, 0.1)
    parts += _cuboid([0, 0.88, seat], [1, 1, 1], skip=("bottom",))
    return parts


def _shelf(rng):
    n = int(rng.integers(3, 5))
    parts = _cuboid([0, 0, 0], [0.06, 1, 1], skip=("bottom",)) + _cuboid([0.94, 0, 0], [1, 1, 1], skip=("bottom",))
    for z in np.linspace(0.0, 0.97, n):
        parts.append(_quad([0.06, 0, z + 0.03], [0.88, 0, 0], [0, 1, 0]))
    return parts


def _bed(rng):
    h = rng.uniform(0.35, 0.5)
    return _cuboid([0, 0, 0], [1, 1, h], skip=("bottom",)) + _cuboid([0, 0.92, h], [1, 1, 1], skip=("bottom",))


def _sofa(rng):
    seat = rng.uniform(0.4, 0.5)
    parts = _cuboid([0.15, 0, 0], [0.85, 0.75, seat], skip=("bottom",))
    parts += _cuboid([0, 0.75, 0], [1, 1, 1], skip=("bottom",))
    parts += _cuboid([0, 0, 0], [0.15, 0.75, 0.7], skip=("bottom",))
    parts += _cuboid([0.85, 0, 0], [1, 0.75, 0.7], skip=("bottom",))
    return parts


def _lamp(rng):
    shade = rng.uniform(0.25, 0.35)
    parts = _prism(0.5, 0.5, 0.5, 1 - shade, 1.0, facets=8, caps=())
    parts += _cuboid([0.45, 0.45, 0.04], [0.55, 0.55, 1 - shade], skip=("bottom", "top"))
    parts += _prism(0.5, 0.5, 0.3, 0.0, 0.04, facets=8)
    return parts


def _desk(rng):
    return (_cuboid([0, 0, 0.92], [1, 1, 1]) + _cuboid([0, 0, 0], [0.08, 1, 0.92], skip=("bottom", "top"))
            + _cuboid([0.92, 0, 0], [1, 1, 0.92], skip=("bottom", "top")))


def _cabinet(rng):
    plinth = rng.uniform(0.06, 0.1)
    parts = _cuboid([0, 0, plinth], [1, 1, 1], skip=("bottom",))
    parts += _cuboid([0.05, 0.05, 0], [0.95, 0.95, plinth], skip=("bottom", "top"))
    return parts


def _stool(rng):
    return _prism(0.5, 0.5, 0.5, 0.9, 1.0, facets=8, caps=("top", "bottom")) + _legs(0.9, 0.12, inset=0.1, count=4)


def _monitor(rng):
    parts = _cuboid([0, 0.4, 0.35], [1, 0.6, 1])
    parts += _cuboid([0.45, 0.45, 0.05], [0.55, 0.55, 0.35], skip=("bottom", "top"))
    parts += _cuboid([0.3, 0, 0], [0.7, 1, 0.05], skip=("bottom",))
    return parts


_LIBRARY = [
    ("crate", _crate, ((0.2, 0.35), (0.2, 0.35), (0.2, 0.35))),
    ("bin", _bin, ((0.15, 0.25), (0.15, 0.25), (0.2, 0.3))),
    ("bracket", _bracket, ((0.25, 0.45), (0.2, 0.3), (0.25, 0.4))),
    ("barrel", _barrel, ((0.25, 0.35), (0.25, 0.35), (0.4, 0.55))),
    ("table", _table, ((0.45, 0.7), (0.35, 0.5), (0.35, 0.4))),
    ("chair", _chair, ((0.225, 0.275), (0.225, 0.275), (0.425, 0.5))),
    ("shelf", _shelf, ((0.4, 0.6), (0.15, 0.2), (0.7, 0.95))),
    ("bed", _bed, ((0.5, 0.7), (0.9, 1.05), (0.4, 0.5))),
    ("sofa", _sofa, ((0.8, 1), (0.4, 0.475), (0.375, 0.45))),
    ("lamp", _lamp, ((0.175, 0.25), (0.175, 0.25), (0.65, 0.85))),
    ("desk", _desk, ((0.55, 0.75), (0.3, 0.375), (0.35, 0.39))),
    ("cabinet", _cabinet, ((0.25, 0.4), (0.2, 0.3), (0.6, 0.9))),
    ("stool", _stool, ((0.175, 0.225), (0.175, 0.225), (0.225, 0.325))),
    ("monitor", _monitor, ((0.25, 0.35), (0.1, 0.125), (0.2, 0.275))),
]


def default_categories(n=12, points_per_object=(120, 200)):
    """The first ``n`` categories of the built-in library, class ids 0..n-1."""
    if n > len(_LIBRARY):
        raise ConfigurationError(f"only {len(_LIBRARY)} built-in categories, asked for {n}")
    return [CategorySpec(i, name, prog, sr, tuple(points_per_object))
            for i, (name, prog, sr) in enumerate(_LIBRARY[:n])]


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def _patch_area(patch, scale):
    kind, a, b, c = patch
    if kind == "quad":
        return float(np.linalg.norm(np.cross(b * scale, c * scale)))
    return 0.5 * float(np.linalg.norm(np.cross((b - a) * scale, (c - a) * scale)))


def _sample_patches(patches, scale, n, rng):
    areas = np.array([_patch_area(p, scale) for p in patches])
    counts = rng.multinomial(n, areas / areas.sum())
    out = []
    for patch, k in zip(patches, counts):
        if k == 0:
            continue
        kind, a, b, c = patch
        s = rng.random((k, 2))
        if kind == "quad":
            pts = a + s[:, :1] * b + s[:, 1:] * c
        else:
            r1 = np.sqrt(s[:, :1])
            pts = (1 - r1) * a + r1 * (1 - s[:, 1:]) * b + r1 * s[:, 1:] * c
        out.append(pts)
    return np.concatenate(out, axis=0)


def sample_object(spec, rng):
    """Returns (size, unit-cube points) for one instance of ``spec``."""
    sr = np.asarray(spec.size_range, dtype=float)
    size = rng.uniform(sr[:, 0], sr[:, 1])
    n = int(rng.integers(spec.points_per_object[0], spec.points_per_object[1] + 1))
    patches = spec.shape_program(rng)
    return size, np.clip(_sample_patches(patches, size, n, rng), 0.0, 1.0)


@dataclass
class SceneConfig:
    room_size: float = 3.0
    wall_height: float = 1.25
    wall_margin: float = 0.15
    object_gap: float = 0.1
    background_fraction: tuple = (0.3, 0.5)
    min_points: int = 1024
    noise_sigma: float = NOISE_SIGMA


def _place_footprints(sizes, cfg, rng, max_tries=500, restarts=20):
    """Rejection-sample non-overlapping footprints, largest first; returns corners in input order."""
    for _ in range(restarts):
        corners = _try_place(sizes, cfg, rng, max_tries)
        if corners is not None:
            return corners
    raise ConfigurationError("could not place objects without overlap; enlarge room_size")


def _try_place(sizes, cfg, rng, max_tries):
    placed = {}
    lo_lim = cfg.wall_margin
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i][0] * sizes[i][1], i))
    for i in order:
        sx, sy = sizes[i]
        hi_x = cfg.room_size - cfg.wall_margin - sx
        hi_y = cfg.room_size - cfg.wall_margin - sy
        if hi_x < lo_lim or hi_y < lo_lim:
            raise ConfigurationError("object larger than the room")
        for _ in range(max_tries):
            x, y = rng.uniform(lo_lim, hi_x), rng.uniform(lo_lim, hi_y)
            g = cfg.object_gap
            if all(x + sx + g <= px or px + psx + g <= x or y + sy + g <= py or py + psy + g <= y
                   for px, py, psx, psy in placed.values()):
                placed[i] = (x, y, sx, sy)
                break
        else:
            return None
    return [placed[i][:2] for i in range(len(sizes))]


def _background(n, boxes, cfg, rng):
    """Floor plus two walls (x=0, y=0); floor under objects is occluded."""
    L, H = cfg.room_size, cfg.wall_height
    areas = np.array([L * L, L * H, L * H])
    out = []
    need = n
    while need > 0:
        counts = rng.multinomial(need, areas / areas.sum())
        floor = np.column_stack([rng.uniform(0, L, counts[0]), rng.uniform(0, L, counts[0]), np.zeros(counts[0])])
        keep = np.ones(len(floor), dtype=bool)
        for b in boxes:
            keep &= ~np.all((floor[:, :2] >= b.lo[:2] - 0.02) & (floor[:, :2] <= b.hi[:2] + 0.02), axis=1)
        wx = np.column_stack([np.zeros(counts[1]), rng.uniform(0, L, counts[1]), rng.uniform(0, H, counts[1])])
        wy = np.column_stack([rng.uniform(0, L, counts[2]), np.zeros(counts[2]), rng.uniform(0, H, counts[2])])
        chunk = np.concatenate([floor[keep], wx, wy])[:need]
        out.append(chunk)
        need -= len(chunk)
    return np.concatenate(out)


def compose_scene(specs, class_sequence, rng, scene_id, cfg=None):
    """Build a scene holding one object per entry of ``class_sequence``."""
    cfg = cfg or SceneConfig()
    by_id = {s.class_id: s for s in specs}
    objects = [(cid,) + sample_object(by_id[cid], rng) for cid in class_sequence]
    corners = _place_footprints([(sz[0], sz[1]) for _, sz, _ in objects], cfg, rng)
    boxes, pts, inst = [], [], []
    for iid, ((cid, size, unit), (x, y)) in enumerate(zip(objects, corners)):
        lo = np.array([x, y, 0.0])
        world = lo + unit * size
        boxes.append(Box3D(lo + size / 2, size, cid, iid))
        pts.append(world)
        inst.append(np.full(len(world), iid))
    n_obj = sum(len(p) for p in pts)
    frac = rng.uniform(*cfg.background_fraction)
    n_bg = int(np.ceil(n_obj * frac / (1 - frac)))
    n_bg = max(n_bg, cfg.min_points - n_obj)
    pts.append(_background(n_bg, boxes, cfg, rng))
    inst.append(np.full(n_bg, BACKGROUND))
    points = np.concatenate(pts)
    points = points + rng.normal(0.0, cfg.noise_sigma, size=points.shape)
    return PointCloudScene(points.astype(np.float32), boxes, np.concatenate(inst), scene_id)


def generate_scene(spec_set, objects_per_scene, rng_seed, scene_id=None, cfg=None):
    """Random scene whose object count is drawn from ``objects_per_scene``.

    Args:
        spec_set: non-empty list of CategorySpec; classes are drawn uniformly.
        objects_per_scene: int or inclusive (min, max) range.
        rng_seed: int; identical seeds give bit-identical scenes.
    """
    if not spec_set:
        raise ConfigurationError("spec_set is empty")
    for s in spec_set:
        s.validate()
    lo, hi = (objects_per_scene, objects_per_scene) if np.isscalar(objects_per_scene) else objects_per_scene
    if lo < 1 or hi < lo:
        raise ConfigurationError(f"bad objects_per_scene {objects_per_scene}")
    rng = np.random.default_rng(rng_seed)
    n = int(rng.integers(lo, hi + 1))
    classes = [spec_set[i].class_id for i in rng.integers(0, len(spec_set), n)]
    return compose_scene(spec_set, classes, rng, scene_id or f"scene_{rng_seed}", cfg)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def _g9(x):
    # 9 significant digits round-trips float32 exactly
    return float(f"{float(x):.9g}")


def scene_to_text(scene):
    lines = ["{", f'"scene_id": {json.dumps(scene.scene_id)},', '"boxes": [']
    for i, b in enumerate(scene.boxes):
        rec = {"center": [_g9(v) for v in b.center], "size": [_g9(v) for v in b.size],
               "heading": _g9(b.heading), "class_id": b.class_id, "instance_id": b.instance_id}
        lines.append(json.dumps(rec) + ("," if i < len(scene.boxes) - 1 else ""))
    lines.append("],")
    lines.append('"point_instance": ' + json.dumps(scene.point_instance.tolist()) + ",")
    lines.append('"points": [')
    n = len(scene.points)
    for i, p in enumerate(scene.points):
        lines.append(json.dumps([_g9(v) for v in p]) + ("," if i < n - 1 else ""))
    lines.append("]")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _field(doc, key, where="scene"):
    if key not in doc:
        raise SceneFormatError(f"{where}: missing field '{key}'")
    return doc[key]


def scene_from_text(text):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SceneFormatError(f"scene: unparseable document ({e.msg} at line {e.lineno})") from None
    if not isinstance(doc, dict):
        raise SceneFormatError("scene: top level must be an object")
    boxes = []
    for i, rec in enumerate(_field(doc, "boxes")):
        try:
            center = np.asarray(_field(rec, "center", f"boxes[{i}]"), dtype=np.float32)
            size = np.asarray(_field(rec, "size", f"boxes[{i}]"), dtype=np.float32)
            if center.shape != (3,) or size.shape != (3,):
                raise SceneFormatError(f"boxes[{i}].center/size: expected 3 components")
            if not np.all(size > 0):
                raise SceneFormatError(f"boxes[{i}].size: components must be > 0")
            boxes.append(Box3D(center, size, _field(rec, "class_id", f"boxes[{i}]"),
                               _field(rec, "instance_id", f"boxes[{i}]"), float(rec.get("heading", 0.0))))
        except (TypeError, ValueError) as e:
            if isinstance(e, SceneFormatError):
                raise
            raise SceneFormatError(f"boxes[{i}]: {e}") from None
    try:
        points = np.asarray(_field(doc, "points"), dtype=np.float32)
    except ValueError:
        raise SceneFormatError("points: ragged or non-numeric entries") from None
    if points.ndim != 2 or points.shape[1] != 3:
        raise SceneFormatError("points: expected a list of [x, y, z]")
    try:
        inst = np.asarray(_field(doc, "point_instance"), dtype=np.int64)
    except ValueError:
        raise SceneFormatError("point_instance: non-integer entries") from None
    scene_id = _field(doc, "scene_id")
    if not isinstance(scene_id, str):
        raise SceneFormatError("scene_id: must be a string")
    return PointCloudScene(points, boxes, inst, scene_id)


def save_scene(scene, path):
    with open(path, "w") as f:
        f.write(scene_to_text(scene))


def load_scene(path):
    with open(path) as f:
        return scene_from_text(f.read())


def split_to_text(split):
    doc = {"base": split.base_class_ids, "novel": split.novel_class_ids, "k": split.k_shots,
           "annotated": [[s, i] for s, i in split.annotated_novel_instances]}
    return json.dumps(doc, indent=1) + "\n"


def save_split(split, path):
    with open(path, "w") as f:
        f.write(split_to_text(split))


def load_split(path):
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SceneFormatError(f"split: unparseable document ({e.msg})") from None
    return DatasetSplit(_field(doc, "base", "split"), _field(doc, "novel", "split"),
                        int(_field(doc, "k", "split")), _field(doc, "annotated", "split"))


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------


@dataclass
class Benchmark:
    split: DatasetSplit
    train: list
    test: list
    categories: list


def _drop_instances(scene, drop):
    """Turn the listed instances into unlabeled background points."""
    inst = scene.point_instance.copy()
    inst[np.isin(inst, list(drop))] = BACKGROUND
    boxes = [b for b in scene.boxes if b.instance_id not in drop]
    return PointCloudScene(scene.points, boxes, inst, scene.scene_id)


def generate_benchmark(n_base, n_novel, n_scenes_train, n_scenes_test, k, rng_seed,
                       objects_per_scene=(4, 8), points_per_object=(120, 200),
                       unlabeled_novel="absent", cfg=None):
    """Synthetic few-shot benchmark with a disjoint base/novel class split.

    Training scenes keep every base annotation plus exactly ``k`` annotated
    instances per novel class.  With ``unlabeled_novel="absent"`` no other
    novel object is placed in training scenes; with ``"background"`` novel
    objects occur freely and all but the designated shots are left unlabeled.
    Test scenes are fully annotated.
    """
    if n_base < 2 or n_novel < 1 or k < 1:
        raise ConfigurationError("need n_base >= 2, n_novel >= 1, k >= 1")
    if unlabeled_novel not in ("absent", "background"):
        raise ConfigurationError(f"unlabeled_novel must be 'absent' or 'background', got {unlabeled_novel!r}")
    cats = default_categories(n_base + n_novel, points_per_object)
    for c in cats:
        c.validate()
    root = np.random.SeedSequence(rng_seed)
    split_ss, train_ss, test_ss = root.spawn(3)
    srng = np.random.default_rng(split_ss)
    perm = srng.permutation(n_base + n_novel)
    novel = sorted(int(c) for c in perm[:n_novel])
    base = sorted(int(c) for c in perm[n_novel:])
    lo, hi = objects_per_scene
    all_ids = base + novel

    train_rngs = [np.random.default_rng(s) for s in train_ss.spawn(n_scenes_train)]
    class_lists = []
    for r in train_rngs:
        n = int(r.integers(lo, hi + 1))
        pool = base if unlabeled_novel == "absent" else all_ids
        class_lists.append([pool[i] for i in r.integers(0, len(pool), n)])
    if unlabeled_novel == "absent":
        # Schedule the k shots of every novel class into distinct scene slots.
        slots = [(si, oi) for si, cl in enumerate(class_lists) for oi in range(len(cl))]
        if len(slots) < k * n_novel:
            raise ConfigurationError("fewer object slots than novel shots to annotate")
        chosen = srng.choice(len(slots), size=k * n_novel, replace=False)
        for j, slot_idx in enumerate(sorted(chosen.tolist())):
            si, oi = slots[slot_idx]
            class_lists[si][oi] = novel[j % n_novel]

    train = []
    for i, (r, cl) in enumerate(zip(train_rngs, class_lists)):
        train.append(compose_scene(cats, cl, r, f"train_{i:04d}", cfg))

    found = {c: [(sc.scene_id, b.instance_id) for sc in train for b in sc.boxes if b.class_id == c]
             for c in novel}
    annotated = []
    for c in novel:
        if len(found[c]) < k:
            raise ConfigurationError(f"novel class {c}: only {len(found[c])} instances, need k={k}")
        if unlabeled_novel == "absent":
            annotated += found[c]
        else:
            pick = srng.choice(len(found[c]), size=k, replace=False)
            annotated += [found[c][j] for j in sorted(pick.tolist())]
    keep = set(annotated)
    train = [_drop_instances(sc, {b.instance_id for b in sc.boxes
                                  if b.class_id in novel and (sc.scene_id, b.instance_id) not in keep})
             for sc in train]

    test = []
    for i, s in enumerate(test_ss.spawn(n_scenes_test)):
        r = np.random.default_rng(s)
        n = int(r.integers(lo, hi + 1))
        cl = [all_ids[j] for j in r.integers(0, len(all_ids), n)]
        test.append(compose_scene(cats, cl, r, f"test_{i:04d}", cfg))

    split = DatasetSplit(base, novel, k, sorted(annotated))
    return Benchmark(split, train, test, cats)


def write_benchmark(bench, out_dir):
    os.makedirs(os.path.join(out_dir, "train"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "test"), exist_ok=True)
    for sc in bench.train:
        save_scene(sc, os.path.join(out_dir, "train", sc.scene_id + ".scene.json"))
    for sc in bench.test:
        save_scene(sc, os.path.join(out_dir, "test", sc.scene_id + ".scene.json"))
    save_split(bench.split, os.path.join(out_dir, "split.json"))


def read_benchmark(data_dir):
    if not os.path.isfile(os.path.join(data_dir, "split.json")):
        raise FileNotFoundError(f"no split.json under {data_dir}")
    split = load_split(os.path.join(data_dir, "split.json"))
    out = {}
    for part in ("train", "test"):
        d = os.path.join(data_dir, part)
        names = sorted(n for n in os.listdir(d) if n.endswith(".scene.json"))
        out[part] = [load_scene(os.path.join(d, n)) for n in names]
    n_cls = len(split.base_class_ids) + len(split.novel_class_ids)
    return Benchmark(split, out["train"], out["test"], default_categories(n_cls))
