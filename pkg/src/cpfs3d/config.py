"""Run configuration: typed fields, key=value files, validation, hashing."""

import dataclasses
import hashlib
from dataclasses import dataclass, fields

from .synthdata import ConfigurationError


@dataclass
class RunConfig:
    # synthetic benchmark
    n_base: int = 8
    n_novel: int = 4
    n_train_scenes: int = 200
    n_test_scenes: int = 50
    k: int = 5
    objects_min: int = 4
    objects_max: int = 8
    points_per_object_min: int = 120
    points_per_object_max: int = 200
    noise_sigma: float = 0.01
    room_size: float = 3.0
    unlabeled_novel: str = "absent"
    data_seed: int = 1

    # model
    d: int = 256
    proj_dim: int = 128
    sa1_widths: tuple = (64, 64, 128)
    n_input: int = 1024
    sa1_points: int = 512
    n_seeds: int = 256
    radius1: float = 0.2
    radius2: float = 0.4
    nsample: int = 32
    support_points: int = 128
    support_seeds: tuple = (64, 32)
    W: int = 128
    gamma: float = 0.999
    bank_renormalize: bool = True
    bank_init: str = "gaussian"
    bank_update_in_finetune: bool = False
    n_proposals: int = 64
    cluster_radius: float = 0.3
    max_offset: float = 1.0
    cls_head: str = "affine"
    share_projection: bool = False
    use_projection: bool = True
    normalize_sim: bool = True
    pcl_denominator: str = "feature"

    # episodes and optimisation
    batch_size: int = 16
    n_way: int = 4
    k_shot: int = 5
    query_sampling: str = "class_balanced"
    pretrain_epochs: int = 36
    finetune_epochs: int = 5
    steps_per_epoch: int = 0          # 0: ceil(n_train_scenes / batch_size)
    lr: float = 0.008
    finetune_lr: float = 0.008
    weight_decay: float = 0.01
    lr_decay_epoch: int = 24
    lr_decay: float = 0.1
    tau: float = 0.2
    lambda1: float = 0.1
    lambda2: float = 0.1
    w_obj: float = 0.5
    w_box: float = 1.0
    w_cls: float = 1.0
    pos_radius: float = 0.3
    neg_radius: float = 0.6
    smooth_l1_beta: float = 0.1
    nms_threshold: float = 0.25
    seed: int = 0
    seeds: tuple = (0, 1, 2)

    def validate(self):
        pos_int = ("n_base", "n_novel", "n_train_scenes", "n_test_scenes", "k", "objects_min", "d", "proj_dim",
                   "n_input", "sa1_points", "n_seeds", "nsample", "support_points", "W", "n_proposals",
                   "batch_size", "n_way", "k_shot", "points_per_object_min")
        for name in pos_int:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        for name in ("pretrain_epochs", "finetune_epochs", "steps_per_epoch", "lr_decay_epoch"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        pos_float = ("noise_sigma", "room_size", "radius1", "radius2", "cluster_radius", "max_offset", "lr",
                     "finetune_lr", "tau", "pos_radius", "neg_radius", "smooth_l1_beta")
        for name in pos_float:
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be > 0")
        for name in ("weight_decay", "lambda1", "lambda2", "w_obj", "w_box", "w_cls", "lr_decay"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if not 0 <= self.gamma <= 1:
            raise ConfigurationError("gamma must lie in [0, 1]")
        if not 0 < self.nms_threshold <= 1:
            raise ConfigurationError("nms_threshold must lie in (0, 1]")
        if self.n_base < 2:
            raise ConfigurationError("n_base must be >= 2")
        if self.objects_max < self.objects_min or self.points_per_object_max < self.points_per_object_min:
            raise ConfigurationError("range maximum below minimum")
        if self.n_seeds > self.n_input or self.n_proposals > self.n_seeds:
            raise ConfigurationError("need n_proposals <= n_seeds <= n_input")
        if self.neg_radius < self.pos_radius:
            raise ConfigurationError("neg_radius must be >= pos_radius")
        if self.n_way > self.n_base:
            raise ConfigurationError("n_way exceeds the number of base classes")
        if len(self.sa1_widths) < 1 or len(self.support_seeds) != 2 or not self.seeds:
            raise ConfigurationError("malformed tuple field")
        choices = {"cls_head": ("affine", "metric"), "bank_init": ("gaussian", "abs_gaussian"), "pcl_denominator": ("feature", "proto"),
                   "unlabeled_novel": ("absent", "background"),
                   "query_sampling": ("class_balanced", "uniform")}
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigurationError(f"{name} must be one of {allowed}")
        return self

    def replace(self, **kw):
        return dataclasses.replace(self, **kw).validate()

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    def hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def training_hash(self):
        """Hash of everything that can influence trained weights (excludes the seed list)."""
        text = "\n".join(l for l in self.to_text().splitlines() if not l.startswith("seeds="))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(name, raw):
    default = getattr(RunConfig(), name)
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            elem = type(default[0])
            return tuple(elem(x) for x in raw.replace(" ", "").split(",") if x)
        return raw
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse {raw!r}") from None


def parse_overrides(items):
    """['key=value', ...] -> dict; unknown keys are rejected."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigurationError(f"expected key=value, got {item!r}")
        key, val = item.split("=", 1)
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigurationError(f"unknown config key {key!r}")
        out[key] = _convert(key, val)
    return out


def parse_config_text(text, base=None):
    items = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            items.append(line)
    cfg = base or RunConfig()
    return dataclasses.replace(cfg, **parse_overrides(items)).validate()


def load_config(path=None, overrides=(), seed=None):
    cfg = RunConfig()
    if path:
        with open(path) as f:
            cfg = parse_config_text(f.read(), cfg)
    cfg = dataclasses.replace(cfg, **parse_overrides(overrides))
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    return cfg.validate()
