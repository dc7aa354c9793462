"""Two-stage episodic training, inference/evaluation and ablation sweeps."""

import json
import logging
import math
import os

import numpy as np
import torch

from . import checkpoint as ckpt
from .backbone import mark_foreground
from .contrast import build_primitive_means, build_semantic_grid, primitive_loss, semantic_loss
from .detector import CPVoteNet, LossWeights, NonFiniteLoss, detection_loss, export_detections, total_loss
from .episodes import Episode, EpisodeAuditLog, EpisodeSampler, SupportInstance, build_batch, crop_instance, resample
from .eval3d import evaluate, evaluate_run, save_detections
from .synthdata import SceneConfig, generate_benchmark, read_benchmark, write_benchmark

log = logging.getLogger(__name__)

METRIC_KEYS = ("step", "epoch", "l_vote", "l_objectness", "l_box", "l_cls", "l_det", "l_semcl", "l_primcl",
               "l_total", "scl_skipped", "pcl_W'")


def set_determinism():
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def build_model(cfg, n_classes):
    return CPVoteNet(
        n_classes, d=cfg.d, widths1=tuple(cfg.sa1_widths), n_seeds=cfg.n_seeds, sa1_points=cfg.sa1_points,
        radii=(cfg.radius1, cfg.radius2), nsample=(cfg.nsample, cfg.nsample), support_seeds=tuple(cfg.support_seeds),
        W=cfg.W, gamma=cfg.gamma, bank_renormalize=cfg.bank_renormalize, bank_init=cfg.bank_init, n_proposals=cfg.n_proposals,
        cluster_radius=cfg.cluster_radius, max_offset=cfg.max_offset, proj_dim=cfg.proj_dim,
        share_projection=cfg.share_projection, use_projection=cfg.use_projection, cls_head=cfg.cls_head,
        seed=cfg.seed)


def loss_weights(cfg):
    return LossWeights(cfg.w_obj, cfg.w_box, cfg.w_cls, cfg.pos_radius, cfg.neg_radius, cfg.smooth_l1_beta)


def make_benchmark(cfg):
    return generate_benchmark(
        cfg.n_base, cfg.n_novel, cfg.n_train_scenes, cfg.n_test_scenes, cfg.k, cfg.data_seed,
        objects_per_scene=(cfg.objects_min, cfg.objects_max),
        points_per_object=(cfg.points_per_object_min, cfg.points_per_object_max),
        unlabeled_novel=cfg.unlabeled_novel,
        cfg=SceneConfig(room_size=cfg.room_size, noise_sigma=cfg.noise_sigma))


def ensure_benchmark(cfg, data_dir):
    if not os.path.isfile(os.path.join(data_dir, "split.json")):
        write_benchmark(make_benchmark(cfg), data_dir)
    return read_benchmark(data_dir)


def train_mean_size(bench):
    sizes = [b.size for sc in bench.train for b in sc.boxes]
    return np.mean(np.array(sizes, dtype=np.float64), axis=0).astype(np.float32)


# ---------------------------------------------------------------------------
# One optimisation step
# ---------------------------------------------------------------------------


def compute_losses(model, batch, cfg, update_bank=False):
    """Forward one EpisodeBatch and return (LossBreakdown, assignment, info)."""
    q = torch.from_numpy(batch.query_points)
    s = torch.from_numpy(batch.support_points)
    cls = torch.from_numpy(batch.class_ids)
    seeds = model.seeds(q)
    B, M, d = seeds.features.shape
    fg = torch.stack([mark_foreground(seeds.positions[b], batch.targets[b]["lohi"]) for b in range(B)])
    assignment = model.bank.assign(seeds.features.reshape(B * M, d), fg.reshape(-1))
    seeds.foreground_mask = fg
    seeds.primitive_label = assignment.labels.reshape(B, M)
    inst = model.support_features(s)
    protos = inst.mean(dim=2)
    votes, props, result = model.detect(seeds, cls, protos)
    losses = detection_loss(seeds.positions, votes.positions, props.centers, result, batch.targets,
                            model.mean_size, loss_weights(cfg))
    proj_s, proj_p = model.projections()
    scl_skipped = not batch.scl_feasible
    with torch.set_grad_enabled(cfg.lambda1 > 0 and torch.is_grad_enabled()):
        if scl_skipped:
            l_semcl = torch.zeros(())
        else:
            l_semcl = semantic_loss(build_semantic_grid(inst, proj_s, cfg.normalize_sim), cfg.tau)
    with torch.set_grad_enabled(cfg.lambda2 > 0 and torch.is_grad_enabled()):
        ms = build_primitive_means(assignment, model.bank.g, proj_p, cfg.normalize_sim)
        l_primcl = primitive_loss(ms, cfg.tau, cfg.pcl_denominator)
    losses.l_semcl = l_semcl
    losses.l_primcl = l_primcl
    losses.lambda1, losses.lambda2 = cfg.lambda1, cfg.lambda2
    losses.l_total = total_loss(losses.l_det, l_semcl, l_primcl, cfg.lambda1, cfg.lambda2)
    info = {"scl_skipped": scl_skipped, "pcl_W'": len(ms.nonempty_ids)}
    return losses, assignment, info


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


class Trainer:
    """Owns model, optimizer, rng and bank; the single writer of all of them."""

    def __init__(self, cfg, bench, out_dir):
        self.cfg = cfg
        self.bench = bench
        self.out_dir = out_dir
        os.makedirs(os.path.join(out_dir, "ckpt"), exist_ok=True)
        self.n_classes = len(bench.split.all_class_ids)
        self.model = build_model(cfg, self.n_classes)
        self.model.mean_size.copy_(torch.from_numpy(train_mean_size(bench)))
        self.optimizer = self._make_optimizer(cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self.sampler = EpisodeSampler(bench.train, bench.split, cfg.support_points,
                                      query_sampling=cfg.query_sampling)
        self.stage = "pretrain"
        self.epoch = 0
        self.global_step = 0

    def _make_optimizer(self, lr):
        params = [p for p in self.model.parameters() if p.requires_grad]
        return torch.optim.AdamW(params, lr=lr, weight_decay=self.cfg.weight_decay)

    @property
    def steps_per_epoch(self):
        return self.cfg.steps_per_epoch or math.ceil(self.cfg.n_train_scenes / self.cfg.batch_size)

    def lr_for(self, stage, epoch):
        if stage == "finetune":
            return self.cfg.finetune_lr
        decay = self.cfg.lr_decay if self.cfg.lr_decay_epoch and epoch >= self.cfg.lr_decay_epoch else 1.0
        return self.cfg.lr * decay

    def step(self, batch, stage):
        self.model.train()
        losses, assignment, info = compute_losses(self.model, batch, self.cfg)
        self.optimizer.zero_grad(set_to_none=True)
        losses.l_total.backward()
        self.optimizer.step()
        if stage == "pretrain" or self.cfg.bank_update_in_finetune:
            self.model.bank.momentum_update(assignment)
        return losses, info

    def sample_batch(self, stage):
        eps = self.sampler.sample_batch(stage, self.cfg.n_way, self.cfg.k_shot, self.cfg.batch_size, self.rng)
        return build_batch(eps, self.cfg.n_input, self.rng)

    def run_stage(self, stage, epochs, resume=True):
        """Train ``epochs`` epochs of ``stage``, checkpointing after each."""
        last = self.ckpt_path(stage, "last")
        if resume and os.path.isfile(last):
            self.load(last)
            if self.stage != stage:
                raise ckpt.CheckpointError(f"{last} belongs to stage {self.stage!r}")
        elif stage == "finetune" and self.stage == "pretrain":
            self.stage, self.epoch = "finetune", 0
            self.optimizer = self._make_optimizer(self.cfg.finetune_lr)
        self.stage = stage
        metrics_path = os.path.join(self.out_dir, f"metrics_{stage}.jsonl")
        audit_path = os.path.join(self.out_dir, f"episodes_{stage}.jsonl")
        if self.epoch == 0:
            for p in (metrics_path, audit_path):
                if os.path.exists(p):
                    os.remove(p)
        audit = EpisodeAuditLog(audit_path)
        try:
            with open(metrics_path, "a") as mf:
                while self.epoch < epochs:
                    lr = self.lr_for(stage, self.epoch)
                    for g in self.optimizer.param_groups:
                        g["lr"] = lr
                    for _ in range(self.steps_per_epoch):
                        batch = self.sample_batch(stage)
                        for e in batch.episodes:
                            audit.write(e, self.global_step)
                        try:
                            losses, info = self.step(batch, stage)
                        except NonFiniteLoss:
                            dump = os.path.join(self.out_dir, f"bad_batch_{stage}_{self.global_step}.json")
                            with open(dump, "w") as f:
                                json.dump([e.audit_record() for e in batch.episodes], f)
                            raise
                        rec = {"step": self.global_step, "epoch": self.epoch, **losses.as_floats(), **info}
                        mf.write(json.dumps({k: rec[k] for k in METRIC_KEYS}) + "\n")
                        self.global_step += 1
                    self.epoch += 1
                    mf.flush()
                    self.save(self.ckpt_path(stage, f"epoch{self.epoch:03d}"))
                    self.save(last)
        finally:
            audit.close()
        return metrics_path

    def ckpt_path(self, stage, tag):
        return os.path.join(self.out_dir, "ckpt", f"{stage}_{tag}.ckpt")

    # -- checkpoint packing --------------------------------------------------

    def state(self):
        arrays, ints = {}, {}
        for k, v in self.model.state_dict().items():
            if self.model.proj_p is self.model.proj_s and k.startswith("proj_p."):
                continue
            name = "protobank.g" if k == "bank.g" else f"model.{k}"
            if v.dtype.is_floating_point:
                arrays[name] = v.detach().numpy()
            else:
                ints[name] = v.detach().numpy().reshape(-1).tolist()
        steps = {}
        # parameter order, not optimizer-state insertion order, so reloads re-save identically
        for n, p in self.model.named_parameters():
            st = self.optimizer.state.get(p)
            if not st:
                continue
            arrays[f"optim.{n}.exp_avg"] = st["exp_avg"].numpy()
            arrays[f"optim.{n}.exp_avg_sq"] = st["exp_avg_sq"].numpy()
            steps[n] = int(st["step"])
        meta = {
            "stage": self.stage, "epoch": self.epoch, "global_step": self.global_step,
            "rng_state": self.rng.bit_generator.state, "config_hash": self.cfg.training_hash(),
            "config": self.cfg.to_text(), "ints": ints, "optim_step": steps,
            "protobank.gamma": self.model.bank.gamma, "n_classes": self.n_classes,
            "lr": self.optimizer.param_groups[0]["lr"],
        }
        return arrays, meta

    def save(self, path):
        arrays, meta = self.state()
        ckpt.save(path, arrays, meta)

    def load(self, path, check_hash=True):
        arrays, meta = ckpt.load(path)
        if check_hash and meta.get("config_hash") != self.cfg.training_hash():
            raise ckpt.CheckpointError(
                f"config hash mismatch: checkpoint {meta.get('config_hash')} vs run {self.cfg.training_hash()}")
        load_model_state(self.model, arrays, meta)
        self.stage = meta["stage"]
        self.epoch = meta["epoch"]
        self.global_step = meta["global_step"]
        self.optimizer = self._make_optimizer(meta["lr"])
        params = dict(self.model.named_parameters())
        for n, step in meta["optim_step"].items():
            p = params[n]
            self.optimizer.state[p] = {
                "step": torch.tensor(float(step)),
                "exp_avg": torch.from_numpy(arrays[f"optim.{n}.exp_avg"].copy()),
                "exp_avg_sq": torch.from_numpy(arrays[f"optim.{n}.exp_avg_sq"].copy()),
            }
        self.rng = np.random.default_rng()
        self.rng.bit_generator.state = meta["rng_state"]


def overfit_scene(cfg, bench, scene, out_dir, steps=300, decay_step=200, seed=0, eval_every=0):
    """Fit one scene repeatedly and score it on itself.

    The episode uses every class present in ``scene`` with one support cropped
    from the scene itself; the resampled input is fixed across steps and the
    learning rate drops by ``cfg.lr_decay`` at ``decay_step``.

    Returns:
        dict with 'ap25' (mean AP25 over the scene's classes after the last
        step), 'history' (per-step l_total) and 'trace' ([(step, ap25)] every
        ``eval_every`` steps, empty when 0).
    """
    rng = np.random.default_rng(seed)
    classes = tuple(sorted({b.class_id for b in scene.boxes}))
    support = tuple(
        tuple(SupportInstance(resample(crop_instance(scene, b), cfg.support_points, rng), c,
                              (scene.scene_id, b.instance_id)) for b in scene.boxes if b.class_id == c)[:1]
        for c in classes)
    batch = build_batch([Episode(scene, support, classes, "pretrain")], cfg.n_input, rng)
    tr = Trainer(cfg, bench, out_dir)

    def score():
        model = tr.model.eval()
        with torch.no_grad():
            cls = torch.from_numpy(batch.class_ids)
            protos = model.support_features(torch.from_numpy(batch.support_points)).mean(dim=2)
            _, _, result = model.detect(model.seeds(torch.from_numpy(batch.query_points)), cls, protos)
        dets = export_detections(result, cls.numpy(), 0, cfg.nms_threshold)
        report = evaluate({scene.scene_id: dets}, [scene], bench.split)
        return float(np.mean([v["AP25"] for v in report.per_class.values() if v["AP25"] is not None]))

    history, trace = [], []
    for step in range(1, steps + 1):
        if step == decay_step + 1:
            for g in tr.optimizer.param_groups:
                g["lr"] *= cfg.lr_decay
        losses, _ = tr.step(batch, "pretrain")
        history.append(float(losses.l_total.detach()))
        if eval_every and step % eval_every == 0:
            trace.append((step, score()))
    ap25 = trace[-1][1] if trace and trace[-1][0] == steps else score()
    return {"ap25": ap25, "history": history, "trace": trace}


def load_model_state(model, arrays, meta):
    """Populate ``model`` from checkpoint arrays; missing keys are a hard error."""
    sd = model.state_dict()
    new, missing = {}, []
    for k, v in sd.items():
        name = "protobank.g" if k == "bank.g" else f"model.{k}"
        if name in arrays:
            new[k] = torch.from_numpy(arrays[name].copy()).reshape(v.shape)
        elif name in meta.get("ints", {}):
            new[k] = torch.tensor(meta["ints"][name], dtype=v.dtype).reshape(v.shape)
        elif k.startswith("proj_p.") and model.proj_p is model.proj_s:
            new[k] = new.get("proj_s." + k[len("proj_p."):], v)
        else:
            missing.append(name)
    if missing:
        raise ckpt.CheckpointError(f"checkpoint lacks keys: {missing}")
    model.load_state_dict(new)
    if "protobank.gamma" in meta:
        model.bank.gamma = meta["protobank.gamma"]


def model_from_checkpoint(cfg, path, n_classes):
    arrays, meta = ckpt.load(path)
    model = build_model(cfg, n_classes)
    load_model_state(model, arrays, meta)
    return model


# ---------------------------------------------------------------------------
# Inference and evaluation
# ---------------------------------------------------------------------------


def eval_supports(bench, cfg, rng):
    """(1, C, K, S, 3) support points over all classes; novel classes use their k shots."""
    sampler = EpisodeSampler(bench.train, bench.split, cfg.support_points)
    classes = bench.split.all_class_ids
    K = cfg.k
    rows = []
    for c in classes:
        pool = sampler.pools[c]
        if len(pool) >= K:
            pick = [pool[i] for i in sorted(rng.choice(len(pool), K, replace=False).tolist())]
        else:
            pick = list(pool) + [pool[i] for i in rng.choice(len(pool), K - len(pool), replace=True)]
        rows.append([sampler.support_instance(si, iid, c, rng).points for si, iid in pick])
    return np.asarray(rows, dtype=np.float32)[None], np.asarray(classes, dtype=np.int64)


@torch.no_grad()
def run_inference(model, bench, cfg, scenes=None, batch_size=8, seed=12345):
    """Detections for each scene (dict scene_id -> list); no bank updates, no projections."""
    model.eval()
    rng = np.random.default_rng(seed)
    sup, classes = eval_supports(bench, cfg, rng)
    protos = model.support_features(torch.from_numpy(sup)).mean(dim=2)   # (1, C, d)
    scenes = bench.test if scenes is None else scenes
    out = {}
    for i in range(0, len(scenes), batch_size):
        chunk = scenes[i:i + batch_size]
        pts = []
        for j, sc in enumerate(chunk):
            r = np.random.default_rng([seed, i + j])
            pts.append(sc.points if len(sc.points) == cfg.n_input else resample(sc.points, cfg.n_input, r))
        q = torch.from_numpy(np.stack(pts).astype(np.float32))
        cls = torch.from_numpy(np.tile(classes, (len(chunk), 1)))
        seeds = model.seeds(q)
        _, _, result = model.detect(seeds, cls, protos.expand(len(chunk), -1, -1))
        for b, sc in enumerate(chunk):
            out[sc.scene_id] = export_detections(result, cls.numpy(), b, cfg.nms_threshold)
    return out


def evaluate_model(model, bench, cfg, out_dir, scenes=None):
    det_dir = os.path.join(out_dir, "detections")
    os.makedirs(det_dir, exist_ok=True)
    scenes = bench.test if scenes is None else scenes
    dets = run_inference(model, bench, cfg, scenes)
    for sid, d in dets.items():
        save_detections(d, os.path.join(det_dir, sid + ".det.json"))
    report = evaluate_run(det_dir, scenes, bench.split)
    report.meta = {"k": bench.split.k_shots, "n_scenes": len(scenes), "config_hash": cfg.training_hash()}
    report.save(out_dir)
    return report


def run_pipeline(cfg, data_dir, out_dir, resume=True):
    """pretrain -> finetune -> eval; returns the APReport."""
    bench = ensure_benchmark(cfg, data_dir)
    tr = Trainer(cfg, bench, out_dir)
    tr.run_stage("pretrain", cfg.pretrain_epochs, resume)
    tr.run_stage("finetune", cfg.finetune_epochs, resume)
    return evaluate_model(tr.model, bench, cfg, os.path.join(out_dir, "eval"))


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


def ablation_arms(cfg):
    """(group, name, overrides) rows: loss toggles, symmetric and asymmetric lambda grids, projection toggle."""
    lam = cfg.lambda1
    arms = [
        ("components", "none", {"lambda1": 0.0, "lambda2": 0.0}),
        ("components", "scl", {"lambda1": lam, "lambda2": 0.0}),
        ("components", "pcl", {"lambda1": 0.0, "lambda2": cfg.lambda2}),
        ("components", "both", {"lambda1": lam, "lambda2": cfg.lambda2}),
    ]
    for v in (0.025, 0.1, 0.4):
        arms.append(("lambda", f"lambda={v}", {"lambda1": v, "lambda2": v}))
    for a, b in ((0.1, 0.4), (0.4, 0.1)):
        arms.append(("asymmetric", f"lambda=({a},{b})", {"lambda1": a, "lambda2": b}))
    arms.append(("projection", "proj_off", {"use_projection": False}))
    arms.append(("projection", "proj_on", {"use_projection": True}))
    return arms


def run_ablation(cfg, data_dir, out_dir, groups=None, seeds=None):
    """Run every arm for every seed; identical configurations are trained once."""
    rows = []
    seeds = tuple(seeds if seeds is not None else cfg.seeds)
    arms = [a for a in ablation_arms(cfg) if groups is None or a[0] in groups]
    for seed in seeds:
        for group, name, over in arms:
            arm_cfg = cfg.replace(seed=seed, **over)
            run_dir = os.path.join(out_dir, "runs", arm_cfg.training_hash())
            report_path = os.path.join(run_dir, "eval", "ap_report.json")
            row = {"group": group, "arm": name, "seed": seed, "lambda1": arm_cfg.lambda1,
                   "lambda2": arm_cfg.lambda2, "projection": arm_cfg.use_projection, "run": arm_cfg.training_hash()}
            try:
                if not os.path.isfile(report_path):
                    log.info("ablation arm %s seed %d -> %s", name, seed, run_dir)
                    run_pipeline(arm_cfg, data_dir, run_dir)
                with open(report_path) as f:
                    rep = json.load(f)
                row.update(novel_AP25=rep["novel"]["AP25"], novel_AP50=rep["novel"]["AP50"],
                           base_AP25=rep["base"]["AP25"], base_AP50=rep["base"]["AP50"], status="ok")
            except Exception as e:  # an arm failing must not sink the sweep
                log.exception("arm %s seed %d failed", name, seed)
                row.update(status="FAILED", error=str(e))
            rows.append(row)
    write_ablation_table(rows, os.path.join(out_dir, "ablation.csv"))
    return rows


def summarize_ablation(rows):
    """Mean over seeds per (group, arm), AP in percent."""
    out = {}
    for r in rows:
        key = (r["group"], r["arm"])
        out.setdefault(key, {"lambda1": r["lambda1"], "lambda2": r["lambda2"], "projection": r["projection"],
                             "vals": []})
        if r.get("status") == "ok":
            out[key]["vals"].append((r["novel_AP25"], r["novel_AP50"], r["base_AP25"], r["base_AP50"]))
    summary = []
    for (group, arm), v in out.items():
        vals = np.array([[np.nan if x is None else x for x in t] for t in v["vals"]], dtype=float).reshape(-1, 4)
        mean = (100 * np.nanmean(vals, axis=0)) if len(vals) else np.full(4, np.nan)
        summary.append({"group": group, "arm": arm, "lambda1": v["lambda1"], "lambda2": v["lambda2"],
                        "projection": v["projection"], "n_seeds": len(vals),
                        "novel_AP25": mean[0], "novel_AP50": mean[1], "base_AP25": mean[2], "base_AP50": mean[3],
                        "status": "ok" if len(vals) else "FAILED"})
    return summary


def write_ablation_table(rows, path):
    import csv
    summary = summarize_ablation(rows)
    cols = ["group", "arm", "lambda1", "lambda2", "projection", "n_seeds", "novel_AP25", "novel_AP50",
            "base_AP25", "base_AP50", "status"]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for s in summary:
            w.writerow({k: (f"{s[k]:.2f}" if isinstance(s[k], float) else s[k]) for k in cols})
    with open(path.replace(".csv", "_runs.jsonl"), "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    return summary
