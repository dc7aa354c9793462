"""Acceptance criteria 1-9, each run at its stated tolerance and time budget.

Every test records one PASS/FAIL line that the conftest hook prints at the
end of the session.  Criterion 8 trains the full 4-arm component ablation
on the default benchmark and takes over an hour on a desk CPU; set
CPFS3D_ACCEPT_OUT to keep its run directories.
"""

import math
import os
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from cpfs3d import oracles
from cpfs3d.config import RunConfig, load_config
from cpfs3d.contrast import PrimitiveMeanSet, SemanticPrototypeGrid, primitive_loss, semantic_loss
from cpfs3d.episodes import EpisodeSampler, episode_targets
from cpfs3d.gradcheck import check_bank_detached, run_all
from cpfs3d.protobank import assign, momentum_update
from cpfs3d.train import (Trainer, compute_losses, make_benchmark, overfit_scene, run_ablation, run_pipeline,
                          summarize_ablation)

from conftest import ACCEPTANCE, ACCEPTANCE_TABLES

CONFIGS = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def _record(n, passed, detail):
    ACCEPTANCE.append((n, bool(passed), detail))
    assert passed, f"criterion {n}: {detail}"


def _grid(P):
    return SemanticPrototypeGrid(torch.as_tensor(P, dtype=torch.float64))


def _means(M, g):
    M = torch.as_tensor(M, dtype=torch.float64)
    return PrimitiveMeanSet(M, torch.as_tensor(g, dtype=torch.float64), list(range(M.shape[0])))


def test_criterion_1_uniform_closed_forms():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    errs = []
    for N in (2, 4, 8):
        u = F.normalize(torch.from_numpy(rng.normal(size=16)), dim=0)
        errs.append(abs(float(semantic_loss(_grid(u.expand(3, N, 16).clone()), 0.2)) - math.log(N)))
    for W in (2, 16, 128):
        u = F.normalize(torch.from_numpy(rng.normal(size=16)), dim=0)
        g = F.normalize(torch.from_numpy(rng.normal(size=(W, 16))), dim=-1)
        M = u.expand(W, 16).clone()
        errs.append(abs(float(primitive_loss(_means(M, g), 0.2, "feature")) - math.log(W)))
        errs.append(abs(float(primitive_loss(_means(M, M.clone()), 0.2, "proto")) - math.log(W)))
    dt = time.perf_counter() - t0
    _record(1, max(errs) < 1e-6 and dt < 1.0,
            f"ln N (N=2,4,8) and ln W' (W'=2,16,128): max |err| {max(errs):.2e} (tol 1e-6), {dt:.2f}s")


def test_criterion_2_orthonormal_hand_values():
    t0 = time.perf_counter()
    target = math.log1p(math.exp(-5.0))
    eye = [[1.0, 0.0], [0.0, 1.0]]
    scl = float(semantic_loss(_grid([eye, eye]), 0.2))
    pcl = [float(primitive_loss(_means(eye, eye), 0.2, d)) for d in ("feature", "proto")]
    errs = [abs(scl - target)] + [abs(p - target) for p in pcl] + [abs(target - 0.0067153)]
    dt = time.perf_counter() - t0
    _record(2, max(errs[:3]) < 1e-6 and errs[3] < 1e-7 and dt < 1.0,
            f"SCL {scl:.7f}, PCL {pcl[0]:.7f}/{pcl[1]:.7f} vs ln(1+e^-5)={target:.7f}: "
            f"max |err| {max(errs[:3]):.2e} (tol 1e-6), {dt:.2f}s")


def test_criterion_3_gradient_checks():
    t0 = time.perf_counter()
    reports = run_all(n_instances=20, tol=1e-4)
    dt = time.perf_counter() - t0
    ok = all(r.passed and len(r.errors) >= 20 for r in reports) and dt < 60
    detail = "; ".join(f"{r.name} n={len(r.errors)} max {r.max_error:.1e}" for r in reports)
    _record(3, ok, f"{detail} (tol 1e-4, h=1e-5), {dt:.1f}s")


def test_criterion_4_detach_and_momentum(tiny_cfg, tiny_bench, tmp_path):
    cfg = tiny_cfg.replace(n_input=256, sa1_points=128, n_seeds=64, n_proposals=16)
    tr = Trainer(cfg, tiny_bench, str(tmp_path))
    batch = tr.sample_batch("pretrain")
    t0 = time.perf_counter()   # model construction is setup, not part of the check
    grads = [check_bank_detached(tr.model, batch, cfg.replace(lambda1=a, lambda2=b))
             for a, b in ((0.1, 0.1), (1.0, 0.0), (0.0, 1.0), (0.0, 0.0))]
    rng = np.random.default_rng(4)
    err, fix_ok, copy_ok = 0.0, True, True
    for _ in range(20):
        bank = rng.normal(size=(8, 6))
        res = assign(torch.from_numpy(rng.normal(size=(30, 6))), torch.from_numpy(bank))
        groups = {w: rows.tolist() for w, rows in res.groups.items()}
        gamma = float(rng.uniform())
        got = momentum_update(torch.from_numpy(bank), res, gamma).numpy()
        err = max(err, float(np.abs(got - np.asarray(oracles.momentum_update(bank, groups, gamma))).max()))
        fix_ok &= torch.equal(momentum_update(torch.from_numpy(bank), res, 1.0), torch.from_numpy(bank))
        copied = momentum_update(torch.from_numpy(bank), res, 0.0)
        copy_ok &= all(torch.equal(copied[w], res.means[w] if w in res.means else torch.from_numpy(bank[w]))
                       for w in range(8))
    dt = time.perf_counter() - t0
    _record(4, max(grads) == 0.0 and err <= 1e-12 and fix_ok and copy_ok and dt < 1.0,
            f"bank |grad| max {max(grads)} over 4 loss mixes, momentum err {err:.1e} (tol 1e-12), "
            f"gamma=1 fixpoint {fix_ok}, gamma=0 copy {copy_ok}, {dt:.2f}s")


def test_criterion_5_oracle_equivalence():
    t0 = time.perf_counter()
    rows = {name: (ok, detail) for name, ok, detail in oracles.run_suite(0, n_iou=200, n_ap=200, n_assign=50)}
    dt = time.perf_counter() - t0
    keys = ("iou3d", "average_precision", "prototype assignment")
    _record(5, all(rows[k][0] for k in keys) and dt < 60,
            "; ".join(f"{k}: {rows[k][1]}" for k in keys) + f", {dt:.1f}s")


def test_criterion_6_episodic_protocol():
    t0 = time.perf_counter()
    cfg = RunConfig()
    bench = make_benchmark(cfg)
    split = bench.split
    novel = set(split.novel_class_ids)
    sampler = EpisodeSampler(bench.train, split, cfg.support_points)
    rng = np.random.default_rng(0)
    leaks, bad_shape = 0, 0
    for _ in range(10_000):
        ep = sampler.sample("pretrain", cfg.n_way, cfg.k_shot, rng)
        sup_cls = {s.class_id for row in ep.support for s in row}
        tgt = episode_targets(ep.query, ep.class_ids)
        tgt_cls = {ep.class_ids[i] for i in tgt["slot"].tolist()}
        leaks += bool((set(ep.class_ids) | sup_cls | tgt_cls) & novel)
        bad_shape += len(ep.support) != cfg.n_way or any(len(row) != cfg.k_shot for row in ep.support)
    shots = {}
    for sid, iid in split.annotated_novel_instances:
        cls = next(b.class_id for s in bench.train if s.scene_id == sid for b in s.boxes if b.instance_id == iid)
        shots.setdefault(cls, set()).add((sid, iid))
    wrong_shots, n_ft = 0, 0
    for _ in range(1000):
        ep = sampler.sample("finetune", cfg.n_way, cfg.k_shot, rng)
        bad_shape += len(ep.support) != cfg.n_way or any(len(row) != cfg.k_shot for row in ep.support)
        for c, row in zip(ep.class_ids, ep.support):
            if c in novel:
                n_ft += 1
                wrong_shots += {s.source for s in row} != shots[c]
    dt = time.perf_counter() - t0
    ok = (leaks == 0 and bad_shape == 0 and wrong_shots == 0 and n_ft > 0
          and all(len(v) == split.k_shots for v in shots.values()) and dt < 60)
    _record(6, ok, f"10000 pretrain episodes with novel supervision: {leaks}; {n_ft} finetune novel rows not "
                   f"equal to the k={split.k_shots} shots: {wrong_shots}; episodes without N x K supports: "
                   f"{bad_shape}; {dt:.1f}s")


def test_criterion_7_detector_sanity(tmp_path):
    t0 = time.perf_counter()
    cfg = RunConfig().replace(n_train_scenes=4, n_test_scenes=1, d=128, proj_dim=64, sa1_widths=(32, 32, 64),
                              nsample=16, lr=0.003)
    bench = make_benchmark(cfg)
    run = overfit_scene(cfg, bench, bench.train[0], str(tmp_path / "overfit"), steps=300, eval_every=25)
    first = next((step for step, ap in run["trace"] if ap == 1.0), None)
    history = run["history"]
    small = cfg.replace(n_way=2, k_shot=1, batch_size=2)
    tr = Trainer(small, bench, str(tmp_path / "lam0"))
    tr.model.train()
    losses, _, _ = compute_losses(tr.model, tr.sample_batch("pretrain"), small.replace(lambda1=0.0, lambda2=0.0))
    exact = torch.equal(losses.l_total.detach(), losses.l_det.detach())
    dt = time.perf_counter() - t0
    _record(7, first is not None and exact and dt < 300,
            f"overfit AP25 first reaches 1.0 at step {first} (checked every 25 of 300 steps, "
            f"{run['ap25']:.3f} at step 300; l_total {history[0]:.3f} -> {history[-1]:.3f}); "
            f"lambda1=lambda2=0 gives l_total == l_det: {exact}; {dt:.0f}s")


@pytest.mark.slow
def test_criterion_8_directional_ablation(tmp_path_factory):
    t0 = time.perf_counter()
    out = os.environ.get("CPFS3D_ACCEPT_OUT") or str(tmp_path_factory.mktemp("ablation"))
    cfg = load_config(os.path.join(CONFIGS, "desk.cfg"))
    rows = run_ablation(cfg, os.path.join(out, "data"), os.path.join(out, "ablation"), ["components"], (0, 1, 2))
    dt = time.perf_counter() - t0
    arms = {s["arm"]: s for s in summarize_ablation(rows)}
    lines = ["component ablation, mean of 3 seeds (AP %):",
             f"{'arm':<6} {'novel AP25':>10} {'novel AP50':>10} {'base AP25':>10} {'base AP50':>10} seeds"]
    for name in ("none", "scl", "pcl", "both"):
        s = arms[name]
        lines.append(f"{name:<6} {s['novel_AP25']:>10.2f} {s['novel_AP50']:>10.2f} {s['base_AP25']:>10.2f} "
                     f"{s['base_AP50']:>10.2f} {s['n_seeds']}")
    ACCEPTANCE_TABLES.append("\n".join(lines))
    both, none = arms["both"]["novel_AP25"], arms["none"]["novel_AP25"]
    best_single = max(arms["scl"]["novel_AP25"], arms["pcl"]["novel_AP25"])
    complete = all(arms[a]["n_seeds"] == 3 for a in ("none", "scl", "pcl", "both"))
    _record(8, complete and both > none and both >= best_single - 1.0 and dt < 7200,
            f"novel AP25 both {both:.2f} vs none {none:.2f} (need >), vs max(scl, pcl) {best_single:.2f} "
            f"(need >= max - 1.0); {dt / 60:.0f} min")


def test_criterion_9_determinism(tmp_path):
    t0 = time.perf_counter()
    cfg = load_config(os.path.join(CONFIGS, "smoke.cfg"))
    files = ("metrics_pretrain.jsonl", "metrics_finetune.jsonl", os.path.join("eval", "ap_report.json"),
             os.path.join("eval", "ap_report.csv"))
    blobs = []
    for run in ("a", "b"):
        run_pipeline(cfg, str(tmp_path / run / "data"), str(tmp_path / run / "out"))
        blobs.append([open(tmp_path / run / "out" / f, "rb").read() for f in files])
    dt = time.perf_counter() - t0
    same = [x == y for x, y in zip(*blobs)]
    _record(9, all(same) and all(blobs[0]) and dt < 600,
            f"two smoke runs, identical files {sum(same)}/{len(files)} ({', '.join(map(os.path.basename, files))}); "
            f"{dt:.0f}s")
