"""Central finite-difference checks for the training objectives.

All checks run in float64.  The relative error of one instance is the
normwise ``|g_analytic - g_fd| / max(|g_analytic|, |g_fd|)``; a check passes
when the worst instance stays below the tolerance.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .contrast import PrimitiveMeanSet, SemanticPrototypeGrid, primitive_loss, semantic_loss
from .detector import DetectionResult, LossWeights, detection_loss


@dataclass
class GradCheckReport:
    name: str
    errors: list = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_error(self):
        return max(self.errors) if self.errors else float("nan")

    @property
    def passed(self):
        return bool(self.errors) and self.max_error < self.tolerance

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {len(self.errors)} instances, max rel err {self.max_error:.3e}"


def finite_difference(fn, inputs, h=1e-5):
    """Central differences of scalar ``fn(*inputs)`` w.r.t. every input entry."""
    grads = []
    for x in inputs:
        g = torch.zeros_like(x)
        flat, gflat = x.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn(*inputs).item()
            flat[i] = orig - h
            down = fn(*inputs).item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(fn, inputs, h=1e-5):
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    analytic = torch.autograd.grad(fn(*inputs), inputs)
    with torch.no_grad():
        numeric = finite_difference(fn, [x.detach().clone() for x in inputs], h)
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    scale = max(float(a.norm()), float(n.norm()), 1e-300)
    return float((a - n).norm()) / scale


def _scl_fn(tau):
    return lambda P: semantic_loss(SemanticPrototypeGrid(F.normalize(P, dim=-1)), tau)


def _pcl_fn(g, tau, denominator):
    ids = list(range(g.shape[0]))
    return lambda M: primitive_loss(PrimitiveMeanSet(F.normalize(M, dim=-1), F.normalize(g, dim=-1), ids),
                                    tau, denominator)


def check_semantic(n_instances=20, seed=0, tau=0.2, h=1e-5, tol=1e-4):
    rng = np.random.default_rng(seed)
    rep = GradCheckReport("L_semcl", tolerance=tol)
    for _ in range(n_instances):
        B, N, D = int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(3, 7))
        P = torch.from_numpy(rng.normal(size=(B, N, D)))
        rep.errors.append(relative_error(_scl_fn(tau), [P], h))
    return rep


def check_primitive(n_instances=20, seed=1, tau=0.2, h=1e-5, tol=1e-4, denominator="feature"):
    rng = np.random.default_rng(seed)
    rep = GradCheckReport(f"L_primcl[{denominator}]", tolerance=tol)
    for _ in range(n_instances):
        W, D = int(rng.integers(2, 7)), int(rng.integers(3, 7))
        M = torch.from_numpy(rng.normal(size=(W, D)))
        g = torch.from_numpy(rng.normal(size=(W, D)))
        rep.errors.append(relative_error(_pcl_fn(g, tau, denominator), [M], h))
    return rep


def _away_from_kinks(x, kinks, margin):
    return all(bool((torch.abs(x - k) > margin).all()) for k in kinks)


def random_detection_instance(rng, B=2, M=12, P=6, N=3, beta=0.1):
    """A small batch whose differentiable inputs avoid the L1/smooth-L1 kinks."""
    mean_size = torch.tensor([0.4, 0.5, 0.6], dtype=torch.float64)
    targets = []
    for _ in range(B):
        T = int(rng.integers(1, 4))
        center = rng.uniform(0.5, 2.5, size=(T, 3))
        size = rng.uniform(0.3, 0.8, size=(T, 3))
        targets.append({
            "lohi": np.stack([center - size / 2, center + size / 2], axis=1),
            "center": center, "size": size, "slot": rng.integers(0, N, size=T),
            "ignore_center": rng.uniform(0.5, 2.5, size=(int(rng.integers(0, 2)), 3)),
        })
    seeds = torch.from_numpy(np.concatenate(
        [np.concatenate([t["center"][rng.integers(len(t["center"]), size=M // 2)] + rng.uniform(-0.15, 0.15, (M // 2, 3)),
                         rng.uniform(0, 3, (M - M // 2, 3))])[None] for t in targets]))
    props = torch.from_numpy(np.stack(
        [np.concatenate([t["center"][rng.integers(len(t["center"]), size=P // 2)] + rng.uniform(-0.1, 0.1, (P // 2, 3)),
                         rng.uniform(0, 3, (P - P // 2, 3))]) for t in targets]))
    while True:
        votes = seeds + torch.from_numpy(rng.uniform(-0.2, 0.2, seeds.shape))
        center = props + torch.from_numpy(rng.uniform(-0.3, 0.3, props.shape))
        log_size = torch.from_numpy(rng.normal(scale=0.5, size=(B, P, 3)))
        # distances to every GT center and size must stay clear of |x| = 0 and |x| = beta
        diffs = [(votes[b][:, None] - torch.from_numpy(t["center"])[None]).reshape(-1) for b, t in enumerate(targets)]
        diffs += [(center[b][:, None] - torch.from_numpy(t["center"])[None]).reshape(-1) for b, t in enumerate(targets)]
        diffs += [(log_size[b][:, None] - torch.log(torch.from_numpy(t["size"]) / mean_size)[None]).reshape(-1)
                  for b, t in enumerate(targets)]
        ok = all(_away_from_kinks(d, [0.0, beta, -beta], 1e-3) for d in diffs)
        if ok:
            break
    obj = torch.from_numpy(rng.normal(size=(B, P, 2)))
    cls = torch.from_numpy(rng.normal(size=(B, P, N)))
    return seeds, votes, props, center, log_size, obj, cls, targets, mean_size


def _det_fn(seeds, props, targets, mean_size, weights):
    def fn(votes, center, log_size, obj, cls):
        res = DetectionResult(center, log_size, mean_size * torch.exp(log_size), obj, cls)
        return detection_loss(seeds, votes, props, res, targets, mean_size, weights).l_det
    return fn


def check_detection(n_instances=20, seed=2, h=1e-5, tol=1e-4):
    rng = np.random.default_rng(seed)
    rep = GradCheckReport("l_det", tolerance=tol)
    w = LossWeights()
    for _ in range(n_instances):
        seeds, votes, props, center, log_size, obj, cls, targets, mean_size = random_detection_instance(
            rng, beta=w.smooth_l1_beta)
        fn = _det_fn(seeds, props, targets, mean_size, w)
        rep.errors.append(relative_error(fn, [votes, center, log_size, obj, cls], h))
    return rep


def check_bank_detached(model, batch, cfg):
    """Backward the full training loss with the bank marked as requiring
    grad; returns the max |grad| that reached it (0.0 when none did)."""
    from .train import compute_losses
    g = model.bank.g
    g.requires_grad_(True)
    g.grad = None
    try:
        losses, _, _ = compute_losses(model, batch, cfg)
        losses.l_total.backward()
        return 0.0 if g.grad is None else float(g.grad.abs().max())
    finally:
        g.requires_grad_(False)
        g.grad = None


def run_all(n_instances=20, seed=0, tol=1e-4):
    return [
        check_semantic(n_instances, seed, tol=tol),
        check_primitive(n_instances, seed + 1, tol=tol),
        check_primitive(n_instances, seed + 2, tol=tol, denominator="proto"),
        check_detection(n_instances, seed + 3, tol=tol),
    ]
