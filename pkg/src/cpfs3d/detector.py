"""Voting detector head, box codec, detection loss and the assembled model."""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, SeedFeatureSet, farthest_point_sample, gather, mark_foreground, pool_instance
from .contrast import ProjectionHead
from .protobank import CrossAttention, GeometricPrototypeBank, refine_seeds


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class VoteSet:
    positions: torch.Tensor  # (B, M, 3)
    features: torch.Tensor   # (B, M, d)


@dataclass
class Proposals:
    centers: torch.Tensor    # (B, P, 3)
    features: torch.Tensor   # (B, P, d)
    vote_index: torch.Tensor  # (B, P) index of the vote each center came from


@dataclass
class DetectionResult:
    center: torch.Tensor       # (B, P, 3)
    log_size: torch.Tensor     # (B, P, 3)
    size: torch.Tensor         # (B, P, 3)
    obj_logits: torch.Tensor   # (B, P, 2)
    cls_logits: torch.Tensor   # (B, P, N)

    @property
    def objectness(self):
        return torch.softmax(self.obj_logits, dim=-1)[..., 1]


@dataclass
class LossBreakdown:
    l_vote: torch.Tensor
    l_objectness: torch.Tensor
    l_box: torch.Tensor
    l_cls: torch.Tensor
    l_det: torch.Tensor
    l_semcl: torch.Tensor = None
    l_primcl: torch.Tensor = None
    l_total: torch.Tensor = None
    lambda1: float = 0.0
    lambda2: float = 0.0

    def as_floats(self):
        keys = ("l_vote", "l_objectness", "l_box", "l_cls", "l_det", "l_semcl", "l_primcl", "l_total")
        return {k: (None if getattr(self, k) is None else float(getattr(self, k).detach())) for k in keys}


class VoteHead(nn.Module):
    """Offset (bounded by max_offset * tanh) and feature residual per seed."""

    def __init__(self, d, max_offset=1.0):
        super().__init__()
        self.fc1 = nn.Linear(d, d)
        self.offset = nn.Linear(d, 3)
        self.residual = nn.Linear(d, d)
        self.max_offset = max_offset

    def forward(self, seeds):
        h = torch.relu(self.fc1(seeds.features))
        off = self.max_offset * torch.tanh(self.offset(h))
        return VoteSet(seeds.positions + off, seeds.features + self.residual(h))


def vote(seeds, head):
    return head(seeds)


def cluster(votes, P, radius=0.3):
    """P farthest-point-sampled vote positions, each with the max-pooled
    features of every vote within ``radius`` (nearest vote if none)."""
    B, M, _ = votes.positions.shape
    if M < P:
        raise ValueError(f"need at least P={P} votes, got {M}")
    idx = farthest_point_sample(votes.positions, P)
    centers = gather(votes.positions, idx)
    d2 = torch.cdist(centers.detach(), votes.positions.detach()) ** 2
    inball = d2 <= radius * radius
    k = max(int(inball.sum(-1).max()), 1)
    ar = torch.arange(M).expand_as(d2)
    nbr = torch.where(inball, ar, M).topk(k, dim=-1, largest=False).values
    first = torch.where(nbr[..., :1] == M, d2.argmin(-1, keepdim=True), nbr[..., :1])
    nbr = torch.where(nbr == M, first, nbr)
    feats = gather(votes.features, nbr).max(dim=2).values
    return Proposals(centers, feats, idx)


def encode_boxes(center, size, anchor, mean_size):
    """Box -> (center residual w.r.t. anchor, log(size / mean_size))."""
    return center - anchor, torch.log(size / mean_size)


def decode_boxes(residual, log_size, anchor, mean_size):
    return anchor + residual, mean_size * torch.exp(log_size)


class PredictionHead(nn.Module):
    def __init__(self, d, n_classes, cls_head="affine", metric_scale=10.0):
        super().__init__()
        self.fc1 = nn.Linear(d, d)
        self.fc2 = nn.Linear(d, d)
        self.center = nn.Linear(d, 3)
        self.size = nn.Linear(d, 3)
        self.obj = nn.Linear(d, 2)
        self.cls = nn.Linear(d, n_classes)
        self.cls_head = cls_head
        self.metric_scale = metric_scale

    def forward(self, proposals, class_ids, prototypes, mean_size):
        h = torch.relu(self.fc2(torch.relu(self.fc1(proposals.features))))
        residual = self.center(h)
        log_size = self.size(h)
        center, size = decode_boxes(residual, log_size, proposals.centers, mean_size)
        if self.cls_head == "affine":
            W = self.cls.weight[class_ids]               # (B, N, d)
            logits = torch.einsum("bpd,bnd->bpn", h, W) + self.cls.bias[class_ids][:, None, :]
        else:
            logits = self.metric_scale * torch.einsum(
                "bpd,bnd->bpn", F.normalize(proposals.features, dim=-1), F.normalize(prototypes, dim=-1))
        return DetectionResult(center, log_size, size, self.obj(h), logits)


def predict(proposals, head, class_ids, prototypes, mean_size):
    return head(proposals, class_ids, prototypes, mean_size)


def refine_proposals(proposals, prototypes, attn):
    """Residual cross-attention of proposal features against (B, N, d) class prototypes."""
    return Proposals(proposals.centers, attn(proposals.features, prototypes), proposals.vote_index)


def build_semantic_prototypes(instance_feats):
    """(B, N, K, d) instance features -> (B, N, d) unprojected class prototypes."""
    return instance_feats.mean(dim=-2)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class LossWeights:
    objectness: float = 0.5
    box: float = 1.0
    cls: float = 1.0
    pos_radius: float = 0.3
    neg_radius: float = 0.6
    smooth_l1_beta: float = 0.1


def assign_proposals(centers, gt_centers, ignore_centers, weights):
    """Label each proposal 1 (positive), 0 (negative) or -1 (ignored).

    Returns (label (P,), gt index of nearest target (P,)).
    """
    P = centers.shape[0]
    c = centers.detach()
    gt = torch.as_tensor(gt_centers, dtype=c.dtype)
    if len(gt):
        dist = torch.cdist(c, gt)
        nearest, gi = dist.min(dim=1)
    else:
        nearest = torch.full((P,), float("inf"), dtype=c.dtype)
        gi = torch.zeros(P, dtype=torch.long)
    label = torch.full((P,), -1, dtype=torch.long)
    label[nearest < weights.pos_radius] = 1
    neg = nearest > weights.neg_radius
    ign = torch.as_tensor(ignore_centers, dtype=c.dtype)
    if len(ign):
        neg &= torch.cdist(c, ign).min(dim=1).values > weights.neg_radius
    label[neg] = 0
    return label, gi


def owning_box(positions, lohi, centers):
    """Index of the containing target box with nearest center, -1 if none."""
    pos = positions.detach()
    if len(lohi) == 0:
        return torch.full((pos.shape[0],), -1, dtype=torch.long)
    lohi = torch.as_tensor(lohi, dtype=pos.dtype)
    inside = ((pos[:, None] >= lohi[None, :, 0]) & (pos[:, None] <= lohi[None, :, 1])).all(-1)
    d = torch.cdist(pos, torch.as_tensor(centers, dtype=pos.dtype))
    d = torch.where(inside, d, torch.full_like(d, float("inf")))
    own = d.argmin(dim=1)
    own[~inside.any(dim=1)] = -1
    return own


def detection_loss(seed_positions, vote_positions, proposal_centers, result, targets, mean_size,
                   weights=None):
    """Vote, objectness, box and classification terms averaged over the batch.

    Args:
        seed_positions, vote_positions: (B, M, 3)
        proposal_centers: (B, P, 3) cluster centers used for GT assignment
        result: DetectionResult
        targets: sequence of B target dicts (see episodes.episode_targets)
        mean_size: (3,) size prior
    """
    w = weights or LossWeights()
    B = seed_positions.shape[0]
    zero = result.center.sum() * 0.0
    parts = {"vote": [], "obj": [], "box": [], "cls": []}
    for b in range(B):
        t = targets[b]
        gt_c = torch.as_tensor(t["center"], dtype=result.center.dtype)
        gt_s = torch.as_tensor(t["size"], dtype=result.center.dtype)
        own = owning_box(seed_positions[b], t["lohi"], t["center"])
        fg = own >= 0
        if fg.any():
            l_vote = (vote_positions[b][fg] - gt_c[own[fg]]).abs().sum(-1).mean()
        else:
            l_vote = zero
        label, gi = assign_proposals(proposal_centers[b], t["center"], t["ignore_center"], w)
        used = label >= 0
        if used.any():
            l_obj = F.cross_entropy(result.obj_logits[b][used], label[used])
        else:
            l_obj = zero
        pos = label == 1
        if pos.any():
            tgt_ls = torch.log(gt_s[gi[pos]] / mean_size)
            l_box = (F.smooth_l1_loss(result.center[b][pos], gt_c[gi[pos]], reduction="none",
                                      beta=w.smooth_l1_beta).sum(-1)
                     + F.smooth_l1_loss(result.log_size[b][pos], tgt_ls, reduction="none",
                                        beta=w.smooth_l1_beta).sum(-1)).mean()
            slot = torch.as_tensor(t["slot"])[gi[pos]]
            l_cls = F.cross_entropy(result.cls_logits[b][pos], slot)
        else:
            l_box = l_cls = zero
        parts["vote"].append(l_vote)
        parts["obj"].append(l_obj)
        parts["box"].append(l_box)
        parts["cls"].append(l_cls)
    lv, lo, lb, lc = (torch.stack(parts[k]).mean() for k in ("vote", "obj", "box", "cls"))
    l_det = lv + w.objectness * lo + w.box * lb + w.cls * lc
    return LossBreakdown(lv, lo, lb, lc, l_det)


def total_loss(l_det, l_semcl, l_primcl, lambda1=0.1, lambda2=0.1):
    """L = l_det + lambda1 * l_semcl + lambda2 * l_primcl; aborts on non-finite parts."""
    for name, v in (("l_det", l_det), ("l_semcl", l_semcl), ("l_primcl", l_primcl)):
        v = float(v.detach()) if torch.is_tensor(v) else float(v)
        if not math.isfinite(v):
            raise NonFiniteLoss(f"{name} is not finite ({v})")
    out = l_det
    if lambda1:
        out = out + lambda1 * l_semcl
    if lambda2:
        out = out + lambda2 * l_primcl
    return out


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


class CPVoteNet(nn.Module):
    """Backbone + prototype bank + voting detector + training-only projections."""

    def __init__(self, n_classes, d=256, widths1=(64, 64, 128), n_seeds=256, sa1_points=512,
                 radii=(0.2, 0.4), nsample=(32, 32), support_seeds=(64, 32), W=128, gamma=0.999,
                 bank_renormalize=True, bank_init="gaussian", n_proposals=64, cluster_radius=0.3, max_offset=1.0,
                 proj_dim=None, share_projection=False, use_projection=True, cls_head="affine", seed=0):
        super().__init__()
        torch.manual_seed(seed)
        widths2 = (widths1[-1], widths1[-1], d)
        self.backbone = Backbone(widths1, widths2, (sa1_points, n_seeds), radii, nsample)
        self.support_seeds = support_seeds
        self.bank = GeometricPrototypeBank(W, d, gamma, bank_renormalize, seed=seed + 1, init=bank_init)
        self.seed_attn = CrossAttention(d)
        self.vote_head = VoteHead(d, max_offset)
        self.proposal_attn = CrossAttention(d)
        self.head = PredictionHead(d, n_classes, cls_head)
        self.n_proposals = n_proposals
        self.cluster_radius = cluster_radius
        self.use_projection = use_projection
        pdim = proj_dim or d // 2
        self.proj_s = ProjectionHead(d, pdim)
        self.proj_p = self.proj_s if share_projection else ProjectionHead(d, pdim)
        self.register_buffer("mean_size", torch.ones(3))

    def projections(self):
        if not self.use_projection:
            return None, None
        return self.proj_s, self.proj_p

    def seeds(self, points):
        pos, feats = self.backbone(points)
        return SeedFeatureSet(feats, pos)

    def support_features(self, support_points):
        """(B, N, K, S, 3) -> (B, N, K, d) instance features of refined support seeds."""
        lead = support_points.shape[:-2]
        flat = support_points.reshape(-1, *support_points.shape[-2:])
        n1 = min(self.support_seeds[0], flat.shape[1])
        pos, feats = self.backbone(flat, (n1, min(self.support_seeds[1], n1)), stream="support")
        refined = refine_seeds(SeedFeatureSet(feats, pos), self.bank, self.seed_attn)
        return pool_instance(refined.features).reshape(*lead, -1)

    def detect(self, seeds, class_ids, prototypes):
        """Refine seeds, vote, cluster, refine proposals and predict."""
        refined = refine_seeds(seeds, self.bank, self.seed_attn)
        votes = self.vote_head(refined)
        props = cluster(votes, self.n_proposals, self.cluster_radius)
        props = refine_proposals(props, prototypes, self.proposal_attn)
        result = self.head(props, class_ids, prototypes, self.mean_size)
        return votes, props, result

    def forward(self, query_points, support_points, class_ids):
        seeds = self.seeds(query_points)
        inst = self.support_features(support_points)
        protos = build_semantic_prototypes(inst)
        votes, props, result = self.detect(seeds, class_ids, protos)
        return {"seeds": seeds, "instance_features": inst, "prototypes": protos,
                "votes": votes, "proposals": props, "result": result}


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def _iou_matrix(lo, hi):
    ilo = np.maximum(lo[:, None], lo[None])
    ihi = np.minimum(hi[:, None], hi[None])
    inter = np.clip(ihi - ilo, 0, None).prod(-1)
    vol = (hi - lo).prod(-1)
    return inter / (vol[:, None] + vol[None] - inter)


def nms(centers, sizes, scores, threshold=0.25):
    """Greedy class-agnostic axis-aligned 3D NMS; returns kept indices by score."""
    centers = np.asarray(centers, dtype=np.float64)
    sizes = np.asarray(sizes, dtype=np.float64)
    order = np.argsort(-np.asarray(scores), kind="stable")
    if len(order) == 0:
        return []
    iou = _iou_matrix(centers - sizes / 2, centers + sizes / 2)
    keep, dead = [], np.zeros(len(order), dtype=bool)
    for i in order:
        if dead[i]:
            continue
        keep.append(int(i))
        dead |= iou[i] > threshold
    return keep


def export_detections(result, class_ids, b=0, nms_threshold=0.25):
    """Decoded boxes of scene ``b`` after NMS: list of dicts with center/size/class_id/score."""
    with torch.no_grad():
        obj = result.objectness[b].double().numpy()
        cls_p = torch.softmax(result.cls_logits[b].double(), dim=-1).numpy()
        centers = result.center[b].double().numpy()
        sizes = result.size[b].double().numpy()
    slot = cls_p.argmax(-1)
    scores = obj * cls_p[np.arange(len(slot)), slot]
    ids = np.asarray(class_ids)[b] if np.ndim(class_ids) == 2 else np.asarray(class_ids)
    out = []
    for i in nms(centers, sizes, scores, nms_threshold):
        out.append({"center": [float(v) for v in centers[i]], "size": [float(v) for v in sizes[i]],
                    "class_id": int(ids[slot[i]]), "score": float(scores[i])})
    return out
