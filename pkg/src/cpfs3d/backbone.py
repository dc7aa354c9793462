"""Reduced two-level set-abstraction encoder producing seed points."""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


def farthest_point_sample(xyz, npoint):
    """Batched farthest point sampling.

    Starts from index 0; ties go to the lowest index (``argmax`` semantics).

    Args:
        xyz: (B, N, 3) tensor
        npoint: number of samples, <= N
    Returns:
        (B, npoint) long tensor of indices
    """
    B, N, _ = xyz.shape
    if npoint > N:
        raise ValueError(f"cannot sample {npoint} of {N} points")
    xyz = xyz.detach()
    idx = torch.zeros(B, npoint, dtype=torch.long, device=xyz.device)
    dist = torch.full((B, N), float("inf"), dtype=xyz.dtype, device=xyz.device)
    far = torch.zeros(B, dtype=torch.long, device=xyz.device)
    ar = torch.arange(B, device=xyz.device)
    for i in range(npoint):
        idx[:, i] = far
        c = xyz[ar, far].unsqueeze(1)
        dist = torch.minimum(dist, ((xyz - c) ** 2).sum(-1))
        far = dist.argmax(-1)
    return idx


def gather(x, idx):
    """x: (B, N, C), idx: (B, ...) -> (B, ..., C)."""
    B = x.shape[0]
    flat = idx.reshape(B, -1)
    out = torch.gather(x, 1, flat.unsqueeze(-1).expand(-1, -1, x.shape[-1]))
    return out.reshape(*idx.shape, x.shape[-1])


def ball_query(xyz, centers, radius, nsample):
    """First ``nsample`` points (by index) within ``radius`` of each center.

    Slots left empty are filled with the first hit.  A center with no hit at
    all falls back to its nearest point.
    """
    N = xyz.shape[1]
    d2 = torch.cdist(centers.detach(), xyz.detach()) ** 2
    ar = torch.arange(N, device=xyz.device).expand_as(d2)
    cand = torch.where(d2 <= radius * radius, ar, N)
    k = min(nsample, N)
    idx = cand.topk(k, dim=-1, largest=False).values
    first = idx[..., :1]
    empty = first == N
    if empty.any():
        first = torch.where(empty, d2.argmin(-1, keepdim=True), first)
    return torch.where(idx == N, first, idx)


def canonical_order(xyz):
    """Sort each cloud lexicographically by (x, y, z).

    Sampling and grouping break ties by index, so this makes the encoder a
    function of the point set rather than of its storage order.

    Args:
        xyz: (B, N, 3)
    """
    idx = torch.arange(xyz.shape[1], device=xyz.device).expand(xyz.shape[0], -1)
    for axis in (2, 1, 0):
        key = torch.gather(xyz[..., axis].detach(), 1, idx)
        idx = torch.gather(idx, 1, key.argsort(dim=1, stable=True))
    return gather(xyz, idx)


class StreamBatchNorm(nn.Module):
    """Batch normalization with one shared affine map and separate running
    statistics per input stream.

    Query scenes and cropped supports pass through the same weights but have
    very different feature statistics; a single running average would end up
    describing whichever stream was encoded last.
    """

    STREAMS = ("query", "support")

    def __init__(self, n, momentum=0.1):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(n))
        self.bias = nn.Parameter(torch.zeros(n))
        self.stats = nn.ModuleDict({k: nn.BatchNorm1d(n, momentum=momentum, affine=False) for k in self.STREAMS})

    def forward(self, x, stream="query"):
        return self.stats[stream](x) * self.weight + self.bias


class SharedMLP(nn.Module):
    """Per-point affine + batch-norm + ReLU stack applied on the last axis."""

    def __init__(self, widths):
        super().__init__()
        self.layers = nn.ModuleList(nn.Linear(a, b, bias=False) for a, b in zip(widths[:-1], widths[1:]))
        self.norms = nn.ModuleList(StreamBatchNorm(b) for b in widths[1:])

    def forward(self, x, stream="query"):
        shape = x.shape[:-1]
        x = x.reshape(-1, x.shape[-1])
        for lin, bn in zip(self.layers, self.norms):
            x = torch.relu(bn(lin(x), stream))
        return x.reshape(*shape, -1)


class SetAbstraction(nn.Module):
    def __init__(self, npoint, radius, nsample, widths):
        super().__init__()
        self.npoint = npoint
        self.radius = radius
        self.nsample = nsample
        self.mlp = SharedMLP(widths)

    def forward(self, xyz, feats=None, npoint=None, stream="query"):
        npoint = min(npoint or self.npoint, xyz.shape[1])
        idx = farthest_point_sample(xyz, npoint)
        centers = gather(xyz, idx)
        nbr = ball_query(xyz, centers, self.radius, self.nsample)
        rel = (gather(xyz, nbr) - centers.unsqueeze(2)) / self.radius
        grouped = rel if feats is None else torch.cat([rel, gather(feats, nbr)], dim=-1)
        return centers, self.mlp(grouped, stream).max(dim=2).values, idx


@dataclass
class SeedFeatureSet:
    """Seeds of one or more scenes: features (..., M, d), positions (..., M, 3)."""
    features: torch.Tensor
    positions: torch.Tensor
    foreground_mask: torch.Tensor = None
    primitive_label: torch.Tensor = None

    def __post_init__(self):
        lead = self.positions.shape[:-1]
        if self.foreground_mask is None:
            self.foreground_mask = torch.zeros(lead, dtype=torch.bool)
        if self.primitive_label is None:
            self.primitive_label = torch.full(lead, -1, dtype=torch.long)


class Backbone(nn.Module):
    """1024 -> 512 -> 256 points; radii 0.2 m / 0.4 m; max-pooled groups.

    Grouped coordinates are taken relative to each center, so features are
    invariant to a global translation of the input.
    """

    def __init__(self, widths1=(64, 64, 128), widths2=(128, 128, 256), npoints=(512, 256),
                 radii=(0.2, 0.4), nsample=(32, 32)):
        super().__init__()
        self.sa1 = SetAbstraction(npoints[0], radii[0], nsample[0], (3,) + tuple(widths1))
        self.sa2 = SetAbstraction(npoints[1], radii[1], nsample[1], (3 + widths1[-1],) + tuple(widths2))
        self.out_dim = widths2[-1]

    def forward(self, xyz, npoints=None, stream="query"):
        n1, n2 = npoints or (self.sa1.npoint, self.sa2.npoint)
        xyz = canonical_order(xyz)
        c1, f1, _ = self.sa1(xyz, None, n1, stream)
        c2, f2, _ = self.sa2(c1, f1, n2, stream)
        return c2, f2


def encode_scene(points, backbone, n_seeds=None):
    """Seeds for a batch of scenes.

    Args:
        points: (N, 3) or (B, N, 3) array/tensor with N >= number of seeds
    Returns:
        SeedFeatureSet with features (B, M, d) and positions (B, M, 3)
    """
    xyz = torch.as_tensor(np.asarray(points) if not torch.is_tensor(points) else points, dtype=torch.float32)
    if xyz.dim() == 2:
        xyz = xyz.unsqueeze(0)
    M = n_seeds or backbone.sa2.npoint
    if xyz.shape[1] < M:
        raise ValueError(f"scene has {xyz.shape[1]} points but {M} seeds are required; resample upstream")
    pos, feats = backbone(xyz, (max(backbone.sa1.npoint, M) if xyz.shape[1] > M else M, M))
    return SeedFeatureSet(feats, pos)


def pool_instance(seed_features):
    """Instance feature = unweighted mean over the instance's seed features."""
    if seed_features.shape[-2] == 0:
        raise ValueError("empty instance")
    return seed_features.mean(dim=-2)


def encode_support(points, backbone, n_seeds=(64, 32)):
    """Instance feature(s) for cropped support point sets.

    Args:
        points: (S, 3) or (..., S, 3)
    Returns:
        (d,) or (..., d) tensor
    """
    xyz = torch.as_tensor(points, dtype=torch.float32)
    if xyz.shape[-2] == 0:
        raise ValueError("empty instance")
    lead = xyz.shape[:-2]
    flat = xyz.reshape(-1, xyz.shape[-2], 3)
    n1 = min(n_seeds[0], flat.shape[1])
    _, feats = backbone(flat, (n1, min(n_seeds[1], n1)), stream="support")
    return pool_instance(feats).reshape(*lead, -1)


def mark_foreground(positions, boxes):
    """foreground[i] = position i inside any (closed) box.

    Args:
        positions: (M, 3) array or tensor
        boxes: iterable of Box3D, or (K, 2, 3) array of [lo, hi]
    Returns:
        (M,) bool tensor
    """
    pos = torch.as_tensor(np.asarray(positions.detach() if torch.is_tensor(positions) else positions),
                          dtype=torch.float32)
    lohi = _as_lohi(boxes)
    if len(lohi) == 0:
        return torch.zeros(pos.shape[0], dtype=torch.bool)
    lohi = torch.as_tensor(lohi, dtype=torch.float32)
    inside = (pos[:, None] >= lohi[None, :, 0]) & (pos[:, None] <= lohi[None, :, 1])
    return inside.all(-1).any(-1)


def _as_lohi(boxes):
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 2, 3)
    return np.array([[b.lo, b.hi] for b in boxes], dtype=np.float32).reshape(-1, 2, 3)
