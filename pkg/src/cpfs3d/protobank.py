"""Geometric prototype memory bank and cross-attention refinement."""

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)


@dataclass
class AssignmentResult:
    """Nearest-prototype assignment of foreground seeds.

    labels: (n_seeds,) prototype index per seed, -1 for background
    groups: dict w -> (n_w, d) assigned feature rows (non-empty groups only)
    means: dict w -> (d,) mean of the group
    """
    labels: torch.Tensor
    groups: dict
    means: dict

    @property
    def nonempty_ids(self):
        return sorted(self.groups)


class GeometricPrototypeBank(nn.Module):
    """W unit-norm prototypes written only by momentum updates.

    The prototypes live in a buffer, so no optimizer ever sees them.
    """

    def __init__(self, W=128, d=256, gamma=0.999, renormalize=True, seed=0, init="gaussian"):
        super().__init__()
        if W < 1:
            raise ValueError("W must be >= 1")
        if not 0 <= gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        self.gamma = gamma
        self.renormalize = renormalize
        self.register_buffer("g", init_bank(seed, W, d, init))
        self.register_buffer("usage_count", torch.zeros(W, dtype=torch.long))

    @property
    def W(self):
        return self.g.shape[0]

    def assign(self, features, foreground=None):
        return assign(features, self.g, foreground)

    @torch.no_grad()
    def momentum_update(self, assignment):
        self.g.copy_(momentum_update(self.g, assignment, self.gamma, self.renormalize))
        for w, rows in assignment.groups.items():
            self.usage_count[w] += rows.shape[0]


def init_bank(seed, W, d, init="gaussian"):
    """Rows i.i.d. standard normal, then L2-normalized.

    ``init="abs_gaussian"`` folds every entry to its absolute value, which
    places the rows in the non-negative orthant occupied by rectified seed
    features; with signed rows most prototypes are never the argmax.
    """
    if init not in ("gaussian", "abs_gaussian"):
        raise ValueError(f"unknown bank init {init!r}")
    gen = torch.Generator().manual_seed(int(seed))
    g = torch.randn(W, d, generator=gen, dtype=torch.float32)
    if init == "abs_gaussian":
        g = g.abs()
    return F.normalize(g, dim=1)


def assign(features, bank, foreground=None):
    """Label each foreground row with argmax_w cos(f_i, g_w).

    Ties resolve to the lowest w.  A zero-norm feature has cosine 0 against
    every prototype and therefore lands on w=0.

    Args:
        features: (n, d); gradients are kept so group means can feed a loss
        bank: (W, d)
        foreground: optional (n,) bool mask; default all rows
    """
    n = features.shape[0]
    if foreground is None:
        foreground = torch.ones(n, dtype=torch.bool)
    labels = torch.full((n,), -1, dtype=torch.long)
    fg = foreground.nonzero().flatten()
    groups, means = {}, {}
    if len(fg) == 0:
        return AssignmentResult(labels, groups, means)
    f = features[fg]
    with torch.no_grad():
        norms = f.norm(dim=1)
        if (norms == 0).any():
            log.warning("%d zero-norm seed feature(s) assigned to prototype 0", int((norms == 0).sum()))
        cos = (f / norms.clamp_min(1e-30)[:, None]) @ F.normalize(bank, dim=1).t()
        cos[norms == 0] = 0.0
        lab = cos.argmax(dim=1)
    labels[fg] = lab
    for w in torch.unique(lab).tolist():
        rows = f[lab == w]
        groups[w] = rows
        means[w] = rows.mean(dim=0)
    return AssignmentResult(labels, groups, means)


def momentum_update(bank, assignment, gamma, renormalize=False):
    """g_w <- gamma * g_w + (1 - gamma) * f_w for every non-empty group."""
    out = bank.detach().clone()
    for w, mean in assignment.means.items():
        out[w] = gamma * out[w] + (1 - gamma) * mean.detach().to(out.dtype)
        if renormalize:
            out[w] = out[w] / out[w].norm().clamp_min(1e-12)
    return out


class CrossAttention(nn.Module):
    """Single-head scaled dot-product attention with a residual connection.

    out = x + softmax((x Wq)(c Wk)^T / sqrt(d)) (c Wv)
    """

    def __init__(self, d):
        super().__init__()
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.scale = 1.0 / math.sqrt(d)

    def weights(self, x, context):
        return torch.softmax(self.q(x) @ self.k(context).transpose(-1, -2) * self.scale, dim=-1)

    def forward(self, x, context):
        return x + self.weights(x, context) @ self.v(context)


def refine_seeds(seeds, bank, attn):
    """Residual cross-attention of seed features against the (detached) bank."""
    from .backbone import SeedFeatureSet
    g = bank.g if isinstance(bank, GeometricPrototypeBank) else bank
    feats = attn(seeds.features, g.detach())
    return SeedFeatureSet(feats, seeds.positions, seeds.foreground_mask, seeds.primitive_label)
