"""Semantic and primitive contrastive objectives.

Both are InfoNCE-style losses computed in a projected space that only exists
during training.  Functions are dtype-agnostic so they can be finite-difference
checked in float64.
"""

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)


class ProjectionHead(nn.Module):
    """affine -> ReLU -> affine, d -> d -> d/2."""

    def __init__(self, d=256, out=None):
        super().__init__()
        self.fc1 = nn.Linear(d, d)
        self.fc2 = nn.Linear(d, out or d // 2)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


def _maybe_normalize(x, normalize):
    return F.normalize(x, dim=-1) if normalize else x


@dataclass
class SemanticPrototypeGrid:
    P: torch.Tensor  # (B, N, D)

    @property
    def B(self):
        return self.P.shape[0]

    @property
    def N(self):
        return self.P.shape[1]


class InfeasibleBatch(ValueError):
    pass


def build_semantic_grid(support_feats, proj=None, normalize=True):
    """P_n^b = normalize(proj(mean_k f_{k,n}^b)).

    The K shots are averaged first and the mean is projected.

    Args:
        support_feats: (B, N, K, d) instance features
        proj: projection module or None for identity
    """
    B, N = support_feats.shape[:2]
    if B < 2:
        raise InfeasibleBatch("semantic contrast needs B >= 2")
    if N < 2:
        raise InfeasibleBatch("semantic contrast needs N >= 2")
    P = support_feats.mean(dim=2)
    if proj is not None:
        P = proj(P)
    return SemanticPrototypeGrid(_maybe_normalize(P, normalize))


def semantic_similarity_matrix(grid):
    """sim[b, n, m] for all (b, n, m), shape (B, N, N).

    n != m: mean over all tasks i of <P_n^b, P_m^i>.
    n == m: mean over tasks i != b of <P_n^b, P_n^i>.
    """
    P = grid.P
    B, N = P.shape[:2]
    dots = torch.einsum("bnd,imd->bnim", P, P)          # (B, N, B, N)
    cross = dots.mean(dim=2)                             # includes i == b
    diag_all = torch.diagonal(dots.sum(dim=2), dim1=1, dim2=2)          # (B, N) sum_i <P_n^b, P_n^i>
    self_term = (P * P).sum(-1)                          # <P_n^b, P_n^b>
    same = (diag_all - self_term) / (B - 1)
    eye = torch.eye(N, dtype=torch.bool, device=P.device)
    return torch.where(eye, torch.diag_embed(same), cross)


def semantic_similarity(grid, b, n, m):
    P = grid.P
    B = P.shape[0]
    if n != m:
        return sum((P[b, n] * P[i, m]).sum() for i in range(B)) / B
    return sum((P[b, n] * P[i, n]).sum() for i in range(B) if i != b) / (B - 1)


def semantic_loss(grid, tau=0.2):
    """-(1/BN) sum_{b,n} log softmax_m(sim(b,n,m)/tau)[n]."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    sim = semantic_similarity_matrix(grid) / tau
    logp = sim - torch.logsumexp(sim, dim=-1, keepdim=True)
    return -torch.diagonal(logp, dim1=1, dim2=2).mean()


@dataclass
class PrimitiveMeanSet:
    M: torch.Tensor          # (W', D) projected group means, carries gradient
    g_hat: torch.Tensor      # (W', D) projected detached prototypes
    nonempty_ids: list


def build_primitive_means(assignment, bank, proj=None, normalize=True):
    """Projected group means M_w and detached prototype views for non-empty w."""
    ids = assignment.nonempty_ids
    if not ids:
        empty = bank.new_zeros((0, bank.shape[1]))
        return PrimitiveMeanSet(empty, empty, [])
    M = torch.stack([assignment.means[w] for w in ids])
    g = bank.detach()[ids].to(M.dtype)
    if proj is not None:
        M, g = proj(M), proj(g)
    return PrimitiveMeanSet(_maybe_normalize(M, normalize), _maybe_normalize(g, normalize), list(ids))


def primitive_loss(mean_set, tau=0.2, denominator="feature"):
    """Prototype-level InfoNCE over the non-empty groups.

    With ``denominator="feature"`` the row for prototype w contrasts every
    group mean M_j against the fixed view of g_w; ``"proto"`` instead contrasts
    M_w against every prototype view.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    Wp = len(mean_set.nonempty_ids)
    if Wp < 2:
        log.debug("primitive contrast skipped: %d non-empty prototype(s)", Wp)
        return mean_set.M.sum() * 0.0
    g = mean_set.g_hat
    if denominator == "feature":
        logits = g @ mean_set.M.t() / tau          # [w, j] = <M_j, g_w>
    elif denominator == "proto":
        logits = mean_set.M @ g.t() / tau          # [w, j] = <M_w, g_j>
    else:
        raise ValueError(f"unknown denominator {denominator!r}")
    logp = logits - torch.logsumexp(logits, dim=1, keepdim=True)
    return -torch.diagonal(logp).mean()
