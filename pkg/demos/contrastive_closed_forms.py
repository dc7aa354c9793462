"""Evaluate both contrastive losses on inputs with known answers.

    python3 demos/contrastive_closed_forms.py

Identical prototypes give ln N (semantic) and ln W' (primitive); an
orthonormal 2x2 layout at temperature 0.2 gives ln(1 + e^-5).
"""

import math

import torch
import torch.nn.functional as F

from cpfs3d.contrast import PrimitiveMeanSet, SemanticPrototypeGrid, primitive_loss, semantic_loss


def main():
    torch.manual_seed(0)
    u = F.normalize(torch.randn(16, dtype=torch.float64), dim=0)
    for N in (2, 4, 8):
        loss = semantic_loss(SemanticPrototypeGrid(u.expand(3, N, 16).clone()), 0.2)
        print(f"semantic, N={N}: {float(loss):.9f}  ln N = {math.log(N):.9f}")
    for W in (2, 16, 128):
        M = u.expand(W, 16).clone()
        g = F.normalize(torch.randn(W, 16, dtype=torch.float64), dim=-1)
        loss = primitive_loss(PrimitiveMeanSet(M, g, list(range(W))), 0.2)
        print(f"primitive, W'={W}: {float(loss):.9f}  ln W' = {math.log(W):.9f}")
    eye = torch.eye(2, dtype=torch.float64)
    scl = semantic_loss(SemanticPrototypeGrid(torch.stack([eye, eye])), 0.2)
    pcl = primitive_loss(PrimitiveMeanSet(eye, eye, [0, 1]), 0.2)
    print(f"orthonormal: semantic {float(scl):.7f}, primitive {float(pcl):.7f}, "
          f"ln(1+e^-5) = {math.log1p(math.exp(-5)):.7f}")


if __name__ == "__main__":
    main()
